#include "orthoplane/triplane.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "orthoplane/binary_io.hpp"
#include "orthoplane/ops.hpp"

namespace orthoplane {

const char* plane_name(PlaneId id) {
  switch (id) {
    case PlaneId::xy:
      return "xy";
    case PlaneId::xz:
      return "xz";
    case PlaneId::yz:
      return "yz";
  }
  return "?";
}

std::array<int, 2> plane_axes(PlaneId id) {
  switch (id) {
    case PlaneId::xy:
      return {0, 1};
    case PlaneId::xz:
      return {0, 2};
    case PlaneId::yz:
      return {1, 2};
  }
  return {0, 0};
}

namespace {

Real to_texel(Real c, std::size_t resolution, bool* clamped) {
  if (c < -1.0 || c > 1.0) {
    *clamped = true;
    c = std::clamp(c, -1.0, 1.0);
  }
  return (c + 1.0) * 0.5 * static_cast<Real>(resolution - 1);
}

// Lower corner and fraction for bilinear lookup along one axis.
inline void cell(Real coord, std::size_t resolution, std::size_t* i0, Real* frac) {
  if (resolution == 1) {
    *i0 = 0;
    *frac = 0.0;
    return;
  }
  const auto fl = static_cast<std::size_t>(std::floor(coord));
  *i0 = std::min(fl, resolution - 2);
  *frac = coord - static_cast<Real>(*i0);
}

}  // namespace

std::array<PlaneCoord, 3> project_point(const Vec3& p, std::size_t resolution,
                                        ClampCounter* counter) {
  if (resolution == 0) throw std::invalid_argument("project_point: zero resolution");
  std::array<Real, 3> texel{};
  for (int a = 0; a < 3; ++a) {
    bool clamped = false;
    texel[a] = to_texel(p[a], resolution, &clamped);
    if (clamped && counter) ++counter->clamped;
  }
  std::array<PlaneCoord, 3> out{};
  for (auto id : kPlanes) {
    const auto axes = plane_axes(id);
    out[static_cast<int>(id)] = {id, texel[axes[0]], texel[axes[1]]};
  }
  return out;
}

Real texel_to_world(Real coord, std::size_t resolution) {
  if (resolution == 1) return 0.0;
  return coord / static_cast<Real>(resolution - 1) * 2.0 - 1.0;
}

Triplane::Triplane(std::size_t resolution, std::size_t channels)
    : Triplane(Tensor::zeros({3, resolution, resolution, channels})) {}

Triplane::Triplane(Tensor planes) : planes_(std::move(planes)) {
  const auto& s = planes_.shape();
  if (s.size() != 4 || s[0] != 3 || s[1] != s[2]) {
    throw std::invalid_argument("triplane: expected shape [3, D, D, C], got " + shape_str(s));
  }
  resolution_ = s[1];
  channels_ = s[3];
}

Tensor Triplane::rows() const {
  return ops::reshape(planes_, {3 * resolution_ * resolution_, channels_});
}

Triplane Triplane::from_rows(const Tensor& rows, std::size_t resolution) {
  const std::size_t channels = rows.size() / (3 * resolution * resolution);
  return Triplane(ops::reshape(rows, {3, resolution, resolution, channels}));
}

std::vector<Real> Triplane::plane(PlaneId id) const {
  const std::size_t n = resolution_ * resolution_ * channels_;
  auto begin = planes_.data().begin() + static_cast<std::ptrdiff_t>(static_cast<int>(id) * n);
  return {begin, begin + static_cast<std::ptrdiff_t>(n)};
}

bool Triplane::finite() const {
  return std::all_of(planes_.data().begin(), planes_.data().end(),
                     [](Real v) { return std::isfinite(v); });
}

Tensor sample_triplane(const Triplane& tri, const Tensor& points, ClampCounter* counter) {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw std::invalid_argument("sample_triplane: points must be [N x 3], got " +
                                shape_str(points.shape()));
  }
  const std::size_t n = points.dim(0);
  const std::size_t res = tri.resolution();
  const std::size_t ch = tri.channels();
  const std::size_t width = 3 * ch;
  const std::size_t plane_stride = res * res * ch;
  const Real* pts = points.data().data();
  const Real* planes = tri.tensor().data().data();

  std::vector<Real> out(n * width);
  std::size_t clamped_total = 0;
#pragma omp parallel for schedule(static) reduction(+ : clamped_total)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
    std::array<Real, 3> texel{};
    for (int a = 0; a < 3; ++a) {
      bool clamped = false;
      texel[a] = to_texel(pts[i * 3 + a], res, &clamped);
      clamped_total += clamped ? 1 : 0;
    }
    for (int p = 0; p < 3; ++p) {
      const auto axes = plane_axes(static_cast<PlaneId>(p));
      std::size_t u0, v0;
      Real fu, fv;
      cell(texel[axes[0]], res, &u0, &fu);
      cell(texel[axes[1]], res, &v0, &fv);
      const std::size_t u1 = std::min(u0 + 1, res - 1), v1 = std::min(v0 + 1, res - 1);
      const Real* base = planes + p * plane_stride;
      const Real* p00 = base + (v0 * res + u0) * ch;
      const Real* p10 = base + (v0 * res + u1) * ch;
      const Real* p01 = base + (v1 * res + u0) * ch;
      const Real* p11 = base + (v1 * res + u1) * ch;
      const Real w00 = (1 - fu) * (1 - fv), w10 = fu * (1 - fv), w01 = (1 - fu) * fv,
                 w11 = fu * fv;
      Real* dst = out.data() + i * width + p * ch;
      for (std::size_t c = 0; c < ch; ++c) {
        dst[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
      }
    }
  }
  if (counter) counter->clamped += clamped_total;

  auto iplanes = tri.tensor().impl();
  auto ipoints = points.impl();
  return make_result(
      "sample_triplane", {n, width}, std::move(out), {tri.tensor(), points},
      [iplanes, ipoints, n, res, ch, width, plane_stride](const TensorImpl& o) {
        Real* gplanes = iplanes->requires_grad ? iplanes->grad_buffer().data() : nullptr;
        Real* gpoints = ipoints->requires_grad ? ipoints->grad_buffer().data() : nullptr;
        const Real* pts = ipoints->data.data();
        const Real* planes = iplanes->data.data();
        const Real half_span = 0.5 * static_cast<Real>(res - 1);
        for (std::size_t i = 0; i < n; ++i) {
          std::array<Real, 3> texel{};
          std::array<bool, 3> clamped{};
          for (int a = 0; a < 3; ++a) {
            bool c = false;
            texel[a] = to_texel(pts[i * 3 + a], res, &c);
            clamped[a] = c;
          }
          for (int p = 0; p < 3; ++p) {
            const auto axes = plane_axes(static_cast<PlaneId>(p));
            std::size_t u0, v0;
            Real fu, fv;
            cell(texel[axes[0]], res, &u0, &fu);
            cell(texel[axes[1]], res, &v0, &fv);
            const std::size_t u1 = std::min(u0 + 1, res - 1), v1 = std::min(v0 + 1, res - 1);
            const std::size_t o00 = p * plane_stride + (v0 * res + u0) * ch;
            const std::size_t o10 = p * plane_stride + (v0 * res + u1) * ch;
            const std::size_t o01 = p * plane_stride + (v1 * res + u0) * ch;
            const std::size_t o11 = p * plane_stride + (v1 * res + u1) * ch;
            const Real* g = o.grad.data() + i * width + p * ch;
            if (gplanes) {
              const Real w00 = (1 - fu) * (1 - fv), w10 = fu * (1 - fv), w01 = (1 - fu) * fv,
                         w11 = fu * fv;
              for (std::size_t c = 0; c < ch; ++c) {
                gplanes[o00 + c] += w00 * g[c];
                gplanes[o10 + c] += w10 * g[c];
                gplanes[o01 + c] += w01 * g[c];
                gplanes[o11 + c] += w11 * g[c];
              }
            }
            if (gpoints && res > 1) {
              Real du = 0, dv = 0;
              for (std::size_t c = 0; c < ch; ++c) {
                const Real a00 = planes[o00 + c], a10 = planes[o10 + c], a01 = planes[o01 + c],
                           a11 = planes[o11 + c];
                du += g[c] * ((1 - fv) * (a10 - a00) + fv * (a11 - a01));
                dv += g[c] * ((1 - fu) * (a01 - a00) + fu * (a11 - a10));
              }
              if (!clamped[axes[0]]) gpoints[i * 3 + axes[0]] += du * half_span;
              if (!clamped[axes[1]]) gpoints[i * 3 + axes[1]] += dv * half_span;
            }
          }
        }
      });
}

Tensor sample_triplane(const Triplane& tri, const Vec3& p, ClampCounter* counter) {
  auto feat = sample_triplane(tri, Tensor::from({1, 3}, {p.x(), p.y(), p.z()}), counter);
  return ops::reshape(feat, {3 * tri.channels()});
}

std::vector<Real> plane_marginal(const std::vector<Real>& plane, std::size_t resolution,
                                 std::size_t channels, MarginalAxis axis, Reducer reducer) {
  if (plane.size() != resolution * resolution * channels) {
    throw std::invalid_argument("plane_marginal: plane size does not match D x D x C");
  }
  std::vector<Real> profile(resolution * channels);
  for (std::size_t keep = 0; keep < resolution; ++keep) {
    for (std::size_t c = 0; c < channels; ++c) {
      Real acc = reducer == Reducer::max ? -INFINITY : 0.0;
      for (std::size_t r = 0; r < resolution; ++r) {
        // Reducing along u keeps v (the row index) and vice versa.
        const std::size_t u = axis == MarginalAxis::u ? r : keep;
        const std::size_t v = axis == MarginalAxis::u ? keep : r;
        const Real x = plane[(v * resolution + u) * channels + c];
        acc = reducer == Reducer::max ? std::max(acc, x) : acc + x;
      }
      if (reducer == Reducer::mean) acc /= static_cast<Real>(resolution);
      profile[keep * channels + c] = acc;
    }
  }
  return profile;
}

void write_triplane(std::ostream& out, const Triplane& tri) {
  binary::write_tag(out, "TRPL");
  binary::write_u16(out, kTriplaneFormatVersion);
  binary::write_u32(out, static_cast<std::uint32_t>(tri.resolution()));
  binary::write_u32(out, static_cast<std::uint32_t>(tri.channels()));
  binary::write_f32s(out, tri.tensor().data());
}

Triplane read_triplane(std::istream& in) {
  binary::expect_tag(in, "TRPL", "triplane magic");
  const auto version = binary::read_u16(in, "triplane version");
  if (version != kTriplaneFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported triplane version " +
                             std::to_string(version));
  }
  const auto res = binary::read_u32(in, "triplane resolution D");
  const auto ch = binary::read_u32(in, "triplane channels C");
  if (res == 0 || ch == 0 || res > 4096 || ch > 4096) {
    throw std::runtime_error("checkpoint: implausible triplane resolution D/channels C");
  }
  auto values = binary::read_f32s(in, 3ull * res * res * ch, "triplane values");
  return Triplane(Tensor::from({3, res, res, ch}, std::move(values)));
}

void round_to_float32(Tensor& t) {
  for (auto& v : t.mutable_data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace orthoplane
