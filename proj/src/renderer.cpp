#include "orthoplane/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "orthoplane/binary_io.hpp"
#include "orthoplane/ops.hpp"

namespace orthoplane {

void Camera::validate() const {
  const Eigen::Matrix3d gram = orientation.transpose() * orientation;
  if ((gram - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9) {
    throw std::invalid_argument("camera: orientation is not orthonormal");
  }
  if (!(fov > 0.0 && fov < std::numbers::pi)) {
    throw std::invalid_argument("camera: field of view must lie in (0, pi)");
  }
  if (height == 0 || width == 0) throw std::invalid_argument("camera: empty image size");
  if (!(near >= 0.0 && near < far)) throw std::invalid_argument("camera: need 0 <= near < far");
}

void cube_bounds(Real distance, Real* near, Real* far) {
  const Real half_diagonal = std::sqrt(3.0);
  *near = std::max(0.1, distance - half_diagonal);
  *far = distance + half_diagonal;
}

Camera look_at(const Vec3& position, const Vec3& target, Real fov, std::size_t height,
               std::size_t width) {
  const Vec3 offset = target - position;
  if (offset.norm() < 1e-12) throw std::invalid_argument("look_at: camera sits on its target");
  const Vec3 forward = offset.normalized();
  const Vec3 side = forward.cross(Vec3::UnitZ());
  if (side.norm() < 1e-9) {
    throw std::invalid_argument("look_at: viewing direction parallel to the up axis");
  }
  const Vec3 right = side.normalized();
  const Vec3 up = right.cross(forward);
  Camera cam;
  cam.position = position;
  cam.orientation.col(0) = right;
  cam.orientation.col(1) = up;
  cam.orientation.col(2) = forward;
  cam.fov = fov;
  cam.height = height;
  cam.width = width;
  cube_bounds(position.norm(), &cam.near, &cam.far);
  cam.validate();
  return cam;
}

std::vector<Ray> generate_rays(const Camera& cam) {
  cam.validate();
  const Real tan_half = std::tan(cam.fov / 2.0);
  const Real aspect = static_cast<Real>(cam.width) / static_cast<Real>(cam.height);
  std::vector<Ray> rays;
  rays.reserve(cam.height * cam.width);
  for (std::size_t i = 0; i < cam.height; ++i) {
    const Real y = (1.0 - 2.0 * (static_cast<Real>(i) + 0.5) / static_cast<Real>(cam.height)) *
                   tan_half;
    for (std::size_t j = 0; j < cam.width; ++j) {
      const Real x = (2.0 * (static_cast<Real>(j) + 0.5) / static_cast<Real>(cam.width) - 1.0) *
                     tan_half * aspect;
      const Vec3 d = (cam.forward() + x * cam.right() + y * cam.up()).normalized();
      rays.push_back({cam.position, d, cam.near, cam.far});
    }
  }
  return rays;
}

std::vector<Real> sample_points(const Ray& ray, std::size_t n, bool stratified, Rng* rng) {
  if (n == 0) throw std::invalid_argument("sample_points: need at least one sample");
  if (stratified && rng == nullptr) {
    throw std::invalid_argument("sample_points: stratified sampling needs a generator");
  }
  const Real bin = (ray.far - ray.near) / static_cast<Real>(n);
  std::vector<Real> ts(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Real offset = stratified ? rng->uniform() : 0.5;
    ts[i] = ray.near + (static_cast<Real>(i) + offset) * bin;
  }
  return ts;
}

Tensor PositionEncoding::operator()(const Tensor& points) const {
  const std::size_t n = points.dim(0);
  const std::size_t w = width();
  std::vector<Real> out(n * w);
  const Real* p = points.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    Real* dst = out.data() + i * w;
    for (int a = 0; a < 3; ++a) dst[a] = p[i * 3 + a];
    for (std::size_t f = 0; f < frequencies; ++f) {
      const Real scale = std::ldexp(std::numbers::pi, static_cast<int>(f));
      for (int a = 0; a < 3; ++a) {
        dst[3 + f * 6 + a] = std::sin(scale * p[i * 3 + a]);
        dst[3 + f * 6 + 3 + a] = std::cos(scale * p[i * 3 + a]);
      }
    }
  }
  return Tensor::from({n, w}, std::move(out));
}

namespace {

std::vector<nn::Linear> make_mlp(std::size_t in, std::size_t hidden, std::size_t depth,
                                 std::size_t out, Rng& rng) {
  std::vector<nn::Linear> layers;
  std::size_t width = in;
  for (std::size_t d = 0; d < depth; ++d) {
    layers.push_back(nn::Linear::init(width, hidden, rng, std::sqrt(2.0)));
    width = hidden;
  }
  layers.push_back(nn::Linear::init(width, out, rng));
  return layers;
}

Tensor run_mlp(const std::vector<nn::Linear>& layers, Tensor h) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i](h);
    if (i + 1 < layers.size()) h = ops::relu(h);
  }
  return h;
}

}  // namespace

FieldHeads FieldHeads::init(std::size_t channels, std::size_t hidden, std::size_t depth,
                            std::size_t frequencies, Rng& rng, Real density_bias) {
  if (depth == 0 || hidden == 0) throw std::invalid_argument("field heads: empty hidden layers");
  FieldHeads heads;
  heads.encoding.frequencies = frequencies;
  const std::size_t in = heads.encoding.width() + 3 * channels;
  heads.density = make_mlp(in, hidden, depth, 1, rng);
  heads.color = make_mlp(in, hidden, depth, 3, rng);
  heads.density.back().bias.mutable_data()[0] = density_bias;
  return heads;
}

std::size_t FieldHeads::input_width() const { return density.front().weight.dim(0); }

std::vector<Tensor> FieldHeads::parameters() const {
  std::vector<Tensor> out;
  for (const auto& l : density) nn::append(out, l.parameters());
  for (const auto& l : color) nn::append(out, l.parameters());
  return out;
}

FieldSamples field_eval(const Triplane& tri, const FieldHeads& heads, const Tensor& points,
                        ClampCounter* counter) {
  if (heads.input_width() != heads.encoding.width() + 3 * tri.channels()) {
    throw std::invalid_argument("field_eval: heads expect " + std::to_string(heads.input_width()) +
                                " inputs but triplane has " + std::to_string(tri.channels()) +
                                " channels");
  }
  const std::size_t n = points.dim(0);
  auto input = ops::concat({heads.encoding(points), sample_triplane(tri, points, counter)}, 1);
  auto sigma = ops::reshape(ops::softplus(run_mlp(heads.density, input)), {n});
  auto color = ops::sigmoid(run_mlp(heads.color, input));
  return {sigma, color};
}

namespace {

void check_ascending(const Real* ts, std::size_t n, Real far) {
  for (std::size_t j = 0; j < n; ++j) {
    if ((j + 1 < n && !(ts[j + 1] > ts[j])) || !(ts[j] <= far)) {
      throw std::invalid_argument("integrate_ray: sample depths must ascend and stay below far");
    }
  }
}

inline Real delta(const Real* ts, std::size_t j, std::size_t n, Real far) {
  return j + 1 < n ? ts[j + 1] - ts[j] : far - ts[j];
}

// out: r, g, b, mask, depth.
void composite(const Real* sigma, const Real* color, const Real* ts, std::size_t n, Real far,
               Real* out) {
  Real transmittance = 1.0;
  std::fill(out, out + 5, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const Real x = sigma[j] * delta(ts, j, n, far);
    const Real w = -transmittance * std::expm1(-x);
    for (int c = 0; c < 3; ++c) out[c] += w * color[j * 3 + c];
    out[4] += w * ts[j];
    transmittance *= std::exp(-x);
  }
  // The weights telescope to 1 - T_final, which keeps the mask inside [0, 1].
  out[3] = 1.0 - transmittance;
  out[4] += transmittance * far;
}

}  // namespace

RayIntegral integrate_ray(const std::vector<Real>& sigmas, const std::vector<Vec3>& colors,
                          const std::vector<Real>& ts, Real far) {
  const std::size_t n = ts.size();
  if (sigmas.size() != n || colors.size() != n) {
    throw std::invalid_argument("integrate_ray: sigma, color and depth counts differ");
  }
  check_ascending(ts.data(), n, far);
  std::vector<Real> flat(n * 3);
  for (std::size_t j = 0; j < n; ++j)
    for (int c = 0; c < 3; ++c) flat[j * 3 + c] = colors[j][c];
  Real out[5];
  composite(sigmas.data(), flat.data(), ts.data(), n, far, out);
  return {Vec3(out[0], out[1], out[2]), out[3], out[4]};
}

Tensor integrate_rays(const Tensor& sigma, const Tensor& color, const std::vector<Real>& ts,
                      const std::vector<Real>& far) {
  if (sigma.rank() != 2 || color.rank() != 3 || color.dim(0) != sigma.dim(0) ||
      color.dim(1) != sigma.dim(1) || color.dim(2) != 3) {
    throw std::invalid_argument("integrate_rays: shape mismatch " + shape_str(sigma.shape()) +
                                " vs " + shape_str(color.shape()));
  }
  const std::size_t rays = sigma.dim(0), n = sigma.dim(1);
  if (ts.size() != rays * n || far.size() != rays) {
    throw std::invalid_argument("integrate_rays: depth arrays do not match the ray batch");
  }
  for (std::size_t r = 0; r < rays; ++r) check_ascending(ts.data() + r * n, n, far[r]);

  std::vector<Real> out(rays * 5);
  const Real* s = sigma.data().data();
  const Real* c = color.data().data();
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < static_cast<std::int64_t>(rays); ++r) {
    composite(s + r * n, c + r * n * 3, ts.data() + r * n, n, far[r], out.data() + r * 5);
  }

  auto isigma = sigma.impl();
  auto icolor = color.impl();
  return make_result(
      "integrate_rays", {rays, 5}, std::move(out), {sigma, color},
      [isigma, icolor, ts, far, rays, n](const TensorImpl& o) {
        Real* gs = isigma->requires_grad ? isigma->grad_buffer().data() : nullptr;
        Real* gc = icolor->requires_grad ? icolor->grad_buffer().data() : nullptr;
#pragma omp parallel for schedule(static)
        for (std::int64_t r = 0; r < static_cast<std::int64_t>(rays); ++r) {
          const Real* s = isigma->data.data() + r * n;
          const Real* c = icolor->data.data() + r * n * 3;
          const Real* t = ts.data() + r * n;
          const Real* g = o.grad.data() + r * 5;
          const Real f = far[r];
          // Forward quantities: T_{j+1} and w_j.
          std::vector<Real> next_t(n), w(n), gw(n);
          Real transmittance = 1.0;
          for (std::size_t j = 0; j < n; ++j) {
            const Real x = s[j] * delta(t, j, n, f);
            w[j] = -transmittance * std::expm1(-x);
            transmittance *= std::exp(-x);
            next_t[j] = transmittance;
            gw[j] = g[0] * c[j * 3] + g[1] * c[j * 3 + 1] + g[2] * c[j * 3 + 2] + g[3] +
                    g[4] * (t[j] - f);
            if (gc) {
              for (int k = 0; k < 3; ++k) gc[(r * n + j) * 3 + k] += g[k] * w[j];
            }
          }
          if (!gs) continue;
          Real suffix = 0.0;
          for (std::size_t jj = n; jj-- > 0;) {
            const Real dx = gw[jj] * next_t[jj] - suffix;
            gs[r * n + jj] += dx * delta(t, jj, n, f);
            suffix += gw[jj] * w[jj];
          }
        }
      });
}

Tensor render_rays(const Triplane& tri, const FieldHeads& heads, const std::vector<Ray>& rays,
                   const RenderSettings& settings, Rng* rng, ClampCounter* counter) {
  const std::size_t r = rays.size(), n = settings.samples;
  if (r == 0) throw std::invalid_argument("render_rays: empty ray batch");
  std::vector<Real> ts, far, pts;
  ts.reserve(r * n);
  far.reserve(r);
  pts.reserve(r * n * 3);
  for (const auto& ray : rays) {
    auto t = sample_points(ray, n, settings.stratified, rng);
    for (Real tj : t) {
      const Vec3 p = ray.origin + tj * ray.direction;
      pts.insert(pts.end(), {p.x(), p.y(), p.z()});
    }
    ts.insert(ts.end(), t.begin(), t.end());
    far.push_back(ray.far);
  }
  auto field = field_eval(tri, heads, Tensor::from({r * n, 3}, std::move(pts)), counter);
  return integrate_rays(ops::reshape(field.sigma, {r, n}), ops::reshape(field.color, {r, n, 3}),
                        ts, far);
}

RenderOutput RenderOutput::blank(std::size_t height, std::size_t width) {
  RenderOutput out;
  out.height = height;
  out.width = width;
  out.image.assign(height * width * 3, 0.0);
  out.mask.assign(height * width, 0.0);
  out.depth.assign(height * width, 0.0);
  return out;
}

void RenderOutput::set_pixel(std::size_t index, const Vec3& rgb, Real mask_value,
                             Real depth_value) {
  for (int c = 0; c < 3; ++c) image[index * 3 + c] = rgb[c];
  mask[index] = mask_value;
  depth[index] = depth_value;
}

RenderOutput render_view(const Triplane& tri, const FieldHeads& heads, const Camera& cam,
                         const RenderSettings& settings, Rng* rng) {
  NoGradGuard no_grad;
  const auto rays = generate_rays(cam);
  auto out = RenderOutput::blank(cam.height, cam.width);
  constexpr std::size_t kChunk = 2048;
  for (std::size_t start = 0; start < rays.size(); start += kChunk) {
    const std::size_t end = std::min(rays.size(), start + kChunk);
    std::vector<Ray> chunk(rays.begin() + static_cast<std::ptrdiff_t>(start),
                           rays.begin() + static_cast<std::ptrdiff_t>(end));
    auto px = render_rays(tri, heads, chunk, settings, rng);
    const Real* v = px.data().data();
    for (std::size_t i = start; i < end; ++i) {
      const Real* row = v + (i - start) * 5;
      out.set_pixel(i, Vec3(row[0], row[1], row[2]), row[3], row[4]);
    }
  }
  return out;
}

namespace {

void write_mlp(std::ostream& out, const std::vector<nn::Linear>& layers) {
  binary::write_u32(out, static_cast<std::uint32_t>(layers.size()));
  for (const auto& l : layers) {
    binary::write_u32(out, static_cast<std::uint32_t>(l.weight.dim(0)));
    binary::write_u32(out, static_cast<std::uint32_t>(l.weight.dim(1)));
    binary::write_f32s(out, l.weight.data());
    binary::write_f32s(out, l.bias.data());
  }
}

std::vector<nn::Linear> read_mlp(std::istream& in, const char* head) {
  const std::string prefix = std::string("heads ") + head;
  const auto count = binary::read_u32(in, (prefix + " layer count").c_str());
  if (count == 0 || count > 64) {
    throw std::runtime_error("checkpoint: implausible " + prefix + " layer count");
  }
  std::vector<nn::Linear> layers;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rows = binary::read_u32(in, (prefix + " layer input width").c_str());
    const auto cols = binary::read_u32(in, (prefix + " layer output width").c_str());
    if (rows == 0 || cols == 0 || rows > 65536 || cols > 65536) {
      throw std::runtime_error("checkpoint: implausible " + prefix + " layer dims");
    }
    if (!layers.empty() && layers.back().weight.dim(1) != rows) {
      throw std::runtime_error("checkpoint: " + prefix + " layer dims do not chain");
    }
    auto w = binary::read_f32s(in, std::size_t{rows} * cols, (prefix + " weights").c_str());
    auto b = binary::read_f32s(in, cols, (prefix + " bias").c_str());
    layers.push_back({Tensor::from({rows, cols}, std::move(w), true),
                      Tensor::from({cols}, std::move(b), true)});
  }
  return layers;
}

}  // namespace

void write_heads(std::ostream& out, const FieldHeads& heads) {
  binary::write_tag(out, "HEAD");
  binary::write_u16(out, kHeadsFormatVersion);
  binary::write_u32(out, static_cast<std::uint32_t>(heads.encoding.frequencies));
  write_mlp(out, heads.density);
  write_mlp(out, heads.color);
}

FieldHeads read_heads(std::istream& in) {
  binary::expect_tag(in, "HEAD", "heads magic");
  const auto version = binary::read_u16(in, "heads version");
  if (version != kHeadsFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported heads version " + std::to_string(version));
  }
  FieldHeads heads;
  heads.encoding.frequencies = binary::read_u32(in, "heads encoding frequencies");
  if (heads.encoding.frequencies > 16) {
    throw std::runtime_error("checkpoint: implausible heads encoding frequencies");
  }
  heads.density = read_mlp(in, "density");
  heads.color = read_mlp(in, "color");
  if (heads.density.back().weight.dim(1) != 1 || heads.color.back().weight.dim(1) != 3 ||
      heads.density.front().weight.dim(0) != heads.color.front().weight.dim(0)) {
    throw std::runtime_error("checkpoint: heads output widths must be 1 (density) and 3 (color)");
  }
  return heads;
}

}  // namespace orthoplane
