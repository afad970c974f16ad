#include "orthoplane/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "orthoplane/attention.hpp"

namespace orthoplane {

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "vacuum") return SceneKind::vacuum;
  if (name == "sphere") return SceneKind::sphere;
  if (name == "cube") return SceneKind::cube;
  if (name == "two_blob") return SceneKind::two_blob;
  throw std::invalid_argument("unknown scene kind '" + name +
                              "' (expected vacuum, sphere, cube or two_blob)");
}

const char* scene_kind_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::vacuum:
      return "vacuum";
    case SceneKind::sphere:
      return "sphere";
    case SceneKind::cube:
      return "cube";
    case SceneKind::two_blob:
      return "two_blob";
  }
  return "?";
}

Vec3 cube_face_color(int face) {
  static const std::array<Vec3, 6> kColors = {
      Vec3(1, 0, 0), Vec3(0, 1, 1),  // +x, -x
      Vec3(0, 1, 0), Vec3(1, 0, 1),  // +y, -y
      Vec3(0, 0, 1), Vec3(1, 1, 0),  // +z, -z
  };
  return kColors.at(static_cast<std::size_t>(face));
}

AnalyticScene::AnalyticScene(SceneKind kind, SceneParams params, std::array<Vec3, 2> blob_centers,
                             std::array<Vec3, 2> blob_colors)
    : kind_(kind), params_(params), centers_(blob_centers), blob_colors_(blob_colors) {}

Real AnalyticScene::density(const Vec3& p) const {
  switch (kind_) {
    case SceneKind::vacuum:
      return 0.0;
    case SceneKind::sphere:
      return p.norm() <= params_.radius ? params_.density : 0.0;
    case SceneKind::cube: {
      const Real inset = params_.half_extent - p.cwiseAbs().maxCoeff();
      if (params_.edge_width <= 0.0) return inset >= 0.0 ? params_.density : 0.0;
      return params_.density * std::clamp(inset / params_.edge_width + 0.5, 0.0, 1.0);
    }
    case SceneKind::two_blob: {
      const Real s2 = 2.0 * params_.blob_width * params_.blob_width;
      Real total = 0.0;
      for (const auto& c : centers_) total += params_.density * std::exp(-(p - c).squaredNorm() / s2);
      return total;
    }
  }
  return 0.0;
}

Vec3 AnalyticScene::color(const Vec3& p) const {
  switch (kind_) {
    case SceneKind::vacuum:
      return Vec3::Zero();
    case SceneKind::sphere:
      return params_.sphere_color;
    case SceneKind::cube: {
      int axis = 0;
      p.cwiseAbs().maxCoeff(&axis);
      return cube_face_color(2 * axis + (p[axis] < 0.0 ? 1 : 0));
    }
    case SceneKind::two_blob: {
      const Real s2 = 2.0 * params_.blob_width * params_.blob_width;
      const Real a = std::exp(-(p - centers_[0]).squaredNorm() / s2);
      const Real b = std::exp(-(p - centers_[1]).squaredNorm() / s2);
      if (a + b <= 0.0) return 0.5 * (blob_colors_[0] + blob_colors_[1]);
      return (a * blob_colors_[0] + b * blob_colors_[1]) / (a + b);
    }
  }
  return Vec3::Zero();
}

AnalyticScene make_scene(SceneKind kind, const SceneParams& params, std::uint64_t seed) {
  if (!(params.radius > 0.0 && params.radius < 1.0)) {
    throw std::invalid_argument("make_scene: radius must lie in (0, 1)");
  }
  if (!(params.half_extent > 0.0 && params.half_extent < 1.0)) {
    throw std::invalid_argument("make_scene: half_extent must lie in (0, 1)");
  }
  if (!(params.density > 0.0)) throw std::invalid_argument("make_scene: density must be positive");
  if (!(params.blob_width > 0.0) || params.edge_width < 0.0) {
    throw std::invalid_argument("make_scene: blob_width must be positive, edge_width >= 0");
  }
  std::array<Vec3, 2> centers = {Vec3(-0.4, 0, 0), Vec3(0.4, 0, 0)};
  if (kind == SceneKind::two_blob) {
    Rng rng(seed);
    for (auto& c : centers) {
      c = Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5));
    }
  }
  return AnalyticScene(kind, params, centers, {Vec3(0.9, 0.2, 0.2), Vec3(0.2, 0.4, 0.9)});
}

RenderOutput oracle_render(const AnalyticScene& scene, const Camera& cam, std::size_t n_fine) {
  if (n_fine < 512) throw std::invalid_argument("oracle_render: n_fine must be at least 512");
  const auto rays = generate_rays(cam);
  auto out = RenderOutput::blank(cam.height, cam.width);
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(rays.size()); ++i) {
    const auto& ray = rays[i];
    const auto ts = sample_points(ray, n_fine, false, nullptr);
    std::vector<Real> sigmas(n_fine);
    std::vector<Vec3> colors(n_fine);
    for (std::size_t j = 0; j < n_fine; ++j) {
      const Vec3 p = ray.origin + ts[j] * ray.direction;
      sigmas[j] = scene.density(p);
      colors[j] = scene.color(p);
    }
    const auto px = integrate_ray(sigmas, colors, ts, ray.far);
    out.set_pixel(static_cast<std::size_t>(i), px.rgb, px.mask, px.depth);
  }
  return out;
}

Camera orbit_camera(Real azimuth_deg, Real elevation_deg, Real radius, Real fov,
                    std::size_t height, std::size_t width) {
  if (!(radius > std::sqrt(3.0))) {
    throw std::invalid_argument("orbit_camera: radius must exceed sqrt(3)");
  }
  Real az = std::fmod(azimuth_deg, 360.0);
  if (az < 0.0) az += 360.0;
  const Real a = az * std::numbers::pi / 180.0;
  const Real e = elevation_deg * std::numbers::pi / 180.0;
  const Vec3 position =
      radius * Vec3(std::cos(e) * std::cos(a), std::cos(e) * std::sin(a), std::sin(e));
  return look_at(position, Vec3::Zero(), fov, height, width);
}

std::vector<Camera> camera_orbit(std::size_t count, Real radius, Real elevation_deg, Real fov,
                                 std::size_t height, std::size_t width,
                                 Real azimuth_offset_deg) {
  if (count == 0) throw std::invalid_argument("camera_orbit: need at least one camera");
  std::vector<Camera> cams;
  for (std::size_t k = 0; k < count; ++k) {
    const Real az = azimuth_offset_deg + 360.0 * static_cast<Real>(k) / static_cast<Real>(count);
    cams.push_back(orbit_camera(az, elevation_deg, radius, fov, height, width));
  }
  return cams;
}

std::vector<Real> box_profile(Real center, Real half, std::size_t resolution) {
  const Real texel = resolution > 1 ? 2.0 / static_cast<Real>(resolution - 1) : 2.0;
  std::vector<Real> s(resolution);
  for (std::size_t i = 0; i < resolution; ++i) {
    const Real x = texel_to_world(static_cast<Real>(i), resolution);
    s[i] = std::clamp(0.5 + (half - std::abs(x - center)) / texel, 0.0, 1.0);
  }
  return s;
}

Triplane project_box(const ToyBox& box, std::size_t resolution, std::size_t channels) {
  if (channels == 0) throw std::invalid_argument("project_box: need an occupancy channel");
  std::array<std::vector<Real>, 3> profile;
  for (int a = 0; a < 3; ++a) profile[a] = box_profile(box.center[a], box.half_size[a], resolution);
  Triplane tri(resolution, channels);
  for (auto id : kPlanes) {
    const auto axes = plane_axes(id);
    for (std::size_t v = 0; v < resolution; ++v) {
      for (std::size_t u = 0; u < resolution; ++u) {
        const Real occ = profile[axes[0]][u] * profile[axes[1]][v];
        tri.set(id, u, v, 0, occ);
        for (std::size_t c = 1; c < channels; ++c) {
          tri.set(id, u, v, c, c <= 3 ? box.color[c - 1] * occ : occ);
        }
      }
    }
  }
  return tri;
}

namespace {

struct PaletteEntry {
  const char* word;
  Vec3 rgb;
};

const std::array<PaletteEntry, 10>& palette() {
  static const std::array<PaletteEntry, 10> kPalette = {{
      {"red", Vec3(1, 0, 0)},
      {"green", Vec3(0, 1, 0)},
      {"blue", Vec3(0, 0, 1)},
      {"yellow", Vec3(1, 1, 0)},
      {"cyan", Vec3(0, 1, 1)},
      {"magenta", Vec3(1, 0, 1)},
      {"white", Vec3(1, 1, 1)},
      {"orange", Vec3(1, 0.5, 0)},
      {"purple", Vec3(0.5, 0, 1)},
      {"gray", Vec3(0.5, 0.5, 0.5)},
  }};
  return kPalette;
}

}  // namespace

std::vector<ToyTriplaneExample> make_toy_triplane_dataset(std::size_t count,
                                                          std::size_t resolution,
                                                          std::size_t channels,
                                                          std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("toy dataset: count must be at least 1");
  if (resolution < 2) throw std::invalid_argument("toy dataset: resolution must be at least 2");
  Rng rng(seed);
  const auto& vocab = Vocabulary::toy();
  std::vector<ToyTriplaneExample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ToyBox box;
    for (int a = 0; a < 3; ++a) {
      box.half_size[a] = rng.uniform(0.2, 0.6);
      const Real room = 0.9 - box.half_size[a];
      box.center[a] = rng.uniform(-room, room);
    }
    const auto& entry = palette()[rng.below(palette().size())];
    box.color = entry.rgb;
    box.color_word = entry.word;
    const Real mean_half = box.half_size.mean();
    box.size_word = mean_half < 0.33 ? "small" : (mean_half < 0.47 ? "medium" : "large");
    ToyTriplaneExample ex{box, project_box(box, resolution, channels), "", {}};
    ex.caption = "a " + box.size_word + " " + box.color_word + " box";
    ex.tokens = vocab.tokenize(ex.caption);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace orthoplane
