#pragma once

#include <array>
#include <string>
#include <vector>

#include "orthoplane/renderer.hpp"

namespace orthoplane {

enum class SceneKind { vacuum, sphere, cube, two_blob };

SceneKind parse_scene_kind(const std::string& name);
const char* scene_kind_name(SceneKind kind);

struct SceneParams {
  Real radius = 0.5;        // sphere radius
  Real density = 4.0;       // sphere and cube density level, blob amplitude
  Real half_extent = 0.5;   // cube half side
  Real edge_width = 0.0;    // cube density ramp width; 0 gives a hard edge
  Real blob_width = 0.25;   // Gaussian standard deviation
  Vec3 sphere_color{0.9, 0.6, 0.2};
};

// Closed-form density and color over [-1, 1]^3.
class AnalyticScene {
 public:
  AnalyticScene(SceneKind kind, SceneParams params, std::array<Vec3, 2> blob_centers,
                std::array<Vec3, 2> blob_colors);

  SceneKind kind() const { return kind_; }
  const SceneParams& params() const { return params_; }
  const std::array<Vec3, 2>& blob_centers() const { return centers_; }
  Real density(const Vec3& p) const;
  Vec3 color(const Vec3& p) const;

 private:
  SceneKind kind_;
  SceneParams params_;
  std::array<Vec3, 2> centers_;
  std::array<Vec3, 2> blob_colors_;
};

// Face colors of the cube: +x red, -x cyan, +y green, -y magenta, +z blue,
// -z yellow. face = 2 * axis + (negative ? 1 : 0).
Vec3 cube_face_color(int face);

// The seed places the two blobs; other kinds ignore it.
AnalyticScene make_scene(SceneKind kind, const SceneParams& params, std::uint64_t seed);

// Renders the analytic fields with n_fine uniform midpoint samples per ray.
RenderOutput oracle_render(const AnalyticScene& scene, const Camera& cam, std::size_t n_fine);

// Camera on a sphere of `radius` looking at the origin. Angles in degrees;
// azimuth is measured from +x towards +y and reduced modulo 360.
Camera orbit_camera(Real azimuth_deg, Real elevation_deg, Real radius, Real fov,
                    std::size_t height, std::size_t width);

// `count` cameras evenly spaced in azimuth starting at azimuth_offset_deg.
std::vector<Camera> camera_orbit(std::size_t count, Real radius, Real elevation_deg, Real fov,
                                 std::size_t height, std::size_t width,
                                 Real azimuth_offset_deg = 0.0);

struct ToyBox {
  Vec3 center;
  Vec3 half_size;
  Vec3 color;
  std::string color_word;
  std::string size_word;
};

struct ToyTriplaneExample {
  ToyBox box;
  Triplane x0;  // channel 0 occupancy, channels 1.. color * occupancy
  std::string caption;
  std::vector<std::size_t> tokens;
};

// Soft one-texel-border occupancy of the interval [center - half, center +
// half] at every texel center along one axis.
std::vector<Real> box_profile(Real center, Real half, std::size_t resolution);

// Orthographic projections of `box` onto the three planes.
Triplane project_box(const ToyBox& box, std::size_t resolution, std::size_t channels);

std::vector<ToyTriplaneExample> make_toy_triplane_dataset(std::size_t count,
                                                          std::size_t resolution,
                                                          std::size_t channels,
                                                          std::uint64_t seed);

}  // namespace orthoplane
