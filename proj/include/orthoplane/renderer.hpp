#pragma once

#include <iosfwd>
#include <vector>

#include <Eigen/Dense>

#include "orthoplane/nn.hpp"
#include "orthoplane/rng.hpp"
#include "orthoplane/triplane.hpp"

namespace orthoplane {

// Pinhole camera. Orientation columns are (right, up, forward); image rows
// run top to bottom along -up and columns left to right along right.
struct Camera {
  Vec3 position = Vec3::Zero();
  Eigen::Matrix3d orientation = Eigen::Matrix3d::Identity();
  Real fov = 0.8;  // vertical field of view, radians
  std::size_t height = 1;
  std::size_t width = 1;
  Real near = 0.1;
  Real far = 1.0;

  Vec3 right() const { return orientation.col(0); }
  Vec3 up() const { return orientation.col(1); }
  Vec3 forward() const { return orientation.col(2); }
  // Throws std::invalid_argument describing the first violated invariant.
  void validate() const;
};

// Camera at `position` looking at `target` with world +z as the up hint.
// Ray bounds cover the [-1, 1]^3 cube.
Camera look_at(const Vec3& position, const Vec3& target, Real fov, std::size_t height,
               std::size_t width);

// Bounds of the segment of the ray's line that can meet [-1, 1]^3 when
// starting `distance` from the origin.
void cube_bounds(Real distance, Real* near, Real* far);

struct Ray {
  Vec3 origin;
  Vec3 direction;
  Real near;
  Real far;
};

// Row-major H x W rays through pixel centers.
std::vector<Ray> generate_rays(const Camera& cam);

// n ascending depths in [near, far]: bin midpoints, or one uniform draw per
// bin when stratified.
std::vector<Real> sample_points(const Ray& ray, std::size_t n, bool stratified, Rng* rng);

// Raw position plus sin/cos at `frequencies` octaves of pi * p.
struct PositionEncoding {
  std::size_t frequencies = 0;

  std::size_t width() const { return 3 + 6 * frequencies; }
  // Points are treated as constants.
  Tensor operator()(const Tensor& points) const;
};

// Density and color MLPs over enc(p) concatenated with the 3C triplane
// feature.
struct FieldHeads {
  PositionEncoding encoding;
  std::vector<nn::Linear> density;
  std::vector<nn::Linear> color;

  // `depth` hidden layers of `hidden` units per head. The last density bias
  // starts at `density_bias`.
  static FieldHeads init(std::size_t channels, std::size_t hidden, std::size_t depth,
                         std::size_t frequencies, Rng& rng, Real density_bias = 0.0);
  std::size_t input_width() const;
  std::vector<Tensor> parameters() const;
};

struct FieldSamples {
  Tensor sigma;  // [N]
  Tensor color;  // [N x 3]
};

FieldSamples field_eval(const Triplane& tri, const FieldHeads& heads, const Tensor& points,
                        ClampCounter* counter = nullptr);

struct RayIntegral {
  Vec3 rgb;
  Real mask;
  Real depth;
};

// Exponential quadrature of one ray. Rejects non-ascending depths.
RayIntegral integrate_ray(const std::vector<Real>& sigmas, const std::vector<Vec3>& colors,
                          const std::vector<Real>& ts, Real far);

// Batched, differentiable form over R rays of n samples each.
// sigma: [R x n], color: [R x n x 3]; returns [R x 5] rows (r, g, b, mask,
// depth).
Tensor integrate_rays(const Tensor& sigma, const Tensor& color,
                      const std::vector<Real>& ts, const std::vector<Real>& far);

struct RenderSettings {
  std::size_t samples = 64;
  bool stratified = false;
};

// Differentiable render of a ray batch; [R x 5] as integrate_rays.
Tensor render_rays(const Triplane& tri, const FieldHeads& heads, const std::vector<Ray>& rays,
                   const RenderSettings& settings, Rng* rng = nullptr,
                   ClampCounter* counter = nullptr);

struct RenderOutput {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Real> image;  // H x W x 3
  std::vector<Real> mask;   // H x W
  std::vector<Real> depth;  // H x W

  static RenderOutput blank(std::size_t height, std::size_t width);
  void set_pixel(std::size_t index, const Vec3& rgb, Real mask_value, Real depth_value);
};

RenderOutput render_view(const Triplane& tri, const FieldHeads& heads, const Camera& cam,
                         const RenderSettings& settings, Rng* rng = nullptr);

inline constexpr std::uint16_t kHeadsFormatVersion = 1;

void write_heads(std::ostream& out, const FieldHeads& heads);
FieldHeads read_heads(std::istream& in);

}  // namespace orthoplane
