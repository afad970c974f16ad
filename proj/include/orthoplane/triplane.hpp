#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "orthoplane/tensor.hpp"

namespace orthoplane {

using Vec3 = Eigen::Vector3d;

enum class PlaneId : int { xy = 0, xz = 1, yz = 2 };

inline constexpr std::array<PlaneId, 3> kPlanes = {PlaneId::xy, PlaneId::xz, PlaneId::yz};

const char* plane_name(PlaneId id);
// World axes (0 = x, 1 = y, 2 = z) spanned by a plane's u and v coordinates.
std::array<int, 2> plane_axes(PlaneId id);

struct PlaneCoord {
  PlaneId plane;
  Real u;
  Real v;
};

// Counts clamped point components; rays routinely leave the unit cube.
struct ClampCounter {
  std::size_t clamped = 0;
};

// Maps a world point in [-1, 1]^3 to continuous texel coordinates on each
// plane, c -> (c + 1) / 2 * (D - 1). Texel centers sit at integer indices.
std::array<PlaneCoord, 3> project_point(const Vec3& p, std::size_t resolution,
                                        ClampCounter* counter = nullptr);
// Inverse of the per-axis affine map.
Real texel_to_world(Real coord, std::size_t resolution);

// Three co-sized D x D x C feature planes over the cube [-1, 1]^3, stored as
// one tensor of shape [3, D, D, C] (plane, v, u, channel).
class Triplane {
 public:
  Triplane() = default;
  Triplane(std::size_t resolution, std::size_t channels);
  explicit Triplane(Tensor planes);

  std::size_t resolution() const { return resolution_; }
  std::size_t channels() const { return channels_; }

  const Tensor& tensor() const { return planes_; }
  Tensor& tensor() { return planes_; }
  // [3 * D * D, C] view, one row per texel.
  Tensor rows() const;
  static Triplane from_rows(const Tensor& rows, std::size_t resolution);

  std::size_t offset(PlaneId plane, std::size_t u, std::size_t v, std::size_t c = 0) const {
    return ((static_cast<std::size_t>(plane) * resolution_ + v) * resolution_ + u) * channels_ +
           c;
  }
  Real at(PlaneId plane, std::size_t u, std::size_t v, std::size_t c) const {
    return planes_[offset(plane, u, v, c)];
  }
  void set(PlaneId plane, std::size_t u, std::size_t v, std::size_t c, Real value) {
    planes_.mutable_data()[offset(plane, u, v, c)] = value;
  }
  // Copy of one plane as a D x D x C array.
  std::vector<Real> plane(PlaneId id) const;

  bool finite() const;

 private:
  Tensor planes_;
  std::size_t resolution_ = 0;
  std::size_t channels_ = 0;
};

// Differentiable bilinear lookup of N points ([N x 3]) on all three planes,
// concatenated per point in plane order xy, xz, yz: result is [N x 3C].
// Gradients flow to both the plane contents and the points; clamped point
// components get zero gradient.
Tensor sample_triplane(const Triplane& tri, const Tensor& points, ClampCounter* counter = nullptr);
// Single-point convenience returning a [3C] tensor.
Tensor sample_triplane(const Triplane& tri, const Vec3& p, ClampCounter* counter = nullptr);

enum class MarginalAxis { u, v };
enum class Reducer { mean, max };

// Reduces a D x D x C plane along the named axis; returns a D x C profile
// indexed by the surviving coordinate.
std::vector<Real> plane_marginal(const std::vector<Real>& plane, std::size_t resolution,
                                 std::size_t channels, MarginalAxis axis, Reducer reducer);

// Binary checkpoint: "TRPL", u16 version, u32 D, u32 C, then 3*D*D*C
// little-endian float32 values in plane order xy, xz, yz (v, u, channel).
inline constexpr std::uint16_t kTriplaneFormatVersion = 1;
void write_triplane(std::ostream& out, const Triplane& tri);
Triplane read_triplane(std::istream& in);

// Rounds every value to the nearest float32 so an in-memory triplane equals
// what a checkpoint round-trip produces.
void round_to_float32(Tensor& t);

}  // namespace orthoplane
