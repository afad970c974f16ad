#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "orthoplane/renderer.hpp"

namespace orthoplane {

// Differentiable view: image [H x W x 3], mask [H x W], depth [H x W].
struct RenderTensors {
  Tensor image;
  Tensor mask;
  Tensor depth;
};

RenderTensors to_tensors(const RenderOutput& out);

using PerceptualHook = std::function<Tensor(const Tensor& pred_image, const Tensor& gt_image)>;

struct LossWeights {
  Real mask = 0.5;
  Real depth = 1.0;
  Real perceptual = 2.0;
  PerceptualHook hook;  // the perceptual term is zero when empty

  void validate() const;
};

// Mean of the squared differences of two equally shaped tensors.
Tensor mse(const Tensor& a, const Tensor& b);

// Average over k x k blocks of an [H x W x C] image; H and W must be
// multiples of k.
Tensor avg_pool(const Tensor& image, std::size_t k);

// Mean squared error between 4x average-pooled images.
PerceptualHook pooled_mse_hook(std::size_t factor = 4);

// Sum over views of image, mask, depth and perceptual terms.
Tensor render_loss(const std::vector<RenderTensors>& pred, const std::vector<RenderTensors>& gt,
                   const LossWeights& weights);
Real render_loss(const std::vector<RenderOutput>& pred, const std::vector<RenderOutput>& gt,
                 const LossWeights& weights);

// The same terms for a batch of rays in the [R x 5] layout of render_rays;
// the perceptual term does not apply to scattered rays.
Tensor ray_batch_loss(const Tensor& pred, const Tensor& gt, const LossWeights& weights);

struct ParamGroup {
  std::vector<Tensor> params;
  Real lr = 1e-3;
  Real weight_decay = 0.03;
};

// Adam with decoupled weight decay: p <- p (1 - lr wd), then the
// bias-corrected adaptive update.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, Real beta1 = 0.9, Real beta2 = 0.95,
                 Real eps = 1e-8);

  // Applies one update from the parameters' accumulated gradients; a
  // missing gradient counts as zero. Returns false and leaves parameters
  // and moments untouched when any gradient is non-finite.
  bool step();
  void zero_grad();

  std::size_t steps() const { return steps_; }
  std::size_t incidents() const { return incidents_; }
  Real beta1() const { return beta1_; }
  Real beta2() const { return beta2_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  std::vector<ParamGroup> groups_;
  std::vector<std::vector<std::vector<Real>>> m_;
  std::vector<std::vector<std::vector<Real>>> v_;
  Real beta1_, beta2_, eps_;
  std::size_t steps_ = 0;
  std::size_t incidents_ = 0;
};

struct TrainView {
  Camera camera;
  RenderOutput target;
};

struct FitConfig {
  std::uint64_t seed = 0;
  std::size_t iterations = 3000;
  std::size_t batch_rays = 512;
  std::size_t samples = 64;
  bool stratified = true;
  std::size_t resolution = 32;
  std::size_t channels = 8;
  std::size_t hidden = 64;
  std::size_t depth = 1;
  std::size_t frequencies = 0;
  Real density_bias = -1.0;
  Real init_std = 0.1;
  Real lr_triplane = 5e-3;
  Real lr_heads = 5e-4;
  Real weight_decay = 0.03;
  std::size_t validate_every = 100;
  std::size_t validation_rays = 1024;
  LossWeights weights;
};

struct FitResult {
  Triplane triplane;
  FieldHeads heads;
  std::vector<Real> window_loss;  // mean training loss of every 100-step window
  Real best_validation = 0.0;
  std::size_t best_step = 0;
  std::size_t steps_run = 0;
  std::size_t incidents = 0;
  bool diverged = false;
  std::string diagnostic;
};

// Overfits a triplane and field heads to the views with random ray batches.
// Returns the parameters with the lowest validation loss.
FitResult fit_scene(const std::vector<TrainView>& views, const FitConfig& cfg);

// Mean density over a grid^3 lattice of cell centers in [-1, 1]^3.
Real mean_density(const Triplane& tri, const FieldHeads& heads, std::size_t grid = 16);

Real psnr(const std::vector<Real>& a, const std::vector<Real>& b);

// Triplane section followed by the heads section.
void write_scene_checkpoint(std::ostream& out, const Triplane& tri, const FieldHeads& heads);
void write_scene_checkpoint(const std::filesystem::path& path, const Triplane& tri,
                            const FieldHeads& heads);
struct SceneCheckpoint {
  Triplane triplane;
  FieldHeads heads;
};
SceneCheckpoint read_scene_checkpoint(std::istream& in);
SceneCheckpoint read_scene_checkpoint(const std::filesystem::path& path);

}  // namespace orthoplane
