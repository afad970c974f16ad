#pragma once

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "orthoplane/attention.hpp"
#include "orthoplane/nn.hpp"
#include "orthoplane/triplane.hpp"

namespace orthoplane {

// Timesteps are 1-based: beta(1) is the first forward step.
struct NoiseSchedule {
  std::vector<Real> betas;
  std::vector<Real> alpha_bars;

  std::size_t steps() const { return betas.size(); }
  Real beta(std::size_t t) const { return betas.at(t - 1); }
  Real alpha(std::size_t t) const { return 1.0 - beta(t); }
  Real alpha_bar(std::size_t t) const { return alpha_bars.at(t - 1); }
  // Variance of q(x_{t-1} | x_t, x_0); alpha_bar(0) is taken as 1.
  Real posterior_variance(std::size_t t) const;
};

// Linearly spaced betas; a single step uses beta_start.
NoiseSchedule make_schedule(std::size_t steps, Real beta_start, Real beta_end);

// sqrt(a) x0 + sqrt(1 - a) eps for any a in [0, 1].
Tensor noise_mix(const Tensor& x0, const Tensor& eps, Real alpha_bar);
Triplane q_sample(const Triplane& x0, std::size_t t, const Triplane& eps,
                  const NoiseSchedule& sched);

// Fixed random token table standing in for a frozen text encoder.
Tensor toy_text_table(std::size_t width, std::uint64_t seed = 7);
TextEmbedding encode_caption(const std::string& caption, const Tensor& table);

// Noise prediction over a batch of stacked triplanes. Rows are ordered
// (batch, plane, v, u); t and text hold one entry per batch element.
using EpsilonModel = std::function<Tensor(const Tensor& rows, const std::vector<std::size_t>& t,
                                          const std::vector<TextEmbedding>& text)>;

struct DenoiserConfig {
  std::size_t resolution = 16;
  std::size_t channels = 4;
  std::size_t hidden = 32;
  std::size_t levels = 2;
  std::size_t key_dim = 16;
  std::size_t heads = 1;
  std::size_t text_width = 16;
  std::size_t time_width = 32;
  bool orthogonal = true;  // OA block in every backbone level
  bool adapters = false;   // residual + OA adapter pair in every level
  std::size_t cross_line_index = 8;

  void validate() const;
};

// 3x3 convolution within each plane, zero padded; weight is [9 in x out]
// with taps ordered (dv, du) row-major.
struct PlaneConv {
  Tensor weight;
  Tensor bias;

  static PlaneConv init(std::size_t in, std::size_t out, Rng& rng, Real gain = 1.0);
  static PlaneConv zero(std::size_t in, std::size_t out);
  std::vector<Tensor> parameters() const { return {weight, bias}; }
};

// Row gather table for PlaneConv: 9 source rows per row, -1 outside the
// plane.
std::vector<std::int64_t> plane_conv_taps(std::size_t resolution, std::size_t batch);
Tensor plane_conv(const Tensor& rows, const PlaneConv& conv,
                  const std::vector<std::int64_t>& taps);

struct ResidualBlock {
  nn::LayerNorm norm;
  PlaneConv conv1;
  nn::Linear time;
  PlaneConv conv2;

  std::vector<Tensor> parameters() const;
};

struct AttentionBlock {
  nn::LayerNorm norm;
  AttentionParams attn;

  std::vector<Tensor> parameters() const;
};

struct DenoiserLevel {
  ResidualBlock residual;
  AttentionBlock cross;
  std::vector<AttentionBlock> orth;  // empty when orthogonal attention is off
  std::vector<ResidualBlock> adapter_residual;
  std::vector<AttentionBlock> adapter_orth;
};

class Denoiser {
 public:
  Denoiser() = default;
  static Denoiser init(const DenoiserConfig& cfg, Rng& rng);

  const DenoiserConfig& config() const { return cfg_; }

  Tensor operator()(const Tensor& rows, const std::vector<std::size_t>& t,
                    const std::vector<TextEmbedding>& text) const;
  EpsilonModel model() const;
  // Same backbone tensors (shared, not copied) with the adapter blocks
  // removed.
  Denoiser without_adapters() const;

  // Backbone excludes adapter blocks.
  std::vector<Tensor> backbone_parameters() const;
  std::vector<Tensor> adapter_parameters() const;
  std::vector<Tensor> parameters() const;
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

 private:
  struct BatchTables;
  const BatchTables& tables(std::size_t batch) const;

  DenoiserConfig cfg_;
  PlaneConv conv_in_;
  Tensor plane_embed_;
  nn::Linear time_in_;
  nn::Linear time_out_;
  std::vector<DenoiserLevel> levels_;
  nn::LayerNorm norm_out_;
  PlaneConv conv_out_;
  std::shared_ptr<std::map<std::size_t, std::shared_ptr<BatchTables>>> cache_;
};

enum class LossMode { all_planes, single_plane };

// Squared error between eps and the prediction on the noised x0, averaged
// within a plane; summed over the three planes or taken on `plane` alone.
Tensor epsilon_loss(const EpsilonModel& model, const Triplane& x0, const TextEmbedding& text,
                    std::size_t t, const Triplane& eps, const NoiseSchedule& sched,
                    LossMode mode = LossMode::all_planes, PlaneId plane = PlaneId::xy);

struct DiffusionExample {
  Triplane x0;
  TextEmbedding text;
};

enum class Staging { end_to_end, two_phase };

struct DiffusionTrainConfig {
  std::uint64_t seed = 0;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  Real lr = 2e-3;
  Real weight_decay = 0.03;
  std::size_t schedule_steps = 100;
  Real beta_start = 1e-4;
  Real beta_end = 0.02;
  Staging staging = Staging::end_to_end;
  std::size_t phase1_steps = 1000;  // two_phase only
  DenoiserConfig denoiser;

  void validate() const;
  NoiseSchedule schedule() const {
    return make_schedule(schedule_steps, beta_start, beta_end);
  }
};

struct DiffusionTrainResult {
  Denoiser denoiser;
  std::vector<Real> window_loss;  // mean loss of every 100-step window
  Real final_loss = 0.0;          // mean loss of the last window
  std::size_t steps_run = 0;
  std::size_t incidents = 0;
  bool diverged = false;
  std::string diagnostic;
};

// AdamW on the batch-averaged all-planes loss. two_phase trains the
// backbone for phase1_steps, then freezes it and trains only the adapters.
DiffusionTrainResult train_denoiser(const std::vector<DiffusionExample>& data,
                                    const DiffusionTrainConfig& cfg);
// Continues training the given parameters of an existing denoiser.
DiffusionTrainResult train_denoiser(const std::vector<DiffusionExample>& data,
                                    const DiffusionTrainConfig& cfg, Denoiser denoiser,
                                    const std::vector<Tensor>& trainable);

// Ancestral reverse chain from unit normal noise at t = T down to t = 1.
std::vector<Triplane> ddpm_sample(const EpsilonModel& model, std::size_t resolution,
                                  std::size_t channels, const std::vector<TextEmbedding>& text,
                                  const NoiseSchedule& sched, Rng& rng);
Triplane ddpm_sample(const Denoiser& denoiser, const TextEmbedding& text,
                     const NoiseSchedule& sched, Rng& rng);
std::vector<Triplane> ddpm_sample(const Denoiser& denoiser, const std::vector<TextEmbedding>& text,
                                  const NoiseSchedule& sched, Rng& rng, std::size_t chunk = 16);

// Mean L1 gap between the max-occupancy profiles (channel 0) that two
// planes give of their shared axis, averaged over the x, y and z pairings.
Real cross_plane_consistency(const Triplane& tri);

// Toy data lives in [0, 1]; the diffusion model works on 2v - 1.
Triplane to_model_space(const Triplane& tri);
Triplane from_model_space(const Triplane& tri);
std::vector<DiffusionExample> toy_diffusion_dataset(std::size_t count,
                                                    const DenoiserConfig& cfg,
                                                    std::uint64_t seed,
                                                    const Tensor& text_table);

// "DNSR", u16 version, the config as u32 fields, u32 section count, then per
// section: name, u32 rank, u32 dims, float32 values.
inline constexpr std::uint16_t kDenoiserFormatVersion = 1;
void write_denoiser(std::ostream& out, const Denoiser& d);
void write_denoiser(const std::filesystem::path& path, const Denoiser& d);
Denoiser read_denoiser(std::istream& in);
Denoiser read_denoiser(const std::filesystem::path& path);

}  // namespace orthoplane
