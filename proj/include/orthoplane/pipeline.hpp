#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "orthoplane/config.hpp"
#include "orthoplane/image_io.hpp"

// End-to-end runs shared by the command-line tool and the acceptance suite.
namespace orthoplane {

// Ordered key=value lines.
class Metrics {
 public:
  void set(const std::string& key, Real value);
  void set(const std::string& key, const std::string& value);
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Shortest decimal text that parses back to the same double.
std::string format_real(Real value);

AnalyticScene scene_from(const RunConfig& cfg);
std::vector<TrainView> training_views(const RunConfig& cfg);
FitConfig fit_config(const RunConfig& cfg);

struct ViewScore {
  Real azimuth;
  Real psnr;
};

struct FitReport {
  FitResult fit;
  std::vector<ViewScore> heldout;
  std::vector<ViewScore> unseen;
  Real mean_density = 0.0;
  Real min_heldout = 0.0;
  Real min_unseen = 0.0;
};

// PSNR of the model's render against the oracle at an orbit pose.
Real view_psnr(const Triplane& tri, const FieldHeads& heads, const AnalyticScene& scene,
               const RunConfig& cfg, Real azimuth);
FitReport evaluate_fit(const FitResult& fit, const RunConfig& cfg);
FitReport run_fit(const RunConfig& cfg);
Metrics fit_metrics(const FitReport& report);

// Renders at an orbit pose with the render section's radius, fov and
// sample count.
RenderOutput render_orbit(const Triplane& tri, const FieldHeads& heads, const RunConfig& cfg,
                          Real azimuth, Real elevation, std::size_t size);

// Three planes side by side: channels 1-3 as RGB when present, otherwise
// channel 0 as gray. Values are clamped to [0, 1].
Image8 triplane_preview(const Triplane& tri);

std::vector<DiffusionExample> diffusion_dataset(const RunConfig& cfg);
DiffusionTrainConfig diffusion_train_config(const RunConfig& cfg);

// Samples diffusion.samples triplanes cycling through the dataset captions,
// mapped back to data space.
std::vector<Triplane> sample_triplanes(const Denoiser& denoiser, const RunConfig& cfg,
                                       const std::vector<DiffusionExample>& data);
Real mean_consistency(const std::vector<Triplane>& samples);

struct AblationReport {
  DiffusionTrainResult with_oa;
  DiffusionTrainResult without_oa;
  Real consistency_with_oa = 0.0;
  Real consistency_without_oa = 0.0;
  Real data_consistency = 0.0;

  Real relative_reduction() const {
    return 1.0 - consistency_with_oa / consistency_without_oa;
  }
};

// Paired training with identical seed, data and budget; only the OA blocks
// differ.
AblationReport run_ablation(const RunConfig& cfg);
Metrics ablation_metrics(const AblationReport& report);
std::string ablation_table(const AblationReport& report);

}  // namespace orthoplane
