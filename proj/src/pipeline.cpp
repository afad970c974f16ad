#include "orthoplane/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <limits>

namespace orthoplane {

std::string format_real(Real value) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc()) return "nan";
  return std::string(buf, end);
}

void Metrics::set(const std::string& key, Real value) { set(key, format_real(value)); }

void Metrics::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

std::string Metrics::str() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + "=" + v + "\n";
  return out;
}

void Metrics::write(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << str();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

AnalyticScene scene_from(const RunConfig& cfg) {
  return make_scene(cfg.scene.kind, cfg.scene.params, cfg.scene.seed);
}

std::vector<TrainView> training_views(const RunConfig& cfg) {
  const auto scene = scene_from(cfg);
  const auto& v = cfg.views;
  std::vector<TrainView> views;
  for (const auto& cam :
       camera_orbit(v.count, v.radius, v.elevation, v.fov, v.size, v.size, v.azimuth_offset)) {
    views.push_back({cam, oracle_render(scene, cam, v.oracle_samples)});
  }
  return views;
}

FitConfig fit_config(const RunConfig& cfg) {
  FitConfig fit = cfg.fit;
  fit.seed = cfg.seed;
  if (cfg.perceptual) fit.weights.hook = pooled_mse_hook(4);
  return fit;
}

Real view_psnr(const Triplane& tri, const FieldHeads& heads, const AnalyticScene& scene,
               const RunConfig& cfg, Real azimuth) {
  const auto& v = cfg.views;
  const auto cam = orbit_camera(azimuth, v.elevation, v.radius, v.fov, v.size, v.size);
  const auto gt = oracle_render(scene, cam, v.oracle_samples);
  const auto pred = render_view(tri, heads, cam, {cfg.fit.samples, false});
  return psnr(pred.image, gt.image);
}

FitReport evaluate_fit(const FitResult& fit, const RunConfig& cfg) {
  FitReport report{fit, {}, {}, mean_density(fit.triplane, fit.heads), 0.0, 0.0};
  const auto scene = scene_from(cfg);
  auto score = [&](const std::vector<Real>& azimuths, std::vector<ViewScore>& into, Real& min) {
    min = std::numeric_limits<Real>::infinity();
    for (Real az : azimuths) {
      into.push_back({az, view_psnr(fit.triplane, fit.heads, scene, cfg, az)});
      min = std::min(min, into.back().psnr);
    }
  };
  score(cfg.eval.heldout_azimuths, report.heldout, report.min_heldout);
  score(cfg.eval.unseen_azimuths, report.unseen, report.min_unseen);
  return report;
}

FitReport run_fit(const RunConfig& cfg) {
  auto fit = fit_scene(training_views(cfg), fit_config(cfg));
  // Evaluate exactly what a checkpoint stores.
  round_to_float32(fit.triplane.tensor());
  for (auto p : fit.heads.parameters()) round_to_float32(p);
  return evaluate_fit(fit, cfg);
}

Metrics fit_metrics(const FitReport& r) {
  Metrics m;
  m.set("steps_run", static_cast<Real>(r.fit.steps_run));
  m.set("diverged", r.fit.diverged ? "true" : "false");
  if (!r.fit.diagnostic.empty()) m.set("diagnostic", r.fit.diagnostic);
  m.set("optimizer_incidents", static_cast<Real>(r.fit.incidents));
  for (std::size_t i = 0; i < r.fit.window_loss.size(); ++i) {
    m.set("loss_step_" + std::to_string((i + 1) * 100), r.fit.window_loss[i]);
  }
  m.set("best_validation_loss", r.fit.best_validation);
  m.set("best_step", static_cast<Real>(r.fit.best_step));
  for (const auto& s : r.heldout) m.set("psnr_heldout_az" + format_real(s.azimuth), s.psnr);
  for (const auto& s : r.unseen) m.set("psnr_unseen_az" + format_real(s.azimuth), s.psnr);
  if (!r.heldout.empty()) m.set("psnr_heldout_min", r.min_heldout);
  if (!r.unseen.empty()) m.set("psnr_unseen_min", r.min_unseen);
  m.set("mean_density", r.mean_density);
  return m;
}

RenderOutput render_orbit(const Triplane& tri, const FieldHeads& heads, const RunConfig& cfg,
                          Real azimuth, Real elevation, std::size_t size) {
  const auto cam = orbit_camera(azimuth, elevation, cfg.render.radius, cfg.render.fov, size, size);
  return render_view(tri, heads, cam, {cfg.render.samples, false});
}

Image8 triplane_preview(const Triplane& tri) {
  const std::size_t d = tri.resolution(), c = tri.channels();
  const bool rgb = c >= 4;
  Image8 img{3 * d, d, rgb ? 3u : 1u, {}};
  img.pixels.resize(img.width * img.height * img.channels);
  for (std::size_t p = 0; p < 3; ++p) {
    const auto plane = static_cast<PlaneId>(p);
    for (std::size_t v = 0; v < d; ++v)
      for (std::size_t u = 0; u < d; ++u) {
        const std::size_t px = (v * img.width + p * d + u) * img.channels;
        if (rgb) {
          for (std::size_t k = 0; k < 3; ++k) img.pixels[px + k] = to_byte(tri.at(plane, u, v, k + 1));
        } else {
          img.pixels[px] = to_byte(tri.at(plane, u, v, 0));
        }
      }
  }
  return img;
}

DiffusionTrainConfig diffusion_train_config(const RunConfig& cfg) {
  auto t = cfg.diffusion.train;
  t.seed = cfg.seed;
  return t;
}

std::vector<DiffusionExample> diffusion_dataset(const RunConfig& cfg) {
  const auto& dc = cfg.diffusion.train.denoiser;
  const auto table = toy_text_table(dc.text_width);
  if (cfg.diffusion.dataset == "constant") {
    const Shape shape{3, dc.resolution, dc.resolution, dc.channels};
    return {{Triplane(Tensor::full(shape, cfg.diffusion.constant_value)),
             encode_caption("a red box", table)}};
  }
  return toy_diffusion_dataset(cfg.diffusion.dataset_size, dc, cfg.diffusion.dataset_seed, table);
}

std::vector<Triplane> sample_triplanes(const Denoiser& denoiser, const RunConfig& cfg,
                                       const std::vector<DiffusionExample>& data) {
  std::vector<TextEmbedding> texts;
  for (std::size_t i = 0; i < cfg.diffusion.samples; ++i) texts.push_back(data[i % data.size()].text);
  Rng rng(cfg.seed ^ 0x5a3b1e5ULL);
  auto samples = ddpm_sample(denoiser, texts, diffusion_train_config(cfg).schedule(), rng);
  if (cfg.diffusion.dataset == "toy") {
    for (auto& s : samples) s = from_model_space(s);
  }
  return samples;
}

Real mean_consistency(const std::vector<Triplane>& samples) {
  Real total = 0.0;
  for (const auto& s : samples) total += cross_plane_consistency(s);
  return samples.empty() ? 0.0 : total / static_cast<Real>(samples.size());
}

AblationReport run_ablation(const RunConfig& cfg) {
  AblationReport report;
  const auto data = diffusion_dataset(cfg);
  Real base = 0.0;
  for (const auto& ex : data) base += cross_plane_consistency(from_model_space(ex.x0));
  report.data_consistency = base / static_cast<Real>(data.size());
  auto run = [&](bool oa, DiffusionTrainResult& into, Real& consistency) {
    auto tc = diffusion_train_config(cfg);
    tc.denoiser.orthogonal = oa;
    tc.denoiser.adapters = false;
    tc.staging = Staging::end_to_end;
    into = train_denoiser(data, tc);
    consistency = mean_consistency(sample_triplanes(into.denoiser, cfg, data));
  };
  run(true, report.with_oa, report.consistency_with_oa);
  run(false, report.without_oa, report.consistency_without_oa);
  return report;
}

Metrics ablation_metrics(const AblationReport& r) {
  Metrics m;
  m.set("consistency_oa_on", r.consistency_with_oa);
  m.set("consistency_oa_off", r.consistency_without_oa);
  m.set("relative_reduction", r.relative_reduction());
  m.set("consistency_data", r.data_consistency);
  m.set("final_loss_oa_on", r.with_oa.final_loss);
  m.set("final_loss_oa_off", r.without_oa.final_loss);
  m.set("steps_oa_on", static_cast<Real>(r.with_oa.steps_run));
  m.set("steps_oa_off", static_cast<Real>(r.without_oa.steps_run));
  return m;
}

std::string ablation_table(const AblationReport& r) {
  char buf[256];
  std::string out = "variant   final_eps_loss  mean_consistency\n";
  std::snprintf(buf, sizeof buf, "oa_on     %-15.5f %.5f\n", r.with_oa.final_loss,
                r.consistency_with_oa);
  out += buf;
  std::snprintf(buf, sizeof buf, "oa_off    %-15.5f %.5f\n", r.without_oa.final_loss,
                r.consistency_without_oa);
  out += buf;
  std::snprintf(buf, sizeof buf, "relative_reduction %.4f\n", r.relative_reduction());
  out += buf;
  return out;
}

}  // namespace orthoplane
