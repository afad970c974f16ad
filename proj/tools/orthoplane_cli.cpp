#include <malloc.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "orthoplane/config.hpp"
#include "orthoplane/grad_suite.hpp"
#include "orthoplane/pipeline.hpp"

namespace fs = std::filesystem;
using namespace orthoplane;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kConfigError = 2;

// Input problems the user must fix: malformed config, unreadable checkpoint.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string checkpoint;
  std::vector<Real> azimuths{0.0};
  Real elevation = 25.0;
  std::size_t size = 64;
  std::string scope = "all";
  std::string corrupt_adjoint;
};

RunConfig resolve(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : load_config(opt.config);
  if (opt.seed) cfg.seed = *opt.seed;
  if (!opt.out.empty()) cfg.out = opt.out;
  fs::create_directories(cfg.out);
  return cfg;
}

template <typename Reader>
auto read_input(const fs::path& path, Reader reader) {
  try {
    return reader(path);
  } catch (const std::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_render(const fs::path& dir, const std::string& stem, const RenderOutput& r, Real radius) {
  write_netpbm(dir / (stem + "_rgb.ppm"), quantize(r.image, r.height, r.width, 3));
  write_netpbm(dir / (stem + "_mask.pgm"), quantize(r.mask, r.height, r.width, 1));
  const Real half = std::sqrt(3.0);
  write_netpbm(dir / (stem + "_depth.pgm"),
               quantize_range(r.depth, r.height, r.width, radius - half, radius + half));
}

int cmd_gradcheck(const Options& opt) {
  if (!opt.corrupt_adjoint.empty()) set_corrupted_adjoint(opt.corrupt_adjoint);
  const auto entries = run_grad_suite(opt.scope, opt.seed.value_or(0));
  const auto report = format_grad_report(entries);
  std::cout << report;
  if (!opt.out.empty()) {
    fs::create_directories(opt.out);
    std::FILE* f = std::fopen((fs::path(opt.out) / "gradcheck.txt").c_str(), "w");
    if (!f) throw std::runtime_error("cannot write gradcheck report under " + opt.out);
    std::fputs(report.c_str(), f);
    std::fclose(f);
  }
  for (const auto& e : entries) {
    if (!e.passed()) {
      std::cerr << "gradcheck failed: " << e.scope << "/" << e.name << "\n";
      return kFailed;
    }
  }
  return kOk;
}

bool meets_thresholds(const FitReport& r, const RunConfig& cfg) {
  bool ok = true;
  if (cfg.eval.min_heldout_psnr > 0 && r.min_heldout < cfg.eval.min_heldout_psnr) {
    std::cerr << "held-out PSNR " << r.min_heldout << " below " << cfg.eval.min_heldout_psnr << "\n";
    ok = false;
  }
  if (cfg.eval.min_unseen_psnr > 0 && r.min_unseen < cfg.eval.min_unseen_psnr) {
    std::cerr << "unseen PSNR " << r.min_unseen << " below " << cfg.eval.min_unseen_psnr << "\n";
    ok = false;
  }
  return ok;
}

int cmd_fit(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto report = run_fit(cfg);
  write_scene_checkpoint(cfg.out / "scene.ckpt", report.fit.triplane, report.fit.heads);
  fit_metrics(report).write(cfg.out / "fit_metrics.txt");
  for (const auto& s : report.heldout) {
    const auto r = render_orbit(report.fit.triplane, report.fit.heads, cfg, s.azimuth,
                                cfg.views.elevation, cfg.views.size);
    write_render(cfg.out, "preview_az" + format_real(s.azimuth), r, cfg.render.radius);
  }
  std::cout << "held-out PSNR min " << report.min_heldout << " dB, unseen min " << report.min_unseen
            << " dB, mean density " << report.mean_density << "\n";
  if (report.fit.diverged) {
    std::cerr << "fit diverged: " << report.fit.diagnostic << "\n";
    return kFailed;
  }
  return meets_thresholds(report, cfg) ? kOk : kFailed;
}

SceneCheckpoint load_scene(const Options& opt) {
  if (opt.checkpoint.empty()) throw InputError("--checkpoint is required");
  return read_input(opt.checkpoint,
                    [](const fs::path& p) { return read_scene_checkpoint(p); });
}

int cmd_render(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto scene = load_scene(opt);
  for (Real az : opt.azimuths) {
    const auto r = render_orbit(scene.triplane, scene.heads, cfg, az, opt.elevation, opt.size);
    write_render(cfg.out, "render_az" + format_real(az) + "_el" + format_real(opt.elevation), r,
                 cfg.render.radius);
  }
  return kOk;
}

int cmd_eval(const Options& opt) {
  const auto cfg = resolve(opt);
  auto scene = load_scene(opt);
  FitResult fit;
  fit.triplane = std::move(scene.triplane);
  fit.heads = std::move(scene.heads);
  const auto report = evaluate_fit(fit, cfg);
  Metrics m;
  for (const auto& s : report.heldout) m.set("psnr_heldout_az" + format_real(s.azimuth), s.psnr);
  for (const auto& s : report.unseen) m.set("psnr_unseen_az" + format_real(s.azimuth), s.psnr);
  if (!report.heldout.empty()) m.set("psnr_heldout_min", report.min_heldout);
  if (!report.unseen.empty()) m.set("psnr_unseen_min", report.min_unseen);
  m.set("mean_density", report.mean_density);
  m.write(cfg.out / "eval_metrics.txt");
  std::cout << m.str();
  return meets_thresholds(report, cfg) ? kOk : kFailed;
}

Metrics train_metrics(const DiffusionTrainResult& r) {
  Metrics m;
  m.set("steps_run", static_cast<Real>(r.steps_run));
  m.set("diverged", r.diverged ? "true" : "false");
  if (!r.diagnostic.empty()) m.set("diagnostic", r.diagnostic);
  m.set("optimizer_incidents", static_cast<Real>(r.incidents));
  for (std::size_t i = 0; i < r.window_loss.size(); ++i) {
    m.set("loss_step_" + std::to_string((i + 1) * 100), r.window_loss[i]);
  }
  m.set("final_loss", r.final_loss);
  return m;
}

int cmd_diffusion_train(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto result = train_denoiser(diffusion_dataset(cfg), diffusion_train_config(cfg));
  write_denoiser(cfg.out / "denoiser.ckpt", result.denoiser);
  train_metrics(result).write(cfg.out / "diffusion_metrics.txt");
  std::cout << "final epsilon loss " << result.final_loss << "\n";
  if (result.diverged) {
    std::cerr << "training diverged: " << result.diagnostic << "\n";
    return kFailed;
  }
  return kOk;
}

int cmd_diffusion_sample(const Options& opt) {
  const auto cfg = resolve(opt);
  const fs::path ckpt = opt.checkpoint.empty() ? cfg.out / "denoiser.ckpt" : fs::path(opt.checkpoint);
  const auto denoiser = read_input(ckpt, [](const fs::path& p) { return read_denoiser(p); });
  const auto samples = sample_triplanes(denoiser, cfg, diffusion_dataset(cfg));
  Metrics m;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%03zu", i);
    const auto img = triplane_preview(samples[i]);
    write_netpbm(cfg.out / (std::string(stem) + (img.channels == 3 ? ".ppm" : ".pgm")), img);
    m.set(std::string("consistency_") + (stem + 7), cross_plane_consistency(samples[i]));
  }
  m.set("consistency_mean", mean_consistency(samples));
  m.write(cfg.out / "sample_metrics.txt");
  std::cout << "mean cross-plane consistency " << mean_consistency(samples) << "\n";
  return kOk;
}

int cmd_diffusion_ablate(const Options& opt) {
  const auto cfg = resolve(opt);
  const auto report = run_ablation(cfg);
  ablation_metrics(report).write(cfg.out / "ablation_metrics.txt");
  std::cout << ablation_table(report);
  return report.consistency_with_oa < report.consistency_without_oa ? kOk : kFailed;
}

void apply_thread_override() {
  const char* env = std::getenv("ORTHOPLANE_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw InputError("ORTHOPLANE_THREADS must be a positive integer");
#ifdef _OPENMP
  omp_set_num_threads(static_cast<int>(n));
#endif
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  Options opt;
  CLI::App app{"Triplane fields, orthogonal attention and toy triplane diffusion"};
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opt.config, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", opt.seed, "overrides the config seed");
    cmd->add_option("--out", opt.out, "output directory (overrides the config)");
  };
  auto add_checkpoint = [&](CLI::App* cmd) {
    cmd->add_option("--checkpoint", opt.checkpoint, "checkpoint file");
  };

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gradcheck->add_option("--scope", opt.scope, "all, numerics, attention, renderer or diffusion")
      ->check(CLI::IsMember({"all", "numerics", "attention", "renderer", "diffusion"}));
  gradcheck->add_option("--seed", opt.seed, "input seed");
  gradcheck->add_option("--out", opt.out, "also write gradcheck.txt here");
  gradcheck->add_option("--corrupt-adjoint", opt.corrupt_adjoint)->group("");

  auto* fit = app.add_subcommand("fit", "fit a triplane field to oracle views");
  add_common(fit);

  auto* render = app.add_subcommand("render", "render a scene checkpoint at orbit poses");
  add_common(render);
  add_checkpoint(render);
  render->add_option("--azimuth", opt.azimuths, "degrees, comma separated")->delimiter(',');
  render->add_option("--elevation", opt.elevation, "degrees");
  render->add_option("--size", opt.size, "image side in pixels")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "score a scene checkpoint against the oracle");
  add_common(eval);
  add_checkpoint(eval);

  auto* diffusion = app.add_subcommand("diffusion", "toy triplane diffusion");
  diffusion->require_subcommand(1);
  auto* train = diffusion->add_subcommand("train", "train the denoiser");
  add_common(train);
  auto* sample = diffusion->add_subcommand("sample", "sample triplanes from a denoiser");
  add_common(sample);
  add_checkpoint(sample);
  auto* ablate = diffusion->add_subcommand("ablate", "paired OA-on/OA-off training");
  add_common(ablate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    apply_thread_override();
    if (gradcheck->parsed()) return cmd_gradcheck(opt);
    if (fit->parsed()) return cmd_fit(opt);
    if (render->parsed()) return cmd_render(opt);
    if (eval->parsed()) return cmd_eval(opt);
    if (train->parsed()) return cmd_diffusion_train(opt);
    if (sample->parsed()) return cmd_diffusion_sample(opt);
    if (ablate->parsed()) return cmd_diffusion_ablate(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kConfigError;
}
