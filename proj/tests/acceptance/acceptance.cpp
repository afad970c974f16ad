// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <malloc.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>

#include "orthoplane/attention.hpp"
#include "orthoplane/config.hpp"
#include "orthoplane/grad_suite.hpp"
#include "orthoplane/pipeline.hpp"
#include "support/oa_reference.hpp"

namespace fs = std::filesystem;
using namespace orthoplane;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

Real seconds_since(Clock::time_point t0) {
  return std::chrono::duration<Real>(Clock::now() - t0).count();
}

std::string fmt(const char* f, Real a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

RunConfig shipped(const std::string& name) { return load_config(fs::path(ORTHOPLANE_CONFIG_DIR) / name); }

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  const auto entries = run_grad_suite("all", 0);
  const Real elapsed = seconds_since(t0);
  Real worst_primitive = 0.0, worst_composed = 0.0;
  std::string failed;
  for (const auto& e : entries) {
    auto& worst = e.tolerance == kPrimitiveTolerance ? worst_primitive : worst_composed;
    worst = std::max(worst, e.error);
    if (!e.passed()) failed += " " + e.scope + "/" + e.name;
  }
  const bool pass = failed.empty() && elapsed < 120.0;
  return {pass, std::to_string(entries.size()) + " checks, worst primitive " +
                    fmt("%.2e", worst_primitive) + ", worst composed " +
                    fmt("%.2e", worst_composed) + ", " + fmt("%.1fs", elapsed) +
                    (failed.empty() ? "" : ", failed:" + failed)};
}

Outcome oa_equivalence() {
  const auto t0 = Clock::now();
  Real worst = 0.0;
  for (std::size_t d = 1; d <= 4; ++d) {
    for (std::size_t c = 1; c <= 2; ++c) {
      for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed * 1009 + d * 17 + c);
        Triplane tri(d, c);
        for (auto& v : tri.tensor().mutable_data()) v = rng.uniform(-1, 1);
        auto params = AttentionParams::init(c, c, 4, rng, 1, false);
        const std::size_t cli = default_cross_line_index(d);
        const auto fast = orthogonal_attention(tri, params, cli).tensor();
        const auto slow = oracle::brute_force_orthogonal_attention(tri, params, cli).tensor();
        for (std::size_t i = 0; i < fast.size(); ++i) {
          worst = std::max(worst, std::abs(fast[i] - slow[i]));
        }
      }
    }
  }
  const Real elapsed = seconds_since(t0);
  return {worst < 1e-10 && elapsed < 60.0,
          "800 cases, max abs deviation " + fmt("%.2e", worst) + ", " + fmt("%.2fs", elapsed)};
}

Real slab_mask(std::size_t n, Real sigma) {
  Ray ray{Vec3::Zero(), Vec3::UnitX(), 0.0, 3.0};
  const auto ts = sample_points(ray, n, false, nullptr);
  std::vector<Real> sigmas(n);
  for (std::size_t j = 0; j < n; ++j) sigmas[j] = (ts[j] >= 1.0 && ts[j] <= 2.0) ? sigma : 0.0;
  return integrate_ray(sigmas, std::vector<Vec3>(n, Vec3::Ones()), ts, 3.0).mask;
}

Outcome slab_physics() {
  const Real sigma = 2.0, exact = 1.0 - std::exp(-sigma);
  const Real e16 = std::abs(slab_mask(16, sigma) - exact);
  const Real e64 = std::abs(slab_mask(64, sigma) - exact);
  const Real e256 = std::abs(slab_mask(256, sigma) - exact);
  const Real rel = e256 / exact;
  return {rel < 0.01 && e16 > e64 && e64 > e256,
          "relative error n=256 " + fmt("%.2e", rel) + ", abs errors 16/64/256 " +
              fmt("%.3e", e16) + " " + fmt("%.3e", e64) + " " + fmt("%.3e", e256)};
}

Outcome cube_fit() {
  const auto t0 = Clock::now();
  const auto report = run_fit(shipped("cube.cfg"));
  const Real elapsed = seconds_since(t0);
  const bool pass = !report.fit.diverged && report.min_heldout >= 25.0 &&
                    report.min_unseen >= 22.0 && elapsed <= 900.0;
  return {pass, "held-out min " + fmt("%.2f", report.min_heldout) + " dB, unseen min " +
                    fmt("%.2f", report.min_unseen) + " dB, " + fmt("%.0fs", elapsed)};
}

Outcome diffusion_objectives() {
  const auto t0 = Clock::now();
  // All-planes loss against the three single-plane losses.
  Rng rng(5);
  DenoiserConfig dc;
  dc.resolution = 4;
  dc.channels = 2;
  dc.hidden = 8;
  dc.levels = 1;
  dc.key_dim = 4;
  dc.text_width = 6;
  dc.time_width = 8;
  dc.cross_line_index = 2;
  auto denoiser = Denoiser::init(dc, rng);
  for (auto& [name, t] : denoiser.named_parameters()) {
    for (auto& v : Tensor(t).mutable_data()) v += 0.2 * rng.normal();
  }
  const auto sched = make_schedule(20, 1e-3, 0.05);
  const auto text = encode_caption("a small blue box", toy_text_table(dc.text_width));
  bool exact = true;
  for (int trial = 0; trial < 20; ++trial) {
    Triplane x0(Tensor::from({3, 4, 4, 2}, rng.normals(96)));
    Triplane eps(Tensor::from({3, 4, 4, 2}, rng.normals(96)));
    const std::size_t t = 1 + rng.below(20);
    const auto model = denoiser.model();
    const Real all = epsilon_loss(model, x0, text, t, eps, sched).item();
    Real sum = 0.0;
    for (auto p : {PlaneId::xy, PlaneId::xz, PlaneId::yz}) {
      sum += epsilon_loss(model, x0, text, t, eps, sched, LossMode::single_plane, p).item();
    }
    exact &= all == sum;
  }

  // Variance preservation over 1e5 draws.
  const std::size_t n = 100000;
  const auto x0 = Tensor::from({n}, rng.normals(n));
  const auto noise = Tensor::from({n}, rng.normals(n));
  const auto full = make_schedule(100, 1e-4, 0.02);
  Real worst_var = 0.0;
  for (std::size_t t : {1u, 25u, 50u, 100u}) {
    const auto xt = noise_mix(x0, noise, full.alpha_bar(t));
    Real mean = 0.0, sq = 0.0;
    for (Real v : xt.data()) mean += v;
    mean /= static_cast<Real>(n);
    for (Real v : xt.data()) sq += (v - mean) * (v - mean);
    worst_var = std::max(worst_var, std::abs(sq / static_cast<Real>(n - 1) - 1.0));
  }

  // Single-example memorization.
  const auto cfg = shipped("memorize.cfg");
  const auto result = train_denoiser(diffusion_dataset(cfg), diffusion_train_config(cfg));
  const Real elapsed = seconds_since(t0);
  const bool pass = exact && worst_var < 0.02 && !result.diverged && result.final_loss < 0.1 &&
                    result.steps_run <= 2000 && elapsed <= 300.0;
  return {pass, std::string("all-planes sum ") + (exact ? "exact" : "MISMATCH") +
                    ", variance deviation " + fmt("%.4f", worst_var) + ", memorization loss " +
                    fmt("%.4f", result.final_loss) + " after " +
                    std::to_string(result.steps_run) + " steps, " + fmt("%.0fs", elapsed)};
}

Outcome oa_ablation() {
  const auto t0 = Clock::now();
  const auto report = run_ablation(shipped("ablation.cfg"));
  const Real elapsed = seconds_since(t0);
  const Real reduction = report.relative_reduction();
  const bool pass = report.consistency_with_oa < report.consistency_without_oa &&
                    reduction >= 0.25 && elapsed <= 600.0;
  return {pass, "consistency OA on " + fmt("%.4f", report.consistency_with_oa) + ", off " +
                    fmt("%.4f", report.consistency_without_oa) + ", reduction " +
                    fmt("%.1f%%", 100.0 * reduction) + ", " + fmt("%.0fs", elapsed)};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int cli(const std::string& args) {
  const std::string cmd = std::string(ORTHOPLANE_CLI) + " " + args + " > /dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Byte comparison of two output trees; returns a description of the first
// difference or an empty string.
std::string compare_trees(const fs::path& a, const fs::path& b, std::size_t* files) {
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) names.insert(e.path().filename().string());
  for (const auto& e : fs::directory_iterator(b)) names.insert(e.path().filename().string());
  for (const auto& name : names) {
    if (!fs::exists(a / name) || !fs::exists(b / name)) return name + " missing";
    if (slurp(a / name) != slurp(b / name)) return name + " differs";
  }
  *files = names.size();
  return "";
}

Outcome determinism() {
  const fs::path work = fs::absolute("acceptance_work");
  fs::remove_all(work);
  const std::string cfg = std::string(" --config ") + ORTHOPLANE_CONFIG_DIR + "/smoke.cfg";
  std::string problem;
  std::size_t compared = 0;
  for (const char* run : {"a", "b"}) {
    const auto dir = (work / run).string();
    const int codes[] = {
        cli("fit" + cfg + " --out " + dir),
        cli("render" + cfg + " --checkpoint " + dir + "/scene.ckpt --azimuth 0,90,180,270,360,41.5" +
            " --elevation 10 --size 24 --out " + dir),
        cli("diffusion train" + cfg + " --out " + dir),
        cli("diffusion sample" + cfg + " --out " + dir),
    };
    for (int c : codes) {
      if (c != 0 && problem.empty()) problem = "cli exit code " + std::to_string(c);
    }
  }
  if (problem.empty()) problem = compare_trees(work / "a", work / "b", &compared);

  // Image formats.
  const auto rgb = slurp(work / "a" / "render_az90_el10_rgb.ppm");
  const auto mask = slurp(work / "a" / "render_az90_el10_mask.pgm");
  if (problem.empty() && (rgb.rfind("P6\n", 0) != 0 || mask.rfind("P5\n", 0) != 0)) {
    problem = "render outputs are not P6/P5";
  }
  if (problem.empty() && slurp(work / "a" / "render_az0_el10_rgb.ppm") !=
                             slurp(work / "a" / "render_az360_el10_rgb.ppm")) {
    problem = "azimuth 0 and 360 differ";
  }

  // Checkpoint round trip against the in-memory render.
  const auto smoke = shipped("smoke.cfg");
  const auto report = run_fit(smoke);
  std::stringstream buf;
  write_scene_checkpoint(buf, report.fit.triplane, report.fit.heads);
  const auto loaded = read_scene_checkpoint(buf);
  bool round_trip = true;
  for (Real az : {0.0, 123.4}) {
    const auto mem = render_orbit(report.fit.triplane, report.fit.heads, smoke, az, 20.0, 20);
    const auto disk = render_orbit(loaded.triplane, loaded.heads, smoke, az, 20.0, 20);
    round_trip &= mem.image == disk.image && mem.mask == disk.mask && mem.depth == disk.depth;
  }
  if (problem.empty() && !round_trip) problem = "checkpoint render differs from in-memory render";
  if (problem.empty() && slurp(work / "a" / "fit_metrics.txt") != fit_metrics(report).str()) {
    problem = "in-process metrics differ from the cli metrics";
  }
  return {problem.empty(), problem.empty() ? std::to_string(compared) +
                                                 " output files bit-identical across runs, "
                                                 "checkpoint round trip bit-identical"
                                           : problem};
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  const std::function<Outcome()> criteria[] = {gradient_suite, oa_equivalence, slab_physics,
                                               cube_fit,       diffusion_objectives,
                                               oa_ablation,    determinism};
  const char* names[] = {"gradient suite",       "OA oracle equivalence", "volume rendering physics",
                         "scene fitting",        "diffusion objectives",  "OA ablation",
                         "determinism and formats"};
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  bool all_pass = true;
  for (int i = 0; i < 7; ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %d %-25s %s  %s\n", i + 1, names[i], o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
    all_pass &= o.pass;
  }
  return all_pass ? 0 : 1;
}
