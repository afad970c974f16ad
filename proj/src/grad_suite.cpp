#include "orthoplane/grad_suite.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <functional>
#include <stdexcept>

#include "orthoplane/attention.hpp"
#include "orthoplane/diffusion.hpp"
#include "orthoplane/grad_check.hpp"
#include "orthoplane/ops.hpp"
#include "orthoplane/renderer.hpp"
#include "orthoplane/training.hpp"

namespace orthoplane {

namespace {

struct Case {
  std::string name;
  std::function<Tensor()> f;
  std::vector<Tensor> params;
  Real tolerance;
};

Tensor uniform(Shape shape, Rng& rng, Real lo = -1.0, Real hi = 1.0) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Magnitudes in [0.1, 1] with random sign keep relu and clamp kinks out of
// the finite-difference stencil.
Tensor off_kink(Shape shape, Rng& rng) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) {
    x = rng.uniform(0.1, 1.0);
    if (rng.uniform() < 0.5) x = -x;
  }
  return Tensor::from(std::move(shape), std::move(v));
}

// Random linear functional of y, so that every output coordinate matters.
std::function<Tensor(const Tensor&)> probe(Rng& rng) {
  const auto seed = rng.next();
  return [seed](const Tensor& y) {
    Rng r(seed);
    return ops::sum(ops::mul(y, uniform(y.shape(), r)));
  };
}

std::vector<Case> numerics_cases(Rng& rng) {
  auto a = uniform({3, 4}, rng), b = uniform({3, 4}, rng), m = uniform({4, 2}, rng);
  auto row = uniform({4}, rng), pos = uniform({3, 4}, rng, 0.2, 2.0);
  auto kinked = off_kink({3, 4}, rng);
  auto q = uniform({5, 4}, rng), k = uniform({6, 4}, rng), v = uniform({6, 2}, rng);
  ops::KeyIndex index;
  for (std::uint32_t n = 0; n < 5; ++n) index.push_query({n, (n + 2) % 6, 5});
  const Real p = kPrimitiveTolerance;
  auto w = [&] { return probe(rng); };
  auto f1 = w(), f2 = w(), f3 = w(), f4 = w(), f5 = w(), f6 = w(), f7 = w(), f8 = w(), f9 = w(),
       f10 = w(), f11 = w(), f12 = w(), f13 = w(), f14 = w(), f15 = w(), f16 = w(), f17 = w(),
       f18 = w(), f19 = w(), f20 = w(), f21 = w(), f22 = w(), f23 = w(), f24 = w();
  return {
      {"add", [=] { return f1(ops::add(a, b)); }, {a, b}, p},
      {"sub", [=] { return f2(ops::sub(a, b)); }, {a, b}, p},
      {"mul", [=] { return f3(ops::mul(a, b)); }, {a, b}, p},
      {"scalar_mul", [=] { return f4(ops::mul(ops::slice(row, 0, 0, 1), a)); }, {a, row}, p},
      {"matmul", [=] { return f5(ops::matmul(a, m)); }, {a, m}, p},
      {"transpose", [=] { return f6(ops::transpose(a)); }, {a}, p},
      {"concat", [=] { return f7(ops::concat({a, b}, 0)); }, {a, b}, p},
      {"exp", [=] { return f8(ops::exp(a)); }, {a}, p},
      {"log", [=] { return f9(ops::log(pos)); }, {pos}, p},
      {"softplus", [=] { return f10(ops::softplus(a)); }, {a}, p},
      {"sigmoid", [=] { return f11(ops::sigmoid(a)); }, {a}, p},
      {"relu", [=] { return f12(ops::relu(kinked)); }, {kinked}, p},
      {"clamp", [=] { return f13(ops::clamp(kinked, -0.05, 0.05)); }, {kinked}, p},
      {"layer_norm", [=] { return f14(ops::layer_norm(a)); }, {a}, p},
      {"softmax", [=] { return f15(ops::softmax(a, 1)); }, {a}, p},
      {"mean", [=] { return ops::mean(ops::mul(a, a)); }, {a}, p},
      {"sum_axis", [=] { return f16(ops::sum_axis(a, 1)); }, {a}, p},
      {"slice", [=] { return f17(ops::slice(a, 1, 1, 2)); }, {a}, p},
      {"gather_rows", [=] { return f18(ops::gather_rows(a, {2, -1, 0, 2})); }, {a}, p},
      {"reshape", [=] { return f19(ops::reshape(a, {2, 6})); }, {a}, p},
      {"cumsum_exclusive", [=] { return f20(ops::cumsum_exclusive(a, 1)); }, {a}, p},
      {"add_rowwise", [=] { return f21(ops::add_rowwise(a, row)); }, {a, row}, p},
      {"mul_rowwise", [=] { return f22(ops::mul_rowwise(a, row)); }, {a, row}, p},
      {"sparse_attention", [=] { return f23(ops::sparse_attention(q, k, v, index, 2)); },
       {q, k, v}, p},
      {"neg_scale_shift", [=] { return f24(ops::add_scalar(ops::scale(ops::neg(a), 1.7), 0.3)); },
       {a}, p},
  };
}

Triplane random_planes(std::size_t d, std::size_t c, Rng& rng) {
  auto t = nn::normal({3, d, d, c}, 1.0, rng);
  return Triplane(t);
}

std::vector<Case> attention_cases(Rng& rng) {
  auto tri = random_planes(3, 2, rng);
  auto oa = AttentionParams::init(2, 2, 4, rng, 2, false);
  auto text = TextEmbedding{nn::normal({3, 5}, 1.0, rng)};
  auto cross = AttentionParams::init(2, 5, 4, rng, 1, false);
  auto refine_tri = random_planes(4, 4, rng);
  auto refine = RefineParams::init(2, 4, 4, 5, 4, 8, rng);
  for (auto& b : refine.blocks) {
    b.cross.w_o = nn::normal({4, 4}, 0.5, rng);
    b.orth.w_o = nn::normal({4, 4}, 0.5, rng);
    b.mlp_out = nn::Linear::init(8, 4, rng);
  }
  auto f1 = probe(rng), f2 = probe(rng), f3 = probe(rng);
  auto with = [](std::vector<Tensor> ps, const Tensor& extra) {
    ps.push_back(extra);
    return ps;
  };
  return {
      {"orthogonal_attention", [=] { return f1(orthogonal_attention(tri, oa, 1).tensor()); },
       with(oa.parameters(), tri.tensor()), kPrimitiveTolerance},
      {"cross_attention", [=] { return f2(cross_attention(tri, text, cross).tensor()); },
       with(with(cross.parameters(), tri.tensor()), text.tokens), kPrimitiveTolerance},
      {"transformer_refine",
       [=] { return f3(transformer_refine(refine_tri, text, refine).tensor()); },
       with(refine.parameters(), refine_tri.tensor()), kComposedTolerance},
  };
}

std::vector<Case> renderer_cases(Rng& rng) {
  auto tri = random_planes(4, 2, rng);
  auto heads = FieldHeads::init(2, 8, 1, 2, rng);
  // Texel coordinates away from cell boundaries.
  auto pts = Tensor::from({3, 3}, {-0.8, 0.0667, 0.4, 0.0667, -0.8, -0.1, 0.2, 0.5, -0.45});
  const std::size_t rays = 3, n = 6;
  std::vector<Real> ts(rays * n), far(rays);
  for (std::size_t r = 0; r < rays; ++r) {
    Real t = 0.2;
    for (std::size_t j = 0; j < n; ++j) {
      ts[r * n + j] = t;
      t += rng.uniform(0.05, 0.3);
    }
    far[r] = t;
  }
  auto sigma = uniform({rays, n}, rng, 0.1, 4.0);
  auto color = uniform({rays, n, 3}, rng, 0.0, 1.0);
  auto small = random_planes(5, 2, rng);
  auto small_heads = FieldHeads::init(2, 8, 1, 0, rng);
  auto cam = look_at(Vec3(2.1, 0.7, 0.9), Vec3::Zero(), 0.7, 4, 4);
  const auto cam_rays = generate_rays(cam);
  RenderOutput target = RenderOutput::blank(4, 4);
  for (auto& v : target.image) v = rng.uniform();
  for (auto& v : target.mask) v = rng.uniform();
  for (auto& v : target.depth) v = rng.uniform(2.0, 4.0);
  const auto gt = to_tensors(target);
  auto f1 = probe(rng), f2 = probe(rng), f3 = probe(rng);
  std::vector<Tensor> field_params = heads.parameters();
  field_params.push_back(tri.tensor());
  return {
      {"sample_triplane", [=] { return f1(sample_triplane(tri, pts)); }, {tri.tensor()},
       kPrimitiveTolerance},
      {"integrate_rays", [=] { return f2(integrate_rays(sigma, color, ts, far)); },
       {sigma, color}, kPrimitiveTolerance},
      {"field_eval",
       [=] {
         auto s = field_eval(tri, heads, pts);
         return ops::add(ops::sum(s.sigma), f3(s.color));
       },
       field_params, kComposedTolerance},
      {"render_rays", [=] { return ops::mean(render_rays(small, small_heads, cam_rays, {12, false})); },
       {small.tensor()}, kComposedTolerance},
      {"render_loss",
       [=] {
         auto rows = render_rays(small, small_heads, cam_rays, {12, false});
         RenderTensors pred{ops::reshape(ops::slice(rows, 1, 0, 3), {4, 4, 3}),
                            ops::reshape(ops::slice(rows, 1, 3, 1), {4, 4}),
                            ops::reshape(ops::slice(rows, 1, 4, 1), {4, 4})};
         LossWeights weights;
         weights.hook = pooled_mse_hook(2);
         return render_loss({pred}, {gt}, weights);
       },
       {small.tensor()}, kComposedTolerance},
  };
}

std::vector<Case> diffusion_cases(Rng& rng) {
  DenoiserConfig cfg;
  cfg.resolution = 4;
  cfg.channels = 2;
  cfg.hidden = 6;
  cfg.levels = 1;
  cfg.key_dim = 4;
  cfg.text_width = 5;
  cfg.time_width = 4;
  cfg.adapters = true;
  cfg.cross_line_index = 2;
  auto d = Denoiser::init(cfg, rng);
  for (auto& [name, t] : d.named_parameters()) {
    bool zero = true;
    for (auto v : t.data()) zero &= v == 0.0;
    if (zero)
      for (auto& v : Tensor(t).mutable_data()) v = 0.3 * rng.normal();
  }
  auto x0 = random_planes(4, 2, rng);
  auto eps = random_planes(4, 2, rng);
  x0.tensor().set_requires_grad(false);
  eps.tensor().set_requires_grad(false);
  const auto sched = make_schedule(10, 1e-3, 0.05);
  const TextEmbedding text{uniform({3, 5}, rng)};
  const auto model = d.model();
  return {
      {"epsilon_loss", [=] { return epsilon_loss(model, x0, text, 4, eps, sched); },
       d.parameters(), kComposedTolerance},
  };
}

// Smallest |input| over every relu on the graph of f().
Real relu_margin(const Case& c) {
  Real margin = std::numeric_limits<Real>::infinity();
  for (const auto& t : topological_order(c.f())) {
    if (!t->grad_fn || t->grad_fn->name != "relu") continue;
    for (Real v : t->grad_fn->inputs[0]->data) margin = std::min(margin, std::abs(v));
  }
  return margin;
}

constexpr Real kKinkMargin = 1e-3;
constexpr int kMaxDraws = 64;

}  // namespace

std::vector<GradCheckEntry> run_grad_suite(const std::string& scope, std::uint64_t seed) {
  const bool all = scope == "all";
  if (!all && scope != "numerics" && scope != "attention" && scope != "renderer" &&
      scope != "diffusion") {
    throw std::invalid_argument("unknown gradcheck scope '" + scope +
                                "' (all, numerics, attention, renderer, diffusion)");
  }
  std::vector<GradCheckEntry> out;
  auto run = [&](const std::string& name, std::vector<Case> (*make)(Rng&)) {
    if (!all && scope != name) return;
    // Redraw until no relu input sits within the finite-difference stencil.
    std::vector<Case> cases;
    for (int draw = 0; draw < kMaxDraws; ++draw) {
      Rng rng(seed + 0x9e3779b97f4a7c15ULL * static_cast<std::uint64_t>(draw));
      cases = make(rng);
      bool clear = true;
      for (const auto& c : cases) clear &= relu_margin(c) > kKinkMargin;
      if (clear) break;
    }
    for (auto& c : cases) {
      out.push_back({name, c.name, grad_check(c.f, c.params), c.tolerance});
    }
  };
  run("numerics", numerics_cases);
  run("attention", attention_cases);
  run("renderer", renderer_cases);
  run("diffusion", diffusion_cases);
  return out;
}

std::string format_grad_report(const std::vector<GradCheckEntry>& entries) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %-22s %-12s %-10s %s\n", "scope", "op", "max_rel_err",
                "tolerance", "status");
  out += line;
  std::size_t failed = 0;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%-10s %-22s %-12.3e %-10.0e %s\n", e.scope.c_str(),
                  e.name.c_str(), e.error, e.tolerance, e.passed() ? "pass" : "FAIL");
    out += line;
    failed += e.passed() ? 0 : 1;
  }
  std::snprintf(line, sizeof line, "checked=%zu failed=%zu\n", entries.size(), failed);
  out += line;
  return out;
}

}  // namespace orthoplane
