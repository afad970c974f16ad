#include "orthoplane/training.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "orthoplane/ops.hpp"

namespace orthoplane {

RenderTensors to_tensors(const RenderOutput& out) {
  return {Tensor::from({out.height, out.width, 3}, out.image),
          Tensor::from({out.height, out.width}, out.mask),
          Tensor::from({out.height, out.width}, out.depth)};
}

void LossWeights::validate() const {
  if (!(mask >= 0.0 && depth >= 0.0 && perceptual >= 0.0)) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

Tensor mse(const Tensor& a, const Tensor& b) {
  auto d = ops::sub(a, b);
  return ops::mean(ops::mul(d, d));
}

Tensor avg_pool(const Tensor& image, std::size_t k) {
  if (image.rank() != 3 || k == 0 || image.dim(0) % k != 0 || image.dim(1) % k != 0) {
    throw std::invalid_argument("avg_pool: expected [H x W x C] with H, W multiples of " +
                                std::to_string(k) + ", got " + shape_str(image.shape()));
  }
  const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
  const std::size_t ph = h / k, pw = w / k;
  const Real inv = 1.0 / static_cast<Real>(k * k);
  std::vector<Real> out(ph * pw * c, 0.0);
  const Real* x = image.data().data();
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t ch = 0; ch < c; ++ch)
        out[((i / k) * pw + j / k) * c + ch] += inv * x[(i * w + j) * c + ch];
  auto in = image.impl();
  return make_result("avg_pool", {ph, pw, c}, std::move(out), {image},
                     [in, h, w, c, k, pw, inv](const TensorImpl& o) {
                       auto& g = in->grad_buffer();
                       for (std::size_t i = 0; i < h; ++i)
                         for (std::size_t j = 0; j < w; ++j)
                           for (std::size_t ch = 0; ch < c; ++ch)
                             g[(i * w + j) * c + ch] += inv * o.grad[((i / k) * pw + j / k) * c + ch];
                     });
}

PerceptualHook pooled_mse_hook(std::size_t factor) {
  return [factor](const Tensor& pred, const Tensor& gt) {
    return mse(avg_pool(pred, factor), avg_pool(gt, factor));
  };
}

Tensor render_loss(const std::vector<RenderTensors>& pred, const std::vector<RenderTensors>& gt,
                   const LossWeights& weights) {
  weights.validate();
  if (pred.empty() || pred.size() != gt.size()) {
    throw std::invalid_argument("render_loss: need matching, non-empty view lists");
  }
  Tensor total;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto term = mse(pred[i].image, gt[i].image);
    term = ops::add(term, ops::scale(mse(pred[i].mask, gt[i].mask), weights.mask));
    term = ops::add(term, ops::scale(mse(pred[i].depth, gt[i].depth), weights.depth));
    if (weights.hook) {
      term = ops::add(term, ops::scale(weights.hook(pred[i].image, gt[i].image),
                                       weights.perceptual));
    }
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

Real render_loss(const std::vector<RenderOutput>& pred, const std::vector<RenderOutput>& gt,
                 const LossWeights& weights) {
  std::vector<RenderTensors> p, g;
  for (const auto& v : pred) p.push_back(to_tensors(v));
  for (const auto& v : gt) g.push_back(to_tensors(v));
  NoGradGuard no_grad;
  return render_loss(p, g, weights).item();
}

Tensor ray_batch_loss(const Tensor& pred, const Tensor& gt, const LossWeights& weights) {
  weights.validate();
  if (pred.shape() != gt.shape() || pred.rank() != 2 || pred.dim(1) != 5) {
    throw std::invalid_argument("ray_batch_loss: expected matching [R x 5] batches, got " +
                                shape_str(pred.shape()) + " vs " + shape_str(gt.shape()));
  }
  auto term = mse(ops::slice(pred, 1, 0, 3), ops::slice(gt, 1, 0, 3));
  term = ops::add(term, ops::scale(mse(ops::slice(pred, 1, 3, 1), ops::slice(gt, 1, 3, 1)),
                                   weights.mask));
  return ops::add(term, ops::scale(mse(ops::slice(pred, 1, 4, 1), ops::slice(gt, 1, 4, 1)),
                                   weights.depth));
}

AdamW::AdamW(std::vector<ParamGroup> groups, Real beta1, Real beta2, Real eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    std::vector<std::vector<Real>> m, v;
    for (const auto& p : g.params) {
      if (!p.is_leaf()) throw std::invalid_argument("AdamW: parameters must be leaf tensors");
      m.emplace_back(p.size(), 0.0);
      v.emplace_back(p.size(), 0.0);
    }
    m_.push_back(std::move(m));
    v_.push_back(std::move(v));
  }
}

bool AdamW::step() {
  for (const auto& g : groups_) {
    for (const auto& p : g.params) {
      if (!p.has_grad()) continue;
      for (Real x : p.grad()) {
        if (!std::isfinite(x)) {
          ++incidents_;
          return false;
        }
      }
    }
  }
  ++steps_;
  const Real t = static_cast<Real>(steps_);
  const Real c1 = 1.0 - std::pow(beta1_, t);
  const Real c2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    const auto& g = groups_[gi];
    for (std::size_t pi = 0; pi < g.params.size(); ++pi) {
      auto p = g.params[pi];
      auto values = p.mutable_data();
      auto& m = m_[gi][pi];
      auto& v = v_[gi][pi];
      const bool has = p.has_grad();
      const Real* grad = has ? p.grad().data() : nullptr;
      const Real decay = 1.0 - g.lr * g.weight_decay;
      for (std::size_t i = 0; i < values.size(); ++i) {
        const Real gr = has ? grad[i] : 0.0;
        values[i] *= decay;
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * gr;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * gr * gr;
        const Real mhat = m[i] / c1;
        const Real vhat = v[i] / c2;
        values[i] -= g.lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }
  return true;
}

void AdamW::zero_grad() {
  for (auto& g : groups_)
    for (auto& p : g.params) p.zero_grad();
}

namespace {

struct PixelRef {
  std::size_t view;
  std::size_t pixel;
};

Tensor target_rows(const std::vector<TrainView>& views, const std::vector<PixelRef>& refs) {
  std::vector<Real> rows;
  rows.reserve(refs.size() * 5);
  for (const auto& r : refs) {
    const auto& t = views[r.view].target;
    rows.insert(rows.end(), {t.image[r.pixel * 3], t.image[r.pixel * 3 + 1],
                             t.image[r.pixel * 3 + 2], t.mask[r.pixel], t.depth[r.pixel]});
  }
  return Tensor::from({refs.size(), 5}, std::move(rows));
}

std::vector<std::vector<Real>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<Real>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void restore(const std::vector<Tensor>& params, const std::vector<std::vector<Real>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = Tensor(params[i]).mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

FitResult fit_scene(const std::vector<TrainView>& views, const FitConfig& cfg) {
  if (views.size() < 2) throw std::invalid_argument("fit_scene: need at least two views");
  if (cfg.batch_rays == 0 || cfg.samples == 0 || cfg.validate_every == 0) {
    throw std::invalid_argument("fit_scene: batch size, samples and validation period must be > 0");
  }
  cfg.weights.validate();
  Rng rng(cfg.seed);
  const std::size_t d = cfg.resolution, c = cfg.channels;
  Triplane tri(nn::normal({3, d, d, c}, cfg.init_std, rng));
  FieldHeads heads =
      FieldHeads::init(c, cfg.hidden, cfg.depth, cfg.frequencies, rng, cfg.density_bias);

  std::vector<std::vector<Ray>> rays;
  std::vector<PixelRef> all;
  for (std::size_t v = 0; v < views.size(); ++v) {
    rays.push_back(generate_rays(views[v].camera));
    const auto& t = views[v].target;
    if (t.height != views[v].camera.height || t.width != views[v].camera.width) {
      throw std::invalid_argument("fit_scene: target size does not match its camera");
    }
    for (std::size_t p = 0; p < rays.back().size(); ++p) all.push_back({v, p});
  }
  auto gather = [&](const std::vector<PixelRef>& refs) {
    std::vector<Ray> out;
    out.reserve(refs.size());
    for (const auto& r : refs) out.push_back(rays[r.view][r.pixel]);
    return out;
  };

  Rng val_rng(cfg.seed ^ 0x5eedf00dULL);
  std::vector<PixelRef> val_refs;
  for (std::size_t i = 0; i < std::min(cfg.validation_rays, all.size()); ++i) {
    val_refs.push_back(all[val_rng.below(all.size())]);
  }
  const auto val_rays = gather(val_refs);
  const auto val_target = target_rows(views, val_refs);

  std::vector<Tensor> params{tri.tensor()};
  const auto head_params = heads.parameters();
  params.insert(params.end(), head_params.begin(), head_params.end());
  AdamW opt({{{tri.tensor()}, cfg.lr_triplane, cfg.weight_decay},
             {head_params, cfg.lr_heads, cfg.weight_decay}});

  FitResult result{tri, heads, {}, std::numeric_limits<Real>::infinity(), 0, 0, 0, false, ""};
  auto best = snapshot(params);
  auto validate = [&](std::size_t step) {
    NoGradGuard no_grad;
    auto pred = render_rays(tri, heads, val_rays, {cfg.samples, false});
    const Real loss = ray_batch_loss(pred, val_target, cfg.weights).item();
    if (std::isfinite(loss) && loss < result.best_validation) {
      result.best_validation = loss;
      result.best_step = step;
      best = snapshot(params);
    }
  };

  Real window = 0.0;
  std::size_t window_count = 0;
  const RenderSettings train_settings{cfg.samples, cfg.stratified};
  for (std::size_t step = 1; step <= cfg.iterations; ++step) {
    std::vector<PixelRef> refs(cfg.batch_rays);
    for (auto& r : refs) r = all[rng.below(all.size())];
    auto pred = render_rays(tri, heads, gather(refs), train_settings, &rng);
    auto loss = ray_batch_loss(pred, target_rows(views, refs), cfg.weights);
    const Real value = loss.item();
    if (!std::isfinite(value)) {
      result.diverged = true;
      result.diagnostic = "training loss became non-finite at step " + std::to_string(step);
      break;
    }
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.steps_run = step;
    window += value;
    if (++window_count == 100) {
      result.window_loss.push_back(window / 100.0);
      window = 0.0;
      window_count = 0;
    }
    if (step % cfg.validate_every == 0 || step == cfg.iterations) validate(step);
  }
  if (window_count > 0) result.window_loss.push_back(window / static_cast<Real>(window_count));
  if (result.steps_run == 0 || !std::isfinite(result.best_validation)) validate(0);
  result.incidents = opt.incidents();
  restore(params, best);
  return result;
}

Real mean_density(const Triplane& tri, const FieldHeads& heads, std::size_t grid) {
  NoGradGuard no_grad;
  std::vector<Real> pts;
  pts.reserve(grid * grid * grid * 3);
  auto coord = [grid](std::size_t i) {
    return -1.0 + (2.0 * static_cast<Real>(i) + 1.0) / static_cast<Real>(grid);
  };
  for (std::size_t i = 0; i < grid; ++i)
    for (std::size_t j = 0; j < grid; ++j)
      for (std::size_t k = 0; k < grid; ++k) pts.insert(pts.end(), {coord(i), coord(j), coord(k)});
  auto f = field_eval(tri, heads, Tensor::from({grid * grid * grid, 3}, std::move(pts)));
  return ops::mean(f.sigma).item();
}

Real psnr(const std::vector<Real>& a, const std::vector<Real>& b) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: size mismatch");
  Real sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += (a[i] - b[i]) * (a[i] - b[i]);
  const Real err = sum / static_cast<Real>(a.size());
  if (err == 0.0) return std::numeric_limits<Real>::infinity();
  return -10.0 * std::log10(err);
}

void write_scene_checkpoint(std::ostream& out, const Triplane& tri, const FieldHeads& heads) {
  write_triplane(out, tri);
  write_heads(out, heads);
}

void write_scene_checkpoint(const std::filesystem::path& path, const Triplane& tri,
                            const FieldHeads& heads) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_scene_checkpoint(out, tri, heads);
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

SceneCheckpoint read_scene_checkpoint(std::istream& in) {
  SceneCheckpoint ckpt{read_triplane(in), read_heads(in)};
  if (ckpt.heads.input_width() != ckpt.heads.encoding.width() + 3 * ckpt.triplane.channels()) {
    throw std::runtime_error("checkpoint: heads input width does not match triplane channels C");
  }
  return ckpt;
}

SceneCheckpoint read_scene_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  return read_scene_checkpoint(in);
}

}  // namespace orthoplane
