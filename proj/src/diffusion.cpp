#include "orthoplane/diffusion.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "orthoplane/binary_io.hpp"
#include "orthoplane/ops.hpp"
#include "orthoplane/scenes.hpp"
#include "orthoplane/training.hpp"

namespace orthoplane {

Real NoiseSchedule::posterior_variance(std::size_t t) const {
  const Real prev = t > 1 ? alpha_bar(t - 1) : 1.0;
  return beta(t) * (1.0 - prev) / (1.0 - alpha_bar(t));
}

NoiseSchedule make_schedule(std::size_t steps, Real beta_start, Real beta_end) {
  if (steps == 0) throw std::invalid_argument("make_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  Real prod = 1.0;
  for (std::size_t i = 0; i < steps; ++i) {
    const Real frac = steps == 1 ? 0.0 : static_cast<Real>(i) / static_cast<Real>(steps - 1);
    const Real b = beta_start + (beta_end - beta_start) * frac;
    prod *= 1.0 - b;
    s.betas.push_back(b);
    s.alpha_bars.push_back(prod);
  }
  return s;
}

Tensor noise_mix(const Tensor& x0, const Tensor& eps, Real alpha_bar) {
  if (x0.shape() != eps.shape()) {
    throw std::invalid_argument("q_sample: noise shape " + shape_str(eps.shape()) +
                                " differs from " + shape_str(x0.shape()));
  }
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) {
    throw std::invalid_argument("q_sample: alpha_bar outside [0, 1]");
  }
  return ops::add(ops::scale(x0, std::sqrt(alpha_bar)), ops::scale(eps, std::sqrt(1.0 - alpha_bar)));
}

Triplane q_sample(const Triplane& x0, std::size_t t, const Triplane& eps,
                  const NoiseSchedule& sched) {
  if (t < 1 || t > sched.steps()) {
    throw std::out_of_range("q_sample: t = " + std::to_string(t) + " outside [1, " +
                            std::to_string(sched.steps()) + "]");
  }
  return Triplane(noise_mix(x0.tensor(), eps.tensor(), sched.alpha_bar(t)));
}

Tensor toy_text_table(std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  auto table = nn::normal({Vocabulary::toy().size(), width}, 1.0, rng);
  table.set_requires_grad(false);
  return table;
}

TextEmbedding encode_caption(const std::string& caption, const Tensor& table) {
  return embed_tokens(table, Vocabulary::toy().tokenize(caption));
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("denoiser: " + what); };
  if (resolution < 2) fail("resolution must be at least 2");
  if (channels == 0 || hidden == 0 || levels == 0 || key_dim == 0 || text_width == 0) {
    fail("widths and level count must be positive");
  }
  if (time_width < 2 || time_width % 2 != 0) fail("time_width must be a positive even number");
  if (heads == 0 || key_dim % heads != 0) fail("heads must divide key_dim");
  if (cross_line_index >= resolution) fail("cross_line_index must be below resolution");
}

PlaneConv PlaneConv::init(std::size_t in, std::size_t out, Rng& rng, Real gain) {
  return {nn::normal({9 * in, out}, gain / std::sqrt(9.0 * static_cast<Real>(in)), rng),
          nn::zeros({out})};
}

PlaneConv PlaneConv::zero(std::size_t in, std::size_t out) {
  return {nn::zeros({9 * in, out}), nn::zeros({out})};
}

std::vector<std::int64_t> plane_conv_taps(std::size_t resolution, std::size_t batch) {
  const auto d = static_cast<std::int64_t>(resolution);
  const std::size_t planes = batch * 3;
  std::vector<std::int64_t> taps;
  taps.reserve(planes * resolution * resolution * 9);
  for (std::size_t p = 0; p < planes; ++p) {
    const auto base = static_cast<std::int64_t>(p) * d * d;
    for (std::int64_t v = 0; v < d; ++v)
      for (std::int64_t u = 0; u < d; ++u)
        for (std::int64_t dv = -1; dv <= 1; ++dv)
          for (std::int64_t du = -1; du <= 1; ++du) {
            const std::int64_t sv = v + dv, su = u + du;
            taps.push_back(sv < 0 || sv >= d || su < 0 || su >= d ? -1 : base + sv * d + su);
          }
  }
  return taps;
}

Tensor plane_conv(const Tensor& rows, const PlaneConv& conv,
                  const std::vector<std::int64_t>& taps) {
  const std::size_t n = rows.dim(0), width = rows.dim(1);
  if (taps.size() != 9 * n) throw std::invalid_argument("plane_conv: tap table size mismatch");
  if (conv.weight.dim(0) != 9 * width) {
    throw std::invalid_argument("plane_conv: weight expects " +
                                std::to_string(conv.weight.dim(0) / 9) + " channels, got " +
                                std::to_string(width));
  }
  auto patches = ops::reshape(ops::gather_rows(rows, taps), {n, 9 * width});
  return ops::add_rowwise(ops::matmul(patches, conv.weight), conv.bias);
}

std::vector<Tensor> ResidualBlock::parameters() const {
  std::vector<Tensor> out;
  nn::append(out, norm.parameters());
  nn::append(out, conv1.parameters());
  nn::append(out, time.parameters());
  nn::append(out, conv2.parameters());
  return out;
}

std::vector<Tensor> AttentionBlock::parameters() const {
  std::vector<Tensor> out;
  nn::append(out, norm.parameters());
  nn::append(out, attn.parameters());
  return out;
}

struct Denoiser::BatchTables {
  std::vector<std::int64_t> taps;
  std::vector<std::int64_t> example_of_row;
  std::vector<std::int64_t> plane_of_row;
  OrthogonalIndex orth;
};

namespace {

ResidualBlock make_residual(std::size_t h, Rng& rng, bool zero_out) {
  return {nn::LayerNorm::init(h), PlaneConv::init(h, h, rng, std::sqrt(2.0)),
          nn::Linear::init(h, h, rng),
          zero_out ? PlaneConv::zero(h, h) : PlaneConv::init(h, h, rng, 0.5)};
}

AttentionBlock make_attention(std::size_t h, std::size_t kv, const DenoiserConfig& cfg,
                              Rng& rng) {
  return {nn::LayerNorm::init(h), AttentionParams::init(h, kv, cfg.key_dim, rng, cfg.heads)};
}

// Sinusoidal features of t, [batch x width].
Tensor time_features(const std::vector<std::size_t>& t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<Real> v(t.size() * width);
  for (std::size_t b = 0; b < t.size(); ++b) {
    for (std::size_t k = 0; k < half; ++k) {
      const Real freq = std::exp(-std::log(1000.0) * static_cast<Real>(k) / static_cast<Real>(half));
      v[b * width + k] = std::sin(static_cast<Real>(t[b]) * freq);
      v[b * width + half + k] = std::cos(static_cast<Real>(t[b]) * freq);
    }
  }
  return Tensor::from({t.size(), width}, std::move(v));
}

}  // namespace

Denoiser Denoiser::init(const DenoiserConfig& cfg, Rng& rng) {
  cfg.validate();
  Denoiser d;
  d.cfg_ = cfg;
  const std::size_t h = cfg.hidden;
  d.conv_in_ = PlaneConv::init(cfg.channels, h, rng);
  d.plane_embed_ = nn::normal({3, h}, 0.5, rng);
  d.time_in_ = nn::Linear::init(cfg.time_width, h, rng, std::sqrt(2.0));
  d.time_out_ = nn::Linear::init(h, h, rng);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    DenoiserLevel level{make_residual(h, rng, false), make_attention(h, cfg.text_width, cfg, rng),
                        {}, {}, {}};
    if (cfg.orthogonal) level.orth.push_back(make_attention(h, h, cfg, rng));
    if (cfg.adapters) {
      level.adapter_residual.push_back(make_residual(h, rng, true));
      level.adapter_orth.push_back(make_attention(h, h, cfg, rng));
    }
    d.levels_.push_back(std::move(level));
  }
  d.norm_out_ = nn::LayerNorm::init(h);
  d.conv_out_ = PlaneConv::init(h, cfg.channels, rng, 0.5);
  d.cache_ = std::make_shared<std::map<std::size_t, std::shared_ptr<BatchTables>>>();
  return d;
}

const Denoiser::BatchTables& Denoiser::tables(std::size_t batch) const {
  auto it = cache_->find(batch);
  if (it != cache_->end()) return *it->second;
  auto t = std::make_shared<BatchTables>();
  const std::size_t per_plane = cfg_.resolution * cfg_.resolution;
  t->taps = plane_conv_taps(cfg_.resolution, batch);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t p = 0; p < 3; ++p)
      for (std::size_t i = 0; i < per_plane; ++i) {
        t->example_of_row.push_back(static_cast<std::int64_t>(b));
        t->plane_of_row.push_back(static_cast<std::int64_t>(p));
      }
  if (cfg_.orthogonal || cfg_.adapters) {
    t->orth = build_orthogonal_index(cfg_.resolution, batch, cfg_.cross_line_index);
  }
  return *cache_->emplace(batch, t).first->second;
}

Tensor Denoiser::operator()(const Tensor& rows, const std::vector<std::size_t>& t,
                            const std::vector<TextEmbedding>& text) const {
  const std::size_t batch = t.size();
  const std::size_t per_example = 3 * cfg_.resolution * cfg_.resolution;
  if (batch == 0 || text.size() != batch) {
    throw std::invalid_argument("denoiser: need one timestep and one caption per example");
  }
  if (rows.rank() != 2 || rows.dim(0) != batch * per_example || rows.dim(1) != cfg_.channels) {
    throw std::invalid_argument("denoiser: expected rows [" + std::to_string(batch * per_example) +
                                ", " + std::to_string(cfg_.channels) + "], got " +
                                shape_str(rows.shape()));
  }
  const auto& tab = tables(batch);

  std::vector<Tensor> token_parts;
  ops::KeyIndex text_index;
  std::vector<std::vector<std::uint32_t>> example_keys(batch);
  std::uint32_t next = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (!text[b].tokens.defined() || text[b].width() != cfg_.text_width) {
      throw std::invalid_argument("denoiser: caption embedding width must be " +
                                  std::to_string(cfg_.text_width));
    }
    token_parts.push_back(text[b].tokens);
    for (std::size_t k = 0; k < text[b].length(); ++k) example_keys[b].push_back(next++);
  }
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < per_example; ++i) text_index.push_query(example_keys[b]);
  auto tokens = batch == 1 ? token_parts.front() : ops::concat(token_parts, 0);

  auto temb = time_out_(ops::relu(time_in_(time_features(t, cfg_.time_width))));
  auto temb_rows = [&](const nn::Linear& proj) {
    return ops::gather_rows(proj(temb), tab.example_of_row);
  };
  auto residual = [&](const Tensor& h, const ResidualBlock& block) {
    auto a = plane_conv(ops::relu(block.norm(h)), block.conv1, tab.taps);
    a = ops::relu(ops::add(a, temb_rows(block.time)));
    return ops::add(h, plane_conv(a, block.conv2, tab.taps));
  };
  auto orthogonal = [&](const Tensor& h, const AttentionBlock& block) {
    return ops::add(h, orthogonal_attention_delta(block.norm(h), block.attn, tab.orth));
  };

  auto h = plane_conv(rows, conv_in_, tab.taps);
  h = ops::add(h, ops::gather_rows(plane_embed_, tab.plane_of_row));
  for (const auto& level : levels_) {
    h = residual(h, level.residual);
    for (const auto& a : level.adapter_residual) h = residual(h, a);
    const auto& cross = level.cross;
    auto q = ops::matmul(cross.norm(h), cross.attn.w_q);
    auto k = ops::matmul(tokens, cross.attn.w_k);
    auto v = ops::matmul(tokens, cross.attn.w_v);
    h = ops::add(h, ops::matmul(ops::sparse_attention(q, k, v, text_index, cross.attn.heads),
                                cross.attn.w_o));
    for (const auto& o : level.orth) h = orthogonal(h, o);
    for (const auto& o : level.adapter_orth) h = orthogonal(h, o);
  }
  return plane_conv(ops::relu(norm_out_(h)), conv_out_, tab.taps);
}

EpsilonModel Denoiser::model() const {
  Denoiser self = *this;
  return [self](const Tensor& rows, const std::vector<std::size_t>& t,
                const std::vector<TextEmbedding>& text) { return self(rows, t, text); };
}

Denoiser Denoiser::without_adapters() const {
  Denoiser d = *this;
  d.cfg_.adapters = false;
  for (auto& level : d.levels_) {
    level.adapter_residual.clear();
    level.adapter_orth.clear();
  }
  d.cache_ = std::make_shared<std::map<std::size_t, std::shared_ptr<BatchTables>>>();
  return d;
}

std::vector<std::pair<std::string, Tensor>> Denoiser::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto add = [&](const std::string& name, const std::vector<Tensor>& ts) {
    for (std::size_t i = 0; i < ts.size(); ++i) out.emplace_back(name + "." + std::to_string(i), ts[i]);
  };
  add("conv_in", conv_in_.parameters());
  add("plane_embed", {plane_embed_});
  add("time_in", time_in_.parameters());
  add("time_out", time_out_.parameters());
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const auto& level = levels_[l];
    const std::string p = "level" + std::to_string(l) + ".";
    add(p + "residual", level.residual.parameters());
    add(p + "cross", level.cross.parameters());
    for (const auto& o : level.orth) add(p + "orth", o.parameters());
    for (const auto& a : level.adapter_residual) add(p + "adapter_residual", a.parameters());
    for (const auto& o : level.adapter_orth) add(p + "adapter_orth", o.parameters());
  }
  add("norm_out", norm_out_.parameters());
  add("conv_out", conv_out_.parameters());
  return out;
}

std::vector<Tensor> Denoiser::adapter_parameters() const {
  std::vector<Tensor> out;
  for (const auto& level : levels_) {
    for (const auto& a : level.adapter_residual) nn::append(out, a.parameters());
    for (const auto& o : level.adapter_orth) nn::append(out, o.parameters());
  }
  return out;
}

std::vector<Tensor> Denoiser::backbone_parameters() const {
  std::vector<Tensor> out;
  const auto adapters = adapter_parameters();
  for (const auto& [name, t] : named_parameters()) {
    bool is_adapter = false;
    for (const auto& a : adapters) is_adapter |= a.impl() == t.impl();
    if (!is_adapter) out.push_back(t);
  }
  return out;
}

std::vector<Tensor> Denoiser::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

Tensor epsilon_loss(const EpsilonModel& model, const Triplane& x0, const TextEmbedding& text,
                    std::size_t t, const Triplane& eps, const NoiseSchedule& sched, LossMode mode,
                    PlaneId plane) {
  if (x0.tensor().shape() != eps.tensor().shape()) {
    throw std::invalid_argument("epsilon_loss: noise and x0 shapes differ");
  }
  const auto xt = q_sample(x0, t, eps, sched);
  auto pred = model(xt.rows(), {t}, {text});
  const auto target = eps.rows();
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("epsilon_loss: model returned " + shape_str(pred.shape()) +
                                ", expected " + shape_str(target.shape()));
  }
  const std::size_t per_plane = x0.resolution() * x0.resolution();
  auto plane_loss = [&](PlaneId p) {
    const std::size_t start = static_cast<std::size_t>(p) * per_plane;
    return mse(ops::slice(pred, 0, start, per_plane), ops::slice(target, 0, start, per_plane));
  };
  if (mode == LossMode::single_plane) return plane_loss(plane);
  return ops::add(ops::add(plane_loss(PlaneId::xy), plane_loss(PlaneId::xz)),
                  plane_loss(PlaneId::yz));
}

void DiffusionTrainConfig::validate() const {
  denoiser.validate();
  if (steps == 0 || batch == 0) throw std::invalid_argument("diffusion: steps and batch must be > 0");
  if (!(lr > 0.0) || weight_decay < 0.0) throw std::invalid_argument("diffusion: bad lr or weight decay");
  if (staging == Staging::two_phase && (phase1_steps >= steps || !denoiser.adapters)) {
    throw std::invalid_argument(
        "diffusion: two_phase staging needs adapters and phase1_steps < steps");
  }
  schedule();
}

namespace {

std::vector<std::vector<Real>> copy_values(const std::vector<Tensor>& params) {
  std::vector<std::vector<Real>> out;
  for (const auto& p : params) out.emplace_back(p.data().begin(), p.data().end());
  return out;
}

void put_values(const std::vector<Tensor>& params, const std::vector<std::vector<Real>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = Tensor(params[i]).mutable_data();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

DiffusionTrainResult train_denoiser(const std::vector<DiffusionExample>& data,
                                    const DiffusionTrainConfig& cfg, Denoiser denoiser,
                                    const std::vector<Tensor>& trainable) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  const auto& dc = denoiser.config();
  for (const auto& ex : data) {
    if (ex.x0.resolution() != dc.resolution || ex.x0.channels() != dc.channels) {
      throw std::invalid_argument("train_denoiser: example shape does not match the denoiser");
    }
  }
  const auto sched = cfg.schedule();
  const auto all = denoiser.parameters();
  // Only the trainable set records gradients.
  for (auto p : all) p.set_requires_grad(false);
  for (auto p : trainable) p.set_requires_grad(true);

  Rng rng(cfg.seed);
  AdamW opt({{trainable, cfg.lr, cfg.weight_decay}});
  DiffusionTrainResult result{denoiser, {}, 0.0, 0, 0, false, ""};
  auto last_good = copy_values(trainable);
  const std::size_t per_example = data.front().x0.tensor().size();
  Real window = 0.0;
  std::size_t window_count = 0;
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::vector<Real> x(cfg.batch * per_example);
    std::vector<std::size_t> ts(cfg.batch);
    std::vector<TextEmbedding> texts;
    std::vector<Real> eps(cfg.batch * per_example);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const auto& ex = data[rng.below(data.size())];
      ts[b] = 1 + rng.below(sched.steps());
      texts.push_back(ex.text);
      const Real a = sched.alpha_bar(ts[b]);
      const Real sa = std::sqrt(a), sn = std::sqrt(1.0 - a);
      const auto src = ex.x0.tensor().data();
      for (std::size_t i = 0; i < per_example; ++i) {
        const Real e = rng.normal();
        eps[b * per_example + i] = e;
        x[b * per_example + i] = sa * src[i] + sn * e;
      }
    }
    const std::size_t n = cfg.batch * per_example / dc.channels;
    auto pred = denoiser(Tensor::from({n, dc.channels}, std::move(x)), ts, texts);
    // The three planes are equal in size, so the per-plane sum is 3x the mean.
    auto loss = ops::scale(mse(pred, Tensor::from({n, dc.channels}, std::move(eps))), 3.0);
    const Real value = loss.item();
    if (!std::isfinite(value)) {
      result.diverged = true;
      result.diagnostic = "denoiser loss became non-finite at step " + std::to_string(step);
      put_values(trainable, last_good);
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
      last_good = copy_values(trainable);
    }
  }
  if (window_count > 0) result.window_loss.push_back(window / static_cast<Real>(window_count));
  if (!result.window_loss.empty()) result.final_loss = result.window_loss.back();
  result.incidents = opt.incidents();
  for (auto p : all) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  return result;
}

DiffusionTrainResult train_denoiser(const std::vector<DiffusionExample>& data,
                                    const DiffusionTrainConfig& cfg) {
  cfg.validate();
  Rng init_rng(cfg.seed ^ 0xd1ff0517ULL);
  auto denoiser = Denoiser::init(cfg.denoiser, init_rng);
  if (cfg.staging == Staging::end_to_end) {
    return train_denoiser(data, cfg, denoiser, denoiser.parameters());
  }
  auto phase1 = cfg;
  phase1.steps = cfg.phase1_steps;
  phase1.staging = Staging::end_to_end;
  auto first = train_denoiser(data, phase1, denoiser, denoiser.backbone_parameters());
  if (first.diverged) return first;
  auto phase2 = phase1;
  phase2.steps = cfg.steps - cfg.phase1_steps;
  phase2.seed = cfg.seed + 1;
  auto second = train_denoiser(data, phase2, denoiser, denoiser.adapter_parameters());
  first.window_loss.insert(first.window_loss.end(), second.window_loss.begin(),
                           second.window_loss.end());
  second.window_loss = std::move(first.window_loss);
  second.steps_run += first.steps_run;
  second.incidents += first.incidents;
  return second;
}

std::vector<Triplane> ddpm_sample(const EpsilonModel& model, std::size_t resolution,
                                  std::size_t channels, const std::vector<TextEmbedding>& text,
                                  const NoiseSchedule& sched, Rng& rng) {
  NoGradGuard no_grad;
  const std::size_t batch = text.size();
  const std::size_t n = batch * 3 * resolution * resolution;
  std::vector<Real> x = rng.normals(n * channels);
  for (std::size_t t = sched.steps(); t >= 1; --t) {
    auto eps = model(Tensor::from({n, channels}, x), std::vector<std::size_t>(batch, t), text);
    const auto e = eps.data();
    const Real coef = sched.beta(t) / std::sqrt(1.0 - sched.alpha_bar(t));
    const Real inv = 1.0 / std::sqrt(sched.alpha(t));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = inv * (x[i] - coef * e[i]);
    if (t > 1) {
      const Real sigma = std::sqrt(sched.posterior_variance(t));
      for (auto& v : x) v += sigma * rng.normal();
    }
  }
  std::vector<Triplane> out;
  const std::size_t per = 3 * resolution * resolution * channels;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<Real> v(x.begin() + b * per, x.begin() + (b + 1) * per);
    out.emplace_back(Tensor::from({3, resolution, resolution, channels}, std::move(v)));
  }
  return out;
}

std::vector<Triplane> ddpm_sample(const Denoiser& denoiser, const std::vector<TextEmbedding>& text,
                                  const NoiseSchedule& sched, Rng& rng, std::size_t chunk) {
  if (chunk == 0) throw std::invalid_argument("ddpm_sample: chunk must be positive");
  std::vector<Triplane> out;
  const auto& c = denoiser.config();
  for (std::size_t start = 0; start < text.size(); start += chunk) {
    const std::size_t end = std::min(text.size(), start + chunk);
    std::vector<TextEmbedding> part(text.begin() + start, text.begin() + end);
    auto samples = ddpm_sample(denoiser.model(), c.resolution, c.channels, part, sched, rng);
    for (auto& s : samples) out.push_back(std::move(s));
  }
  return out;
}

Triplane ddpm_sample(const Denoiser& denoiser, const TextEmbedding& text,
                     const NoiseSchedule& sched, Rng& rng) {
  return ddpm_sample(denoiser, std::vector<TextEmbedding>{text}, sched, rng).front();
}

Real cross_plane_consistency(const Triplane& tri) {
  const std::size_t d = tri.resolution(), c = tri.channels();
  auto profile = [&](PlaneId p, MarginalAxis keep) {
    // Reducing along one axis keeps the profile over the other.
    const auto reduce = keep == MarginalAxis::u ? MarginalAxis::v : MarginalAxis::u;
    auto m = plane_marginal(tri.plane(p), d, c, reduce, Reducer::max);
    std::vector<Real> occ(d);
    for (std::size_t i = 0; i < d; ++i) occ[i] = m[i * c];
    return occ;
  };
  auto gap = [&](const std::vector<Real>& a, const std::vector<Real>& b) {
    Real s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<Real>(d);
  };
  // x: u of xy and xz; y: v of xy and u of yz; z: v of xz and v of yz.
  const Real x = gap(profile(PlaneId::xy, MarginalAxis::u), profile(PlaneId::xz, MarginalAxis::u));
  const Real y = gap(profile(PlaneId::xy, MarginalAxis::v), profile(PlaneId::yz, MarginalAxis::u));
  const Real z = gap(profile(PlaneId::xz, MarginalAxis::v), profile(PlaneId::yz, MarginalAxis::v));
  return (x + y + z) / 3.0;
}

Triplane to_model_space(const Triplane& tri) {
  return Triplane(ops::add_scalar(ops::scale(tri.tensor().detach(), 2.0), -1.0));
}

Triplane from_model_space(const Triplane& tri) {
  return Triplane(ops::scale(ops::add_scalar(tri.tensor().detach(), 1.0), 0.5));
}

std::vector<DiffusionExample> toy_diffusion_dataset(std::size_t count, const DenoiserConfig& cfg,
                                                    std::uint64_t seed, const Tensor& text_table) {
  std::vector<DiffusionExample> out;
  for (const auto& ex : make_toy_triplane_dataset(count, cfg.resolution, cfg.channels, seed)) {
    out.push_back({to_model_space(ex.x0), embed_tokens(text_table, ex.tokens)});
  }
  return out;
}

namespace {

void write_config(std::ostream& out, const DenoiserConfig& c) {
  for (std::size_t v : {c.resolution, c.channels, c.hidden, c.levels, c.key_dim, c.heads,
                        c.text_width, c.time_width, c.cross_line_index}) {
    binary::write_u32(out, static_cast<std::uint32_t>(v));
  }
  binary::write_u32(out, c.orthogonal ? 1 : 0);
  binary::write_u32(out, c.adapters ? 1 : 0);
}

DenoiserConfig read_config(std::istream& in) {
  DenoiserConfig c;
  c.resolution = binary::read_u32(in, "denoiser resolution");
  c.channels = binary::read_u32(in, "denoiser channels");
  c.hidden = binary::read_u32(in, "denoiser hidden width");
  c.levels = binary::read_u32(in, "denoiser levels");
  c.key_dim = binary::read_u32(in, "denoiser key_dim");
  c.heads = binary::read_u32(in, "denoiser heads");
  c.text_width = binary::read_u32(in, "denoiser text_width");
  c.time_width = binary::read_u32(in, "denoiser time_width");
  c.cross_line_index = binary::read_u32(in, "denoiser cross_line_index");
  c.orthogonal = binary::read_u32(in, "denoiser orthogonal flag") != 0;
  c.adapters = binary::read_u32(in, "denoiser adapters flag") != 0;
  if (c.resolution > 4096 || c.channels > 4096 || c.hidden > 4096 || c.levels > 64) {
    throw std::runtime_error("checkpoint: implausible denoiser config");
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(std::string("checkpoint: ") + e.what());
  }
  return c;
}

}  // namespace

void write_denoiser(std::ostream& out, const Denoiser& d) {
  binary::write_tag(out, "DNSR");
  binary::write_u16(out, kDenoiserFormatVersion);
  write_config(out, d.config());
  const auto params = d.named_parameters();
  binary::write_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    binary::write_string(out, name);
    binary::write_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto dim : t.shape()) binary::write_u32(out, static_cast<std::uint32_t>(dim));
    binary::write_f32s(out, t.data());
  }
}

Denoiser read_denoiser(std::istream& in) {
  binary::expect_tag(in, "DNSR", "denoiser magic");
  const auto version = binary::read_u16(in, "denoiser version");
  if (version != kDenoiserFormatVersion) {
    throw std::runtime_error("checkpoint: unsupported denoiser version " + std::to_string(version));
  }
  const auto cfg = read_config(in);
  Rng rng(0);
  auto d = Denoiser::init(cfg, rng);
  auto params = d.named_parameters();
  const auto count = binary::read_u32(in, "denoiser section count");
  if (count != params.size()) {
    throw std::runtime_error("checkpoint: denoiser section count " + std::to_string(count) +
                             " does not match its config (" + std::to_string(params.size()) + ")");
  }
  for (auto& [name, t] : params) {
    const auto got = binary::read_string(in, "denoiser section name");
    if (got != name) {
      throw std::runtime_error("checkpoint: expected denoiser section " + name + ", found " + got);
    }
    const auto rank = binary::read_u32(in, "denoiser section rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank && i < 8; ++i)
      shape.push_back(binary::read_u32(in, "denoiser section dims"));
    if (shape != t.shape()) {
      throw std::runtime_error("checkpoint: denoiser section " + name + " has dims " +
                               shape_str(shape) + ", expected " + shape_str(t.shape()));
    }
    const auto values = binary::read_f32s(in, t.size(), "denoiser section values");
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
  return d;
}

void write_denoiser(const std::filesystem::path& path, const Denoiser& d) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_denoiser(out, d);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

Denoiser read_denoiser(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_denoiser(in);
}

}  // namespace orthoplane
