#include "orthoplane/attention.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace orthoplane {

namespace {

// The partner planes of each query plane, in summation order.
constexpr std::array<std::array<PlaneId, 2>, 3> kPartners = {{
    {PlaneId::xz, PlaneId::yz},  // xy: x shared with xz, y shared with yz
    {PlaneId::xy, PlaneId::yz},  // xz: x shared with xy, z shared with yz
    {PlaneId::xz, PlaneId::xy},  // yz: z shared with xz, y shared with xy
}};

int shared_axis(PlaneId a, PlaneId b) {
  const auto pa = plane_axes(a);
  const auto pb = plane_axes(b);
  for (int x : pa)
    for (int y : pb)
      if (x == y) return x;
  return -1;
}

// Position (0 = u, 1 = v) of a world axis within a plane.
int slot_of(PlaneId plane, int axis) { return plane_axes(plane)[0] == axis ? 0 : 1; }

}  // namespace

AttentionParams AttentionParams::init(std::size_t query_dim, std::size_t kv_dim,
                                      std::size_t key_dim, Rng& rng, std::size_t heads,
                                      bool zero_output) {
  AttentionParams p;
  p.w_q = nn::normal({query_dim, key_dim}, 1.0 / std::sqrt(static_cast<Real>(query_dim)), rng);
  p.w_k = nn::normal({kv_dim, key_dim}, 1.0 / std::sqrt(static_cast<Real>(kv_dim)), rng);
  p.w_v = nn::normal({kv_dim, key_dim}, 1.0 / std::sqrt(static_cast<Real>(kv_dim)), rng);
  p.w_o = zero_output
              ? nn::zeros({key_dim, query_dim})
              : nn::normal({key_dim, query_dim}, 1.0 / std::sqrt(static_cast<Real>(key_dim)), rng);
  p.heads = heads;
  return p;
}

void AttentionParams::validate(std::size_t query_width, std::size_t kv_width,
                               const char* op) const {
  const std::size_t dk = key_dim();
  auto fail = [&](const std::string& what) {
    throw std::invalid_argument(std::string(op) + ": " + what);
  };
  if (dk == 0) fail("key dimension must be positive");
  if (query_dim() != query_width) {
    fail("W_Q expects " + std::to_string(query_dim()) + " input channels, got " +
         std::to_string(query_width));
  }
  if (kv_dim() != kv_width || w_v.dim(0) != kv_width) {
    fail("W_K/W_V expect " + std::to_string(kv_dim()) + " channels, got " +
         std::to_string(kv_width));
  }
  if (w_k.dim(1) != dk || w_v.dim(1) != dk || w_o.dim(0) != dk) {
    fail("inconsistent key dimensions " + shape_str(w_k.shape()) + " " + shape_str(w_v.shape()) +
         " " + shape_str(w_o.shape()));
  }
  if (out_dim() != query_width) {
    fail("W_O must map back to " + std::to_string(query_width) + " channels");
  }
  if (heads == 0 || dk % heads != 0) fail("head count does not divide key dimension");
}

OAKeySet oa_key_set(std::size_t resolution, PlaneId query_plane, PlaneId key_plane,
                    Pixel query, std::size_t cross_line_index) {
  if (query_plane == key_plane) {
    throw std::invalid_argument(std::string("oa_key_set: query and key plane are both ") +
                                plane_name(query_plane));
  }
  if (query.u >= resolution || query.v >= resolution || cross_line_index >= resolution) {
    throw std::out_of_range("oa_key_set: pixel or cross-line index outside the plane");
  }
  const int axis = shared_axis(query_plane, key_plane);
  const std::size_t shared = slot_of(query_plane, axis) == 0 ? query.u : query.v;
  const bool shared_is_u = slot_of(key_plane, axis) == 0;
  auto make = [&](std::size_t along_shared, std::size_t other) {
    return shared_is_u ? Pixel{along_shared, other} : Pixel{other, along_shared};
  };

  OAKeySet set{query_plane, key_plane, {}};
  set.keys.reserve(2 * resolution - 1);
  for (std::size_t other = 0; other < resolution; ++other) set.keys.push_back(make(shared, other));
  for (std::size_t s = 0; s < resolution; ++s) {
    if (s == shared) continue;  // already on the shared-coordinate line
    set.keys.push_back(make(s, cross_line_index));
  }
  return set;
}

OrthogonalIndex build_orthogonal_index(std::size_t resolution, std::size_t batch,
                                       std::size_t cross_line_index) {
  if (resolution == 0 || batch == 0) throw std::invalid_argument("orthogonal index: empty");
  if (cross_line_index >= resolution) {
    throw std::out_of_range("orthogonal index: cross-line index " +
                            std::to_string(cross_line_index) + " >= resolution");
  }
  const std::size_t d = resolution;
  const std::size_t per_plane = d * d;
  OrthogonalIndex index{d, batch, cross_line_index, {}, {}};
  const std::size_t rows = batch * 3 * per_plane;
  const std::size_t per_query = 2 * d - 1;
  for (auto* ki : {&index.first, &index.second}) {
    ki->offsets.reserve(rows + 1);
    ki->keys.reserve(rows * per_query);
  }

  // Strides (in rows) of the key plane's shared and non-shared coordinates.
  std::vector<std::uint32_t> keys(per_query);
  for (std::size_t b = 0; b < batch; ++b) {
    for (int p = 0; p < 3; ++p) {
      const auto qplane = static_cast<PlaneId>(p);
      for (std::size_t v = 0; v < d; ++v) {
        for (std::size_t u = 0; u < d; ++u) {
          for (int which = 0; which < 2; ++which) {
            const PlaneId kplane = kPartners[p][which];
            const int axis = shared_axis(qplane, kplane);
            const std::size_t a = plane_axes(qplane)[0] == axis ? u : v;
            const std::size_t base = (b * 3 + static_cast<std::size_t>(kplane)) * per_plane;
            const bool shared_is_u = plane_axes(kplane)[0] == axis;
            const std::size_t shared_stride = shared_is_u ? 1 : d;
            const std::size_t other_stride = shared_is_u ? d : 1;
            std::size_t n = 0;
            for (std::size_t o = 0; o < d; ++o)
              keys[n++] = static_cast<std::uint32_t>(base + a * shared_stride + o * other_stride);
            for (std::size_t s = 0; s < d; ++s) {
              if (s != a) {
                keys[n++] = static_cast<std::uint32_t>(base + s * shared_stride +
                                                       cross_line_index * other_stride);
              }
            }
            (which == 0 ? index.first : index.second).push_query(keys);
          }
        }
      }
    }
  }
  return index;
}

Tensor orthogonal_attention_delta(const Tensor& rows, const AttentionParams& params,
                                  const OrthogonalIndex& index) {
  if (rows.rank() != 2) {
    throw std::invalid_argument("orthogonal_attention: rows must be a matrix, got " +
                                shape_str(rows.shape()));
  }
  params.validate(rows.dim(1), rows.dim(1), "orthogonal_attention");
  if (rows.dim(0) != index.first.queries()) {
    throw std::invalid_argument("orthogonal_attention: " + std::to_string(rows.dim(0)) +
                                " rows but index covers " +
                                std::to_string(index.first.queries()));
  }
  auto q = ops::matmul(rows, params.w_q);
  auto k = ops::matmul(rows, params.w_k);
  auto v = ops::matmul(rows, params.w_v);
  auto first = ops::sparse_attention(q, k, v, index.first, params.heads);
  auto second = ops::sparse_attention(q, k, v, index.second, params.heads);
  return ops::matmul(ops::add(first, second), params.w_o);
}

Triplane orthogonal_attention(const Triplane& tri, const AttentionParams& params,
                              std::size_t cross_line_index) {
  const auto index = build_orthogonal_index(tri.resolution(), 1, cross_line_index);
  auto rows = tri.rows();
  return Triplane::from_rows(ops::add(rows, orthogonal_attention_delta(rows, params, index)),
                             tri.resolution());
}

const Vocabulary& Vocabulary::toy() {
  static const Vocabulary vocab({
      "a",      "the",     "box",    "cube",   "sphere", "blob",  "block",  "small",
      "medium", "large",   "tall",   "wide",   "flat",   "thin",  "red",    "green",
      "blue",   "yellow",  "cyan",   "magenta", "white", "orange", "purple", "gray",
      "shiny",  "matte",   "wooden", "metal",
  });
  return vocab;
}

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {}

std::size_t Vocabulary::id(const std::string& word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw std::invalid_argument("vocabulary: unknown word \"" + word + "\"");
  return static_cast<std::size_t>(it - words_.begin());
}

std::vector<std::size_t> Vocabulary::tokenize(const std::string& caption) const {
  std::istringstream in(caption);
  std::vector<std::size_t> ids;
  for (std::string w; in >> w;) ids.push_back(id(w));
  if (ids.empty()) throw std::invalid_argument("vocabulary: empty caption");
  if (ids.size() > kMaxCaptionTokens) {
    throw std::invalid_argument("vocabulary: caption longer than " +
                                std::to_string(kMaxCaptionTokens) + " tokens");
  }
  return ids;
}

TextEmbedding embed_tokens(const Tensor& table, const std::vector<std::size_t>& token_ids) {
  if (token_ids.empty()) throw std::invalid_argument("embed_tokens: empty token list");
  std::vector<std::int64_t> idx(token_ids.begin(), token_ids.end());
  return {ops::gather_rows(table, idx)};
}

Tensor cross_attention_delta(const Tensor& rows, const TextEmbedding& text,
                             const AttentionParams& params) {
  if (!text.tokens.defined() || text.tokens.rank() != 2) {
    throw std::invalid_argument("cross_attention: empty token list");
  }
  params.validate(rows.dim(1), text.width(), "cross_attention");
  auto q = ops::matmul(rows, params.w_q);
  auto k = ops::matmul(text.tokens, params.w_k);
  auto v = ops::matmul(text.tokens, params.w_v);
  const std::size_t hk = params.key_dim() / params.heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(hk));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < params.heads; ++h) {
    auto qh = params.heads == 1 ? q : ops::slice(q, 1, h * hk, hk);
    auto kh = params.heads == 1 ? k : ops::slice(k, 1, h * hk, hk);
    auto vh = params.heads == 1 ? v : ops::slice(v, 1, h * hk, hk);
    auto weights = ops::softmax(ops::scale(ops::matmul(qh, ops::transpose(kh)), scale), 1);
    heads.push_back(ops::matmul(weights, vh));
  }
  auto merged = heads.size() == 1 ? heads.front() : ops::concat(heads, 1);
  return ops::matmul(merged, params.w_o);
}

Triplane cross_attention(const Triplane& tri, const TextEmbedding& text,
                         const AttentionParams& params) {
  auto rows = tri.rows();
  return Triplane::from_rows(ops::add(rows, cross_attention_delta(rows, text, params)),
                             tri.resolution());
}

std::vector<Tensor> RefineBlock::parameters() const {
  std::vector<Tensor> out;
  nn::append(out, norm_cross.parameters());
  nn::append(out, cross.parameters());
  nn::append(out, norm_orth.parameters());
  nn::append(out, orth.parameters());
  nn::append(out, norm_mlp.parameters());
  nn::append(out, mlp_in.parameters());
  nn::append(out, mlp_out.parameters());
  return out;
}

RefineParams RefineParams::init(std::size_t depth, std::size_t resolution, std::size_t channels,
                                std::size_t text_width, std::size_t key_dim,
                                std::size_t mlp_hidden, Rng& rng, std::size_t heads) {
  RefineParams params;
  params.cross_line_index = default_cross_line_index(resolution);
  for (std::size_t i = 0; i < depth; ++i) {
    params.blocks.push_back({
        nn::LayerNorm::init(channels),
        AttentionParams::init(channels, text_width, key_dim, rng, heads),
        nn::LayerNorm::init(channels),
        AttentionParams::init(channels, channels, key_dim, rng, heads),
        nn::LayerNorm::init(channels),
        nn::Linear::init(channels, mlp_hidden, rng, std::sqrt(2.0)),
        nn::Linear::zero(mlp_hidden, channels),
    });
  }
  return params;
}

std::vector<Tensor> RefineParams::parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks) nn::append(out, b.parameters());
  return out;
}

Tensor refine_block(const Tensor& rows, const TextEmbedding& text, const RefineBlock& block,
                    const OrthogonalIndex& index) {
  auto x = ops::add(rows, cross_attention_delta(block.norm_cross(rows), text, block.cross));
  x = ops::add(x, orthogonal_attention_delta(block.norm_orth(x), block.orth, index));
  auto hidden = ops::relu(block.mlp_in(block.norm_mlp(x)));
  return ops::add(x, block.mlp_out(hidden));
}

Triplane transformer_refine(const Triplane& feat, const TextEmbedding& text,
                            const RefineParams& params) {
  if (params.blocks.empty()) throw std::invalid_argument("transformer_refine: depth must be >= 1");
  const auto index = build_orthogonal_index(feat.resolution(), 1, params.cross_line_index);
  auto rows = feat.rows();
  for (const auto& block : params.blocks) rows = refine_block(rows, text, block, index);
  return Triplane::from_rows(rows, feat.resolution());
}

}  // namespace orthoplane
