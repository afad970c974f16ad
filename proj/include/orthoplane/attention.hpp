#pragma once

#include <string>
#include <vector>

#include "orthoplane/nn.hpp"
#include "orthoplane/ops.hpp"
#include "orthoplane/rng.hpp"
#include "orthoplane/triplane.hpp"

namespace orthoplane {

// Query/key/value/output maps for single- or multi-head attention. Inputs
// are row vectors, so q = x W_Q with W_Q of shape [query_dim x key_dim].
struct AttentionParams {
  Tensor w_q;
  Tensor w_k;
  Tensor w_v;
  Tensor w_o;  // [key_dim x out_dim]
  std::size_t heads = 1;

  // W_O starts at zero when zero_output is set, making the residual
  // attention an identity at initialization.
  static AttentionParams init(std::size_t query_dim, std::size_t kv_dim, std::size_t key_dim,
                              Rng& rng, std::size_t heads = 1, bool zero_output = true);
  std::size_t key_dim() const { return w_q.dim(1); }
  std::size_t query_dim() const { return w_q.dim(0); }
  std::size_t kv_dim() const { return w_k.dim(0); }
  std::size_t out_dim() const { return w_o.dim(1); }
  std::vector<Tensor> parameters() const { return {w_q, w_k, w_v, w_o}; }
  void validate(std::size_t query_dim, std::size_t kv_dim, const char* op) const;
};

struct Pixel {
  std::size_t u;
  std::size_t v;
  bool operator==(const Pixel&) const = default;
};

// Key pixels on `key_plane` attended by one query pixel of `query_plane`:
// the line sharing the query's coordinate on the common axis, then the
// remainder of the cross-line at `cross_line_index`.
struct OAKeySet {
  PlaneId query_plane;
  PlaneId key_plane;
  std::vector<Pixel> keys;
};

OAKeySet oa_key_set(std::size_t resolution, PlaneId query_plane, PlaneId key_plane,
                    Pixel query, std::size_t cross_line_index);

inline std::size_t default_cross_line_index(std::size_t resolution) { return resolution / 2; }

// Precomputed key rows for orthogonal attention over a batch of stacked
// triplanes whose rows are ordered (batch, plane, v, u). `first` and
// `second` hold the two partner planes of every query, normalized
// separately and summed.
struct OrthogonalIndex {
  std::size_t resolution = 0;
  std::size_t batch = 0;
  std::size_t cross_line_index = 0;
  ops::KeyIndex first;
  ops::KeyIndex second;
};

OrthogonalIndex build_orthogonal_index(std::size_t resolution, std::size_t batch,
                                       std::size_t cross_line_index);

// W_O applied to the sum of the two orthogonal attentions; no residual.
// rows: [batch * 3 * D * D x C].
Tensor orthogonal_attention_delta(const Tensor& rows, const AttentionParams& params,
                                  const OrthogonalIndex& index);

// Input plus the orthogonal attention increment. Every output plane is
// computed from the same input triplane.
Triplane orthogonal_attention(const Triplane& tri, const AttentionParams& params,
                              std::size_t cross_line_index);

// Closed toy vocabulary of shape, color and attribute words.
class Vocabulary {
 public:
  static const Vocabulary& toy();
  explicit Vocabulary(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  std::size_t id(const std::string& word) const;
  const std::string& word(std::size_t id) const { return words_.at(id); }
  // Splits on whitespace; unknown words throw std::invalid_argument.
  std::vector<std::size_t> tokenize(const std::string& caption) const;

 private:
  std::vector<std::string> words_;
};

inline constexpr std::size_t kMaxCaptionTokens = 8;

// L x d_model token embeddings, 1 <= L <= 8.
struct TextEmbedding {
  Tensor tokens;

  std::size_t length() const { return tokens.dim(0); }
  std::size_t width() const { return tokens.dim(1); }
};

// Looks up token rows of a [vocab x d_model] table (differentiable in the
// table).
TextEmbedding embed_tokens(const Tensor& table, const std::vector<std::size_t>& token_ids);

// Attention increment from query rows to text tokens; no residual.
Tensor cross_attention_delta(const Tensor& rows, const TextEmbedding& text,
                             const AttentionParams& params);
// Every triplane pixel attends to the text tokens; residual added.
Triplane cross_attention(const Triplane& tri, const TextEmbedding& text,
                         const AttentionParams& params);

// Pre-norm block: cross-attention, orthogonal attention, per-pixel MLP,
// each added back residually.
struct RefineBlock {
  nn::LayerNorm norm_cross;
  AttentionParams cross;
  nn::LayerNorm norm_orth;
  AttentionParams orth;
  nn::LayerNorm norm_mlp;
  nn::Linear mlp_in;
  nn::Linear mlp_out;

  std::vector<Tensor> parameters() const;
};

struct RefineParams {
  std::vector<RefineBlock> blocks;
  std::size_t cross_line_index = 0;

  static RefineParams init(std::size_t depth, std::size_t resolution, std::size_t channels,
                           std::size_t text_width, std::size_t key_dim, std::size_t mlp_hidden,
                           Rng& rng, std::size_t heads = 1);
  std::vector<Tensor> parameters() const;
};

Tensor refine_block(const Tensor& rows, const TextEmbedding& text, const RefineBlock& block,
                    const OrthogonalIndex& index);

Triplane transformer_refine(const Triplane& feat, const TextEmbedding& text,
                            const RefineParams& params);

}  // namespace orthoplane
