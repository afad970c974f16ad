#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "orthoplane/attention.hpp"
#include "orthoplane/grad_check.hpp"
#include "support/oa_reference.hpp"

using namespace orthoplane;

namespace {

Triplane random_triplane(std::size_t res, std::size_t ch, Rng& rng) {
  Triplane tri(res, ch);
  for (auto& v : tri.tensor().mutable_data()) v = rng.uniform(-1, 1);
  return tri;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

void zero_out(Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0;
}

}  // namespace

TEST(OAKeySet, HandEnumeration) {
  auto set = oa_key_set(4, PlaneId::xy, PlaneId::xz, {1, 2}, 0);
  const std::vector<Pixel> expected = {{1, 0}, {1, 1}, {1, 2}, {1, 3}, {0, 0}, {2, 0}, {3, 0}};
  EXPECT_EQ(set.keys, expected);
}

TEST(OAKeySet, DegenerateResolution) {
  auto set = oa_key_set(1, PlaneId::yz, PlaneId::xy, {0, 0}, 0);
  ASSERT_EQ(set.keys.size(), 1u);
  EXPECT_EQ(set.keys[0], (Pixel{0, 0}));
}

TEST(OAKeySet, SharedCoordinateOnCrossLine) {
  auto set = oa_key_set(4, PlaneId::xy, PlaneId::xz, {0, 3}, 0);
  EXPECT_EQ(set.keys.size(), 7u);
  std::set<std::pair<std::size_t, std::size_t>> unique;
  for (auto k : set.keys) unique.insert({k.u, k.v});
  EXPECT_EQ(unique.size(), 7u);
}

TEST(OAKeySet, SizeBoundsForAllPlanePairs) {
  for (std::size_t d = 1; d <= 6; ++d) {
    for (auto qp : kPlanes) {
      for (auto kp : kPlanes) {
        if (qp == kp) continue;
        for (std::size_t cli = 0; cli < d; ++cli) {
          auto set = oa_key_set(d, qp, kp, {d - 1, 0}, cli);
          EXPECT_GE(set.keys.size(), d);
          EXPECT_LE(set.keys.size(), 2 * d - 1);
        }
      }
    }
  }
}

TEST(OAKeySet, IdenticalPlanesRejected) {
  EXPECT_THROW(oa_key_set(4, PlaneId::xz, PlaneId::xz, {0, 0}, 0), std::invalid_argument);
}

TEST(OAKeySet, SharedRelationIsSymmetric) {
  const std::size_t d = 5;
  // (a, b) on xy attends to the line x = a in xz, and (a, z) on xz to x = a in xy.
  for (std::size_t a = 0; a < d; ++a) {
    auto from_xy = oa_key_set(d, PlaneId::xy, PlaneId::xz, {a, 3}, 2);
    for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(from_xy.keys[i].u, a);
    auto from_xz = oa_key_set(d, PlaneId::xz, PlaneId::xy, {a, 1}, 2);
    for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(from_xz.keys[i].u, a);
  }
  // y is shared between xy (v) and yz (u).
  auto from_xy = oa_key_set(d, PlaneId::xy, PlaneId::yz, {0, 4}, 2);
  for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(from_xy.keys[i].u, 4u);
  auto from_yz = oa_key_set(d, PlaneId::yz, PlaneId::xy, {4, 1}, 2);
  for (std::size_t i = 0; i < d; ++i) EXPECT_EQ(from_yz.keys[i].v, 4u);
}

TEST(OrthogonalIndex, AgreesWithKeySets) {
  const PlaneId partners[3][2] = {{PlaneId::xz, PlaneId::yz},
                                  {PlaneId::xy, PlaneId::yz},
                                  {PlaneId::xz, PlaneId::xy}};
  for (std::size_t d = 1; d <= 5; ++d) {
    const std::size_t cli = default_cross_line_index(d);
    auto index = build_orthogonal_index(d, 2, cli);
    for (std::size_t b = 0; b < 2; ++b) {
      for (int p = 0; p < 3; ++p) {
        for (std::size_t v = 0; v < d; ++v) {
          for (std::size_t u = 0; u < d; ++u) {
            const std::size_t row = ((b * 3 + p) * d + v) * d + u;
            for (int which = 0; which < 2; ++which) {
              const auto& ki = which == 0 ? index.first : index.second;
              const PlaneId kp = partners[p][which];
              auto set = oa_key_set(d, static_cast<PlaneId>(p), kp, {u, v}, cli);
              ASSERT_EQ(ki.offsets[row + 1] - ki.offsets[row], set.keys.size());
              for (std::size_t i = 0; i < set.keys.size(); ++i) {
                const auto k = set.keys[i];
                const std::size_t expected =
                    ((b * 3 + static_cast<std::size_t>(kp)) * d + k.v) * d + k.u;
                EXPECT_EQ(ki.keys[ki.offsets[row] + i], expected);
              }
            }
          }
        }
      }
    }
  }
}

TEST(OrthogonalAttention, ZeroValueMapIsIdentity) {
  Rng rng(1);
  auto tri = random_triplane(4, 3, rng);
  auto params = AttentionParams::init(3, 3, 4, rng, 1, false);
  zero_out(params.w_v);
  auto out = orthogonal_attention(tri, params, 2);
  for (std::size_t i = 0; i < tri.tensor().size(); ++i) EXPECT_EQ(out.tensor()[i], tri.tensor()[i]);
}

TEST(OrthogonalAttention, ZeroInitOutputIsIdentity) {
  Rng rng(2);
  auto tri = random_triplane(3, 2, rng);
  auto params = AttentionParams::init(2, 2, 4, rng);
  auto out = orthogonal_attention(tri, params, 1);
  for (std::size_t i = 0; i < tri.tensor().size(); ++i) EXPECT_EQ(out.tensor()[i], tri.tensor()[i]);
}

TEST(OrthogonalAttention, ZeroKeyMapAveragesValues) {
  Rng rng(3);
  const std::size_t d = 4, c = 2;
  auto tri = random_triplane(d, c, rng);
  auto params = AttentionParams::init(c, c, c, rng, 1, false);
  zero_out(params.w_k);
  // Identity W_V and W_O so the increment is the plain mean of key features.
  zero_out(params.w_v);
  zero_out(params.w_o);
  for (std::size_t i = 0; i < c; ++i) {
    params.w_v.mutable_data()[i * c + i] = 1.0;
    params.w_o.mutable_data()[i * c + i] = 1.0;
  }
  auto out = orthogonal_attention(tri, params, 1);
  const PlaneId partners[2] = {PlaneId::xz, PlaneId::yz};
  for (std::size_t v = 0; v < d; ++v) {
    for (std::size_t u = 0; u < d; ++u) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        double expected = tri.at(PlaneId::xy, u, v, ch);
        for (auto kp : partners) {
          auto set = oa_key_set(d, PlaneId::xy, kp, {u, v}, 1);
          double m = 0;
          for (auto k : set.keys) m += tri.at(kp, k.u, k.v, ch);
          expected += m / static_cast<double>(set.keys.size());
        }
        EXPECT_NEAR(out.at(PlaneId::xy, u, v, ch), expected, 1e-14);
      }
    }
  }
}

TEST(OrthogonalAttention, MatchesBruteForce) {
  for (std::size_t d = 1; d <= 4; ++d) {
    for (std::size_t c = 1; c <= 2; ++c) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed * 31 + d * 7 + c);
        auto tri = random_triplane(d, c, rng);
        auto params = AttentionParams::init(c, c, 4, rng, 1, false);
        const std::size_t cli = default_cross_line_index(d);
        auto fast = orthogonal_attention(tri, params, cli);
        auto slow = oracle::brute_force_orthogonal_attention(tri, params, cli);
        EXPECT_LT(max_abs_diff(fast.tensor(), slow.tensor()), 1e-10) << d << " " << c;
      }
    }
  }
}

TEST(OrthogonalAttention, MultiHeadMatchesBruteForce) {
  Rng rng(77);
  auto tri = random_triplane(4, 3, rng);
  auto params = AttentionParams::init(3, 3, 6, rng, 3, false);
  auto fast = orthogonal_attention(tri, params, 0);
  auto slow = oracle::brute_force_orthogonal_attention(tri, params, 0);
  EXPECT_LT(max_abs_diff(fast.tensor(), slow.tensor()), 1e-10);
}

TEST(OrthogonalAttention, InvariantToKeyPermutation) {
  Rng rng(5);
  const std::size_t d = 4;
  auto tri = random_triplane(d, 2, rng);
  auto params = AttentionParams::init(2, 2, 4, rng, 1, false);
  auto index = build_orthogonal_index(d, 1, 2);
  auto shuffled = index;
  for (auto* ki : {&shuffled.first, &shuffled.second}) {
    for (std::size_t n = 0; n < ki->queries(); ++n) {
      auto b = ki->keys.begin() + ki->offsets[n];
      auto e = ki->keys.begin() + ki->offsets[n + 1];
      std::reverse(b, e);
      if (e - b > 2) std::rotate(b, b + 1, e);
    }
  }
  auto a = orthogonal_attention_delta(tri.rows(), params, index);
  auto b = orthogonal_attention_delta(tri.rows(), params, shuffled);
  EXPECT_LT(max_abs_diff(a, b), 1e-14);
}

TEST(OrthogonalAttention, RejectsChannelMismatch) {
  Rng rng(6);
  auto tri = random_triplane(3, 2, rng);
  auto params = AttentionParams::init(3, 3, 4, rng);
  EXPECT_THROW(orthogonal_attention(tri, params, 1), std::invalid_argument);
}

TEST(OrthogonalAttention, GradCheck) {
  Rng rng(8);
  auto tri = random_triplane(3, 2, rng);
  tri.tensor().set_requires_grad(true);
  auto params = AttentionParams::init(2, 2, 4, rng, 2, false);
  Rng wr(9);
  auto weights = nn::normal({3, 3, 3, 2}, 1.0, wr).detach();
  auto f = [&] {
    return ops::sum(ops::mul(orthogonal_attention(tri, params, 1).tensor(), weights));
  };
  std::vector<Tensor> all = params.parameters();
  all.push_back(tri.tensor());
  EXPECT_LT(grad_check(f, all), 1e-6);
}

TEST(CrossAttention, SingleTokenGivesUniformIncrement) {
  Rng rng(10);
  auto tri = random_triplane(3, 2, rng);
  TextEmbedding text{nn::normal({1, 5}, 1.0, rng).detach()};
  auto params = AttentionParams::init(2, 5, 3, rng, 1, false);
  auto out = cross_attention(tri, text, params);
  // W_O(W_V(token))
  std::vector<double> expected(2, 0.0);
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t j = 0; j < 3; ++j) {
      double vj = 0;
      for (std::size_t i = 0; i < 5; ++i) vj += text.tokens[i] * params.w_v[i * 3 + j];
      expected[o] += vj * params.w_o[j * 2 + o];
    }
  for (std::size_t r = 0; r < tri.tensor().size() / 2; ++r)
    for (std::size_t o = 0; o < 2; ++o)
      EXPECT_NEAR(out.tensor()[r * 2 + o] - tri.tensor()[r * 2 + o], expected[o], 1e-13);
}

TEST(CrossAttention, ZeroValueIsIdentity) {
  Rng rng(11);
  auto tri = random_triplane(3, 2, rng);
  TextEmbedding text{nn::normal({3, 4}, 1.0, rng).detach()};
  auto params = AttentionParams::init(2, 4, 4, rng, 2, false);
  zero_out(params.w_v);
  auto out = cross_attention(tri, text, params);
  for (std::size_t i = 0; i < tri.tensor().size(); ++i) EXPECT_EQ(out.tensor()[i], tri.tensor()[i]);
}

TEST(CrossAttention, TwoTokenClosedForm) {
  // Orthogonal keys (identity W_K on one-hot tokens); query aligned with
  // token 1 at strength s. Weight of token 1 is 1 / (1 + exp(-s / sqrt(2))).
  Triplane tri(Tensor::full({3, 2, 2, 2}, 0.0));
  for (std::size_t r = 0; r < 12; ++r) tri.tensor().mutable_data()[r * 2] = 1.0;
  TextEmbedding text{Tensor::from({2, 2}, {1, 0, 0, 1})};
  Rng rng(12);
  auto params = AttentionParams::init(2, 2, 2, rng, 1, false);
  params.w_k = Tensor::from({2, 2}, {1, 0, 0, 1});
  params.w_v = Tensor::from({2, 2}, {0.3, -0.7, 1.1, 0.4});
  params.w_o = Tensor::from({2, 2}, {1, 0, 0, 1});
  const double v1[2] = {0.3, -0.7}, v2[2] = {1.1, 0.4};
  for (double s : {0.5, 4.0, 60.0}) {
    params.w_q = Tensor::from({2, 2}, {s, 0, 0, s});
    auto out = cross_attention(tri, text, params);
    const double p1 = 1.0 / (1.0 + std::exp(-s / std::sqrt(2.0)));
    for (std::size_t o = 0; o < 2; ++o) {
      const double expected = p1 * v1[o] + (1 - p1) * v2[o];
      EXPECT_NEAR(out.tensor()[o] - tri.tensor()[o], expected, 1e-14);
      if (s == 60.0) {
        EXPECT_NEAR(out.tensor()[o] - tri.tensor()[o], v1[o], 1e-12);
      }
    }
  }
}

TEST(CrossAttention, EmptyTokensRejected) {
  Rng rng(13);
  auto tri = random_triplane(2, 2, rng);
  auto params = AttentionParams::init(2, 4, 4, rng);
  EXPECT_THROW(cross_attention(tri, TextEmbedding{}, params), std::invalid_argument);
  EXPECT_THROW(embed_tokens(Tensor::zeros({5, 4}), {}), std::invalid_argument);
}

TEST(CrossAttention, MatchesSparseAttentionOverAllTokens) {
  Rng rng(14);
  auto tri = random_triplane(3, 2, rng);
  TextEmbedding text{nn::normal({4, 3}, 1.0, rng).detach()};
  auto params = AttentionParams::init(2, 3, 4, rng, 2, false);
  auto dense = cross_attention_delta(tri.rows(), text, params);
  ops::KeyIndex index;
  for (std::size_t n = 0; n < 27; ++n) index.push_query({0, 1, 2, 3});
  auto sparse = ops::matmul(ops::sparse_attention(ops::matmul(tri.rows(), params.w_q),
                                                  ops::matmul(text.tokens, params.w_k),
                                                  ops::matmul(text.tokens, params.w_v), index, 2),
                            params.w_o);
  EXPECT_LT(max_abs_diff(dense, sparse), 1e-14);
}

TEST(Vocabulary, TokenizeAndReject) {
  const auto& vocab = Vocabulary::toy();
  auto ids = vocab.tokenize("a small red box");
  ASSERT_EQ(ids.size(), 4u);
  EXPECT_EQ(vocab.word(ids[2]), "red");
  EXPECT_THROW(vocab.tokenize("a dodecahedron"), std::invalid_argument);
  EXPECT_THROW(vocab.tokenize("   "), std::invalid_argument);
}

TEST(TransformerRefine, ZeroValueAndMlpWeightsIsIdentity) {
  Rng rng(20);
  auto tri = random_triplane(4, 2, rng);
  TextEmbedding text{nn::normal({2, 3}, 1.0, rng).detach()};
  auto params = RefineParams::init(2, 4, 2, 3, 4, 8, rng);
  for (auto& b : params.blocks) {
    b.cross.w_o = nn::normal({4, 2}, 1.0, rng);
    b.orth.w_o = nn::normal({4, 2}, 1.0, rng);
    zero_out(b.cross.w_v);
    zero_out(b.orth.w_v);
    zero_out(b.mlp_out.weight);
    zero_out(b.mlp_out.bias);
  }
  auto out = transformer_refine(tri, text, params);
  for (std::size_t i = 0; i < tri.tensor().size(); ++i) EXPECT_EQ(out.tensor()[i], tri.tensor()[i]);
}

TEST(TransformerRefine, DepthOneIsManualComposition) {
  Rng rng(21);
  auto tri = random_triplane(3, 2, rng);
  TextEmbedding text{nn::normal({2, 3}, 1.0, rng).detach()};
  auto params = RefineParams::init(1, 3, 2, 3, 4, 8, rng);
  auto& b = params.blocks[0];
  b.cross.w_o = nn::normal({4, 2}, 1.0, rng);
  b.orth.w_o = nn::normal({4, 2}, 1.0, rng);
  b.mlp_out = nn::Linear::init(8, 2, rng);
  auto out = transformer_refine(tri, text, params);

  auto x = tri.rows();
  x = ops::add(x, cross_attention_delta(b.norm_cross(x), text, b.cross));
  auto index = build_orthogonal_index(3, 1, params.cross_line_index);
  x = ops::add(x, orthogonal_attention_delta(b.norm_orth(x), b.orth, index));
  x = ops::add(x, b.mlp_out(ops::relu(b.mlp_in(b.norm_mlp(x)))));
  EXPECT_EQ(max_abs_diff(out.tensor(), ops::reshape(x, {3, 3, 3, 2})), 0.0);
}

TEST(TransformerRefine, GradCheckDepthTwo) {
  Rng rng(22);
  auto tri = random_triplane(4, 2, rng);
  TextEmbedding text{nn::normal({2, 3}, 1.0, rng).detach()};
  auto params = RefineParams::init(2, 4, 2, 3, 4, 8, rng);
  for (auto& b : params.blocks) {
    b.cross.w_o = nn::normal({4, 2}, 0.5, rng);
    b.orth.w_o = nn::normal({4, 2}, 0.5, rng);
    b.mlp_out = nn::Linear::init(8, 2, rng);
  }
  Rng wr(23);
  auto weights = nn::normal({3, 4, 4, 2}, 1.0, wr).detach();
  auto f = [&] {
    return ops::sum(ops::mul(transformer_refine(tri, text, params).tensor(), weights));
  };
  std::vector<Tensor> all = params.parameters();
  all.push_back(tri.tensor());
  EXPECT_LT(grad_check(f, all), 1e-5);
}
