#pragma once

#include <cstdint>
#include <vector>

#include "orthoplane/tensor.hpp"

// Differentiable primitives. Shapes must match exactly; the only implicit
// broadcast is a single-element operand against a tensor.
namespace orthoplane::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, Real s);
Tensor add_scalar(const Tensor& x, Real s);

// x: [n x c], b: [c]. Adds b to every row.
Tensor add_rowwise(const Tensor& x, const Tensor& b);
// x: [n x c], g: [c]. Scales every row elementwise by g.
Tensor mul_rowwise(const Tensor& x, const Tensor& g);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
// Selects rows along axis 0. Index -1 yields a zero row.
Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor clamp(const Tensor& x, Real lo, Real hi);

// Normalizes over the last axis (no affine part).
Tensor layer_norm(const Tensor& x, Real eps = 1e-5);
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_axis(const Tensor& x, std::size_t axis);
// out[..., j, ...] = sum_{k<j} x[..., k, ...]
Tensor cumsum_exclusive(const Tensor& x, std::size_t axis);

// Ragged key lists, one per query row (CSR layout).
struct KeyIndex {
  std::vector<std::uint32_t> offsets{0};
  std::vector<std::uint32_t> keys;

  std::size_t queries() const { return offsets.size() - 1; }
  void push_query(const std::vector<std::uint32_t>& query_keys);
};

// Scaled dot-product attention where query row n attends only to the key
// rows listed in index for n; softmax is normalized per query and per head.
// q: [nq x dk], k: [nk x dk], v: [nk x dv]. Scale defaults to
// 1/sqrt(dk/heads).
Tensor sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const KeyIndex& index, std::size_t heads = 1, Real scale = 0.0);

}  // namespace orthoplane::ops

namespace orthoplane {

inline Tensor operator+(const Tensor& a, const Tensor& b) { return ops::add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return ops::sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return ops::mul(a, b); }
inline Tensor operator-(const Tensor& x) { return ops::neg(x); }
inline Tensor operator*(const Tensor& x, Real s) { return ops::scale(x, s); }
inline Tensor operator*(Real s, const Tensor& x) { return ops::scale(x, s); }
inline Tensor operator+(const Tensor& x, Real s) { return ops::add_scalar(x, s); }
inline Tensor operator+(Real s, const Tensor& x) { return ops::add_scalar(x, s); }
inline Tensor operator-(const Tensor& x, Real s) { return ops::add_scalar(x, -s); }
inline Tensor operator-(Real s, const Tensor& x) { return ops::add_scalar(ops::neg(x), s); }

}  // namespace orthoplane
