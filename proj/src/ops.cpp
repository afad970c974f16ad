#include "orthoplane/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include <Eigen/Core>

namespace orthoplane::ops {

namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

Real* grad_of(const std::shared_ptr<TensorImpl>& impl) {
  return impl->requires_grad ? impl->grad_buffer().data() : nullptr;
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

// Elementwise binary op with the single-element broadcast rule.
template <typename F, typename DA, typename DB>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool same = a.shape() == b.shape();
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!same && !a_scalar && !b_scalar) shape_error(name, a.shape(), b.shape());
  const Shape shape = (same || b_scalar) ? a.shape() : b.shape();
  const std::size_t n = numel(shape);
  const std::size_t sa = a_scalar ? 0 : 1;
  const std::size_t sb = b_scalar ? 0 : 1;
  std::vector<Real> out(n);
  const Real* pa = a.data().data();
  const Real* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i * sa], pb[i * sb]);
  auto ia = a.impl();
  auto ib = b.impl();
  return make_result(name, shape, std::move(out), {a, b},
                     [ia, ib, n, sa, sb, da, db](const TensorImpl& o) {
                       const Real* x = ia->data.data();
                       const Real* y = ib->data.data();
                       if (Real* ga = grad_of(ia)) {
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i * sa] += o.grad[i] * da(x[i * sa], y[i * sb]);
                       }
                       if (Real* gb = grad_of(ib)) {
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i * sb] += o.grad[i] * db(x[i * sa], y[i * sb]);
                       }
                     });
}

// Elementwise unary op; the derivative may use both input and output.
template <typename F, typename D>
Tensor unary(const char* name, const Tensor& x, F f, D d) {
  const std::size_t n = x.size();
  std::vector<Real> out(n);
  const Real* px = x.data().data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(px[i]);
  auto ix = x.impl();
  return make_result(name, x.shape(), std::move(out), {x}, [ix, n, d](const TensorImpl& o) {
    Real* gx = grad_of(ix);
    if (!gx) return;
    const Real* in = ix->data.data();
    for (std::size_t i = 0; i < n; ++i) gx[i] += o.grad[i] * d(in[i], o.data[i]);
  });
}

struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for " + shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.length = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_matrix(const char* op, const Tensor& x) {
  if (x.rank() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a matrix, got " +
                                shape_str(x.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](Real x, Real y) { return x + y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](Real x, Real y) { return x - y; }, [](Real, Real) { return 1.0; },
      [](Real, Real) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](Real x, Real y) { return x * y; }, [](Real, Real y) { return y; },
      [](Real x, Real) { return x; });
}

Tensor neg(const Tensor& x) {
  return unary(
      "neg", x, [](Real v) { return -v; }, [](Real, Real) { return -1.0; });
}

Tensor scale(const Tensor& x, Real s) {
  return unary(
      "scale", x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Tensor add_scalar(const Tensor& x, Real s) {
  return unary(
      "add_scalar", x, [s](Real v) { return v + s; }, [](Real, Real) { return 1.0; });
}

Tensor add_rowwise(const Tensor& x, const Tensor& b) {
  require_matrix("add_rowwise", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (b.size() != cols) shape_error("add_rowwise", x.shape(), b.shape());
  std::vector<Real> out(x.data().begin(), x.data().end());
  const Real* pb = b.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += pb[c];
  auto ix = x.impl();
  auto ib = b.impl();
  return make_result("add_rowwise", x.shape(), std::move(out), {x, b},
                     [ix, ib, rows, cols](const TensorImpl& o) {
                       if (Real* gx = grad_of(ix)) {
                         for (std::size_t i = 0; i < rows * cols; ++i) gx[i] += o.grad[i];
                       }
                       if (Real* gb = grad_of(ib)) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c) gb[c] += o.grad[r * cols + c];
                       }
                     });
}

Tensor mul_rowwise(const Tensor& x, const Tensor& g) {
  require_matrix("mul_rowwise", x);
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (g.size() != cols) shape_error("mul_rowwise", x.shape(), g.shape());
  std::vector<Real> out(rows * cols);
  const Real* px = x.data().data();
  const Real* pg = g.data().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = px[r * cols + c] * pg[c];
  auto ix = x.impl();
  auto ig = g.impl();
  return make_result("mul_rowwise", x.shape(), std::move(out), {x, g},
                     [ix, ig, rows, cols](const TensorImpl& o) {
                       const Real* xv = ix->data.data();
                       const Real* gv = ig->data.data();
                       if (Real* gx = grad_of(ix)) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c)
                             gx[r * cols + c] += o.grad[r * cols + c] * gv[c];
                       }
                       if (Real* gg = grad_of(ig)) {
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t c = 0; c < cols; ++c)
                             gg[c] += o.grad[r * cols + c] * xv[r * cols + c];
                       }
                     });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_error("matmul", a.shape(), b.shape());
  std::vector<Real> out(m * n);
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
  auto ia = a.impl();
  auto ib = b.impl();
  return make_result("matmul", {m, n}, std::move(out), {a, b},
                     [ia, ib, m, k, n](const TensorImpl& o) {
                       ConstMap dout(o.grad.data(), m, n);
                       if (Real* ga = grad_of(ia)) {
                         MutMap(ga, m, k).noalias() +=
                             dout * ConstMap(ib->data.data(), k, n).transpose();
                       }
                       if (Real* gb = grad_of(ib)) {
                         MutMap(gb, k, n).noalias() +=
                             ConstMap(ia->data.data(), m, k).transpose() * dout;
                       }
                     });
}

Tensor transpose(const Tensor& x) {
  require_matrix("transpose", x);
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(m * n);
  MutMap(out.data(), n, m) = ConstMap(x.data().data(), m, n).transpose();
  auto ix = x.impl();
  return make_result("transpose", {n, m}, std::move(out), {x}, [ix, m, n](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      MutMap(gx, m, n) += ConstMap(o.grad.data(), n, m).transpose();
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts.front().shape();
  split_at(first, axis, "concat");
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) shape_error("concat", first, p.shape());
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.shape()[i] != first[i]) shape_error("concat", first, p.shape());
    }
    shape[axis] += p.shape()[axis];
  }
  const auto whole = split_at(shape, axis, "concat");
  std::vector<Real> out(numel(shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t width = p.shape()[axis] * whole.inner;
    const Real* src = p.data().data();
    for (std::size_t o = 0; o < whole.outer; ++o) {
      std::copy_n(src + o * width, width, out.begin() + o * whole.length * whole.inner + offset);
    }
    widths.push_back(width);
    offset += width;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  const std::size_t row = whole.length * whole.inner;
  return make_result("concat", shape, std::move(out), parts,
                     [impls, widths, row, outer = whole.outer](const TensorImpl& o) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < impls.size(); ++p) {
                         if (Real* g = grad_of(impls[p])) {
                           for (std::size_t r = 0; r < outer; ++r)
                             for (std::size_t i = 0; i < widths[p]; ++i)
                               g[r * widths[p] + i] += o.grad[r * row + off + i];
                         }
                         off += widths[p];
                       }
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", x.shape(), shape);
  std::vector<Real> out(x.data().begin(), x.data().end());
  auto ix = x.impl();
  return make_result("reshape", std::move(shape), std::move(out), {x}, [ix](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i];
    }
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto s = split_at(x.shape(), axis, "slice");
  if (length == 0 || start + length > s.length) {
    throw std::invalid_argument("slice: range [" + std::to_string(start) + ", " +
                                std::to_string(start + length) + ") out of bounds for " +
                                shape_str(x.shape()));
  }
  Shape shape = x.shape();
  shape[axis] = length;
  std::vector<Real> out(numel(shape));
  const Real* src = x.data().data();
  const std::size_t w = length * s.inner;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(src + (o * s.length + start) * s.inner, w, out.begin() + o * w);
  }
  auto ix = x.impl();
  return make_result("slice", shape, std::move(out), {x}, [ix, s, start, w](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      for (std::size_t r = 0; r < s.outer; ++r)
        for (std::size_t i = 0; i < w; ++i)
          gx[(r * s.length + start) * s.inner + i] += o.grad[r * w + i];
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::int64_t>& index) {
  if (x.rank() < 1 || index.empty()) throw std::invalid_argument("gather_rows: empty input");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.size() / rows;
  for (auto i : index) {
    if (i < -1 || i >= static_cast<std::int64_t>(rows)) {
      throw std::out_of_range("gather_rows: index " + std::to_string(i) + " out of range for " +
                              shape_str(x.shape()));
    }
  }
  Shape shape = x.shape();
  shape[0] = index.size();
  std::vector<Real> out(numel(shape), 0.0);
  const Real* src = x.data().data();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= 0) std::copy_n(src + index[r] * width, width, out.begin() + r * width);
  }
  if (!grad_enabled() || !x.requires_grad()) return Tensor::from(shape, std::move(out));
  auto ix = x.impl();
  return make_result("gather_rows", shape, std::move(out), {x},
                     [ix, index, width](const TensorImpl& o) {
                       Real* gx = grad_of(ix);
                       if (!gx) return;
                       for (std::size_t r = 0; r < index.size(); ++r) {
                         if (index[r] < 0) continue;
                         Real* dst = gx + index[r] * width;
                         const Real* g = o.grad.data() + r * width;
                         for (std::size_t i = 0; i < width; ++i) dst[i] += g[i];
                       }
                     });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](Real v) { return std::log(v); }, [](Real v, Real) { return 1.0 / v; });
}

Tensor softplus(const Tensor& x) {
  return unary(
      "softplus", x,
      [](Real v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](Real v, Real) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](Real v) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      },
      [](Real, Real y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](Real v) { return v > 0 ? v : 0.0; },
      [](Real v, Real) { return v > 0 ? 1.0 : 0.0; });
}

Tensor clamp(const Tensor& x, Real lo, Real hi) {
  return unary(
      "clamp", x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
      [lo, hi](Real v, Real) { return (v > lo && v < hi) ? 1.0 : 0.0; });
}

Tensor layer_norm(const Tensor& x, Real eps) {
  if (x.rank() < 1) throw std::invalid_argument("layer_norm: scalar input");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  std::vector<Real> out(x.size());
  std::vector<Real> inv_std(rows);
  const Real* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = px + r * width;
    Real mu = 0;
    for (std::size_t i = 0; i < width; ++i) mu += row[i];
    mu /= static_cast<Real>(width);
    Real var = 0;
    for (std::size_t i = 0; i < width; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<Real>(width);
    const Real is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t i = 0; i < width; ++i) out[r * width + i] = (row[i] - mu) * is;
  }
  auto ix = x.impl();
  return make_result("layer_norm", x.shape(), std::move(out), {x},
                     [ix, rows, width, inv_std = std::move(inv_std)](const TensorImpl& o) {
                       Real* gx = grad_of(ix);
                       if (!gx) return;
                       const Real w = static_cast<Real>(width);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const Real* y = o.data.data() + r * width;
                         const Real* dy = o.grad.data() + r * width;
                         Real mean_dy = 0, mean_dy_y = 0;
                         for (std::size_t i = 0; i < width; ++i) {
                           mean_dy += dy[i];
                           mean_dy_y += dy[i] * y[i];
                         }
                         mean_dy /= w;
                         mean_dy_y /= w;
                         for (std::size_t i = 0; i < width; ++i)
                           gx[r * width + i] += inv_std[r] * (dy[i] - mean_dy - y[i] * mean_dy_y);
                       }
                     });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "softmax");
  std::vector<Real> out(x.size());
  const Real* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t j = 0; j < s.length; ++j) mx = std::max(mx, px[base + j * s.inner]);
      Real z = 0;
      for (std::size_t j = 0; j < s.length; ++j) {
        const Real e = std::exp(px[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.length; ++j) out[base + j * s.inner] /= z;
    }
  }
  auto ix = x.impl();
  return make_result("softmax", x.shape(), std::move(out), {x}, [ix, s](const TensorImpl& o) {
    Real* gx = grad_of(ix);
    if (!gx) return;
    for (std::size_t r = 0; r < s.outer; ++r) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = r * s.length * s.inner + in;
        Real dot = 0;
        for (std::size_t j = 0; j < s.length; ++j) {
          const std::size_t at = base + j * s.inner;
          dot += o.grad[at] * o.data[at];
        }
        for (std::size_t j = 0; j < s.length; ++j) {
          const std::size_t at = base + j * s.inner;
          gx[at] += o.data[at] * (o.grad[at] - dot);
        }
      }
    }
  });
}

Tensor sum(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  auto ix = x.impl();
  return make_result("sum", {1}, {total}, {x}, [ix](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += o.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) {
  Real total = 0;
  for (Real v : x.data()) total += v;
  const Real n = static_cast<Real>(x.size());
  auto ix = x.impl();
  return make_result("mean", {1}, {total / n}, {x}, [ix, n](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      const Real g = o.grad[0] / n;
      for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g;
    }
  });
}

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "sum_axis");
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  if (shape.empty()) shape = {1};
  std::vector<Real> out(s.outer * s.inner, 0.0);
  const Real* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.length; ++j)
      for (std::size_t in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += px[(o * s.length + j) * s.inner + in];
  auto ix = x.impl();
  return make_result("sum_axis", shape, std::move(out), {x}, [ix, s](const TensorImpl& o) {
    if (Real* gx = grad_of(ix)) {
      for (std::size_t r = 0; r < s.outer; ++r)
        for (std::size_t j = 0; j < s.length; ++j)
          for (std::size_t in = 0; in < s.inner; ++in)
            gx[(r * s.length + j) * s.inner + in] += o.grad[r * s.inner + in];
    }
  });
}

Tensor cumsum_exclusive(const Tensor& x, std::size_t axis) {
  const auto s = split_at(x.shape(), axis, "cumsum_exclusive");
  std::vector<Real> out(x.size());
  const Real* px = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      Real acc = 0;
      for (std::size_t j = 0; j < s.length; ++j) {
        const std::size_t at = (o * s.length + j) * s.inner + in;
        out[at] = acc;
        acc += px[at];
      }
    }
  }
  auto ix = x.impl();
  return make_result("cumsum_exclusive", x.shape(), std::move(out), {x},
                     [ix, s](const TensorImpl& o) {
                       Real* gx = grad_of(ix);
                       if (!gx) return;
                       // Adjoint is the reversed exclusive cumulative sum.
                       for (std::size_t r = 0; r < s.outer; ++r) {
                         for (std::size_t in = 0; in < s.inner; ++in) {
                           Real acc = 0;
                           for (std::size_t j = s.length; j-- > 0;) {
                             const std::size_t at = (r * s.length + j) * s.inner + in;
                             gx[at] += acc;
                             acc += o.grad[at];
                           }
                         }
                       }
                     });
}

void KeyIndex::push_query(const std::vector<std::uint32_t>& query_keys) {
  keys.insert(keys.end(), query_keys.begin(), query_keys.end());
  offsets.push_back(static_cast<std::uint32_t>(keys.size()));
}

Tensor sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const KeyIndex& index, std::size_t heads, Real scale) {
  require_matrix("sparse_attention", q);
  require_matrix("sparse_attention", k);
  require_matrix("sparse_attention", v);
  const std::size_t nq = q.dim(0), dk = q.dim(1), nk = k.dim(0), dv = v.dim(1);
  if (k.dim(1) != dk) shape_error("sparse_attention", q.shape(), k.shape());
  if (v.dim(0) != nk) shape_error("sparse_attention", k.shape(), v.shape());
  if (heads == 0 || dk % heads != 0 || dv % heads != 0) {
    throw std::invalid_argument("sparse_attention: head count " + std::to_string(heads) +
                                " does not divide key/value widths");
  }
  if (index.queries() != nq) {
    throw std::invalid_argument("sparse_attention: key index has " +
                                std::to_string(index.queries()) + " queries, q has " +
                                std::to_string(nq));
  }
  for (auto key : index.keys) {
    if (key >= nk) throw std::out_of_range("sparse_attention: key row out of range");
  }
  const std::size_t hk = dk / heads, hv = dv / heads;
  if (scale == 0.0) scale = 1.0 / std::sqrt(static_cast<Real>(hk));

  const bool keep = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
  std::vector<Real> out(nq * dv, 0.0);
  std::vector<Real> probs(keep ? index.keys.size() * heads : 0);
  const Real* pq = q.data().data();
  const Real* pk = k.data().data();
  const Real* pv = v.data().data();

#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < static_cast<std::int64_t>(nq); ++n) {
    const std::uint32_t begin = index.offsets[n], end = index.offsets[n + 1];
    if (begin == end) continue;
    std::vector<Real> p(end - begin);
    for (std::size_t h = 0; h < heads; ++h) {
      const Real* qn = pq + n * dk + h * hk;
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::uint32_t j = begin; j < end; ++j) {
        const Real* kj = pk + index.keys[j] * dk + h * hk;
        Real s = 0;
        for (std::size_t c = 0; c < hk; ++c) s += qn[c] * kj[c];
        p[j - begin] = s * scale;
        mx = std::max(mx, p[j - begin]);
      }
      Real z = 0;
      for (auto& e : p) {
        e = std::exp(e - mx);
        z += e;
      }
      Real* on = out.data() + n * dv + h * hv;
      for (std::uint32_t j = begin; j < end; ++j) {
        const Real w = p[j - begin] / z;
        if (keep) probs[j * heads + h] = w;
        const Real* vj = pv + index.keys[j] * dv + h * hv;
        for (std::size_t c = 0; c < hv; ++c) on[c] += w * vj[c];
      }
    }
  }

  if (!keep) return Tensor::from({nq, dv}, std::move(out));
  auto iq = q.impl();
  auto ik = k.impl();
  auto iv = v.impl();
  return make_result(
      "sparse_attention", {nq, dv}, std::move(out), {q, k, v},
      [iq, ik, iv, index, heads, hk, hv, dk, dv, scale,
       probs = std::move(probs)](const TensorImpl& o) {
        Real* gq = grad_of(iq);
        Real* gk = grad_of(ik);
        Real* gv = grad_of(iv);
        const Real* qd = iq->data.data();
        const Real* kd = ik->data.data();
        const Real* vd = iv->data.data();
        std::vector<Real> ds;
        for (std::size_t n = 0; n < index.queries(); ++n) {
          const std::uint32_t begin = index.offsets[n], end = index.offsets[n + 1];
          ds.assign(end - begin, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const Real* dout = o.grad.data() + n * dv + h * hv;
            Real dot = 0;
            for (std::uint32_t j = begin; j < end; ++j) {
              const Real* vj = vd + index.keys[j] * dv + h * hv;
              Real dp = 0;
              for (std::size_t c = 0; c < hv; ++c) dp += dout[c] * vj[c];
              ds[j - begin] = dp;
              dot += dp * probs[j * heads + h];
            }
            for (std::uint32_t j = begin; j < end; ++j) {
              const Real p = probs[j * heads + h];
              const std::size_t key = index.keys[j];
              if (gv) {
                Real* gvj = gv + key * dv + h * hv;
                for (std::size_t c = 0; c < hv; ++c) gvj[c] += p * dout[c];
              }
              const Real dscore = p * (ds[j - begin] - dot) * scale;
              if (gq) {
                Real* gqn = gq + n * dk + h * hk;
                const Real* kj = kd + key * dk + h * hk;
                for (std::size_t c = 0; c < hk; ++c) gqn[c] += dscore * kj[c];
              }
              if (gk) {
                Real* gkj = gk + key * dk + h * hk;
                const Real* qn = qd + n * dk + h * hk;
                for (std::size_t c = 0; c < hk; ++c) gkj[c] += dscore * qn[c];
              }
            }
          }
        }
      });
}

}  // namespace orthoplane::ops
