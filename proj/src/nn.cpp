#include "orthoplane/nn.hpp"

#include <cmath>

#include "orthoplane/ops.hpp"

namespace orthoplane::nn {

Tensor normal(Shape shape, Real stddev, Rng& rng) {
  std::vector<Real> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }

Tensor ones(Shape shape) { return Tensor::full(std::move(shape), 1.0, true); }

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, Real gain) {
  return {normal({in, out}, gain / std::sqrt(static_cast<Real>(in)), rng), zeros({out})};
}

Linear Linear::zero(std::size_t in, std::size_t out) { return {zeros({in, out}), zeros({out})}; }

Tensor Linear::operator()(const Tensor& x) const {
  return ops::add_rowwise(ops::matmul(x, weight), bias);
}

LayerNorm LayerNorm::init(std::size_t width) { return {ones({width}), zeros({width})}; }

Tensor LayerNorm::operator()(const Tensor& x) const {
  return ops::add_rowwise(ops::mul_rowwise(ops::layer_norm(x), gain), bias);
}

void append(std::vector<Tensor>& into, const std::vector<Tensor>& more) {
  into.insert(into.end(), more.begin(), more.end());
}

}  // namespace orthoplane::nn
