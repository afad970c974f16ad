#pragma once

#include <vector>

#include "orthoplane/rng.hpp"
#include "orthoplane/tensor.hpp"

// Small layer helpers shared by the attention, renderer and diffusion code.
namespace orthoplane::nn {

// Normal(0, stddev^2) leaf tensor that requires grad.
Tensor normal(Shape shape, Real stddev, Rng& rng);
Tensor zeros(Shape shape);
Tensor ones(Shape shape);

// Row-vector affine map x W + b on [N x in] inputs.
struct Linear {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng, Real gain = 1.0);
  static Linear zero(std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {weight, bias}; }
};

// Layer normalization over the last axis followed by a per-channel gain
// and bias.
struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm init(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  std::vector<Tensor> parameters() const { return {gain, bias}; }
};

void append(std::vector<Tensor>& into, const std::vector<Tensor>& more);

}  // namespace orthoplane::nn
