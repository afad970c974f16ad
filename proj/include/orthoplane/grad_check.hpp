#pragma once

#include <functional>
#include <vector>

#include "orthoplane/tensor.hpp"

namespace orthoplane {

// Compares the reverse-mode gradient of a scalar function against central
// differences. Returns max over coordinates of
//   |analytic - numeric| / max(1, |analytic|).
// Throws std::invalid_argument if f does not return a single element.
Real grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                Real eps = 1e-5);

// Same check over every coordinate of several leaf tensors that f closes
// over. The tensors are perturbed in place and restored.
Real grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, Real eps = 1e-5);

}  // namespace orthoplane
