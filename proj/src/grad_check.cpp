#include "orthoplane/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace orthoplane {

namespace {

Real scalar_output(const Tensor& y) {
  if (y.size() != 1) {
    throw std::invalid_argument("grad_check: function output must be scalar, got " +
                                shape_str(y.shape()));
  }
  return y.item();
}

}  // namespace

Real grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, Real eps) {
  Tensor leaf = x.clone(true);
  return grad_check([&] { return f(leaf); }, {leaf}, eps);
}

Real grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params, Real eps) {
  std::vector<bool> previous;
  for (auto& p : params) {
    previous.push_back(p.requires_grad());
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor y = f();
  scalar_output(y);
  if (y.requires_grad()) y.backward();

  Real worst = 0.0;
  NoGradGuard no_grad;
  for (auto& p : params) {
    std::vector<Real> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const Real saved = values[i];
      values[i] = saved + eps;
      const Real plus = scalar_output(f());
      values[i] = saved - eps;
      const Real minus = scalar_output(f());
      values[i] = saved;
      const Real numeric = (plus - minus) / (2.0 * eps);
      const Real err = std::abs(analytic[i] - numeric) / std::max<Real>(1.0, std::abs(analytic[i]));
      worst = std::max(worst, std::isnan(err) ? INFINITY : err);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].zero_grad();
    params[i].set_requires_grad(previous[i]);
  }
  return worst;
}

}  // namespace orthoplane
