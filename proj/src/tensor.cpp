#include "orthoplane/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace orthoplane {

namespace {

thread_local bool g_grad_enabled = true;
std::string g_corrupted_adjoint;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<Real>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto n = numel(shape);
  return from(std::move(shape), std::vector<Real>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw std::out_of_range("tensor: axis " + std::to_string(axis) + " out of range for " +
                            shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::size() const { return impl_->data.size(); }

std::span<const Real> Tensor::data() const { return impl_->data; }

std::span<Real> Tensor::mutable_data() { return impl_->data; }

Real Tensor::item() const {
  if (size() != 1) {
    throw std::logic_error("tensor: item() on tensor of shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw std::logic_error("tensor: requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const Real> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

Tensor Tensor::clone(bool requires_grad) const {
  return from(shape(), impl_->data, requires_grad);
}

std::vector<std::shared_ptr<TensorImpl>> topological_order(const Tensor& root) {
  std::vector<std::shared_ptr<TensorImpl>> order;
  if (!root.defined()) return order;
  std::unordered_set<const TensorImpl*> visited;
  // Iterative post-order DFS; second slot marks "children already pushed".
  std::vector<std::pair<std::shared_ptr<TensorImpl>, bool>> stack;
  stack.emplace_back(root.impl(), false);
  while (!stack.empty()) {
    auto [impl, expanded] = stack.back();
    stack.pop_back();
    if (expanded) {
      order.push_back(impl);
      continue;
    }
    if (!visited.insert(impl.get()).second) continue;
    stack.emplace_back(impl, true);
    if (impl->grad_fn) {
      const auto& inputs = impl->grad_fn->inputs;
      for (auto it = inputs.rbegin(); it != inputs.rend(); ++it) {
        if (!visited.count(it->get())) stack.emplace_back(*it, false);
      }
    }
  }
  return order;
}

void Tensor::backward() const {
  if (size() != 1) {
    throw std::logic_error("backward: output must be a single element, got " +
                           shape_str(shape()));
  }
  if (!requires_grad()) throw std::logic_error("backward: output does not require grad");
  auto order = topological_order(*this);
  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl& t = **it;
    if (!t.grad_fn || t.grad.empty()) continue;
    if (!g_corrupted_adjoint.empty() && t.grad_fn->name == g_corrupted_adjoint) {
      for (auto& g : t.grad) g *= 1.01;
    }
    t.grad_fn->backward(t);
    // Interior gradients are not retained.
    t.grad.clear();
    t.grad.shrink_to_fit();
  }
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor make_result(std::string name, Shape shape, std::vector<Real> values,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  auto result = Tensor::from(std::move(shape), std::move(values));
  if (!g_grad_enabled) return result;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return result;
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  result.impl()->requires_grad = true;
  result.impl()->grad_fn = std::move(node);
  return result;
}

Tensor make_result(std::string name, Shape shape, std::vector<Real> values,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  return make_result(std::move(name), std::move(shape), std::move(values),
                     std::vector<Tensor>(inputs), std::move(backward));
}

void set_corrupted_adjoint(std::string op_name) { g_corrupted_adjoint = std::move(op_name); }

const std::string& corrupted_adjoint() { return g_corrupted_adjoint; }

}  // namespace orthoplane
