#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace orthoplane {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

// One recorded primitive application. The backward callback reads the
// output's value and gradient and accumulates into its inputs' gradients.
struct Node {
  std::string name;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a backward pass reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  // Allocates a zero gradient on first use.
  std::vector<Real>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;
  Real operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();

  // Deep copy of the values; the copy is a fresh leaf.
  Tensor detach() const;
  Tensor clone(bool requires_grad) const;

  // Reverse-mode pass from a single-element tensor.
  void backward() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Topologically ordered list of the tensors reachable from `root`: every
// tensor appears after all of its inputs.
std::vector<std::shared_ptr<TensorImpl>> topological_order(const Tensor& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op result. A node is recorded only when grad mode is on and at
// least one input requires grad; `backward` is dropped otherwise.
Tensor make_result(std::string name, Shape shape, std::vector<Real> values,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);
Tensor make_result(std::string name, Shape shape, std::vector<Real> values,
                   const std::vector<Tensor>& inputs,
                   std::function<void(const TensorImpl& out)> backward);

// Fault injection for the gradient-check tooling: when set, the upstream
// gradient fed into every node with this name is scaled by 1.01.
void set_corrupted_adjoint(std::string op_name);
const std::string& corrupted_adjoint();

}  // namespace orthoplane
