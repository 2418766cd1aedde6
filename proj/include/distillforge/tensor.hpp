#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace distillforge {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorNode;
}

/**
 * Dense row-major tensor of doubles with an attached gradient slot.
 *
 * A Tensor is a shared handle: copies refer to the same node, so gradients
 * accumulated through one copy are visible through all of them. Use clone()
 * for an independent value-copy.
 *
 * Results of the operations below record how they were computed whenever any
 * input requires a gradient; backward() replays those records in reverse.
 */
class Tensor {
 public:
  // Receives d(loss)/d(output) for the node it is attached to.
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows,
                       bool requires_grad = false);
  static Tensor row(std::initializer_list<double> values, bool requires_grad = false);

  /// Build the output of a differentiable operation. `backward` receives the
  /// output gradient and must push contributions into the inputs with
  /// accumulate_grad(). When no input requires a gradient the result is a
  /// constant and `backward` is dropped.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                        BackwardFn backward);
  /// As above, with storage the backward rule may also capture.
  static Tensor from_op(Shape shape, std::shared_ptr<std::vector<double>> storage,
                        std::vector<Tensor> inputs, BackwardFn backward);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  // Writable storage; for optimizers and hand-built fixtures only.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const double> grad() const;
  void clear_grad();

  /// Add `values` into this tensor's gradient slot (allocated on first use).
  void accumulate_grad(std::span<const double> values) const;
  void accumulate_grad_at(std::size_t index, double value) const;

  /// Shares storage, carries no gradient and records nothing.
  Tensor detach() const;
  /// Independent copy of the values; keeps requires_grad, drops history.
  Tensor clone() const;

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }

  // Used by ComputationTape.
  detail::TensorNode* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::TensorNode>& node_ptr() const noexcept { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node);

  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {
struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<double>> storage;
  std::vector<double> grad;
  bool requires_grad = false;
  bool consumed = false;
  std::vector<std::shared_ptr<TensorNode>> inputs;
  Tensor::BackwardFn backward;
};
}  // namespace detail

/// Reverse-topological replay of the operations that produced a scalar loss.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& loss);

  std::size_t size() const noexcept { return order_.size(); }
  void replay();

 private:
  std::vector<detail::TensorNode*> order_;  // inputs before outputs
  detail::TensorNode* root_ = nullptr;
};

/// Accumulate d(loss)/d(t) into every requires_grad tensor reachable from
/// `loss`. Throws ContractError on a non-scalar loss or a second call on the
/// same forward pass.
void backward(const Tensor& loss);

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
// x[m×n] + bias[1×n] added to every row.
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor square(const Tensor& x);
// log(max(x, eps)), elementwise; zero gradient where x < eps.
Tensor log_clamped(const Tensor& x, double eps);
Tensor softmax_rows(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [m×n] -> [m×1]
Tensor sum_rows(const Tensor& x);
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

// ---- verification ---------------------------------------------------------

struct GradCheckReport {
  bool passed = false;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/**
 * Compare the autodiff gradient of scalar `f` at `x` against central finite
 * differences with the given step. The relative error of element i is
 * |g_i - n_i| / (max(|g_i|, |n_i|) + 1e-6), which stays meaningful for
 * gradients that are exactly zero. Passes iff the maximum is <= tol.
 *
 * `f` must rebuild its computation from the tensor it is given each call.
 * Throws EvaluationError if f is non-finite anywhere it is evaluated.
 */
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tol);

}  // namespace distillforge
