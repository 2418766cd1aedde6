#include "distillforge/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

#include "distillforge/errors.hpp"

namespace distillforge {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;
using Storage = std::shared_ptr<std::vector<double>>;

ConstMap as_matrix(std::span<const double> values, std::size_t r, std::size_t c) {
  return ConstMap(values.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_to_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor() = default;

Tensor::Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor: shape " + shape_to_string(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::TensorNode>();
  node_->shape = std::move(shape);
  node_->storage = std::make_shared<std::vector<double>>(std::move(values));
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows,
                      bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("matrix: ragged rows");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values), requires_grad);
}

Tensor Tensor::row(std::initializer_list<double> values, bool requires_grad) {
  return Tensor({1, values.size()}, std::vector<double>(values), requires_grad);
}

Tensor Tensor::from_op(Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                       BackwardFn backward) {
  return from_op(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)),
                 std::move(inputs), std::move(backward));
}

Tensor Tensor::from_op(Shape shape, std::shared_ptr<std::vector<double>> storage,
                       std::vector<Tensor> inputs, BackwardFn backward) {
  if (shape_numel(shape) != storage->size()) {
    throw DimensionError("from_op: shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(storage->size()) + " values");
  }
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->storage = std::move(storage);
  for (const auto& in : inputs) {
    if (in.node_->consumed) {
      throw ContractError("operation input was consumed by an earlier backward pass");
    }
    node->requires_grad = node->requires_grad || in.node_->requires_grad;
  }
  if (node->requires_grad) {
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(std::move(in.node_));
  }
  return Tensor(std::move(node));
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->storage->size(); }

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("rows: not a matrix " + shape_to_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("cols: not a matrix " + shape_to_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::data() const { return *node_->storage; }
std::span<double> Tensor::mutable_data() { return *node_->storage; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor of shape " + shape_to_string(shape()));
  return (*node_->storage)[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return (*node_->storage)[r * cols() + c];
}

std::vector<double> Tensor::to_vector() const { return *node_->storage; }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
void Tensor::clear_grad() { node_->grad.clear(); }

void Tensor::accumulate_grad(std::span<const double> values) const {
  if (!node_->requires_grad) return;
  auto& g = node_->grad;
  if (g.empty()) g.assign(numel(), 0.0);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += values[i];
}

void Tensor::accumulate_grad_at(std::size_t index, double value) const {
  if (!node_->requires_grad) return;
  auto& g = node_->grad;
  if (g.empty()) g.assign(numel(), 0.0);
  g[index] += value;
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = node_->shape;
  node->storage = node_->storage;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const { return Tensor(shape(), to_vector(), requires_grad()); }

// ---- tape -----------------------------------------------------------------

ComputationTape ComputationTape::record(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_to_string(loss.shape()));
  }
  if (loss.node()->consumed) {
    throw ContractError("backward: called twice on the same forward pass");
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor requiring a gradient");
  }

  ComputationTape tape;
  tape.root_ = loss.node();
  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<detail::TensorNode*> seen;
  std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
  stack.emplace_back(tape.root_, 0);
  seen.insert(tape.root_);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::TensorNode* in = node->inputs[next++].get();
      if (!in->requires_grad || seen.count(in)) continue;
      if (in->consumed) {
        throw ContractError("backward: graph was consumed by an earlier backward pass");
      }
      seen.insert(in);
      stack.emplace_back(in, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

void ComputationTape::replay() {
  if (root_->grad.empty()) root_->grad.assign(1, 0.0);
  root_->grad[0] += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    detail::TensorNode* node = *it;
    if (!node->backward) continue;  // leaf
    if (!node->grad.empty()) node->backward(node->grad);
  }
  // Interior nodes release their history; leaves keep accumulated gradients.
  for (auto* node : order_) {
    if (!node->backward) continue;
    node->backward = nullptr;
    node->inputs.clear();
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->consumed = true;
  }
}

void backward(const Tensor& loss) {
  auto tape = ComputationTape::record(loss);
  tape.replay();
}

// ---- operations -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree " + shape_to_string(a.shape()) +
                         " * " + shape_to_string(b.shape()));
  }
  std::vector<double> out(m * n);
  MutMap(out.data(), m, n).noalias() = as_matrix(a.data(), m, k) * as_matrix(b.data(), k, n);
  return Tensor::from_op({m, n}, std::move(out), {a, b}, [a, b, m, k, n](auto g) {
    const auto gm = as_matrix(g, m, n);
    if (a.requires_grad()) {
      std::vector<double> ga(m * k);
      MutMap(ga.data(), m, k).noalias() = gm * as_matrix(b.data(), k, n).transpose();
      a.accumulate_grad(ga);
    }
    if (b.requires_grad()) {
      std::vector<double> gb(k * n);
      MutMap(gb.data(), k, n).noalias() = as_matrix(a.data(), m, k).transpose() * gm;
      b.accumulate_grad(gb);
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](auto g) {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](auto g) {
    a.accumulate_grad(g);
    if (b.requires_grad()) {
      std::vector<double> neg(g.begin(), g.end());
      for (auto& v : neg) v = -v;
      b.accumulate_grad(neg);
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](auto g) {
    const auto x = a.data(), y = b.data();
    std::vector<double> tmp(g.size());
    if (a.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * y[i];
      a.accumulate_grad(tmp);
    }
    if (b.requires_grad()) {
      for (std::size_t i = 0; i < g.size(); ++i) tmp[i] = g[i] * x[i];
      b.accumulate_grad(tmp);
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x, factor](auto g) {
    std::vector<double> gx(g.begin(), g.end());
    for (auto& v : gx) v *= factor;
    x.accumulate_grad(gx);
  });
}

Tensor add_scalar(const Tensor& x, double value) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v += value;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x](auto g) { x.accumulate_grad(g); });
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
  require_matrix(x, "add_row_broadcast");
  const std::size_t m = x.rows(), n = x.cols();
  if (bias.numel() != n || (bias.rank() == 2 && bias.rows() != 1)) {
    throw DimensionError("add_row_broadcast: bias " + shape_to_string(bias.shape()) +
                         " does not fit rows of " + shape_to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto bv = bias.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bv[c];
  return Tensor::from_op(x.shape(), std::move(out), {x, bias}, [x, bias, m, n](auto g) {
    x.accumulate_grad(g);
    if (bias.requires_grad()) {
      std::vector<double> gb(n, 0.0);
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
      bias.accumulate_grad(gb);
    }
  });
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x](auto g) {
    const auto xv = x.data();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] > 0.0 ? g[i] : 0.0;
    x.accumulate_grad(gx);
  });
}

Tensor square(const Tensor& x) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= v;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x](auto g) {
    const auto xv = x.data();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = 2.0 * xv[i] * g[i];
    x.accumulate_grad(gx);
  });
}

Tensor log_clamped(const Tensor& x, double eps) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = std::log(std::max(v, eps));
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x, eps](auto g) {
    const auto xv = x.data();
    std::vector<double> gx(g.size());
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] = xv[i] >= eps ? g[i] / xv[i] : 0.0;
    x.accumulate_grad(gx);
  });
}

Tensor softmax_rows(const Tensor& x) {
  require_matrix(x, "softmax_rows");
  const std::size_t m = x.rows(), k = x.cols();
  if (k == 0) throw DimensionError("softmax_rows: rows must have at least one entry");
  auto out = std::make_shared<std::vector<double>>(x.data().begin(), x.data().end());
  auto& y = *out;
  for (std::size_t r = 0; r < m; ++r) {
    double* row = y.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double total = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < k; ++c) row[c] /= total;
  }
  std::shared_ptr<const std::vector<double>> probs = out;
  return Tensor::from_op({m, k}, out, {x}, [x, probs, m, k](auto g) {
    const auto& y = *probs;
    std::vector<double> gx(m * k);
    for (std::size_t r = 0; r < m; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += g[r * k + c] * y[r * k + c];
      for (std::size_t c = 0; c < k; ++c) gx[r * k + c] = y[r * k + c] * (g[r * k + c] - dot);
    }
    x.accumulate_grad(gx);
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op({}, std::vector<double>{total}, {x}, [x](auto g) {
    std::vector<double> gx(x.numel(), g[0]);
    x.accumulate_grad(gx);
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum_rows(const Tensor& x) {
  require_matrix(x, "sum_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m, 0.0);
  const auto xv = x.data();
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r] += xv[r * n + c];
  return Tensor::from_op({m, 1}, std::move(out), {x}, [x, m, n](auto g) {
    std::vector<double> gx(m * n);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] = g[r];
    x.accumulate_grad(gx);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> indices) {
  require_matrix(x, "gather_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  std::vector<double> out(idx.size() * n);
  const auto xv = x.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= m) {
      throw DimensionError("gather_rows: row " + std::to_string(idx[r]) + " out of range for " +
                           shape_to_string(x.shape()));
    }
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[r] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  const std::size_t count = idx.size();
  return Tensor::from_op({count, n}, std::move(out), {x}, [x, idx = std::move(idx), n](auto g) {
    std::vector<double> gx(x.numel(), 0.0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < n; ++c) gx[idx[r] * n + c] += g[r * n + c];
    x.accumulate_grad(gx);
  });
}

// ---- gradient check -------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double step, double tol) {
  auto evaluate = [&](const Tensor& at) {
    const double v = f(at).item();
    if (!std::isfinite(v)) throw EvaluationError("grad_check: non-finite function value");
    return v;
  };

  Tensor probe(x.shape(), x.to_vector(), true);
  Tensor loss = f(probe);
  if (!std::isfinite(loss.item())) throw EvaluationError("grad_check: non-finite function value");
  std::vector<double> analytic(x.numel(), 0.0);
  if (loss.requires_grad()) {
    backward(loss);
    if (probe.has_grad()) analytic.assign(probe.grad().begin(), probe.grad().end());
  }

  GradCheckReport report;
  report.passed = true;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor plus(x.shape(), x.to_vector());
    Tensor minus(x.shape(), x.to_vector());
    plus.mutable_data()[i] += step;
    minus.mutable_data()[i] -= step;
    const double numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step);
    const double err = std::abs(analytic[i] - numeric) /
                       (std::max(std::abs(analytic[i]), std::abs(numeric)) + 1e-6);
    if (i == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
      report.analytic = analytic[i];
      report.numeric = numeric;
    }
  }
  report.passed = report.max_relative_error <= tol;
  return report;
}

}  // namespace distillforge
