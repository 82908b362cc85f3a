#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "comprepr/error.hpp"

namespace comprepr {

using Shape = std::vector<std::int64_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string shape_to_string(const Shape& s);
std::int64_t shape_size(const Shape& s);

/// Norm guard: normalizations raise DegenerateVectorError below this.
inline constexpr double kNormEpsilon = 1e-12;

namespace detail {

/// One recorded operation. Nodes form a DAG through `parents`; `seq` is a
/// creation counter, so every parent has a smaller seq than its consumers
/// and sorting by seq descending yields a reverse topological order.
struct Node {
  Shape shape;
  Eigen::VectorXd value;  // row-major flattened
  Eigen::VectorXd grad;   // persistent accumulated gradient; sized iff requires_grad
  Eigen::VectorXd flow;   // scratch used while a backward pass is running
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // pushes this->flow into parents' flow
  std::uint64_t seq = 0;
  bool requires_grad = false;

  std::int64_t size() const { return value.size(); }
  std::int64_t rows() const { return shape[0]; }
  std::int64_t cols() const { return shape[1]; }
};

}  // namespace detail

/// Dense fp64 array participating in reverse-mode differentiation.
/// A Tensor is a cheap handle to a shared node; values are written once at
/// construction (forward recording) and only gradient buffers mutate after
/// that, except for leaf parameters updated between optimizer steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
  static Tensor scalar(double value, bool requires_grad = false) { return full(Shape{1}, value, requires_grad); }
  static Tensor identity(std::int64_t n);
  static Tensor from_values(Shape shape, std::span<const double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  /// Flat views over the value buffer. Mutable access is intended for leaf
  /// tensors only (parameter loads and optimizer updates).
  Eigen::Map<Eigen::VectorXd> flat() { return {node_->value.data(), node_->value.size()}; }
  Eigen::Map<const Eigen::VectorXd> flat() const { return {node_->value.data(), node_->value.size()}; }

  /// Rank-2 view of the value buffer.
  Eigen::Map<RowMatrix> matrix();
  Eigen::Map<const RowMatrix> matrix() const;

  /// Value of a scalar (size-1) tensor.
  double item() const;

  Eigen::Map<Eigen::VectorXd> grad();
  Eigen::Map<const Eigen::VectorXd> grad() const;
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise suite ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape-aware operations ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matvec(const Tensor& m, const Tensor& v);
Tensor transpose(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor gather(const Tensor& a, std::span<const std::int64_t> indices);
Tensor select_rows_sum(const Tensor& m, std::span<const std::int64_t> rows);
Tensor add_rowwise(const Tensor& m, const Tensor& v);
Tensor row_sums(const Tensor& m);

// ---- normalization and similarity ----
Tensor l2_normalize(const Tensor& v);
Tensor l2_normalize_rows(const Tensor& m);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// ---- classification losses ----
Tensor softmax_cross_entropy(const Tensor& logits, std::int64_t label);
/// Mean cross-entropy over the rows of a [B x C] logit matrix.
Tensor softmax_cross_entropy_rows(const Tensor& logits, std::span<const std::int64_t> labels);

/// Accumulates d(root)/d(leaf) into every requires_grad tensor reachable from
/// `root`. Repeated calls without zero_grad accumulate additively.
void backward(const Tensor& root);

/// Compares analytic gradients of `f` against central finite differences.
/// `f` must rebuild its graph from the current parameter values on every
/// call and return a scalar. Returns the max over all coordinates of
/// |a - n| / max(1e-8, |a| + |n|). `grad_hook`, when set, runs after the
/// analytic backward pass and may perturb gradients (fault-injection tests).
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps,
                  const std::function<void()>& grad_hook = nullptr);

}  // namespace comprepr
