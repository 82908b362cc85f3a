#include "comprepr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace comprepr {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};

using detail::Node;

std::shared_ptr<Node> new_node(Shape shape, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value.setZero(shape_size(node->shape));
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.setZero(node->value.size());
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

/// Result node of an op: requires grad iff any parent does.
Tensor make_op(Shape shape, std::initializer_list<Tensor> parents, std::function<void(Node&)> backprop) {
  bool needs_grad = false;
  for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  auto node = new_node(std::move(shape), needs_grad);
  node->parents.reserve(parents.size());
  for (const Tensor& p : parents) node->parents.push_back(p.node());
  if (needs_grad) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
}

void check_rank(const char* op, const Tensor& t, int rank) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + " operand, got shape " +
                         shape_to_string(t.shape()));
  }
}

Eigen::Map<const RowMatrix> as_matrix(const Node& n) { return {n.value.data(), n.rows(), n.cols()}; }
Eigen::Map<RowMatrix> flow_matrix(Node& n) { return {n.flow.data(), n.rows(), n.cols()}; }

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

/// Softmax with max subtraction; writes probabilities and returns logsumexp.
double softmax_into(Eigen::Map<const Eigen::VectorXd> logits, Eigen::VectorXd& probs) {
  const double mx = logits.maxCoeff();
  probs = (logits.array() - mx).exp();
  const double z = probs.sum();
  probs /= z;
  return mx + std::log(z);
}

}  // namespace

std::string shape_to_string(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) n *= d;
  return n;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return Tensor(new_node(std::move(shape), requires_grad)); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto node = new_node(std::move(shape), requires_grad);
  node->value.setConstant(value);
  return Tensor(std::move(node));
}

Tensor Tensor::identity(std::int64_t n) {
  auto node = new_node(Shape{n, n}, false);
  Eigen::Map<RowMatrix>(node->value.data(), n, n).setIdentity();
  return Tensor(std::move(node));
}

Tensor Tensor::from_values(Shape shape, std::span<const double> values, bool requires_grad) {
  auto node = new_node(std::move(shape), requires_grad);
  if (static_cast<std::int64_t>(values.size()) != node->value.size()) {
    throw DimensionError("from_values: " + std::to_string(values.size()) + " values for shape " +
                         shape_to_string(node->shape));
  }
  std::copy(values.begin(), values.end(), node->value.data());
  return Tensor(std::move(node));
}

Eigen::Map<RowMatrix> Tensor::matrix() {
  check_rank("matrix", *this, 2);
  return {node_->value.data(), node_->rows(), node_->cols()};
}

Eigen::Map<const RowMatrix> Tensor::matrix() const {
  check_rank("matrix", *this, 2);
  return {node_->value.data(), node_->rows(), node_->cols()};
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item: tensor has size " + std::to_string(size()) + ", expected 1");
  return node_->value[0];
}

Eigen::Map<Eigen::VectorXd> Tensor::grad() {
  if (!node_->requires_grad) throw ContractError("grad: tensor does not require gradients");
  return {node_->grad.data(), node_->grad.size()};
}

Eigen::Map<const Eigen::VectorXd> Tensor::grad() const {
  if (!node_->requires_grad) throw ContractError("grad: tensor does not require gradients");
  return {node_->grad.data(), node_->grad.size()};
}

void Tensor::zero_grad() {
  if (node_->requires_grad) node_->grad.setZero();
}

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [](Node& self) {
    for (int i = 0; i < 2; ++i) {
      Node& p = *self.parents[static_cast<std::size_t>(i)];
      if (p.requires_grad) p.flow += self.flow;
    }
  });
  out.flat() = a.flat() + b.flat();
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->flow += self.flow;
    if (self.parents[1]->requires_grad) self.parents[1]->flow -= self.flow;
  });
  out.flat() = a.flat() - b.flat();
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Tensor out = make_op(a.shape(), {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) pa.flow.array() += self.flow.array() * pb.value.array();
    if (pb.requires_grad) pb.flow.array() += self.flow.array() * pa.value.array();
  });
  out.flat() = a.flat().cwiseProduct(b.flat());
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = make_op(a.shape(), {a}, [c](Node& self) {
    if (self.parents[0]->requires_grad) self.parents[0]->flow += c * self.flow;
  });
  out.flat() = c * a.flat();
  return out;
}

Tensor relu(const Tensor& a) {
  // Subgradient 0 at exactly 0.
  Tensor out = make_op(a.shape(), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.flow.array() += self.flow.array() * (p.value.array() > 0.0).cast<double>();
  });
  out.flat() = a.flat().cwiseMax(0.0);
  return out;
}

Tensor abs(const Tensor& a) {
  // Subgradient 0 at exactly 0.
  Tensor out = make_op(a.shape(), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.flow.array() += self.flow.array() * p.value.array().sign();
  });
  out.flat() = a.flat().cwiseAbs();
  return out;
}

Tensor softplus(const Tensor& a) {
  Tensor out = make_op(a.shape(), {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) {
      // d softplus / dx = sigmoid(x)
      p.flow.array() += self.flow.array() / (1.0 + (-p.value.array()).exp());
    }
  });
  out.flat() = a.flat().unaryExpr([](double x) { return stable_softplus(x); });
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_op(Shape{1}, {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.flow.array() += self.flow[0];
  });
  out.flat()[0] = a.flat().sum();
  return out;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  Tensor out = make_op(Shape{1}, {a}, [inv](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) p.flow.array() += inv * self.flow[0];
  });
  out.flat()[0] = a.flat().sum() * inv;
  return out;
}

// ---------------------------------------------------------------------------
// shape-aware operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_rank("matmul", a, 2);
  check_rank("matmul", b, 2);
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_to_string(a.shape()) + " vs " +
                         shape_to_string(b.shape()));
  }
  Tensor out = make_op(Shape{a.dim(0), b.dim(1)}, {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    auto g = flow_matrix(self);
    if (pa.requires_grad) flow_matrix(pa).noalias() += g * as_matrix(pb).transpose();
    if (pb.requires_grad) flow_matrix(pb).noalias() += as_matrix(pa).transpose() * g;
  });
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  check_rank("matvec", m, 2);
  check_rank("matvec", v, 1);
  if (m.dim(1) != v.dim(0)) {
    throw DimensionError("matvec: inner dimensions disagree: " + shape_to_string(m.shape()) + " vs " +
                         shape_to_string(v.shape()));
  }
  Tensor out = make_op(Shape{m.dim(0)}, {m, v}, [](Node& self) {
    Node& pm = *self.parents[0];
    Node& pv = *self.parents[1];
    if (pm.requires_grad) flow_matrix(pm).noalias() += self.flow * pv.value.transpose();
    if (pv.requires_grad) pv.flow.noalias() += as_matrix(pm).transpose() * self.flow;
  });
  out.flat().noalias() = m.matrix() * v.flat();
  return out;
}

Tensor transpose(const Tensor& a) {
  check_rank("transpose", a, 2);
  Tensor out = make_op(Shape{a.dim(1), a.dim(0)}, {a}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) flow_matrix(p) += flow_matrix(self).transpose();
  });
  out.matrix() = a.matrix().transpose();
  return out;
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check_rank("dot", a, 1);
  check_rank("dot", b, 1);
  check_same_shape("dot", a, b);
  Tensor out = make_op(Shape{1}, {a, b}, [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const double g = self.flow[0];
    if (pa.requires_grad) pa.flow += g * pb.value;
    if (pb.requires_grad) pb.flow += g * pa.value;
  });
  out.flat()[0] = a.flat().dot(b.flat());
  return out;
}

Tensor gather(const Tensor& a, std::span<const std::int64_t> indices) {
  check_rank("gather", a, 1);
  const std::int64_t n = a.size();
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  for (std::int64_t i : idx) {
    if (i < 0 || i >= n) {
      throw IndexError("gather: index " + std::to_string(i) + " out of range [0," + std::to_string(n) + ")");
    }
  }
  Tensor out = make_op(Shape{static_cast<std::int64_t>(idx.size())}, {a}, [idx](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (std::size_t j = 0; j < idx.size(); ++j) p.flow[idx[j]] += self.flow[static_cast<std::int64_t>(j)];
  });
  for (std::size_t j = 0; j < idx.size(); ++j) out.flat()[static_cast<std::int64_t>(j)] = a.flat()[idx[j]];
  return out;
}

Tensor select_rows_sum(const Tensor& m, std::span<const std::int64_t> rows) {
  check_rank("select_rows_sum", m, 2);
  const std::int64_t r = m.dim(0);
  std::vector<std::int64_t> idx(rows.begin(), rows.end());
  for (std::int64_t i : idx) {
    if (i < 0 || i >= r) {
      throw IndexError("select_rows_sum: row " + std::to_string(i) + " out of range [0," + std::to_string(r) + ")");
    }
  }
  Tensor out = make_op(Shape{m.dim(1)}, {m}, [idx](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto pf = flow_matrix(p);
    for (std::int64_t i : idx) pf.row(i) += self.flow.transpose();
  });
  auto mm = m.matrix();
  auto of = out.flat();
  for (std::int64_t i : idx) of += mm.row(i).transpose();
  return out;
}

Tensor add_rowwise(const Tensor& m, const Tensor& v) {
  check_rank("add_rowwise", m, 2);
  check_rank("add_rowwise", v, 1);
  if (m.dim(1) != v.dim(0)) {
    throw DimensionError("add_rowwise: width mismatch: " + shape_to_string(m.shape()) + " vs " +
                         shape_to_string(v.shape()));
  }
  Tensor out = make_op(m.shape(), {m, v}, [](Node& self) {
    Node& pm = *self.parents[0];
    Node& pv = *self.parents[1];
    if (pm.requires_grad) pm.flow += self.flow;
    if (pv.requires_grad) pv.flow += flow_matrix(self).colwise().sum().transpose();
  });
  out.matrix() = m.matrix().rowwise() + v.flat().transpose();
  return out;
}

Tensor row_sums(const Tensor& m) {
  check_rank("row_sums", m, 2);
  Tensor out = make_op(Shape{m.dim(0)}, {m}, [](Node& self) {
    Node& p = *self.parents[0];
    if (p.requires_grad) flow_matrix(p).colwise() += self.flow;
  });
  out.flat() = m.matrix().rowwise().sum();
  return out;
}

// ---------------------------------------------------------------------------
// normalization and similarity
// ---------------------------------------------------------------------------

Tensor l2_normalize(const Tensor& v) {
  check_rank("l2_normalize", v, 1);
  const double norm = v.flat().norm();
  if (norm < kNormEpsilon) {
    throw DegenerateVectorError("l2_normalize: vector norm " + std::to_string(norm) + " below guard");
  }
  Tensor out = make_op(v.shape(), {v}, [norm](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    // y = v/|v|; dv = (g - y (y.g)) / |v|
    const double yg = self.value.dot(self.flow);
    p.flow += (self.flow - yg * self.value) / norm;
  });
  out.flat() = v.flat() / norm;
  return out;
}

Tensor l2_normalize_rows(const Tensor& m) {
  check_rank("l2_normalize_rows", m, 2);
  const std::int64_t rows = m.dim(0);
  Eigen::VectorXd norms(rows);
  {
    auto mm = m.matrix();
    for (std::int64_t i = 0; i < rows; ++i) {
      norms[i] = mm.row(i).norm();
      if (norms[i] < kNormEpsilon) {
        throw DegenerateVectorError("l2_normalize_rows: row " + std::to_string(i) + " has norm " +
                                    std::to_string(norms[i]) + " below guard");
      }
    }
  }
  Tensor out = make_op(m.shape(), {m}, [norms](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    auto y = as_matrix(self);
    auto g = flow_matrix(self);
    auto pf = flow_matrix(p);
    for (std::int64_t i = 0; i < y.rows(); ++i) {
      const double yg = y.row(i).dot(g.row(i));
      pf.row(i) += (g.row(i) - yg * y.row(i)) / norms[i];
    }
  });
  out.matrix() = m.matrix().array().colwise() / norms.array();
  return out;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  check_rank("cosine_similarity", a, 1);
  check_rank("cosine_similarity", b, 1);
  check_same_shape("cosine_similarity", a, b);
  return dot(l2_normalize(a), l2_normalize(b));
}

// ---------------------------------------------------------------------------
// classification losses
// ---------------------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, std::int64_t label) {
  check_rank("softmax_cross_entropy", logits, 1);
  const std::int64_t c = logits.size();
  if (label < 0 || label >= c) {
    throw IndexError("softmax_cross_entropy: label " + std::to_string(label) + " out of range [0," +
                     std::to_string(c) + ")");
  }
  Eigen::VectorXd probs;
  const double lse = softmax_into(logits.flat(), probs);
  Tensor out = make_op(Shape{1}, {logits}, [probs, label](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const double g = self.flow[0];
    p.flow += g * probs;
    p.flow[label] -= g;
  });
  out.flat()[0] = lse - logits.flat()[label];
  return out;
}

Tensor softmax_cross_entropy_rows(const Tensor& logits, std::span<const std::int64_t> labels) {
  check_rank("softmax_cross_entropy_rows", logits, 2);
  const std::int64_t b = logits.dim(0);
  const std::int64_t c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b) {
    throw DimensionError("softmax_cross_entropy_rows: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(b) + " rows");
  }
  std::vector<std::int64_t> lab(labels.begin(), labels.end());
  for (std::int64_t l : lab) {
    if (l < 0 || l >= c) {
      throw IndexError("softmax_cross_entropy_rows: label " + std::to_string(l) + " out of range [0," +
                       std::to_string(c) + ")");
    }
  }
  auto lm = logits.matrix();
  RowMatrix probs(b, c);
  double total = 0.0;
  for (std::int64_t i = 0; i < b; ++i) {
    const double mx = lm.row(i).maxCoeff();
    probs.row(i) = (lm.row(i).array() - mx).exp();
    const double z = probs.row(i).sum();
    probs.row(i) /= z;
    total += mx + std::log(z) - lm(i, lab[static_cast<std::size_t>(i)]);
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  Tensor out = make_op(Shape{1}, {logits}, [probs, lab, inv_b](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const double g = self.flow[0] * inv_b;
    auto pf = flow_matrix(p);
    pf += g * probs;
    for (std::int64_t i = 0; i < pf.rows(); ++i) pf(i, lab[static_cast<std::size_t>(i)]) -= g;
  });
  out.flat()[0] = total * inv_b;
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

void backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: undefined tensor");
  if (root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_to_string(root.shape()));
  }
  if (!root.requires_grad()) return;  // nothing differentiable upstream

  // Reachable requires_grad subgraph, then reverse topological order by seq.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (detail::Node* n : order) n->flow.setZero(n->value.size());
  root.node()->flow[0] = 1.0;
  for (detail::Node* n : order) {
    if (n->backprop) n->backprop(*n);
  }
  for (detail::Node* n : order) {
    n->grad += n->flow;
    n->flow.resize(0);
  }
}

// ---------------------------------------------------------------------------
// gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double eps,
                  const std::function<void()>& grad_hook) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw ContractError("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");
  }
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = f();
  if (!std::isfinite(loss.item())) throw NumericError("grad_check: objective evaluated to a non-finite value");
  backward(loss);
  if (grad_hook) grad_hook();

  std::vector<Eigen::VectorXd> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.emplace_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].flat();
    for (std::int64_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = f().item();
      values[i] = saved - eps;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("grad_check: objective evaluated to a non-finite value");
      }
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace comprepr
