#pragma once

// Reverse-mode automatic differentiation over dense row-major f64 tensors.
//
// Operations record themselves on the thread's active Tape (see GradScope)
// whenever at least one input requires a gradient. Without an active tape the
// same calls run as plain forward evaluation.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ebmcal {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

std::string shape_str(const Shape& s);
std::size_t numel(const Shape& s);

class Rng;
class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // 0 for leaves
  std::size_t tape_index = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor vector(std::vector<double> v, bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  // Writable access for initialisation and optimiser updates only.
  std::span<double> mutable_data() { return node_->data; }
  double item() const;
  double operator[](std::size_t i) const { return node_->data[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-length span when no gradient has been accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad();

  bool is_leaf() const { return node_->tape_id == 0; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Deep copy of data (no graph history, no grad).
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
  std::shared_ptr<detail::Node> node_;
};

// Ordered record of operations. Nodes are appended in construction order, so
// reverse iteration is a valid topological order for backpropagation.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  void record(const std::shared_ptr<detail::Node>& n);

  // Accumulates dloss/dleaf into every requires_grad leaf reachable from loss.
  // Leaf gradients accumulate across calls; intermediate ones are reset.
  void backward(const Tensor& loss);

  void clear() { nodes_.clear(); }

 private:
  std::uint64_t id_;
  std::vector<std::shared_ptr<detail::Node>> nodes_;
};

// Makes `tape` the active recording target for the current thread.
class GradScope {
 public:
  explicit GradScope(Tape& tape);
  ~GradScope();
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Builds an op result, recording it when any parent requires grad and a tape
// is active. `backward` reads out.grad and accumulates into parents.
Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward);

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // DomainError on non-positive entries
Tensor gelu(const Tensor& a);  // exact erf form
Tensor softplus(const Tensor& a);  // log(1 + e^x), overflow-safe

// ---- linear algebra / indexing ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
// x W + b for x [m,k], W [k,n], b [n]; one fused node.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor embedding(const Tensor& table, std::span<const int> ids);  // [V,D] -> [n,D]
Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows);
Tensor pick(const Tensor& x, std::span<const int> cols);  // [n,c] -> [n], x[i, cols[i]]
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);

// ---- reductions (axis may be negative) ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor max(const Tensor& x, int axis);
Tensor logsumexp(const Tensor& x, int axis);
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// ---- network blocks ----
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

struct Segment {
  std::size_t start = 0;
  std::size_t length = 0;
};

// Multi-head scaled dot-product attention on packed sequences. q, k, v are
// [N, D] with rows grouped into `segments`; attention never crosses segments.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const Segment> segments, std::size_t n_heads, bool causal);

// Inverted dropout. Identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

}  // namespace ebmcal
