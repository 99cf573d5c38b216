#include "ebmcal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <Eigen/Core>

#include "ebmcal/rng.hpp"

namespace ebmcal {

using detail::Node;

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->data.assign(numel(shape), fill);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(std::make_shared<Node>()) {
  if (numel(shape) != data.size()) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor(Shape{}, {v}, requires_grad); }

Tensor Tensor::vector(std::vector<double> v, bool requires_grad) {
  Shape s{v.size()};
  return Tensor(std::move(s), std::move(v), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = on;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const { return Tensor(shape(), node_->data); }

// ---------------------------------------------------------------------------
// Tape

namespace {
std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* current_tape = nullptr;
}  // namespace

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

void Tape::record(const std::shared_ptr<Node>& n) {
  n->tape_id = id_;
  n->tape_index = nodes_.size();
  nodes_.push_back(n);
}

void Tape::backward(const Tensor& loss) {
  const auto& ln = loss.node();
  if (ln->data.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(ln->shape));
  }
  if (ln->tape_id != id_ || ln->tape_index >= nodes_.size() || nodes_[ln->tape_index] != ln) {
    throw std::invalid_argument("backward(): loss was not recorded on this tape");
  }
  const std::size_t last = ln->tape_index;
  for (std::size_t i = 0; i <= last; ++i) nodes_[i]->grad.assign(nodes_[i]->data.size(), 0.0);
  ln->grad[0] = 1.0;
  for (std::size_t i = last + 1; i-- > 0;) {
    Node& n = *nodes_[i];
    if (n.backward) n.backward(n);
  }
}

GradScope::GradScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
GradScope::~GradScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                   std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  Tape* tape = current_tape;
  bool track = false;
  if (tape != nullptr) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  if (track) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
    tape->record(n);
  }
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// helpers

namespace {

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape r = s;
  r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
  return r;
}

bool wants_grad(const Node& out, std::size_t i) { return out.parents[i]->requires_grad; }

// Maps each flat output index of a broadcast op to the flat index of one operand.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& out, const Shape& in) {
    const std::size_t n_out = numel(out), n_in = numel(in);
    if (out == in) {
      kind_ = Kind::Same;
      return;
    }
    // Operand equal to a trailing block of the output shape: index modulo.
    std::size_t first = 0;
    while (first < in.size() && in[first] == 1) ++first;
    const std::size_t tail = in.size() - first;
    bool suffix = tail <= out.size();
    for (std::size_t j = 0; suffix && j < tail; ++j) suffix = in[first + j] == out[out.size() - tail + j];
    if (suffix) {
      kind_ = Kind::Mod;
      mod_ = n_in;
      return;
    }
    kind_ = Kind::General;
    map_.resize(n_out);
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t acc = 1;
    for (std::size_t j = in.size(); j-- > 0;) {
      const std::size_t oj = r - in.size() + j;
      stride[oj] = in[j] == 1 ? 0 : acc;
      acc *= in[j];
    }
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n_out; ++i) {
      map_[i] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += stride[d];
        if (idx[d] < out[d]) break;
        src -= stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::Same:
        return i;
      case Kind::Mod:
        return i % mod_;
      default:
        return map_[i];
    }
  }

 private:
  enum class Kind { Same, Mod, General };
  Kind kind_ = Kind::Same;
  std::size_t mod_ = 1;
  std::vector<std::size_t> map_;
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = numel(out_shape);
  auto ma = std::make_shared<BroadcastMap>(out_shape, a.shape());
  auto mb = std::make_shared<BroadcastMap>(out_shape, b.shape());
  std::vector<double> out(n);
  const auto ad = a.data();
  const auto bd = b.data();
  const auto& ra = *ma;
  const auto& rb = *mb;
  switch (op) {
    case BinOp::Add:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ra(i)] + bd[rb(i)];
      break;
    case BinOp::Sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ra(i)] - bd[rb(i)];
      break;
    case BinOp::Mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = ad[ra(i)] * bd[rb(i)];
      break;
  }
  return make_result(std::move(out_shape), std::move(out), {a, b}, [ma, mb, op, n](Node& o) {
    const auto& g = o.grad;
    const auto& A = *o.parents[0];
    const auto& B = *o.parents[1];
    if (wants_grad(o, 0)) {
      auto& ga = o.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = op == BinOp::Mul ? g[i] * B.data[(*mb)(i)] : g[i];
        ga[(*ma)(i)] += d;
      }
    }
    if (wants_grad(o, 1)) {
      auto& gb = o.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        double d = g[i];
        if (op == BinOp::Sub) d = -d;
        if (op == BinOp::Mul) d *= A.data[(*ma)(i)];
        gb[(*mb)(i)] += d;
      }
    }
  });
}

// Elementwise unary op with derivative computed from (x, y).
template <class F, class D>
Tensor unary(const Tensor& a, F f, D dfdx) {
  const auto x = a.data();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return make_result(a.shape(), std::move(y), {a}, [dfdx](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& p = *o.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += o.grad[i] * dfdx(p.data[i], o.data[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.data()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  const auto x = a.data();
  std::vector<double> y(x.size()), cdf(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    cdf[i] = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
    y[i] = x[i] * cdf[i];
  }
  return make_result(a.shape(), std::move(y), {a}, [cdf = std::move(cdf)](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& p = *o.parents[0];
    auto& gp = p.grad_buffer();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const double xi = p.data[i];
      gp[i] += o.grad[i] * (cdf[i] + xi * inv_sqrt_2pi * std::exp(-0.5 * xi * xi));
    }
  });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
      [](double x, double) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      });
}

// ---------------------------------------------------------------------------
// linear algebra / indexing

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;

MatMap as_mat(std::vector<double>& d, std::size_t rows, std::size_t cols) {
  return {d.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
}

// Gradients of C = A * B given dC, accumulated into A and B when tracked.
void matmul_backward(Node& o, std::size_t m, std::size_t k, std::size_t n) {
  const auto G = as_mat(o.grad, m, n);
  if (wants_grad(o, 0))
    as_mat(o.parents[0]->grad_buffer(), m, k).noalias() += G * as_mat(o.parents[1]->data, k, n).transpose();
  if (wants_grad(o, 1))
    as_mat(o.parents[1]->grad_buffer(), k, n).noalias() += as_mat(o.parents[0]->data, m, k).transpose() * G;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  as_mat(c, m, n).noalias() += as_mat(a.node()->data, m, k) * as_mat(b.node()->data, k, n);
  return make_result({m, n}, std::move(c), {a, b}, [m, k, n](Node& o) { matmul_backward(o, m, k, n); });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0) || b.shape() != Shape{w.dim(1)}) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + ", " + shape_str(w.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  std::vector<double> c(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(b.data().begin(), b.data().end(), c.begin() + static_cast<std::ptrdiff_t>(i * n));
  as_mat(c, m, n).noalias() += as_mat(x.node()->data, m, k) * as_mat(w.node()->data, k, n);
  return make_result({m, n}, std::move(c), {x, w, b}, [m, k, n](Node& o) {
    matmul_backward(o, m, k, n);
    if (wants_grad(o, 2)) {
      auto& gb = o.parents[2]->grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += o.grad[i * n + j];
    }
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<double> out(ids.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                              std::to_string(vocab) + " rows");
    }
    std::copy_n(t.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return make_result({ids.size(), d}, std::move(out), {table}, [saved = std::move(saved), d](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(saved[i]) * d;
      for (std::size_t j = 0; j < d; ++j) g[row + j] += o.grad[i * d + j];
    }
  });
}

Tensor select_rows(const Tensor& x, std::span<const std::size_t> rows) {
  if (x.rank() < 1) throw ShapeError("select_rows: scalar input");
  const std::size_t n = x.dim(0);
  const std::size_t w = n == 0 ? 0 : x.size() / n;
  Shape out_shape = x.shape();
  out_shape[0] = rows.size();
  std::vector<double> out(rows.size() * w);
  const auto xd = x.data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw std::out_of_range("select_rows: row " + std::to_string(rows[i]) + " >= " + std::to_string(n));
    std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(rows[i] * w), w, out.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  std::vector<std::size_t> saved(rows.begin(), rows.end());
  return make_result(std::move(out_shape), std::move(out), {x}, [saved = std::move(saved), w](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      for (std::size_t j = 0; j < w; ++j) g[saved[i] * w + j] += o.grad[i * w + j];
    }
  });
}

Tensor pick(const Tensor& x, std::span<const int> cols) {
  if (x.rank() != 2 || cols.size() != x.dim(0)) {
    throw ShapeError("pick: expected [n, c] input with n indices, got " + shape_str(x.shape()) +
                     " and " + std::to_string(cols.size()) + " indices");
  }
  const std::size_t n = x.dim(0), c = x.dim(1);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (cols[i] < 0 || static_cast<std::size_t>(cols[i]) >= c) {
      throw std::out_of_range("pick: column " + std::to_string(cols[i]) + " outside [0, " + std::to_string(c) + ")");
    }
    out[i] = x.data()[i * c + static_cast<std::size_t>(cols[i])];
  }
  std::vector<int> saved(cols.begin(), cols.end());
  return make_result({n}, std::move(out), {x}, [saved = std::move(saved), c](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < saved.size(); ++i) g[i * c + static_cast<std::size_t>(saved[i])] += o.grad[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = parts[0].shape();
    if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    a[ax] = b[ax] = 0;
    if (a != b) throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    lens.push_back(p.dim(ax));
    out_shape[ax] += p.dim(ax);
  }
  const AxisSplit s = split_axis(out_shape, ax);
  std::vector<double> out(numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    const std::size_t block = lens[k] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                  out.begin() + static_cast<std::ptrdiff_t>(o * s.len * s.inner + offset * s.inner));
    }
    offset += lens[k];
  }
  return make_result(std::move(out_shape), std::move(out), parts, [lens, s](Node& o) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < lens.size(); ++k) {
      const std::size_t block = lens[k] * s.inner;
      if (wants_grad(o, k)) {
        auto& g = o.parents[k]->grad_buffer();
        for (std::size_t ou = 0; ou < s.outer; ++ou) {
          for (std::size_t j = 0; j < block; ++j) g[ou * block + j] += o.grad[ou * s.len * s.inner + offset * s.inner + j];
        }
      }
      offset += lens[k];
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s}, {x}, [](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) throw ShapeError("mean of empty tensor");
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  return make_result({}, {s * inv}, {x}, [inv](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (auto& v : g) v += o.grad[0] * inv;
  });
}

Tensor sum(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> out(s.outer * s.inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.len; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xd[(o * s.len + a) * s.inner + i];
  return make_result(drop_axis(x.shape(), ax), std::move(out), {x}, [s](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t a = 0; a < s.len; ++a)
        for (std::size_t i = 0; i < s.inner; ++i) g[(ou * s.len + a) * s.inner + i] += o.grad[ou * s.inner + i];
  });
}

Tensor max(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "max");
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.len == 0) throw ShapeError("max over empty axis");
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = 0;
      double bv = xd[o * s.len * s.inner + i];
      for (std::size_t a = 1; a < s.len; ++a) {
        const double v = xd[(o * s.len + a) * s.inner + i];
        if (v > bv) {
          bv = v;
          best = a;
        }
      }
      out[o * s.inner + i] = bv;
      arg[o * s.inner + i] = (o * s.len + best) * s.inner + i;
    }
  }
  return make_result(drop_axis(x.shape(), ax), std::move(out), {x}, [arg = std::move(arg)](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t j = 0; j < arg.size(); ++j) g[arg[j]] += o.grad[j];
  });
}

namespace {

// Row-wise softmax over the split axis, writing probabilities and (optionally)
// the log-normaliser for each (outer, inner) slot.
void softmax_rows(std::span<const double> x, const AxisSplit& s, std::vector<double>& p, std::vector<double>* lse) {
  p.assign(x.size(), 0.0);
  if (lse) lse->assign(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.len; ++a) m = std::max(m, x[(o * s.len + a) * s.inner + i]);
      double z = 0.0;
      for (std::size_t a = 0; a < s.len; ++a) {
        const std::size_t k = (o * s.len + a) * s.inner + i;
        p[k] = std::exp(x[k] - m);
        z += p[k];
      }
      for (std::size_t a = 0; a < s.len; ++a) p[(o * s.len + a) * s.inner + i] /= z;
      if (lse) (*lse)[o * s.inner + i] = m + std::log(z);
    }
  }
}

}  // namespace

Tensor logsumexp(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "logsumexp");
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.len == 0) throw ShapeError("logsumexp over empty axis");
  std::vector<double> p, out;
  softmax_rows(x.data(), s, p, &out);
  return make_result(drop_axis(x.shape(), ax), std::move(out), {x}, [p = std::move(p), s](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t a = 0; a < s.len; ++a)
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t k = (ou * s.len + a) * s.inner + i;
          g[k] += o.grad[ou * s.inner + i] * p[k];
        }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> p;
  softmax_rows(x.data(), s, p, nullptr);
  return make_result(x.shape(), std::move(p), {x}, [s](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    const auto& y = o.data;
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double dot = 0.0;
        for (std::size_t a = 0; a < s.len; ++a) {
          const std::size_t k = (ou * s.len + a) * s.inner + i;
          dot += o.grad[k] * y[k];
        }
        for (std::size_t a = 0; a < s.len; ++a) {
          const std::size_t k = (ou * s.len + a) * s.inner + i;
          g[k] += y[k] * (o.grad[k] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_axis(x.shape(), ax);
  std::vector<double> p, lse;
  softmax_rows(x.data(), s, p, &lse);
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t a = 0; a < s.len; ++a)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t k = (o * s.len + a) * s.inner + i;
        out[k] = xd[k] - lse[o * s.inner + i];
      }
  return make_result(x.shape(), std::move(out), {x}, [p = std::move(p), s](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t ou = 0; ou < s.outer; ++ou)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double total = 0.0;
        for (std::size_t a = 0; a < s.len; ++a) total += o.grad[(ou * s.len + a) * s.inner + i];
        for (std::size_t a = 0; a < s.len; ++a) {
          const std::size_t k = (ou * s.len + a) * s.inner + i;
          g[k] += o.grad[k] - p[k] * total;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// blocks

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: feature dim " + std::to_string(d) + " vs gamma " + shape_str(gamma.shape()) +
                     ", beta " + shape_str(beta.shape()));
  }
  const std::size_t rows = d == 0 ? 0 : x.size() / d;
  std::vector<double> xhat(x.size()), inv_std(rows), out(x.size());
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - mu) * is;
      out[r * d + j] = gd[j] * xhat[r * d + j] + bd[j];
    }
  }
  return make_result(x.shape(), std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), d, rows](Node& o) {
                       const auto& g = o.grad;
                       const auto& gam = o.parents[1]->data;
                       if (wants_grad(o, 1)) {
                         auto& gg = o.parents[1]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
                       }
                       if (wants_grad(o, 2)) {
                         auto& gb = o.parents[2]->grad_buffer();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                       }
                       if (wants_grad(o, 0)) {
                         auto& gx = o.parents[0]->grad_buffer();
                         const double inv_d = 1.0 / static_cast<double>(d);
                         for (std::size_t r = 0; r < rows; ++r) {
                           double m1 = 0.0, m2 = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = g[r * d + j] * gam[j];
                             m1 += dxh;
                             m2 += dxh * xhat[r * d + j];
                           }
                           m1 *= inv_d;
                           m2 *= inv_d;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double dxh = g[r * d + j] * gam[j];
                             gx[r * d + j] += inv_std[r] * (dxh - m1 - xhat[r * d + j] * m2);
                           }
                         }
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::span<const Segment> segments,
                 std::size_t n_heads, bool causal) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention: q, k, v must share a 2-D shape, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t n = q.dim(0), d = q.dim(1);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Segment> segs(segments.begin(), segments.end());
  std::vector<std::size_t> p_offset(segs.size());
  std::size_t total = 0;
  for (std::size_t s = 0; s < segs.size(); ++s) {
    if (segs[s].start + segs[s].length > n) throw ShapeError("attention: segment exceeds " + std::to_string(n) + " rows");
    p_offset[s] = total;
    total += n_heads * segs[s].length * segs[s].length;
  }
  std::vector<double> probs(total, 0.0);
  std::vector<double> out(n * d, 0.0);
  const double* Q = q.data().data();
  const double* K = k.data().data();
  const double* V = v.data().data();
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const std::size_t st = segs[s].start, len = segs[s].length;
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = probs.data() + p_offset[s] + h * len * len;
      const std::size_t c0 = h * dh;
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t jmax = causal ? i + 1 : len;
        const double* qi = Q + (st + i) * d + c0;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < jmax; ++j) {
          const double* kj = K + (st + j) * d + c0;
          double acc = 0.0;
          for (std::size_t c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          P[i * len + j] = acc * sc;
          m = std::max(m, P[i * len + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * len + j] = std::exp(P[i * len + j] - m);
          z += P[i * len + j];
        }
        double* oi = out.data() + (st + i) * d + c0;
        for (std::size_t j = 0; j < jmax; ++j) {
          P[i * len + j] /= z;
          const double pij = P[i * len + j];
          const double* vj = V + (st + j) * d + c0;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += pij * vj[c];
        }
      }
    }
  }
  return make_result(
      {n, d}, std::move(out), {q, k, v},
      [probs = std::move(probs), p_offset = std::move(p_offset), segs = std::move(segs), n_heads, dh, d, sc,
       causal](Node& o) {
        const double* G = o.grad.data();
        const double* Q = o.parents[0]->data.data();
        const double* K = o.parents[1]->data.data();
        const double* V = o.parents[2]->data.data();
        const bool gq = wants_grad(o, 0), gk = wants_grad(o, 1), gv = wants_grad(o, 2);
        double* GQ = gq ? o.parents[0]->grad_buffer().data() : nullptr;
        double* GK = gk ? o.parents[1]->grad_buffer().data() : nullptr;
        double* GV = gv ? o.parents[2]->grad_buffer().data() : nullptr;
        std::vector<double> ds;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const std::size_t st = segs[s].start, len = segs[s].length;
          ds.assign(len * len, 0.0);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* P = probs.data() + p_offset[s] + h * len * len;
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t jmax = causal ? i + 1 : len;
              const double* gi = G + (st + i) * d + c0;
              double dot = 0.0;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double* vj = V + (st + j) * d + c0;
                double dp = 0.0;
                for (std::size_t c = 0; c < dh; ++c) dp += gi[c] * vj[c];
                ds[i * len + j] = dp;
                dot += dp * P[i * len + j];
                if (gv) {
                  double* gvj = GV + (st + j) * d + c0;
                  const double pij = P[i * len + j];
                  for (std::size_t c = 0; c < dh; ++c) gvj[c] += pij * gi[c];
                }
              }
              for (std::size_t j = 0; j < jmax; ++j) ds[i * len + j] = P[i * len + j] * (ds[i * len + j] - dot) * sc;
            }
            for (std::size_t i = 0; i < len; ++i) {
              const std::size_t jmax = causal ? i + 1 : len;
              const double* qi = Q + (st + i) * d + c0;
              for (std::size_t j = 0; j < jmax; ++j) {
                const double dsij = ds[i * len + j];
                if (gq) {
                  double* gqi = GQ + (st + i) * d + c0;
                  const double* kj = K + (st + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gqi[c] += dsij * kj[c];
                }
                if (gk) {
                  double* gkj = GK + (st + j) * d + c0;
                  for (std::size_t c = 0; c < dh; ++c) gkj[c] += dsij * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep = 1.0 / (1.0 - p);
  // One draw from rng seeds a counter-based stream for the whole mask.
  const std::uint64_t seed = rng.next();
  std::vector<double> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const double u = static_cast<double>(mix64(seed + i) >> 11) * 0x1.0p-53;
    mask[i] = u < p ? 0.0 : keep;
  }
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& o) {
    if (!wants_grad(o, 0)) return;
    auto& g = o.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * mask[i];
  });
}

}  // namespace ebmcal
