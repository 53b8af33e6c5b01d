#include "fln/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "fln/error.hpp"

namespace fln {

namespace {

thread_local bool t_grad_enabled = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

void check_finite(const Node& node) {
  for (double v : node.value) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + node.op);
    }
  }
}

// Creates the output node and wires it into the graph when gradients are needed.
NodePtr make_node(Shape shape, std::vector<double> value, const char* op,
                  std::vector<NodePtr> inputs) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  check_finite(*node);
  if (t_grad_enabled) {
    for (const auto& in : inputs) {
      if (in->requires_grad) {
        node->requires_grad = true;
        break;
      }
    }
  }
  if (node->requires_grad) node->inputs = std::move(inputs);
  return node;
}

// Maps an output linear index to the linear index of a broadcast input.
class BroadcastMap {
 public:
  BroadcastMap(const Shape& in, const Shape& out) {
    const std::size_t n_in = shape_numel(in);
    const std::size_t n_out = shape_numel(out);
    if (n_in == n_out) {
      kind_ = Kind::identity;
      return;
    }
    if (n_in == 1) {
      kind_ = Kind::scalar;
      return;
    }
    // Input equal to a trailing block of the output (ignoring leading ones).
    std::size_t lead = 0;
    while (lead < in.size() && in[lead] == 1) ++lead;
    const std::size_t tail = in.size() - lead;
    if (std::equal(in.begin() + lead, in.end(), out.end() - tail)) {
      kind_ = Kind::suffix;
      period_ = n_in;
      return;
    }
    kind_ = Kind::general;
    const std::size_t rank = out.size();
    const std::size_t offset = rank - in.size();
    std::vector<std::size_t> stride(rank, 0);
    std::size_t s = 1;
    for (std::size_t d = in.size(); d-- > 0;) {
      if (in[d] != 1) stride[d + offset] = s;
      s *= in[d];
    }
    offsets_.resize(n_out);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t cur = 0;
    for (std::size_t i = 0; i < n_out; ++i) {
      offsets_[i] = cur;
      for (std::size_t d = rank; d-- > 0;) {
        ++idx[d];
        cur += stride[d];
        if (idx[d] < out[d]) break;
        cur -= stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }

  std::size_t operator()(std::size_t i) const {
    switch (kind_) {
      case Kind::identity:
        return i;
      case Kind::scalar:
        return 0;
      case Kind::suffix:
        return i % period_;
      default:
        return offsets_[i];
    }
  }

 private:
  enum class Kind { identity, scalar, suffix, general };
  Kind kind_ = Kind::identity;
  std::size_t period_ = 1;
  std::vector<std::size_t> offsets_;
};

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* op, Fwd fwd, GradA grad_a,
                 GradB grad_b) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  auto ma = std::make_shared<BroadcastMap>(a.shape(), out_shape);
  auto mb = std::make_shared<BroadcastMap>(b.shape(), out_shape);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[(*ma)(i)], bv[(*mb)(i)]);
  auto node = make_node(std::move(out_shape), std::move(out), op, {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward = [ma, mb, grad_a, grad_b](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb = *self.inputs[1];
      const std::size_t n = self.value.size();
      if (na.requires_grad) {
        auto& ga = na.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = (*ma)(i);
          ga[ia] += grad_a(na.value[ia], nb.value[(*mb)(i)], self.value[i], self.grad[i]);
        }
      }
      if (nb.requires_grad) {
        auto& gb = nb.ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ib = (*mb)(i);
          gb[ib] += grad_b(na.value[(*ma)(i)], nb.value[ib], self.value[i], self.grad[i]);
        }
      }
    };
  }
  return Tensor(node);
}

template <typename Fwd, typename Grad>
Tensor unary_op(const Tensor& x, const char* op, Fwd fwd, Grad grad) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto node = make_node(x.shape(), std::move(out), op, {x.node()});
  if (node->requires_grad) {
    node->backward = [grad](Node& self) {
      Node& in = *self.inputs[0];
      auto& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] += grad(in.value[i], self.value[i], self.grad[i]);
      }
    };
  }
  return Tensor(node);
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t d = 0; d < axis; ++d) s.outer *= shape[d];
  s.length = shape[axis];
  for (std::size_t d = axis + 1; d < shape.size(); ++d) s.inner *= shape[d];
  return s;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  return out;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::vector<double>& detail::Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : Tensor(Tensor::scalar(0.0)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  check_finite(*node);
  return Tensor(node);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const { return shape()[normalize_axis(axis, rank())]; }

std::span<double> Tensor::mutable_values() {
  if (!node_->leaf) throw std::logic_error("mutable_values() on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= shape()[d]) throw ShapeError("index out of range");
    flat = flat * shape()[d] + i;
    ++d;
  }
  return node_->value[flat];
}

std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::set_requires_grad(bool flag) {
  if (!node_->leaf) throw std::logic_error("set_requires_grad() on a non-leaf tensor");
  node_->requires_grad = flag;
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->value = node_->value;
  return Tensor(node);
}

Tensor Tensor::clone(bool requires_grad) const {
  Tensor t = detach();
  t.node()->requires_grad = requires_grad;
  return t;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Tape

std::vector<Node*> build_tape(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; a frame is (node, next input index).
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const auto tape = build_tape(loss);
  for (Node* node : tape) {
    if (!node->leaf) node->grad.assign(node->value.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = tape.rbegin(); it != tape.rend(); ++it) {
    Node* node = *it;
    if (node->backward) node->backward(*node);
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double, double g) { return g; },
      [](double, double, double, double g) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y, double, double g) { return g * y; },
      [](double x, double, double, double g) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  for (double v : b.values()) {
    if (v == 0.0) throw DomainError("division by zero");
  }
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y, double, double g) { return g / y; },
      [](double, double y, double out, double g) { return -g * out / y; });
}

Tensor add(const Tensor& a, double b) {
  return unary_op(
      a, "add_scalar", [b](double x) { return x + b; },
      [](double, double, double g) { return g; });
}

Tensor mul(const Tensor& a, double b) {
  return unary_op(
      a, "mul_scalar", [b](double x) { return x * b; },
      [b](double, double, double g) { return g * b; });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      x, "neg", [](double v) { return -v; }, [](double, double, double g) { return -g; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double out, double g) { return g * out; });
}

Tensor expm1(const Tensor& x) {
  return unary_op(
      x, "expm1", [](double v) { return std::expm1(v); },
      [](double, double out, double g) { return g * (out + 1.0); });
}

Tensor log(const Tensor& x) {
  for (double v : x.values()) {
    if (!(v > 0.0)) throw DomainError("log of non-positive value " + std::to_string(v));
  }
  return unary_op(
      x, "log", [](double v) { return std::log(v); },
      [](double in, double, double g) { return g / in; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.values()) {
    if (v < 0.0) throw DomainError("sqrt of negative value " + std::to_string(v));
  }
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double out, double g) { return g * 0.5 / out; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      x, "square", [](double v) { return v * v; },
      [](double in, double, double g) { return g * 2.0 * in; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double in, double, double g) { return in > 0.0 ? g : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return unary_op(
      x, "gelu", [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [inv_sqrt_2pi](double in, double, double g) {
        const double cdf = 0.5 * (1.0 + std::erf(in * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * in * in);
        return g * (cdf + in * pdf);
      });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      x, "softplus",
      [](double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
      [](double in, double, double g) { return g / (1.0 + std::exp(-in)); });
}

Tensor activate(const Tensor& x, Activation kind) {
  return kind == Activation::relu ? relu(x) : gelu(x);
}

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) {
    throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch = broadcast_shapes(batch_a, batch_b);
  const std::size_t nb = shape_numel(batch);
  auto map_a = std::make_shared<BroadcastMap>(batch_a, batch);
  auto map_b = std::make_shared<BroadcastMap>(batch_b, batch);

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(nb * m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t p = 0; p < nb; ++p) {
    const double* A = av.data() + (*map_a)(p) * m * k;
    const double* B = bv.data() + (*map_b)(p) * k * n;
    double* C = out.data() + p * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t q = 0; q < k; ++q) {
        const double aiq = A[i * k + q];
        const double* Brow = B + q * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += aiq * Brow[j];
      }
    }
  }
  auto node = make_node(std::move(out_shape), std::move(out), "matmul", {a.node(), b.node()});
  if (node->requires_grad) {
    node->backward = [map_a, map_b, nb, m, k, n](Node& self) {
      Node& na = *self.inputs[0];
      Node& nb_ = *self.inputs[1];
      for (std::size_t p = 0; p < nb; ++p) {
        const std::size_t pa = (*map_a)(p), pb = (*map_b)(p);
        const double* G = self.grad.data() + p * m * n;
        const double* A = na.value.data() + pa * m * k;
        const double* B = nb_.value.data() + pb * k * n;
        if (na.requires_grad) {
          double* GA = na.ensure_grad().data() + pa * m * k;
          // dA = G . B^T
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t q = 0; q < k; ++q) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[q * n + j];
              GA[i * k + q] += acc;
            }
          }
        }
        if (nb_.requires_grad) {
          double* GB = nb_.ensure_grad().data() + pb * k * n;
          // dB = A^T . G
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t q = 0; q < k; ++q) {
              const double aiq = A[i * k + q];
              for (std::size_t j = 0; j < n; ++j) GB[q * n + j] += aiq * G[i * n + j];
            }
          }
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) {
        const double e = std::exp(xv[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
    }
  }
  auto node = make_node(x.shape(), std::move(out), "softmax", {x.node()});
  if (node->requires_grad) {
    node->backward = [s](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.length * s.inner + in;
          double dot = 0.0;
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            dot += self.grad[i] * self.value[i];
          }
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            g[i] += self.value[i] * (self.grad[i] - dot);
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor log_softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) total += std::exp(xv[base + l * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.length; ++l) {
        out[base + l * s.inner] = xv[base + l * s.inner] - lse;
      }
    }
  }
  auto node = make_node(x.shape(), std::move(out), "log_softmax", {x.node()});
  if (node->requires_grad) {
    node->backward = [s](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.length * s.inner + in;
          double total = 0.0;
          for (std::size_t l = 0; l < s.length; ++l) total += self.grad[base + l * s.inner];
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            g[i] += self.grad[i] - std::exp(self.value[i]) * total;
          }
        }
      }
    };
  }
  return Tensor(node);
}

Tensor logsumexp(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.length == 0) throw ShapeError("logsumexp over an empty axis");
  const auto xv = x.values();
  std::vector<double> out(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < s.length; ++l) mx = std::max(mx, xv[base + l * s.inner]);
      double total = 0.0;
      for (std::size_t l = 0; l < s.length; ++l) total += std::exp(xv[base + l * s.inner] - mx);
      out[o * s.inner + in] = mx + std::log(total);
    }
  }
  auto node = make_node(reduced_shape(x.shape(), ax, keepdim), std::move(out), "logsumexp",
                        {x.node()});
  if (node->requires_grad) {
    node->backward = [s](Node& self) {
      Node& in_node = *self.inputs[0];
      auto& g = in_node.ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t r = o * s.inner + in;
          const std::size_t base = o * s.length * s.inner + in;
          for (std::size_t l = 0; l < s.length; ++l) {
            const std::size_t i = base + l * s.inner;
            g[i] += self.grad[r] * std::exp(in_node.value[i] - self.value[r]);
          }
        }
      }
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  auto node = make_node({}, {total}, "sum", {x.node()});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (double& v : g) v += self.grad[0];
    };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean of an empty tensor");
  return mul(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.length == 0) throw ShapeError("sum over an empty axis");
  const auto xv = x.values();
  std::vector<double> out(s.outer * s.inner, 0.0);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t l = 0; l < s.length; ++l) {
      const double* row = xv.data() + (o * s.length + l) * s.inner;
      double* dst = out.data() + o * s.inner;
      for (std::size_t in = 0; in < s.inner; ++in) dst[in] += row[in];
    }
  }
  auto node =
      make_node(reduced_shape(x.shape(), ax, keepdim), std::move(out), "sum_axis", {x.node()});
  if (node->requires_grad) {
    node->backward = [s](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
          double* row = g.data() + (o * s.length + l) * s.inner;
          const double* src = self.grad.data() + o * s.inner;
          for (std::size_t in = 0; in < s.inner; ++in) row[in] += src[in];
        }
      }
    };
  }
  return Tensor(node);
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t len = x.dim(axis);
  if (len == 0) throw ShapeError("mean over an empty axis");
  return mul(sum(x, axis, keepdim), 1.0 / static_cast<double>(len));
}

Tensor max(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (s.length == 0) throw ShapeError("max over an empty axis");
  const auto xv = x.values();
  std::vector<double> out(s.outer * s.inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.length * s.inner + in;
      std::size_t best = 0;
      for (std::size_t l = 1; l < s.length; ++l) {
        if (xv[base + l * s.inner] > xv[base + best * s.inner]) best = l;
      }
      out[o * s.inner + in] = xv[base + best * s.inner];
      (*argmax)[o * s.inner + in] = base + best * s.inner;
    }
  }
  auto node =
      make_node(reduced_shape(x.shape(), ax, keepdim), std::move(out), "max_axis", {x.node()});
  if (node->requires_grad) {
    node->backward = [argmax](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t r = 0; r < argmax->size(); ++r) g[(*argmax)[r]] += self.grad[r];
    };
  }
  return Tensor(node);
}

// ---------------------------------------------------------------------------
// Layout

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto node = make_node(std::move(shape), std::move(out), "reshape", {x.node()});
  if (node->requires_grad) {
    node->backward = [](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw ShapeError("permute axes do not match rank");
  std::vector<bool> seen(rank, false);
  for (std::size_t a : axes) {
    if (a >= rank || seen[a]) throw ShapeError("invalid permutation");
    seen[a] = true;
  }
  const Shape& in_shape = x.shape();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * in_shape[d];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[axes[d]];
    stride[d] = in_stride[axes[d]];
  }
  const std::size_t n = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = cur;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      cur += stride[d];
      if (idx[d] < out_shape[d]) break;
      cur -= stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto xv = x.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[(*src)[i]];
  auto node = make_node(std::move(out_shape), std::move(out), "permute", {x.node()});
  if (node->requires_grad) {
    node->backward = [src](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < src->size(); ++i) g[(*src)[i]] += self.grad[i];
    };
  }
  return Tensor(node);
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[normalize_axis(axis0, x.rank())], axes[normalize_axis(axis1, x.rank())]);
  return permute(x, axes);
}

Tensor narrow(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), ax);
  if (start + length > s.length) {
    throw ShapeError("narrow [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds axis length " + std::to_string(s.length));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const auto xv = x.values();
  std::vector<double> out(s.outer * length * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o) {
    const double* from = xv.data() + (o * s.length + start) * s.inner;
    std::copy(from, from + length * s.inner, out.data() + o * length * s.inner);
  }
  auto node = make_node(std::move(out_shape), std::move(out), "narrow", {x.node()});
  if (node->requires_grad) {
    node->backward = [s, start, length](Node& self) {
      auto& g = self.inputs[0]->ensure_grad();
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* to = g.data() + (o * s.length + start) * s.inner;
        const double* from = self.grad.data() + o * length * s.inner;
        for (std::size_t i = 0; i < length * s.inner; ++i) to[i] += from[i];
      }
    };
  }
  return Tensor(node);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  std::vector<std::size_t> lengths;
  for (const auto& p : parts) {
    if (p.rank() != out_shape.size()) throw ShapeError("concat rank mismatch");
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
      if (d != ax && p.shape()[d] != parts[0].shape()[d]) throw ShapeError("concat shape mismatch");
    }
    lengths.push_back(p.shape()[ax]);
    out_shape[ax] += p.shape()[ax];
  }
  const AxisSplit s = split_axis(out_shape, ax);
  std::vector<double> out(shape_numel(out_shape));
  std::vector<NodePtr> inputs;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].values();
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy(pv.begin() + static_cast<std::ptrdiff_t>(o * lengths[k] * s.inner),
                pv.begin() + static_cast<std::ptrdiff_t>((o + 1) * lengths[k] * s.inner),
                out.begin() + static_cast<std::ptrdiff_t>((o * s.length + offset) * s.inner));
    }
    offset += lengths[k];
    inputs.push_back(parts[k].node());
  }
  auto node = make_node(std::move(out_shape), std::move(out), "concat", std::move(inputs));
  if (node->requires_grad) {
    node->backward = [s, lengths](Node& self) {
      std::size_t offset = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        Node& in = *self.inputs[k];
        if (in.requires_grad) {
          auto& g = in.ensure_grad();
          for (std::size_t o = 0; o < s.outer; ++o) {
            const double* from = self.grad.data() + (o * s.length + offset) * s.inner;
            double* to = g.data() + o * lengths[k] * s.inner;
            for (std::size_t i = 0; i < lengths[k] * s.inner; ++i) to[i] += from[i];
          }
        }
        offset += lengths[k];
      }
    };
  }
  return Tensor(node);
}

}  // namespace fln
