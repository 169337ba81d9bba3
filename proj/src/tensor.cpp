#include "tsm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace tsm {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out.push_back(s[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Output shape of a broadcasting binary op; throws on unsupported pairs.
Shape broadcast_shape(const char* op, const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return sa;
  if (b.numel() == 1 || is_suffix(sb, sa)) return sa;
  if (a.numel() == 1 || is_suffix(sa, sb)) return sb;
  throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(sa) + " with " + shape_str(sb));
}

const std::vector<double>& in_value(const Node& self, std::size_t i) { return self.inputs[i]->value; }

// Neumaier compensated accumulator.
struct CompensatedSum {
  double total = 0.0;
  double carry = 0.0;
  void add(double v) {
    const double t = total + v;
    if (std::abs(total) >= std::abs(v)) {
      carry += (total - t) + v;
    } else {
      carry += (v - t) + total;
    }
    total = t;
  }
  double value() const { return total + carry; }
};

// Runs `fn(grad_buffer)` only when input i wants a gradient.
template <typename Fn>
void with_input_grad(Node& self, std::size_t i, Fn&& fn) {
  Node& in = *self.inputs[i];
  if (in.requires_grad) fn(in.ensure_grad());
}

Tensor unary(const char* op, const Tensor& a, double (*f)(double, double), double (*df)(double x, double y),
             double param = 0.0) {
  return make_op(
      op, a.shape(), {a},
      [f, param](const Node& self) {
        std::vector<double> out(in_value(self, 0));
        for (double& v : out) v = f(v, param);
        return out;
      },
      [df](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          const auto& x = in_value(self, 0);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * df(x[i], self.value[i]);
        });
      });
}

Tensor binary(const char* op, const Tensor& a, const Tensor& b, double (*f)(double, double),
              double (*da)(double, double), double (*db)(double, double)) {
  Shape out = broadcast_shape(op, a, b);
  return make_op(
      op, out, {a, b},
      [f](const Node& self) {
        const auto& x = in_value(self, 0);
        const auto& y = in_value(self, 1);
        const std::size_t n = std::max(x.size(), y.size());
        std::vector<double> r(n);
        for (std::size_t i = 0; i < n; ++i) r[i] = f(x[i % x.size()], y[i % y.size()]);
        return r;
      },
      [da, db](Node& self) {
        const auto& x = in_value(self, 0);
        const auto& y = in_value(self, 1);
        const std::size_t n = self.grad.size();
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < n; ++i) {
            gx[i % x.size()] += self.grad[i] * da(x[i % x.size()], y[i % y.size()]);
          }
        });
        with_input_grad(self, 1, [&](std::vector<double>& gy) {
          for (std::size_t i = 0; i < n; ++i) {
            gy[i % y.size()] += self.grad[i] * db(x[i % x.size()], y[i % y.size()]);
          }
        });
      });
}

}  // namespace

// ---------------------------------------------------------------------------

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::vector<double>& Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_mode_enabled() { return t_grad_enabled; }

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> values(shape_numel(shape), v);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (std::size_t e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  Tensor t(std::move(node));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({1}, {v}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return node_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

void Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (on) node_->ensure_grad();
}

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

// ---------------------------------------------------------------------------

Tensor make_op(const char* op, Shape shape, const std::vector<Tensor>& inputs, ForwardFn forward,
               BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->op = op;
  node->shape = std::move(shape);
  node->inputs.reserve(inputs.size());
  bool needs_grad = false;
  for (const Tensor& t : inputs) {
    node->inputs.push_back(t.node_ptr());
    needs_grad = needs_grad || t.requires_grad();
  }
  node->value = forward(*node);
  if (node->value.size() != shape_numel(node->shape)) {
    throw ShapeError(std::string(op) + ": produced " + std::to_string(node->value.size()) + " values for shape " +
                     shape_str(node->shape));
  }
  node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
  if (needs_grad && t_grad_enabled) {
    node->requires_grad = true;
    node->forward = std::move(forward);
    node->backward = std::move(backward);
  } else {
    node->inputs.clear();
  }
  return Tensor(std::move(node));
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  return make_op(
      "matmul", {m, n}, {a, b},
      [m, k, n](const Node& self) {
        const double* A = in_value(self, 0).data();
        const double* B = in_value(self, 1).data();
        std::vector<double> C(m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i) {
          double* c = C.data() + i * n;
          for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * brow[j];
          }
        }
        return C;
      },
      [m, k, n](Node& self) {
        const double* A = in_value(self, 0).data();
        const double* B = in_value(self, 1).data();
        const double* G = self.grad.data();
        with_input_grad(self, 0, [&](std::vector<double>& ga) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* g = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B + p * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        });
        with_input_grad(self, 1, [&](std::vector<double>& gb) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* g = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double av = A[i * k + p];
              double* out = gb.data() + p * n;
              for (std::size_t j = 0; j < n; ++j) out[j] += av * g[j];
            }
          }
        });
      });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(0), c = a.dim(1);
  return make_op(
      "transpose", {c, r}, {a},
      [r, c](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> out(r * c);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
        return out;
      },
      [r, c](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += self.grad[j * r + i];
        });
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_op(
      "reshape", std::move(shape), {a}, [](const Node& self) { return in_value(self, 0); },
      [](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
        });
      });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Tensor neg(const Tensor& a) {
  return unary(
      "neg", a, [](double x, double) { return -x; }, [](double, double) { return -1.0; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [](double x, double p) { return x + p; }, [](double, double) { return 1.0; }, s);
}

Tensor mul_scalar(const Tensor& a, double s) {
  return make_op(
      "mul_scalar", a.shape(), {a},
      [s](const Node& self) {
        std::vector<double> out(in_value(self, 0));
        for (double& v : out) v *= s;
        return out;
      },
      [s](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * s;
        });
      });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x, double) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x, double) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x, double) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor pow(const Tensor& a, double p) {
  return make_op(
      "pow", a.shape(), {a},
      [p](const Node& self) {
        std::vector<double> out(in_value(self, 0));
        for (double& v : out) v = std::pow(v, p);
        return out;
      },
      [p](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          const auto& x = in_value(self, 0);
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] * p * std::pow(x[i], p - 1.0);
        });
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      "sigmoid", a,
      [](double x, double) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x, double) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& a) {
  return unary(
      "gelu", a, [](double x, double) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x, double) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  return make_op(
      "sum", {1}, {a},
      [](const Node& self) {
        CompensatedSum acc;
        for (double v : in_value(self, 0)) acc.add(v);
        return std::vector<double>{acc.value()};
      },
      [](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (double& g : gx) g += self.grad[0];
        });
      });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  return make_op(
      "sum_axis", drop_axis(a.shape(), axis), {a},
      [s](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> out(s.outer * s.inner, 0.0);
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            CompensatedSum acc;
            for (std::size_t e = 0; e < s.extent; ++e) acc.add(x[(o * s.extent + e) * s.inner + i]);
            out[o * s.inner + i] = acc.value();
          }
        return out;
      },
      [s](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t e = 0; e < s.extent; ++e)
              for (std::size_t i = 0; i < s.inner; ++i)
                gx[(o * s.extent + e) * s.inner + i] += self.grad[o * s.inner + i];
        });
      });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mean(const Tensor& a, std::size_t axis) {
  return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(a.dim(axis)));
}

// ---- structural ------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Tensor& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw ShapeError("concat rank mismatch: " + shape_str(first) + " vs " + shape_str(probe));
    for (std::size_t i = 0; i < probe.size(); ++i) {
      if (i != axis && probe[i] != first[i]) {
        throw ShapeError("concat extent mismatch: " + shape_str(first) + " vs " + shape_str(probe));
      }
    }
    extents.push_back(probe[axis]);
    out[axis] += probe[axis];
  }
  const AxisSplit s = split_axis(out, axis);
  return make_op(
      "concat", out, parts,
      [s, extents](const Node& self) {
        std::vector<double> r(s.outer * s.extent * s.inner);
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
          const auto& x = in_value(self, p);
          const std::size_t block = extents[p] * s.inner;
          for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(o * block), block,
                        r.begin() + static_cast<std::ptrdiff_t>(o * s.extent * s.inner + offset));
          }
          offset += block;
        }
        return r;
      },
      [s, extents](Node& self) {
        std::size_t offset = 0;
        for (std::size_t p = 0; p < extents.size(); ++p) {
          const std::size_t block = extents[p] * s.inner;
          with_input_grad(self, p, [&](std::vector<double>& gx) {
            for (std::size_t o = 0; o < s.outer; ++o)
              for (std::size_t i = 0; i < block; ++i) gx[o * block + i] += self.grad[o * s.extent * s.inner + offset + i];
          });
          offset += block;
        }
      });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisSplit s = split_axis(a.shape(), axis);
  if (length == 0 || start + length > s.extent) {
    throw ShapeError("slice [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range on axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  Shape out = a.shape();
  out[axis] = length;
  return make_op(
      "slice", out, {a},
      [s, start, length](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> r(s.outer * length * s.inner);
        for (std::size_t o = 0; o < s.outer; ++o) {
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((o * s.extent + start) * s.inner), length * s.inner,
                      r.begin() + static_cast<std::ptrdiff_t>(o * length * s.inner));
        }
        return r;
      },
      [s, start, length](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < length * s.inner; ++i)
              gx[(o * s.extent + start) * s.inner + i] += self.grad[o * length * s.inner + i];
        });
      });
}

Tensor repeat_last(const Tensor& a, std::size_t n) {
  if (a.shape().back() != 1) throw ShapeError("repeat_last expects trailing extent 1, got " + shape_str(a.shape()));
  Shape out = a.shape();
  out.back() = n;
  return make_op(
      "repeat_last", out, {a},
      [n](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> r(x.size() * n);
        for (std::size_t i = 0; i < x.size(); ++i) std::fill_n(r.begin() + static_cast<std::ptrdiff_t>(i * n), n, x[i]);
        return r;
      },
      [n](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < gx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i] += self.grad[i * n + j];
        });
      });
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows expects a [V, C] table, got " + shape_str(table.shape()));
  if (ids.empty()) throw ShapeError("gather_rows with no ids");
  const std::size_t v = table.dim(0), c = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  for (std::size_t i : idx) {
    if (i >= v) throw ShapeError("gather_rows index " + std::to_string(i) + " >= " + std::to_string(v));
  }
  return make_op(
      "gather_rows", {idx.size(), c}, {table},
      [idx, c](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> r(idx.size() * c);
        for (std::size_t i = 0; i < idx.size(); ++i)
          std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(idx[i] * c), c, r.begin() + static_cast<std::ptrdiff_t>(i * c));
        return r;
      },
      [idx, c](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < c; ++j) gx[idx[i] * c + j] += self.grad[i * c + j];
        });
      });
}

Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols) {
  if (a.rank() != 2) throw ShapeError("pick expects rank 2, got " + shape_str(a.shape()));
  if (rows.size() != cols.size() || rows.empty()) throw ShapeError("pick: row/col index lists must be equal and non-empty");
  const std::size_t n = a.dim(0), k = a.dim(1);
  std::vector<std::size_t> flat(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n || cols[i] >= k) throw ShapeError("pick index out of range for " + shape_str(a.shape()));
    flat[i] = rows[i] * k + cols[i];
  }
  return make_op(
      "pick", {flat.size()}, {a},
      [flat](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> r(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i) r[i] = x[flat[i]];
        return r;
      },
      [flat](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < flat.size(); ++i) gx[flat[i]] += self.grad[i];
        });
      });
}

// ---- normalizations --------------------------------------------------------

Tensor softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  for (double v : a.data()) {
    if (std::isnan(v)) throw NumericError("softmax: NaN in input of shape " + shape_str(a.shape()));
  }
  return make_op(
      "softmax", a.shape(), {a},
      [s](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> y(x.size());
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double m = x[base];
            for (std::size_t e = 1; e < s.extent; ++e) m = std::max(m, x[base + e * s.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
              y[base + e * s.inner] = std::exp(x[base + e * s.inner] - m);
              z += y[base + e * s.inner];
            }
            for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= z;
          }
        return y;
      },
      [s](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          const auto& y = self.value;
          const auto& g = self.grad;
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t base = o * s.extent * s.inner + i;
              double dot = 0.0;
              for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * y[base + e * s.inner];
              for (std::size_t e = 0; e < s.extent; ++e) {
                const std::size_t j = base + e * s.inner;
                gx[j] += y[j] * (g[j] - dot);
              }
            }
        });
      });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  const AxisSplit s = split_axis(a.shape(), axis);
  for (double v : a.data()) {
    if (std::isnan(v)) throw NumericError("log_softmax: NaN in input of shape " + shape_str(a.shape()));
  }
  return make_op(
      "log_softmax", a.shape(), {a},
      [s](const Node& self) {
        const auto& x = in_value(self, 0);
        std::vector<double> y(x.size());
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.extent * s.inner + i;
            double m = x[base];
            for (std::size_t e = 1; e < s.extent; ++e) m = std::max(m, x[base + e * s.inner]);
            double z = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) z += std::exp(x[base + e * s.inner] - m);
            const double lse = m + std::log(z);
            for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] = x[base + e * s.inner] - lse;
          }
        return y;
      },
      [s](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          const auto& y = self.value;
          const auto& g = self.grad;
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const std::size_t base = o * s.extent * s.inner + i;
              double gsum = 0.0;
              for (std::size_t e = 0; e < s.extent; ++e) gsum += g[base + e * s.inner];
              for (std::size_t e = 0; e < s.extent; ++e) {
                const std::size_t j = base + e * s.inner;
                gx[j] += g[j] - std::exp(y[j]) * gsum;
              }
            }
        });
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                     " do not match features of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / c;
  return make_op(
      "layer_norm", x.shape(), {x, gamma, beta},
      [rows, c, eps](const Node& self) {
        const auto& xv = in_value(self, 0);
        const auto& g = in_value(self, 1);
        const auto& b = in_value(self, 2);
        std::vector<double> y(xv.size());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xv.data() + r * c;
          double mu = 0.0;
          for (std::size_t j = 0; j < c; ++j) mu += row[j];
          mu /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + eps);
          for (std::size_t j = 0; j < c; ++j) y[r * c + j] = (row[j] - mu) * inv * g[j] + b[j];
        }
        return y;
      },
      [rows, c, eps](Node& self) {
        const auto& xv = in_value(self, 0);
        const auto& g = in_value(self, 1);
        const auto& gy = self.grad;
        std::vector<double> xhat(c), gxhat(c);
        Node& xn = *self.inputs[0];
        Node& gn = *self.inputs[1];
        Node& bn = *self.inputs[2];
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xv.data() + r * c;
          double mu = 0.0;
          for (std::size_t j = 0; j < c; ++j) mu += row[j];
          mu /= static_cast<double>(c);
          double var = 0.0;
          for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= static_cast<double>(c);
          const double inv = 1.0 / std::sqrt(var + eps);
          double mean_g = 0.0, mean_gx = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            xhat[j] = (row[j] - mu) * inv;
            gxhat[j] = gy[r * c + j] * g[j];
            mean_g += gxhat[j];
            mean_gx += gxhat[j] * xhat[j];
          }
          mean_g /= static_cast<double>(c);
          mean_gx /= static_cast<double>(c);
          if (xn.requires_grad) {
            auto& gx = xn.ensure_grad();
            for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += inv * (gxhat[j] - mean_g - xhat[j] * mean_gx);
          }
          if (gn.requires_grad) {
            auto& gg = gn.ensure_grad();
            for (std::size_t j = 0; j < c; ++j) gg[j] += gy[r * c + j] * xhat[j];
          }
          if (bn.requires_grad) {
            auto& gb = bn.ensure_grad();
            for (std::size_t j = 0; j < c; ++j) gb[j] += gy[r * c + j];
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps) {
  const AxisSplit s = split_axis(x.shape(), axis);
  // Per-slice exponent e such that x * 2^-e has max magnitude in [0.5, 1).
  auto exponents = [s](const std::vector<double>& v) {
    std::vector<int> ex(s.outer * s.inner, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double m = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) m = std::max(m, std::abs(v[(o * s.extent + e) * s.inner + i]));
        int k = 0;
        if (m > 0.0 && std::isfinite(m)) std::frexp(m, &k);
        ex[o * s.inner + i] = k;
      }
    return ex;
  };
  return make_op(
      "l2_normalize", x.shape(), {x},
      [s, eps, exponents](const Node& self) {
        const auto& v = in_value(self, 0);
        const std::vector<int> ex = exponents(v);
        std::vector<double> y(v.size());
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const int k = ex[o * s.inner + i];
            double ss = 0.0;
            for (std::size_t e = 0; e < s.extent; ++e) {
              const double t = std::ldexp(v[(o * s.extent + e) * s.inner + i], -k);
              ss += t * t;
            }
            const double r = std::sqrt(ss + eps);
            for (std::size_t e = 0; e < s.extent; ++e) {
              const std::size_t j = (o * s.extent + e) * s.inner + i;
              y[j] = std::ldexp(v[j], -k) / r;
            }
          }
        return y;
      },
      [s, eps, exponents](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          const auto& v = in_value(self, 0);
          const std::vector<int> ex = exponents(v);
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) {
              const int k = ex[o * s.inner + i];
              double ss = 0.0, dot = 0.0;
              for (std::size_t e = 0; e < s.extent; ++e) {
                const std::size_t j = (o * s.extent + e) * s.inner + i;
                const double t = std::ldexp(v[j], -k);
                ss += t * t;
                dot += t * self.grad[j];
              }
              const double r = std::sqrt(ss + eps);
              const double r3 = r * r * r;
              for (std::size_t e = 0; e < s.extent; ++e) {
                const std::size_t j = (o * s.extent + e) * s.inner + i;
                const double t = std::ldexp(v[j], -k);
                gx[j] += std::ldexp(self.grad[j] / r - t * dot / r3, -k);
              }
            }
        });
      });
}

// ---- spatial ---------------------------------------------------------------

Tensor upsample_nearest(const Tensor& x, std::size_t h, std::size_t w, std::size_t factor) {
  if (x.rank() != 2 || x.dim(0) != h * w) {
    throw ShapeError("upsample_nearest: " + shape_str(x.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " token map");
  }
  const std::size_t c = x.dim(1), H = h * factor, W = w * factor;
  return make_op(
      "upsample_nearest", {H * W, c}, {x},
      [c, W, H, w, factor](const Node& self) {
        const auto& v = in_value(self, 0);
        std::vector<double> out(H * W * c);
        for (std::size_t yy = 0; yy < H; ++yy)
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::size_t src = (yy / factor) * w + xx / factor;
            std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(src * c), c,
                        out.begin() + static_cast<std::ptrdiff_t>((yy * W + xx) * c));
          }
        return out;
      },
      [c, W, H, w, factor](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t yy = 0; yy < H; ++yy)
            for (std::size_t xx = 0; xx < W; ++xx) {
              const std::size_t src = (yy / factor) * w + xx / factor;
              for (std::size_t j = 0; j < c; ++j) gx[src * c + j] += self.grad[(yy * W + xx) * c + j];
            }
        });
      });
}

Tensor space_to_depth(const Tensor& x, std::size_t h, std::size_t w, std::size_t factor) {
  if (x.rank() != 2 || x.dim(0) != h * w) {
    throw ShapeError("space_to_depth: " + shape_str(x.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " token map");
  }
  const std::size_t c = x.dim(1);
  const std::size_t oh = (h + factor - 1) / factor, ow = (w + factor - 1) / factor;
  const std::size_t oc = factor * factor * c;
  // map[out_index] = source token or npos for padding
  std::vector<std::size_t> src(oh * ow * factor * factor, static_cast<std::size_t>(-1));
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) {
          const std::size_t yy = oy * factor + dy, xx = ox * factor + dx;
          if (yy < h && xx < w) src[((oy * ow + ox) * factor + dy) * factor + dx] = yy * w + xx;
        }
  return make_op(
      "space_to_depth", {oh * ow, oc}, {x},
      [src, c](const Node& self) {
        const auto& v = in_value(self, 0);
        std::vector<double> out(src.size() * c, 0.0);
        for (std::size_t i = 0; i < src.size(); ++i) {
          if (src[i] == static_cast<std::size_t>(-1)) continue;
          std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(src[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
        }
        return out;
      },
      [src, c](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < src.size(); ++i) {
            if (src[i] == static_cast<std::size_t>(-1)) continue;
            for (std::size_t j = 0; j < c; ++j) gx[src[i] * c + j] += self.grad[i * c + j];
          }
        });
      });
}

Tensor weighted_row_sum(const Tensor& weights, const Tensor& rows) {
  if (weights.rank() != 2 || rows.rank() != 2 || weights.dim(1) != rows.dim(0)) {
    throw ShapeError("weighted_row_sum: incompatible shapes " + shape_str(weights.shape()) + " and " +
                     shape_str(rows.shape()));
  }
  const std::size_t n = weights.dim(0), k = weights.dim(1), c = rows.dim(1);
  return make_op(
      "weighted_row_sum", {n, c}, {weights, rows},
      [n, k, c](const Node& self) {
        const auto& wv = in_value(self, 0);
        const auto& rv = in_value(self, 1);
        std::vector<double> out(n * c);
        std::vector<double> terms(k);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            for (std::size_t q = 0; q < k; ++q) terms[q] = wv[i * k + q] * rv[q * c + j];
            std::sort(terms.begin(), terms.end());
            double acc = 0.0;
            for (double t : terms) acc += t;
            out[i * c + j] = acc;
          }
        return out;
      },
      [n, k, c](Node& self) {
        const auto& wv = in_value(self, 0);
        const auto& rv = in_value(self, 1);
        const auto& g = self.grad;
        with_input_grad(self, 0, [&](std::vector<double>& gw) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t q = 0; q < k; ++q) {
              double acc = 0.0;
              for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * rv[q * c + j];
              gw[i * k + q] += acc;
            }
        });
        with_input_grad(self, 1, [&](std::vector<double>& gr) {
          for (std::size_t q = 0; q < k; ++q)
            for (std::size_t j = 0; j < c; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < n; ++i) acc += g[i * c + j] * wv[i * k + q];
              gr[q * c + j] += acc;
            }
        });
      });
}

Tensor scale_grad(const Tensor& a, double factor) {
  return make_op(
      "scale_grad", a.shape(), {a}, [](const Node& self) { return in_value(self, 0); },
      [factor](Node& self) {
        with_input_grad(self, 0, [&](std::vector<double>& gx) {
          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * self.grad[i];
        });
      });
}

// ---- reverse mode ----------------------------------------------------------

ComputationRecord ComputationRecord::trace(const Tensor& root) { return trace(std::vector<Tensor>{root}); }

ComputationRecord ComputationRecord::trace(const std::vector<Tensor>& roots) {
  ComputationRecord rec;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack;
  for (const Tensor& r : roots) {
    if (!r.defined()) continue;
    if (seen.insert(r.node()).second) {
      stack.push_back(r.node());
      rec.keep_alive_.push_back(r.node_ptr());
    }
  }
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    rec.nodes_.push_back(n);
    for (const NodePtr& in : n->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(rec.nodes_.begin(), rec.nodes_.end(), [](const Node* a, const Node* b) { return a->seq < b->seq; });
  return rec;
}

bool ComputationRecord::contains(const Tensor& t) const {
  return std::find(nodes_.begin(), nodes_.end(), t.node()) != nodes_.end();
}

bool ComputationRecord::replay_matches() const {
  for (Node* n : nodes_) {
    if (!n->forward) continue;
    const std::vector<double> again = n->forward(*n);
    if (again.size() != n->value.size()) return false;
    for (std::size_t i = 0; i < again.size(); ++i) {
      if (std::memcmp(&again[i], &n->value[i], sizeof(double)) != 0) return false;
    }
  }
  return true;
}

void backward(const ComputationRecord& record, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? shape_str(loss.shape()) : "undefined"));
  }
  if (!record.contains(loss)) throw std::invalid_argument("backward: loss is not produced by the given record");
  const auto& nodes = record.nodes();
  for (Node* n : nodes) {
    if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

void backward(const Tensor& loss) { backward(ComputationRecord::trace(loss), loss); }

}  // namespace tsm
