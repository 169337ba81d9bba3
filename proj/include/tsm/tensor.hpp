#pragma once

// Dense row-major double tensors with reverse-mode differentiation.
//
// Every op allocates a fresh Node. When grad mode is on and at least one
// input requires a gradient, the node keeps its inputs together with a
// forward rule (used for replay) and a backward rule. Creation order gives
// a topological order, so a ComputationRecord is simply the reachable set
// sorted by sequence number.
//
// Broadcasting is limited to two cases: an operand whose shape is a suffix
// of the other's (bias over leading axes), or a single-element operand.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tsm/errors.hpp"

namespace tsm {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;
using ForwardFn = std::function<std::vector<double>(const Node& self)>;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  ForwardFn forward;
  BackwardFn backward;
  std::uint64_t seq = 0;
  const char* op = "leaf";

  bool is_leaf() const { return !backward; }
  // Zero-filled gradient buffer, allocated on first use.
  std::vector<double>& ensure_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_->value.size(); }

  std::span<const double> data() const { return node_->value; }
  // Writes bypass the graph; only meant for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  // Gradient values; all zero when nothing has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  Node* node() const { return node_.get(); }
  const NodePtr& node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

// Builds a node from a forward and backward rule. Public so that
// composite layers elsewhere can define fused primitives.
Tensor make_op(const char* op, Shape shape, const std::vector<Tensor>& inputs, ForwardFn forward,
               BackwardFn backward);

// ---- primitives -----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor pow(const Tensor& a, double p);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
// [..., 1] -> [..., n] by repetition.
Tensor repeat_last(const Tensor& a, std::size_t n);
// Rows of a [V, C] table selected by index: [ids.size(), C].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
// One entry per row of a [N, K] matrix: out[i] = a[rows[i], cols[i]].
Tensor pick(const Tensor& a, std::span<const std::size_t> rows, std::span<const std::size_t> cols);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);
// Normalization over the last axis; gamma/beta have the last extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
// Unit l2 norm along `axis`, y = x' / sqrt(|x'|^2 + eps) where x' is x
// rescaled by the power of two that puts its max magnitude in [0.5, 1).
// The prescale is exact, so power-of-two rescaling of x leaves y bitwise
// unchanged.
Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps = 1e-12);

// ---- spatial helpers on [h*w, c] token maps ------------------------------

// Nearest-neighbour upsampling by an integer factor.
Tensor upsample_nearest(const Tensor& x, std::size_t h, std::size_t w, std::size_t factor);
// Folds each f x f neighbourhood into channels: [ceil(h/f)*ceil(w/f), f*f*c].
// Out-of-range positions contribute zeros.
Tensor space_to_depth(const Tensor& x, std::size_t h, std::size_t w, std::size_t factor);

// out[n, c] = sum_k w[n, k] * rows[k, c], with each sum taken over its terms
// in sorted order, so permuting k leaves the result bitwise unchanged.
Tensor weighted_row_sum(const Tensor& weights, const Tensor& rows);

// Identity forward; backward multiplies the incoming gradient by `factor`.
// Used as a fault-injection fixture for gradient checking.
Tensor scale_grad(const Tensor& a, double factor);

// ---- operators -----------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }

// ---- reverse mode ----------------------------------------------------------

class ComputationRecord {
 public:
  // Every node that `root` depends on through recorded inputs, in
  // topological (creation) order.
  static ComputationRecord trace(const Tensor& root);
  static ComputationRecord trace(const std::vector<Tensor>& roots);

  bool contains(const Tensor& t) const;
  std::size_t size() const { return nodes_.size(); }
  const std::vector<Node*>& nodes() const { return nodes_; }
  // Recomputes every non-leaf node from its inputs; true when all values
  // match the stored ones bit for bit.
  bool replay_matches() const;

 private:
  std::vector<Node*> nodes_;
  std::vector<NodePtr> keep_alive_;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf of `record`.
void backward(const ComputationRecord& record, const Tensor& loss);
void backward(const Tensor& loss);

// True when every value is finite.
bool all_finite(std::span<const double> v);

}  // namespace tsm
