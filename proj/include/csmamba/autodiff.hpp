#pragma once

// Tape-based reverse-mode differentiation over dense double tensors.
//
// Nodes are appended in evaluation order, so creation order is a topological
// order and the reverse sweep is a single backwards pass over the tape. A tape
// belongs to one thread; parallel work uses independent tapes.

#include <cstddef>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "csmamba/scan_order.hpp"
#include "csmamba/tensor.hpp"

namespace csm::ad {

class Tape;

/// Handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Receives the output gradient and the node's own value.
using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& out)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf node. Parameters pass requires_grad = true.
  Var leaf(Tensor value, bool requires_grad, std::string label = "leaf");
  Var constant(Tensor value) { return leaf(std::move(value), false, "const"); }

  /// Records an operation result. `backward` must accumulate into the parents
  /// through accumulate()/grad_buffer().
  Var record(std::string_view op, Tensor value, std::initializer_list<Var> parents,
             BackwardFn backward);
  Var record(std::string_view op, Tensor value, const std::vector<Var>& parents,
             BackwardFn backward);

  /// Reverse sweep from a scalar loss. Throws std::invalid_argument otherwise.
  void backward(const Var& loss);

  const Tensor& value(const Var& v) const { return nodes_.at(v.id()).value; }
  bool requires_grad(const Var& v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient of the last backward() call; zeros if the node was not reached.
  Tensor grad(const Var& v) const;
  bool has_grad(const Var& v) const { return !nodes_.at(v.id()).grad.empty(); }

  /// Materializes (zero-filled) and returns the gradient buffer of `v`.
  Tensor& grad_buffer(const Var& v);
  void accumulate(const Var& v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }

  /// Description of the first node holding a non-finite value, if any.
  std::optional<std::string> first_non_finite() const;

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string label;
    std::vector<std::size_t> parents;
    BackwardFn backward;
  };

  Var push(Node node);

  std::deque<Node> nodes_;  // stable references across push_back
};

// ---- elementwise -----------------------------------------------------------
// Binary ops take equal shapes or a one-element operand broadcast as a scalar.

enum class ElementwiseKind { add, sub, mul, sigmoid, gelu, scale, softplus, exp, neg, relu };

Var elementwise(ElementwiseKind kind, const Var& a, const std::optional<Var>& b = std::nullopt,
                double factor = 1.0);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var neg(const Var& a);
Var relu(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

// ---- reductions --------------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// Mean squared error between equally shaped tensors.
Var mse(const Var& a, const Var& b);

// ---- structure ---------------------------------------------------------------

Var reshape(const Var& a, Shape shape);
Var element(const Var& a, std::size_t index);
/// Broadcasts a one-element tensor to `shape`.
Var broadcast_scalar(const Var& s, Shape shape);
/// Concatenates along axis 0; trailing dims must agree.
Var concat(const std::vector<Var>& parts);
/// Rows [begin, end) along axis 0.
Var slice(const Var& a, std::size_t begin, std::size_t end);

/// Applies a permutation to every contiguous run of order.length() elements:
/// out[row, i] = t[row, order[i]]. The gradient scatters through the inverse.
Var gather_by_order(const Var& t, const scan::ScanOrder& order);
/// Inverse of gather_by_order: out[row, order[i]] = t[row, i].
Var scatter_by_order(const Var& t, const scan::ScanOrder& order);

// ---- linear layers -------------------------------------------------------------

enum class Padding { same, valid };

/// Cross-correlation of input [Cin,H,W] with kernel [Cout,Cin,k,k], k in {1,3}.
Var conv2d(const Var& input, const Var& kernel, std::size_t stride = 1,
           Padding padding = Padding::same);
/// Per-channel 3x3 (or 1x1) filter: kernel [C,1,k,k], stride 1, same padding.
Var depthwise_conv2d(const Var& input, const Var& kernel);
/// Adds bias[c] to every element of leading-axis slice c.
Var add_channel_bias(const Var& x, const Var& bias);
/// [M,K] x [K,L] -> [M,L].
Var matmul(const Var& w, const Var& x);
/// Nearest-neighbour x2 upsampling of [C,H,W].
Var upsample_nearest2x(const Var& x);
/// Normalizes across axis 0 at every trailing position, then scales/shifts per channel.
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
/// Multiplies every channel of [C,H,W] by a constant [H,W] map.
Var mul_spatial(const Var& x, const Tensor& map);

// ---- validation ------------------------------------------------------------------

/// Scalar-valued function of one parameter tensor, evaluated on a fresh tape.
using ScalarFn = std::function<Var(Tape&, const Var& theta)>;

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// `coords` restricts the check to a subset of coordinates (all when empty).
double finite_diff_check(const ScalarFn& f, const Tensor& theta, double eps,
                         const std::vector<std::size_t>& coords = {});

}  // namespace csm::ad
