#include "csmamba/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace csm::ad {

const Tensor& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Tensor value, bool requires_grad, std::string label) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.label = std::move(label);
  return push(std::move(n));
}

Var Tape::record(std::string_view op, Tensor value, std::initializer_list<Var> parents,
                 BackwardFn backward) {
  return record(op, std::move(value), std::vector<Var>(parents), std::move(backward));
}

Var Tape::record(std::string_view op, Tensor value, const std::vector<Var>& parents,
                 BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.label = std::string(op);
  for (const auto& p : parents) {
    if (&p.tape() != this) throw std::invalid_argument("operand belongs to a different tape");
    n.parents.push_back(p.id());
    n.requires_grad = n.requires_grad || nodes_[p.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

void Tape::backward(const Var& loss) {
  if (loss.size() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[loss.id()].grad = Tensor(loss.shape(), 1.0);
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.empty() || !n.requires_grad || !n.backward) continue;
    n.backward(*this, n.grad, n.value);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_.at(v.id());
  if (n.grad.empty()) return Tensor::zeros_like(n.value);
  return n.grad;
}

Tensor& Tape::grad_buffer(const Var& v) {
  Node& n = nodes_.at(v.id());
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.value);
  return n.grad;
}

void Tape::accumulate(const Var& v, const Tensor& g) {
  if (!requires_grad(v)) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw std::logic_error("gradient shape " + shape_str(g.shape()) + " does not match value " +
                           shape_str(buf.shape()));
  }
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

std::optional<std::string> Tape::first_non_finite() const {
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].value.all_finite()) {
      std::ostringstream os;
      os << "node " << id << " (" << nodes_[id].label << ", shape "
         << shape_str(nodes_[id].value.shape()) << ")";
      return os.str();
    }
  }
  return std::nullopt;
}

// ---- elementwise -------------------------------------------------------------

namespace {

double softplus_value(double x) {
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

bool is_binary(ElementwiseKind k) {
  return k == ElementwiseKind::add || k == ElementwiseKind::sub || k == ElementwiseKind::mul;
}

void check_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("operands live on different tapes");
}

Var binary(ElementwiseKind kind, const Var& a, const Var& b) {
  check_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const bool a_scalar = av.size() == 1 && bv.size() != 1;
  const bool b_scalar = bv.size() == 1 && av.size() != 1;
  if (!a_scalar && !b_scalar && av.shape() != bv.shape()) {
    throw std::invalid_argument("elementwise shape mismatch: " + shape_str(av.shape()) + " vs " +
                                shape_str(bv.shape()));
  }
  const Shape& out_shape = a_scalar ? bv.shape() : av.shape();
  Tensor out(out_shape);
  const std::size_t n = out.size();
  auto ai = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto bi = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  const char* name = "add";
  switch (kind) {
    case ElementwiseKind::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) + bi(i);
      break;
    case ElementwiseKind::sub:
      name = "sub";
      for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) - bi(i);
      break;
    default:
      name = "mul";
      for (std::size_t i = 0; i < n; ++i) out[i] = ai(i) * bi(i);
      break;
  }
  return a.tape().record(name, std::move(out), {a, b},
      [a, b, kind, a_scalar, b_scalar](Tape& t, const Tensor& g, const Tensor&) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const std::size_t n = g.size();
        if (a.requires_grad()) {
          Tensor& ga = t.grad_buffer(a);
          for (std::size_t i = 0; i < n; ++i) {
            const double d = kind == ElementwiseKind::mul ? g[i] * (b_scalar ? bv[0] : bv[i]) : g[i];
            ga[a_scalar ? 0 : i] += d;
          }
        }
        if (b.requires_grad()) {
          Tensor& gb = t.grad_buffer(b);
          for (std::size_t i = 0; i < n; ++i) {
            double d = g[i];
            if (kind == ElementwiseKind::sub) d = -d;
            if (kind == ElementwiseKind::mul) d = g[i] * (a_scalar ? av[0] : av[i]);
            gb[b_scalar ? 0 : i] += d;
          }
        }
      });
}

Var unary(ElementwiseKind kind, const Var& a, double factor) {
  const Tensor& av = a.value();
  Tensor out(av.shape());
  const std::size_t n = av.size();
  const char* name = "";
  switch (kind) {
    case ElementwiseKind::sigmoid:
      name = "sigmoid";
      for (std::size_t i = 0; i < n; ++i) out[i] = sigmoid_value(av[i]);
      break;
    case ElementwiseKind::gelu:
      name = "gelu";
      for (std::size_t i = 0; i < n; ++i) out[i] = gelu_value(av[i]);
      break;
    case ElementwiseKind::scale:
      name = "scale";
      for (std::size_t i = 0; i < n; ++i) out[i] = factor * av[i];
      break;
    case ElementwiseKind::softplus:
      name = "softplus";
      for (std::size_t i = 0; i < n; ++i) out[i] = softplus_value(av[i]);
      break;
    case ElementwiseKind::exp:
      name = "exp";
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(av[i]);
      break;
    case ElementwiseKind::neg:
      name = "neg";
      for (std::size_t i = 0; i < n; ++i) out[i] = -av[i];
      break;
    case ElementwiseKind::relu:
      name = "relu";
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
      break;
    default:
      throw std::invalid_argument("binary elementwise kind used without a second operand");
  }
  return a.tape().record(name, std::move(out), {a},
      [a, kind, factor](Tape& t, const Tensor& g, const Tensor& y) {
        const Tensor& x = a.value();
        Tensor& ga = t.grad_buffer(a);
        const std::size_t n = g.size();
        switch (kind) {
          case ElementwiseKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
            break;
          case ElementwiseKind::gelu:
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * gelu_grad(x[i]);
            break;
          case ElementwiseKind::scale:
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * factor;
            break;
          case ElementwiseKind::softplus:
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * sigmoid_value(x[i]);
            break;
          case ElementwiseKind::exp:
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * y[i];
            break;
          case ElementwiseKind::neg:
            for (std::size_t i = 0; i < n; ++i) ga[i] -= g[i];
            break;
          case ElementwiseKind::relu:
            for (std::size_t i = 0; i < n; ++i) ga[i] += x[i] > 0.0 ? g[i] : 0.0;
            break;
          default:
            break;
        }
      });
}

}  // namespace

Var elementwise(ElementwiseKind kind, const Var& a, const std::optional<Var>& b, double factor) {
  if (is_binary(kind)) {
    if (!b) throw std::invalid_argument("binary elementwise op needs two operands");
    return binary(kind, a, *b);
  }
  return unary(kind, a, factor);
}

Var add(const Var& a, const Var& b) { return binary(ElementwiseKind::add, a, b); }
Var sub(const Var& a, const Var& b) { return binary(ElementwiseKind::sub, a, b); }
Var mul(const Var& a, const Var& b) { return binary(ElementwiseKind::mul, a, b); }
Var scale(const Var& a, double factor) { return unary(ElementwiseKind::scale, a, factor); }
Var sigmoid(const Var& a) { return unary(ElementwiseKind::sigmoid, a, 1.0); }
Var gelu(const Var& a) { return unary(ElementwiseKind::gelu, a, 1.0); }
Var softplus(const Var& a) { return unary(ElementwiseKind::softplus, a, 1.0); }
Var exp(const Var& a) { return unary(ElementwiseKind::exp, a, 1.0); }
Var neg(const Var& a) { return unary(ElementwiseKind::neg, a, 1.0); }
Var relu(const Var& a) { return unary(ElementwiseKind::relu, a, 1.0); }

}  // namespace csm::ad
