#pragma once

// Selective state-space primitive.
//
//   h_t = exp(delta_t * A) . h_{t-1} + Bbar_t * x_t,   h_0 = 0
//   y_t = <C_t, h_t> + D * x_t
//
// with the zero-order-hold input matrix Bbar_t = (exp(delta_t A) - 1) / A * B_t.
// A is diagonal and strictly negative; delta is one positive timescale per
// token and channel.

#include <cstddef>
#include <span>
#include <vector>

#include "csmamba/autodiff.hpp"
#include "csmamba/tensor.hpp"

namespace csm::ssm {

struct Discretized {
  std::vector<double> a_bar;
  std::vector<double> b_bar;
};

/// Below this |delta*A| the analytic limit Bbar = delta*B is used.
inline constexpr double kZohSmallArg = 1e-8;

/// ZOH discretization of a diagonal system. Throws on delta <= 0.
Discretized discretize_zoh(std::span<const double> a, std::span<const double> b, double delta);

/// Channel-major scan operands. x, delta: [C, L]; a: [C, N]; b, c: [N, L]
/// shared by all channels; d: [C].
struct ScanInputs {
  Tensor x;
  Tensor delta;
  Tensor a;
  Tensor b;
  Tensor c;
  Tensor d;
};

/// Validates shapes and ranges; throws std::invalid_argument on mismatch.
void check_scan_inputs(const ScanInputs& in);

/// Sequential recurrence; returns y [C, L].
Tensor selective_scan(const ScanInputs& in);

/// Differentiable scan over tape variables (same layout as ScanInputs).
ad::Var selective_scan(const ad::Var& x, const ad::Var& delta, const ad::Var& a,
                       const ad::Var& b, const ad::Var& c, const ad::Var& d);

/// Literal single-channel recurrence over explicit per-token discretized
/// parameters: a_bar, b_bar, c are [L, N].
std::vector<double> naive_scan_oracle(std::span<const double> x, const Tensor& a_bar,
                                      const Tensor& b_bar, const Tensor& c, double d);

/// Max deviation (states and outputs) between the discretized trajectory and
/// the closed-form continuous solution h(t) = A^-1 (e^{At} - I) B u for a
/// constant input u sampled every `delta` for `steps` samples.
double continuous_response_check(std::span<const double> a, std::span<const double> b,
                                 std::span<const double> c, double d, double u, double delta,
                                 std::size_t steps);

}  // namespace csm::ssm
