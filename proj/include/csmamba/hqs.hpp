#pragma once

// Half-quadratic-splitting unfolding.
//
//   z_0 = shift_back(y)
//   x_k = z_{k-1} + Phi^T [ (y - Phi z_{k-1}) ./ (mu_k + diag(Phi Phi^T)) ]
//   z_k = denoise(x_k, sigma_k)
//
// and the result is z_K clamped to non-negative radiance. mu_k and sigma_k are
// softplus images of learned per-stage scalars.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "csmamba/autodiff.hpp"
#include "csmamba/cassi.hpp"
#include "csmamba/denoiser.hpp"

namespace csm::hqs {

inline constexpr double kInitMu = 1.0;
inline constexpr double kInitSigma = 0.1;
inline const std::string kAlphaName = "stage.alpha";
inline const std::string kBetaName = "stage.beta";

struct StageParams {
  std::vector<double> mu;
  std::vector<double> sigma;
};

struct UnfoldConfig {
  std::size_t stages = 3;
  bool share_weights = false;
  net::UNetConfig denoiser{};
};

double softplus(double x);
double softplus_inverse(double y);

StageParams estimate_stage_params(std::span<const double> alpha, std::span<const double> beta);

/// Closed-form data step. Throws on mu <= 0 or dimension mismatch.
cassi::HsiCube data_step(const cassi::HsiCube& z, const cassi::Measurement& y,
                         const cassi::SensingOperator& op, double mu);

/// Solves (Phi^T Phi + mu I) x = Phi^T y + mu z with a dense factorization.
cassi::HsiCube dense_oracle_data_step(const cassi::HsiCube& z, const cassi::Measurement& y,
                                      const cassi::SensingOperator& op, double mu);

/// Differentiable data step in z [bands,H,W] and scalar mu.
ad::Var data_step(const ad::Var& z, const ad::Var& mu, const cassi::Measurement& y,
                  const cassi::SensingOperator& op);

/// Weight-name prefix of the denoiser used at `stage`.
std::string denoiser_prefix(const UnfoldConfig& cfg, std::size_t stage);

/// Deterministic initial weights: denoiser(s) plus stage scalars at
/// mu = kInitMu, sigma = kInitSigma.
net::ModelWeights init_model(const UnfoldConfig& cfg, std::size_t bands, std::uint64_t seed);

/// Per-stage observer: (stage index, x_k, z_k).
using StageHook = std::function<void(std::size_t, const ad::Var&, const ad::Var&)>;

ad::Var reconstruct(const net::ParamSet& ps, const cassi::Measurement& y,
                    const cassi::SensingOperator& op, const UnfoldConfig& cfg,
                    const Tensor* feature_mask = nullptr, const StageHook& hook = {});

cassi::HsiCube reconstruct(const cassi::Measurement& y, const cassi::SensingOperator& op,
                           const net::ModelWeights& weights, const UnfoldConfig& cfg,
                           const Tensor* feature_mask = nullptr);

}  // namespace csm::hqs
