#include "csmamba/hqs.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace csm::hqs {

using ad::Var;
using cassi::HsiCube;
using cassi::Measurement;
using cassi::SensingOperator;

double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }

double softplus_inverse(double y) {
  if (!(y > 0.0)) throw std::invalid_argument("softplus_inverse needs a positive argument");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

StageParams estimate_stage_params(std::span<const double> alpha, std::span<const double> beta) {
  if (alpha.size() != beta.size()) {
    throw std::invalid_argument("one (alpha, beta) pair is required per stage");
  }
  StageParams p;
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    p.mu.push_back(softplus(alpha[k]));
    p.sigma.push_back(softplus(beta[k]));
  }
  return p;
}

HsiCube data_step(const HsiCube& z, const Measurement& y, const SensingOperator& op, double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("data_step: mu must be positive");
  const Measurement pz = cassi::forward_project(z, op);
  const std::vector<double> phi = cassi::phi_diag(op);
  if (y.height != pz.height || y.width != pz.width) {
    throw std::invalid_argument("data_step: measurement does not match operator detector");
  }
  Measurement r(y.height, y.width);
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    r.values[i] = (y.values[i] - pz.values[i]) / (mu + phi[i]);
  }
  HsiCube x = cassi::adjoint_project(r, op);
  for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] += z.values[i];
  return x;
}

HsiCube dense_oracle_data_step(const HsiCube& z, const Measurement& y, const SensingOperator& op,
                               double mu) {
  if (!(mu > 0.0)) throw std::invalid_argument("dense_oracle_data_step: mu must be positive");
  const Eigen::MatrixXd phi = cassi::build_dense_phi(op);
  if (static_cast<Eigen::Index>(y.values.size()) != phi.rows() ||
      static_cast<Eigen::Index>(z.values.size()) != phi.cols()) {
    throw std::invalid_argument("dense_oracle_data_step: dimension mismatch");
  }
  const Eigen::Map<const Eigen::VectorXd> yv(y.values.data(), phi.rows());
  const Eigen::Map<const Eigen::VectorXd> zv(z.values.data(), phi.cols());
  Eigen::MatrixXd system = phi.transpose() * phi;
  system.diagonal().array() += mu;
  const Eigen::VectorXd rhs = phi.transpose() * yv + mu * zv;
  const Eigen::LLT<Eigen::MatrixXd> llt(system);
  if (llt.info() != Eigen::Success) throw std::runtime_error("dense_oracle_data_step: singular system");
  const Eigen::VectorXd x = llt.solve(rhs);
  HsiCube out(z.height, z.width, z.bands);
  for (Eigen::Index i = 0; i < x.size(); ++i) out.values[static_cast<std::size_t>(i)] = x(i);
  return out;
}

namespace {

// Data step with a precomputed diag(Phi Phi^T).
Var data_step_with(const Var& z, const Var& mu, const Measurement& y, const SensingOperator& op,
                   const std::vector<double>& phi) {
  const double m = mu.value().item();
  if (!(m > 0.0)) throw std::invalid_argument("data_step: mu must be positive");
  const HsiCube zc = HsiCube::from_tensor(z.value());
  const Measurement pz = cassi::forward_project(zc, op);
  if (y.height != pz.height || y.width != pz.width) {
    throw std::invalid_argument("data_step: measurement does not match operator detector");
  }
  // residual (y - Phi z), kept for the mu gradient.
  std::vector<double> resid(y.values.size());
  Measurement r(y.height, y.width);
  for (std::size_t i = 0; i < resid.size(); ++i) {
    resid[i] = y.values[i] - pz.values[i];
    r.values[i] = resid[i] / (m + phi[i]);
  }
  HsiCube x = cassi::adjoint_project(r, op);
  for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] += zc.values[i];

  return z.tape().record("data_step", x.to_tensor(), {z, mu},
      [z, mu, op, phi, resid = std::move(resid), m](ad::Tape& t, const Tensor& g, const Tensor&) {
        // x = z + Phi^T D (y - Phi z), D = diag(1 / (mu + phi)).
        const Measurement pg = cassi::forward_project(HsiCube::from_tensor(g), op);
        if (z.requires_grad()) {
          Measurement dpg(pg.height, pg.width);
          for (std::size_t i = 0; i < dpg.values.size(); ++i) dpg.values[i] = pg.values[i] / (m + phi[i]);
          const HsiCube back = cassi::adjoint_project(dpg, op);
          Tensor gz = g;
          for (std::size_t i = 0; i < gz.size(); ++i) gz[i] -= back.values[i];
          t.accumulate(z, gz);
        }
        if (mu.requires_grad()) {
          double acc = 0.0;
          for (std::size_t i = 0; i < resid.size(); ++i) {
            const double den = m + phi[i];
            acc -= pg.values[i] * resid[i] / (den * den);
          }
          t.grad_buffer(mu)[0] += acc;
        }
      });
}

}  // namespace

Var data_step(const Var& z, const Var& mu, const Measurement& y, const SensingOperator& op) {
  return data_step_with(z, mu, y, op, cassi::phi_diag(op));
}

std::string denoiser_prefix(const UnfoldConfig& cfg, std::size_t stage) {
  return cfg.share_weights ? std::string("den.") : "den" + std::to_string(stage) + ".";
}

net::ModelWeights init_model(const UnfoldConfig& cfg, std::size_t bands, std::uint64_t seed) {
  net::ModelWeights w;
  std::mt19937_64 rng(seed);
  if (cfg.stages == 0) return w;
  const std::size_t denoisers = cfg.share_weights ? 1 : cfg.stages;
  for (std::size_t k = 0; k < denoisers; ++k) {
    net::init_denoiser(w, denoiser_prefix(cfg, k), cfg.denoiser, bands, rng);
  }
  w.add(kAlphaName, Tensor(Shape{cfg.stages}, softplus_inverse(kInitMu)));
  w.add(kBetaName, Tensor(Shape{cfg.stages}, softplus_inverse(kInitSigma)));
  return w;
}

Var reconstruct(const net::ParamSet& ps, const Measurement& y, const SensingOperator& op,
                const UnfoldConfig& cfg, const Tensor* feature_mask, const StageHook& hook) {
  ad::Tape& tape = ps.tape();
  Var z = tape.constant(cassi::shift_back(y, op).to_tensor());
  if (cfg.stages > 0) {
    const std::vector<double> phi = cassi::phi_diag(op);
    const Tensor mask = op.mask().to_tensor();
    const Var mu_all = ad::softplus(ps(kAlphaName));
    const Var sigma_all = ad::softplus(ps(kBetaName));
    if (mu_all.size() != cfg.stages || sigma_all.size() != cfg.stages) {
      throw std::invalid_argument("stage scalars do not match the configured stage count");
    }
    for (std::size_t k = 0; k < cfg.stages; ++k) {
      const Var x = data_step_with(z, ad::element(mu_all, k), y, op, phi);
      z = net::denoise(ps, denoiser_prefix(cfg, k), x, ad::element(sigma_all, k), mask,
                       cfg.denoiser, feature_mask);
      if (hook) hook(k, x, z);
    }
  }
  return ad::relu(z);
}

HsiCube reconstruct(const Measurement& y, const SensingOperator& op, const net::ModelWeights& weights,
                    const UnfoldConfig& cfg, const Tensor* feature_mask) {
  ad::Tape tape;
  const net::ParamSet ps(tape, weights, false);
  return HsiCube::from_tensor(reconstruct(ps, y, op, cfg, feature_mask).value());
}

}  // namespace csm::hqs
