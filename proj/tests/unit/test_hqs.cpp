#include <doctest.h>

#include <cmath>
#include <random>

#include "csmamba/hqs.hpp"
#include "helpers.hpp"

using namespace csm;
using cassi::HsiCube;
using cassi::Measurement;
using cassi::SensingOperator;

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double rel_err(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return norm(d) / std::max(norm(b), 1e-300);
}

hqs::UnfoldConfig tiny(std::size_t stages, bool share) {
  hqs::UnfoldConfig cfg;
  cfg.stages = stages;
  cfg.share_weights = share;
  cfg.denoiser.levels = 1;
  cfg.denoiser.base_channels = 4;
  cfg.denoiser.patch = 4;
  cfg.denoiser.cube = {4, 2, 2, 2};
  cfg.denoiser.state = 3;
  return cfg;
}

}  // namespace

TEST_SUITE("hqs") {

TEST_CASE("stage parameter estimation") {
  const double a0 = hqs::softplus_inverse(hqs::kInitMu), b0 = hqs::softplus_inverse(hqs::kInitSigma);
  const std::vector<double> alpha(3, a0), beta(3, b0);
  const auto p = hqs::estimate_stage_params(alpha, beta);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(p.mu[k] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(p.sigma[k] == doctest::Approx(0.1).epsilon(1e-14));
  }
  const std::vector<double> very_neg{-700.0}, zero{0.0};
  const auto q = hqs::estimate_stage_params(very_neg, zero);
  CHECK(q.mu[0] > 0.0);
  CHECK(q.mu[0] < 1e-300);
  CHECK_THROWS(hqs::estimate_stage_params(alpha, very_neg));

  const auto w = hqs::init_model(tiny(3, false), 2, 1);
  for (double v : w.get(hqs::kAlphaName).vec()) CHECK(hqs::softplus(v) == doctest::Approx(1.0).epsilon(1e-14));
  for (double v : w.get(hqs::kBetaName).vec()) CHECK(hqs::softplus(v) == doctest::Approx(0.1).epsilon(1e-14));
}

TEST_CASE("data step degenerate examples") {
  const SensingOperator id(cassi::CodedMask(1, 1), 0, 1);
  Measurement y(1, 1, 2.0);
  const HsiCube x = hqs::data_step(HsiCube(1, 1, 1), y, id, 1.0);
  CHECK(x.values[0] == 1.0);
  HsiCube z(1, 1, 1, 0.4);
  CHECK(hqs::dense_oracle_data_step(z, y, id, 1.0).values[0] == doctest::Approx(1.2).epsilon(1e-15));

  std::mt19937_64 rng(1);
  const SensingOperator op(testing::random_mask(4, 5, rng), 2, 3);
  const HsiCube zc = testing::random_cube(4, 5, 3, rng);
  const Measurement consistent = cassi::forward_project(zc, op);
  CHECK(hqs::data_step(zc, consistent, op, 0.5).values == zc.values);
  CHECK_THROWS_AS(hqs::data_step(zc, consistent, op, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(hqs::data_step(zc, consistent, op, -1.0), std::invalid_argument);
}

TEST_CASE("data step matches the dense solve") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const double mu = std::array{0.1, 1.0, 10.0}[trial % 3];
    const SensingOperator op(testing::random_mask(4, 5, rng), 2, 3);
    const HsiCube z = testing::random_cube(4, 5, 3, rng);
    const Measurement y = testing::random_measurement(4, op.detector_width(), rng);
    CHECK(rel_err(hqs::data_step(z, y, op, mu).values, hqs::dense_oracle_data_step(z, y, op, mu).values) <= 1e-8);
  }
}

TEST_CASE("large penalty keeps the estimate near z") {
  std::mt19937_64 rng(3);
  const SensingOperator op(testing::random_mask(3, 4, rng), 1, 2);
  const HsiCube z = testing::random_cube(3, 4, 2, rng);
  const Measurement y = testing::random_measurement(3, op.detector_width(), rng);
  const double mu = 1e6;
  const HsiCube x = hqs::dense_oracle_data_step(z, y, op, mu);
  Measurement r = cassi::forward_project(z, op);
  for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] = y.values[i] - r.values[i];
  std::vector<double> d(x.values.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = x.values[i] - z.values[i];
  CHECK(norm(d) <= norm(cassi::adjoint_project(r, op).values) / mu);
}

TEST_CASE("tape data step gradients") {
  std::mt19937_64 rng(4);
  const SensingOperator op(testing::random_mask(3, 4, rng), 1, 2);
  const Measurement y = testing::random_measurement(3, op.detector_width(), rng);
  const Tensor w = testing::random_tensor({2, 3, 4}, rng);
  Tensor theta(Shape{25});
  const Tensor z0 = testing::random_tensor({24}, rng);
  for (std::size_t i = 0; i < 24; ++i) theta[i] = z0[i];
  theta[24] = 0.3;
  const ad::ScalarFn f = [&](ad::Tape& t, const ad::Var& th) {
    const ad::Var z = ad::reshape(ad::slice(th, 0, 24), {2, 3, 4});
    const ad::Var mu = ad::softplus(ad::slice(th, 24, 25));
    const ad::Var x = hqs::data_step(z, mu, y, op);
    return ad::sum(x * x * t.constant(w));
  };
  CHECK(ad::finite_diff_check(f, theta, 1e-6) <= 1e-4);

  ad::Tape t;
  const ad::Var x = hqs::data_step(t.constant(z0.reshaped({2, 3, 4})), t.constant(Tensor::scalar(0.7)), y, op);
  CHECK(x.value().vec() == hqs::data_step(HsiCube::from_tensor(z0.reshaped({2, 3, 4})), y, op, 0.7).values);
}

TEST_CASE("zero stages return the shift-back estimate") {
  std::mt19937_64 rng(5);
  const SensingOperator op(testing::random_mask(8, 8, rng), 2, 2);
  const Measurement y = testing::random_measurement(8, op.detector_width(), rng);
  const auto cfg = tiny(0, true);
  const HsiCube r = hqs::reconstruct(y, op, hqs::init_model(cfg, 2, 0), cfg);
  CHECK(r.values == cassi::shift_back(y, op).values);
}

TEST_CASE("identity denoiser reduces to repeated data steps") {
  std::mt19937_64 rng(6);
  const SensingOperator op(testing::random_mask(8, 8, rng), 2, 2);
  const HsiCube truth = testing::random_cube(8, 8, 2, rng);
  const Measurement y = cassi::forward_project(truth, op);
  for (bool share : {true, false}) {
    auto cfg = tiny(3, share);
    auto w = hqs::init_model(cfg, 2, 7);
    for (std::size_t k = 0; k < (share ? 1 : 3); ++k) net::zero_output_conv(w, hqs::denoiser_prefix(cfg, k));
    w.get(hqs::kAlphaName) = Tensor(Shape{3}, {0.2, -0.4, 1.1});

    HsiCube z = cassi::shift_back(y, op);
    double prev = 1e300;
    for (std::size_t k = 0; k < 3; ++k) {
      z = hqs::data_step(z, y, op, hqs::softplus(w.get(hqs::kAlphaName)[k]));
      const Measurement pz = cassi::forward_project(z, op);
      std::vector<double> r(pz.values.size());
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = y.values[i] - pz.values[i];
      CHECK(norm(r) <= prev);
      prev = norm(r);
    }
    for (double& v : z.values) v = std::max(v, 0.0);
    CHECK(hqs::reconstruct(y, op, w, cfg).values == z.values);
  }
}

TEST_CASE("reconstruction is deterministic and non-negative") {
  std::mt19937_64 rng(8);
  const SensingOperator op(testing::random_mask(8, 8, rng), 1, 2);
  const Measurement y = testing::random_measurement(8, op.detector_width(), rng);
  const auto cfg = tiny(2, false);
  const auto w = hqs::init_model(cfg, 2, 9);
  CHECK(w.contains("den0.out.w"));
  CHECK(w.contains("den1.out.w"));
  CHECK_FALSE(w.contains("den.out.w"));
  const HsiCube a = hqs::reconstruct(y, op, w, cfg), b = hqs::reconstruct(y, op, w, cfg);
  CHECK(a.values == b.values);
  CHECK(std::all_of(a.values.begin(), a.values.end(), [](double v) { return v >= 0.0; }));
  auto bad = cfg;
  bad.stages = 3;
  CHECK_THROWS(hqs::reconstruct(y, op, w, bad));
}

TEST_CASE("stage scalars receive gradients") {
  std::mt19937_64 rng(10);
  const SensingOperator op(testing::random_mask(8, 8, rng), 1, 2);
  const HsiCube truth = testing::random_cube(8, 8, 2, rng);
  const Measurement y = cassi::forward_project(truth, op);
  const auto cfg = tiny(2, true);
  const auto w = hqs::init_model(cfg, 2, 11);
  ad::Tape t;
  const net::ParamSet ps(t, w, true);
  t.backward(ad::mse(hqs::reconstruct(ps, y, op, cfg), t.constant(truth.to_tensor())));
  for (const auto& n : {hqs::kAlphaName, hqs::kBetaName}) {
    const Tensor g = t.grad(ps(n));
    for (double v : g.vec()) CHECK(v != 0.0);
  }
}

}
