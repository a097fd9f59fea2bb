#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "csmamba/cassi.hpp"
#include "helpers.hpp"

using namespace csm::cassi;

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

Eigen::VectorXd vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TEST_SUITE("cassi") {

TEST_CASE("measurement shape and impulse trace") {
  const SensingOperator op(CodedMask(2, 3), 2, 3);
  CHECK(op.detector_width() == 7);
  const Measurement zero = forward_project(HsiCube(2, 3, 3), op);
  CHECK(zero.height == 2);
  CHECK(zero.width == 7);
  CHECK(std::all_of(zero.values.begin(), zero.values.end(), [](double v) { return v == 0.0; }));

  for (std::size_t k = 0; k < 3; ++k) {
    HsiCube c(2, 3, 3);
    c.at(k, 0, 0) = 0.6;
    const Measurement y = forward_project(c, op);
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t u = 0; u < 7; ++u) CHECK(y.at(r, u) == ((r == 0 && u == 2 * k) ? 0.6 : 0.0));
    const HsiCube back = shift_back(y, op);
    CHECK(back.at(k, 0, 0) == 0.6);
  }
}

TEST_CASE("adjoint examples") {
  const SensingOperator op(CodedMask(3, 4), 0, 1);
  std::mt19937_64 rng(1);
  const Measurement y = testing::random_measurement(3, 4, rng);
  CHECK(adjoint_project(y, op).values == y.values);
  CHECK(shift_back(y, op).values == y.values);
  const SensingOperator op2(testing::random_mask(3, 4, rng), 1, 3);
  const HsiCube z = adjoint_project(Measurement(3, 6), op2);
  CHECK(std::all_of(z.values.begin(), z.values.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("adjoint identity over random operators") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> dim(1, 8), nb(1, 4), sh(0, 2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t H = dim(rng), W = dim(rng), N = nb(rng), d = sh(rng);
    const SensingOperator op(testing::random_mask(H, W, rng), d, N);
    const HsiCube x = testing::random_cube(H, W, N, rng);
    const Measurement y = testing::random_measurement(H, op.detector_width(), rng);
    const double lhs = dot(forward_project(x, op).values, y.values);
    const double rhs = dot(x.values, adjoint_project(y, op).values);
    const double scale = std::sqrt(dot(x.values, x.values) * dot(y.values, y.values));
    CHECK(std::abs(lhs - rhs) / scale <= 1e-10);
  }
}

TEST_CASE("operators agree with the dense matrix") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t H = 1 + trial % 4, W = 2 + trial % 5, N = 1 + trial % 3, d = trial % 3;
    const SensingOperator op(testing::random_mask(H, W, rng), d, N);
    const Eigen::MatrixXd phi = build_dense_phi(op);
    const HsiCube x = testing::random_cube(H, W, N, rng);
    const Measurement y = testing::random_measurement(H, op.detector_width(), rng);
    const Eigen::VectorXd fx = phi * vec(x.values);
    const Eigen::VectorXd aty = phi.transpose() * vec(y.values);
    CHECK((fx - vec(forward_project(x, op).values)).cwiseAbs().maxCoeff() <= 1e-12);
    CHECK((aty - vec(adjoint_project(y, op).values)).cwiseAbs().maxCoeff() <= 1e-12);

    const Eigen::MatrixXd pp = phi * phi.transpose();
    Eigen::MatrixXd off = pp;
    off.diagonal().setZero();
    CHECK(off.cwiseAbs().maxCoeff() == 0.0);
    const auto diag = phi_diag(op);
    for (Eigen::Index i = 0; i < pp.rows(); ++i) CHECK(std::abs(pp(i, i) - diag[i]) <= 1e-12);
  }
}

TEST_CASE("dense phi examples") {
  const Eigen::MatrixXd id = build_dense_phi(SensingOperator(CodedMask(2, 3), 0, 1));
  CHECK(id.isIdentity(0.0));

  std::mt19937_64 rng(4);
  const CodedMask m = testing::random_mask(3, 4, rng, true);
  const SensingOperator op(m, 1, 3);
  const Eigen::MatrixXd phi = build_dense_phi(op);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t u = 0; u < op.detector_width(); ++u) {
      double count = 0;
      for (std::size_t b = 0; b < 3; ++b) {
        if (u >= b && u - b < 4) count += m.at(r, u - b);
      }
      CHECK(phi.row(r * op.detector_width() + u).sum() == count);
    }
  CHECK_THROWS_AS(build_dense_phi(SensingOperator(CodedMask(32, 32), 1, 5)), std::invalid_argument);
}

TEST_CASE("phi_diag examples") {
  CHECK(phi_diag(SensingOperator(CodedMask(1, 2), 1, 2)) == std::vector<double>{1, 2, 1});
  std::mt19937_64 rng(5);
  const CodedMask m = testing::random_mask(3, 3, rng);
  const auto d = phi_diag(SensingOperator(m, 0, 1));
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(d[i] == m.values[i] * m.values[i]);
  const auto z = phi_diag(SensingOperator(CodedMask(2, 2, 0.0), 2, 3));
  CHECK(std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("shift_back matches the index-shift oracle") {
  std::mt19937_64 rng(6);
  const SensingOperator op(testing::random_mask(4, 5, rng), 2, 3);
  const Measurement y = testing::random_measurement(4, op.detector_width(), rng);
  const HsiCube x = shift_back(y, op);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 5; ++c) CHECK(x.at(b, r, c) == y.at(r, c + 2 * b));
}

TEST_CASE("shift_back inverts non-overlapping projections") {
  std::mt19937_64 rng(7);
  const SensingOperator op(CodedMask(3, 4), 4, 3);  // d >= W: bands land side by side
  const HsiCube x = testing::random_cube(3, 4, 3, rng);
  CHECK(shift_back(forward_project(x, op), op).values == x.values);
}

TEST_CASE("construction and dimension errors") {
  CHECK_THROWS_AS(SensingOperator(CodedMask(2, 2, 1.5), 1, 2), std::invalid_argument);
  CHECK_THROWS_AS(SensingOperator(CodedMask(2, 2), 1, 0), std::invalid_argument);
  const SensingOperator op(CodedMask(2, 2), 1, 2);
  CHECK_THROWS_AS(forward_project(HsiCube(2, 3, 2), op), std::invalid_argument);
  CHECK_THROWS_AS(adjoint_project(Measurement(2, 2), op), std::invalid_argument);
  CHECK_THROWS_AS(shift_back(Measurement(2, 4), op), std::invalid_argument);
}

TEST_CASE("shot noise") {
  const Measurement zero(4, 4);
  CHECK(add_shot_noise(zero, 11, 3).values == zero.values);

  const Measurement ones(100, 100, 1.0);
  const Measurement n = add_shot_noise(ones, 11, 9);
  double mean = 0.0, var = 0.0;
  for (double v : n.values) mean += v;
  mean /= n.values.size();
  for (double v : n.values) var += (v - mean) * (v - mean);
  var /= n.values.size() - 1;
  CHECK(std::abs(mean - 1.0) <= 3.0 * std::sqrt(1.0 / 2047.0 / 1e4));
  CHECK(var == doctest::Approx(1.0 / 2047.0).epsilon(0.2));
  CHECK(add_shot_noise(ones, 11, 9).values == n.values);
  CHECK(add_shot_noise(ones, 11, 10).values != n.values);

  Measurement neg(1, 2, 0.5);
  neg.values[1] = -0.1;
  CHECK_THROWS_AS(add_shot_noise(neg, 11, 1), std::invalid_argument);
  CHECK_THROWS_AS(add_shot_noise(ones, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(add_shot_noise(ones, 17, 1), std::invalid_argument);
}

TEST_CASE("shot noise preserves the per-pixel mean over many draws") {
  Measurement y(1, 3);
  y.values = {0.2, 0.5, 1.0};
  const int draws = 10000;
  std::vector<double> acc(3, 0.0);
  for (int s = 0; s < draws; ++s) {
    const Measurement n = add_shot_noise(y, 11, static_cast<std::uint64_t>(s));
    for (std::size_t i = 0; i < 3; ++i) acc[i] += n.values[i];
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double sigma = std::sqrt(y.values[i] / 2047.0 / draws);
    CHECK(std::abs(acc[i] / draws - y.values[i]) <= 3.0 * sigma);
  }
}

TEST_CASE("cube tensor views") {
  std::mt19937_64 rng(8);
  const HsiCube c = testing::random_cube(3, 4, 2, rng);
  const csm::Tensor t = c.to_tensor();
  CHECK(t.shape() == csm::Shape{2, 3, 4});
  CHECK(t.at(1, 2, 3) == c.at(1, 2, 3));
  CHECK(HsiCube::from_tensor(t).values == c.values);
}

}
