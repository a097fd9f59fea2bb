#include "csmamba/cassi.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace csm::cassi {

namespace {

std::string dims(std::size_t h, std::size_t w) {
  return std::to_string(h) + "x" + std::to_string(w);
}

void check_cube(const HsiCube& cube, const SensingOperator& op) {
  if (cube.height != op.height() || cube.width != op.width() || cube.bands != op.bands()) {
    throw std::invalid_argument("cube " + dims(cube.height, cube.width) + "x" +
                                std::to_string(cube.bands) + " does not match operator " +
                                dims(op.height(), op.width()) + "x" + std::to_string(op.bands()));
  }
}

void check_measurement(const Measurement& meas, const SensingOperator& op) {
  if (meas.height != op.height() || meas.width != op.detector_width()) {
    throw std::invalid_argument("measurement " + dims(meas.height, meas.width) +
                                " does not match operator detector " +
                                dims(op.height(), op.detector_width()));
  }
}

}  // namespace

HsiCube::HsiCube(std::size_t h, std::size_t w, std::size_t b, double fill)
    : height(h), width(w), bands(b), values(h * w * b, fill) {
  if (h == 0 || w == 0 || b == 0) throw std::invalid_argument("cube dimensions must be >= 1");
}

Tensor HsiCube::to_tensor() const { return Tensor(Shape{bands, height, width}, values); }

HsiCube HsiCube::from_tensor(const Tensor& t) {
  if (t.rank() != 3) throw std::invalid_argument("cube tensor must be [bands,H,W], got " + shape_str(t.shape()));
  HsiCube c(t.dim(1), t.dim(2), t.dim(0));
  c.values = t.vec();
  return c;
}

CodedMask::CodedMask(std::size_t h, std::size_t w, double fill)
    : height(h), width(w), values(h * w, fill) {
  if (h == 0 || w == 0) throw std::invalid_argument("mask dimensions must be >= 1");
}

Tensor CodedMask::to_tensor() const { return Tensor(Shape{height, width}, values); }

Measurement::Measurement(std::size_t h, std::size_t w, double fill)
    : height(h), width(w), values(h * w, fill) {
  if (h == 0 || w == 0) throw std::invalid_argument("measurement dimensions must be >= 1");
}

SensingOperator::SensingOperator(CodedMask mask, std::size_t shift, std::size_t bands)
    : mask_(std::move(mask)), shift_(shift), bands_(bands) {
  if (mask_.height == 0 || mask_.width == 0 || mask_.values.size() != mask_.height * mask_.width) {
    throw std::invalid_argument("sensing operator needs a non-empty mask");
  }
  if (bands_ == 0) throw std::invalid_argument("sensing operator needs at least one band");
  for (double v : mask_.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("mask values must lie in [0, 1]");
  }
}

Measurement forward_project(const HsiCube& cube, const SensingOperator& op) {
  check_cube(cube, op);
  Measurement y(op.height(), op.detector_width());
  for (std::size_t b = 0; b < op.bands(); ++b) {
    const std::size_t off = op.offset(b);
    for (std::size_t r = 0; r < op.height(); ++r) {
      for (std::size_t x = 0; x < op.width(); ++x) {
        y.at(r, x + off) += op.mask().at(r, x) * cube.at(b, r, x);
      }
    }
  }
  return y;
}

HsiCube adjoint_project(const Measurement& meas, const SensingOperator& op) {
  check_measurement(meas, op);
  HsiCube f(op.height(), op.width(), op.bands());
  for (std::size_t b = 0; b < op.bands(); ++b) {
    const std::size_t off = op.offset(b);
    for (std::size_t r = 0; r < op.height(); ++r) {
      for (std::size_t x = 0; x < op.width(); ++x) {
        f.at(b, r, x) = op.mask().at(r, x) * meas.at(r, x + off);
      }
    }
  }
  return f;
}

HsiCube shift_back(const Measurement& meas, const SensingOperator& op) {
  check_measurement(meas, op);
  HsiCube f(op.height(), op.width(), op.bands());
  for (std::size_t b = 0; b < op.bands(); ++b) {
    const std::size_t off = op.offset(b);
    for (std::size_t r = 0; r < op.height(); ++r) {
      for (std::size_t x = 0; x < op.width(); ++x) f.at(b, r, x) = meas.at(r, x + off);
    }
  }
  return f;
}

std::vector<double> phi_diag(const SensingOperator& op) {
  const std::size_t wd = op.detector_width();
  std::vector<double> phi(op.height() * wd, 0.0);
  for (std::size_t b = 0; b < op.bands(); ++b) {
    const std::size_t off = op.offset(b);
    for (std::size_t r = 0; r < op.height(); ++r) {
      for (std::size_t x = 0; x < op.width(); ++x) {
        const double m = op.mask().at(r, x);
        phi[r * wd + x + off] += m * m;
      }
    }
  }
  return phi;
}

Measurement add_shot_noise(const Measurement& meas, int bits, std::uint64_t seed) {
  if (bits < 1 || bits > 16) throw std::invalid_argument("shot noise bit depth must be in [1, 16]");
  double peak = 0.0;
  for (double v : meas.values) {
    if (!(v >= 0.0)) throw std::invalid_argument("shot noise needs non-negative measurement values");
    peak = std::max(peak, v);
  }
  Measurement out = meas;
  if (peak == 0.0) return out;
  const double counts = std::ldexp(1.0, bits) - 1.0;
  const double to_counts = counts / peak;
  std::mt19937_64 rng(seed);
  for (double& v : out.values) {
    const double mean = v * to_counts;
    if (mean == 0.0) {
      v = 0.0;
      continue;
    }
    std::poisson_distribution<long long> draw(mean);
    v = static_cast<double>(draw(rng)) / to_counts;
  }
  return out;
}

Eigen::MatrixXd build_dense_phi(const SensingOperator& op) {
  const std::size_t n = op.height() * op.width() * op.bands();
  if (n > kDensePhiLimit) {
    throw std::invalid_argument("dense sensing matrix limited to " + std::to_string(kDensePhiLimit) +
                                " cube elements, got " + std::to_string(n));
  }
  const std::size_t wd = op.detector_width();
  Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(op.height() * wd),
                                              static_cast<Eigen::Index>(n));
  const std::size_t plane = op.height() * op.width();
  for (std::size_t b = 0; b < op.bands(); ++b) {
    for (std::size_t r = 0; r < op.height(); ++r) {
      for (std::size_t x = 0; x < op.width(); ++x) {
        const auto row = static_cast<Eigen::Index>(r * wd + x + op.offset(b));
        const auto col = static_cast<Eigen::Index>(b * plane + r * op.width() + x);
        phi(row, col) = op.mask().at(r, x);
      }
    }
  }
  return phi;
}

}  // namespace csm::cassi
