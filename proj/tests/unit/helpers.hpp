#pragma once

#include <cstdint>
#include <random>

#include "csmamba/cassi.hpp"
#include "csmamba/tensor.hpp"

namespace testing {

inline csm::Tensor random_tensor(csm::Shape shape, std::mt19937_64& rng, double lo = -1.0,
                                 double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  csm::Tensor t(std::move(shape));
  for (double& v : t.data()) v = u(rng);
  return t;
}

inline csm::cassi::HsiCube random_cube(std::size_t h, std::size_t w, std::size_t n,
                                       std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  csm::cassi::HsiCube c(h, w, n);
  for (double& v : c.values) v = u(rng);
  return c;
}

inline csm::cassi::CodedMask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng,
                                         bool binary = false) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  csm::cassi::CodedMask m(h, w);
  for (double& v : m.values) v = binary ? (u(rng) < 0.5 ? 0.0 : 1.0) : u(rng);
  return m;
}

inline csm::cassi::Measurement random_measurement(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  csm::cassi::Measurement m(h, w);
  for (double& v : m.values) v = u(rng);
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : 1e300;
}

}  // namespace testing
