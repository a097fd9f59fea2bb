#pragma once

// CASSI sensing model.
//
// Band b of the modulated cube is shifted by shift * b columns before landing on
// the detector (band 0 is the unshifted reference band), so the detector is
// W' = W + shift * (bands - 1) columns wide. Reads outside a band's window are
// zero; nothing wraps around.

#include <cstddef>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "csmamba/tensor.hpp"

namespace csm::cassi {

/// H x W x bands radiance cube stored band-major (band plane, then rows).
struct HsiCube {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bands = 0;
  std::vector<double> values;

  HsiCube() = default;
  HsiCube(std::size_t h, std::size_t w, std::size_t b, double fill = 0.0);

  double& at(std::size_t band, std::size_t r, std::size_t x) {
    return values[(band * height + r) * width + x];
  }
  double at(std::size_t band, std::size_t r, std::size_t x) const {
    return values[(band * height + r) * width + x];
  }
  std::size_t plane() const { return height * width; }

  /// [bands, H, W] tensor view with identical layout.
  Tensor to_tensor() const;
  static HsiCube from_tensor(const Tensor& t);
};

struct CodedMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  CodedMask() = default;
  CodedMask(std::size_t h, std::size_t w, double fill = 1.0);
  double& at(std::size_t r, std::size_t x) { return values[r * width + x]; }
  double at(std::size_t r, std::size_t x) const { return values[r * width + x]; }
  Tensor to_tensor() const;
};

struct Measurement {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Measurement() = default;
  Measurement(std::size_t h, std::size_t w, double fill = 0.0);
  double& at(std::size_t r, std::size_t u) { return values[r * width + u]; }
  double at(std::size_t r, std::size_t u) const { return values[r * width + u]; }
};

class SensingOperator {
 public:
  /// Throws std::invalid_argument for empty masks, zero bands, or mask
  /// values outside [0, 1].
  SensingOperator(CodedMask mask, std::size_t shift, std::size_t bands);

  const CodedMask& mask() const { return mask_; }
  std::size_t shift() const { return shift_; }
  std::size_t bands() const { return bands_; }
  std::size_t height() const { return mask_.height; }
  std::size_t width() const { return mask_.width; }
  std::size_t detector_width() const { return mask_.width + shift_ * (bands_ - 1); }
  /// Column offset of band b on the detector.
  std::size_t offset(std::size_t band) const { return shift_ * band; }

 private:
  CodedMask mask_;
  std::size_t shift_;
  std::size_t bands_;
};

Measurement forward_project(const HsiCube& cube, const SensingOperator& op);
HsiCube adjoint_project(const Measurement& meas, const SensingOperator& op);
/// Undoes the dispersion: band b reads its W-wide window of the detector.
HsiCube shift_back(const Measurement& meas, const SensingOperator& op);
/// Diagonal of Phi Phi^T, one entry per detector pixel (row-major H x W').
std::vector<double> phi_diag(const SensingOperator& op);

/// Poisson shot noise at the given bit depth: the measurement maximum maps to
/// 2^bits - 1 counts. Deterministic under `seed`.
Measurement add_shot_noise(const Measurement& meas, int bits, std::uint64_t seed);

/// Explicit (H*W') x (H*W*bands) sensing matrix; columns follow the band-major
/// cube layout. Refuses cubes with more than kDensePhiLimit elements.
inline constexpr std::size_t kDensePhiLimit = 4096;
Eigen::MatrixXd build_dense_phi(const SensingOperator& op);

}  // namespace csm::cassi
