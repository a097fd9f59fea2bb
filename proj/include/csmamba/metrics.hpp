#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "csmamba/cassi.hpp"

namespace csm::metrics {

inline constexpr double kPsnrCap = 100.0;
inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// 10 log10(range^2 / MSE); kPsnrCap when the inputs are identical.
double psnr(std::span<const double> a, std::span<const double> b, double data_range);

/// Mean SSIM over every full 11x11 Gaussian window of two H x W images.
double ssim(std::span<const double> a, std::span<const double> b, std::size_t height,
            std::size_t width, double data_range);

/// Normalized 1-D Gaussian taps of the SSIM window.
std::vector<double> gaussian_taps();

struct MetricReport {
  std::vector<double> psnr_per_band;
  std::vector<double> ssim_per_band;
  double psnr_mean = 0.0;
  double ssim_mean = 0.0;
  double data_range = 0.0;
};

/// Band-wise PSNR/SSIM of `test` against `reference`. The data range defaults
/// to the reference maximum.
MetricReport evaluate(const cassi::HsiCube& reference, const cassi::HsiCube& test,
                      std::optional<double> data_range = std::nullopt);

}  // namespace csm::metrics
