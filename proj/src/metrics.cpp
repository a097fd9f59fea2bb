#include "csmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace csm::metrics {

double psnr(std::span<const double> a, std::span<const double> b, double data_range) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("psnr: inputs differ in size (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data range must be positive");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  if (sq == 0.0) return kPsnrCap;
  const double mse = sq / static_cast<double>(a.size());
  return 10.0 * std::log10(data_range * data_range / mse);
}

std::vector<double> gaussian_taps() {
  std::vector<double> t(kSsimWindow);
  const double c = static_cast<double>(kSsimWindow / 2);
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    t[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    total += t[i];
  }
  for (double& v : t) v /= total;
  return t;
}

double ssim(std::span<const double> a, std::span<const double> b, std::size_t height,
            std::size_t width, double data_range) {
  if (a.size() != b.size() || a.size() != height * width) {
    throw std::invalid_argument("ssim: inputs do not match " + std::to_string(height) + "x" +
                                std::to_string(width));
  }
  if (height < kSsimWindow || width < kSsimWindow) {
    throw std::invalid_argument("ssim: image " + std::to_string(height) + "x" + std::to_string(width) +
                                " is smaller than the " + std::to_string(kSsimWindow) + "x" +
                                std::to_string(kSsimWindow) + " window");
  }
  if (!(data_range > 0.0)) throw std::invalid_argument("ssim: data range must be positive");

  const std::vector<double> g = gaussian_taps();
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);
  const std::size_t k = kSsimWindow;
  const std::size_t oh = height - k + 1;
  const std::size_t ow = width - k + 1;

  // Window statistics are accumulated as deviations from the window's centre
  // pixel and then from the window mean, so flat regions give exactly zero
  // variance and the mean is the flat value itself.
  double mean = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < oh; ++r) {
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t centre = (r + k / 2) * width + x + k / 2;
      const double ca = a[centre];
      const double cb = b[centre];
      double da = 0.0, db = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t p = (r + i) * width + x + j;
          const double w = g[i] * g[j];
          da += w * (a[p] - ca);
          db += w * (b[p] - cb);
        }
      }
      const double mu_a = ca + da;
      const double mu_b = cb + db;
      double va = 0.0, vb = 0.0, cov = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t p = (r + i) * width + x + j;
          const double w = g[i] * g[j];
          const double ea = a[p] - mu_a;
          const double eb = b[p] - mu_b;
          va += w * ea * ea;
          vb += w * eb * eb;
          cov += w * ea * eb;
        }
      }
      const double luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
      const double structure = (2.0 * cov + c2) / (va + vb + c2);
      // Running mean: a map of identical values averages to exactly that value.
      ++count;
      mean += (luminance * structure - mean) / static_cast<double>(count);
    }
  }
  return mean;
}

MetricReport evaluate(const cassi::HsiCube& reference, const cassi::HsiCube& test,
                      std::optional<double> data_range) {
  if (reference.height != test.height || reference.width != test.width ||
      reference.bands != test.bands) {
    throw std::invalid_argument("evaluate: cube shapes differ");
  }
  MetricReport rep;
  rep.data_range = data_range ? *data_range
                              : *std::max_element(reference.values.begin(), reference.values.end());
  if (!(rep.data_range > 0.0)) {
    throw std::invalid_argument("evaluate: data range must be positive (reference maximum is not)");
  }
  const std::size_t plane = reference.plane();
  for (std::size_t band = 0; band < reference.bands; ++band) {
    const std::span<const double> ra(reference.values.data() + band * plane, plane);
    const std::span<const double> ta(test.values.data() + band * plane, plane);
    rep.psnr_per_band.push_back(psnr(ra, ta, rep.data_range));
    rep.ssim_per_band.push_back(ssim(ra, ta, reference.height, reference.width, rep.data_range));
  }
  const double n = static_cast<double>(reference.bands);
  for (std::size_t i = 0; i < reference.bands; ++i) {
    rep.psnr_mean += rep.psnr_per_band[i];
    rep.ssim_mean += rep.ssim_per_band[i];
  }
  rep.psnr_mean /= n;
  rep.ssim_mean /= n;
  return rep;
}

}  // namespace csm::metrics
