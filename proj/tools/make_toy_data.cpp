// Writes the bundled toy scene and coded mask:
//   make_toy_data <out_dir> [size=32] [bands=4] [seed=2024]
// The scene is a few smooth blobs, each with its own spectral signature, over
// a gently sloped background. The mask is a seeded Bernoulli(0.5) pattern.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>

#include "csmamba/io.hpp"

namespace {

csm::cassi::HsiCube make_scene(std::size_t n, std::size_t bands, std::mt19937_64& rng) {
  csm::cassi::HsiCube c(n, n, bands);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Blob { double r, x, radius; std::vector<double> spectrum; };
  std::vector<Blob> blobs;
  for (int k = 0; k < 5; ++k) {
    Blob b{u(rng) * n, u(rng) * n, (0.08 + 0.12 * u(rng)) * n, {}};
    const double peak = u(rng) * (bands - 1);
    for (std::size_t l = 0; l < bands; ++l) {
      const double d = (static_cast<double>(l) - peak) / std::max<double>(1.0, bands / 2.0);
      b.spectrum.push_back(0.25 + 0.5 * std::exp(-d * d));
    }
    blobs.push_back(std::move(b));
  }
  for (std::size_t l = 0; l < bands; ++l) {
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t x = 0; x < n; ++x) {
        double v = 0.1 + 0.1 * static_cast<double>(r + x) / (2.0 * n);
        for (const Blob& b : blobs) {
          const double dr = (r - b.r) / b.radius, dx = (x - b.x) / b.radius;
          v += b.spectrum[l] * std::exp(-0.5 * (dr * dr + dx * dx));
        }
        c.at(l, r, x) = std::min(v, 1.0);
      }
    }
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: make_toy_data <out_dir> [size] [bands] [seed]\n";
    return 2;
  }
  try {
    const std::filesystem::path dir = argv[1];
    const std::size_t n = argc > 2 ? std::stoul(argv[2]) : 32;
    const std::size_t bands = argc > 3 ? std::stoul(argv[3]) : 4;
    const std::uint64_t seed = argc > 4 ? std::stoull(argv[4]) : 2024;
    std::filesystem::create_directories(dir);
    std::mt19937_64 rng(seed);
    const csm::cassi::HsiCube scene = make_scene(n, bands, rng);
    csm::cassi::CodedMask mask(n, n);
    std::bernoulli_distribution coin(0.5);
    for (double& v : mask.values) v = coin(rng) ? 1.0 : 0.0;
    csm::io::save_cube(scene, dir / "toy_scene.hsic");
    csm::io::save_mask(mask, dir / "toy_mask.hsic");
    std::cout << "wrote " << (dir / "toy_scene.hsic").string() << " and " << (dir / "toy_mask.hsic").string()
              << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
