#include "csmamba/scan_order.hpp"

#include <algorithm>
#include <mutex>
#include <sstream>
#include <stdexcept>

namespace csm::scan {

namespace {

std::string kind_name(OrderKind k) {
  switch (k) {
    case OrderKind::global: return "global";
    case OrderKind::local_patch: return "local_patch";
    case OrderKind::cross_cube: return "cross_cube";
    case OrderKind::spectral_pixel: return "spectral_pixel";
    case OrderKind::custom: break;
  }
  return "custom";
}

void require_positive(std::size_t height, std::size_t width) {
  if (height == 0 || width == 0) {
    throw std::invalid_argument("scan order needs H, W >= 1 (got H=" + std::to_string(height) +
                                ", W=" + std::to_string(width) + ")");
  }
}

void reverse_if(std::vector<std::size_t>& seq, bool reverse) {
  if (reverse) std::reverse(seq.begin(), seq.end());
}

}  // namespace

std::string OrderDescriptor::to_string() const {
  std::ostringstream os;
  os << kind_name(kind) << " H=" << height << " W=" << width << " C=" << channels;
  if (kind == OrderKind::local_patch) os << " P=" << patch;
  if (kind == OrderKind::cross_cube) {
    os << " P=" << cube.patch << " cube=" << cube.h << 'x' << cube.w << 'x' << cube.c;
  }
  if (reverse) os << " reverse";
  return os.str();
}

ScanOrder::ScanOrder(std::vector<std::size_t> forward, OrderDescriptor desc)
    : forward_(std::move(forward)), desc_(desc) {
  const std::size_t n = forward_.size();
  constexpr std::size_t unset = static_cast<std::size_t>(-1);
  inverse_.assign(n, unset);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = forward_[i];
    if (src >= n || inverse_[src] != unset) {
      throw std::invalid_argument("scan order is not a permutation of [0, " + std::to_string(n) +
                                  ") at position " + std::to_string(i));
    }
    inverse_[src] = i;
  }
}

ScanOrder ScanOrder::inverted() const {
  OrderDescriptor d;
  return ScanOrder(inverse_, d);
}

ScanOrder global_order(std::size_t height, std::size_t width, bool reverse) {
  require_positive(height, width);
  std::vector<std::size_t> seq(height * width);
  for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = i;
  reverse_if(seq, reverse);
  OrderDescriptor d{OrderKind::global, height, width, 1, 1, {}, reverse};
  return ScanOrder(std::move(seq), d);
}

ScanOrder local_patch_order(std::size_t height, std::size_t width, std::size_t patch,
                            bool reverse) {
  require_positive(height, width);
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw std::invalid_argument("local patch order: patch P=" + std::to_string(patch) +
                                " must divide H=" + std::to_string(height) +
                                " and W=" + std::to_string(width));
  }
  std::vector<std::size_t> seq;
  seq.reserve(height * width);
  for (std::size_t pr = 0; pr < height; pr += patch) {
    for (std::size_t pc = 0; pc < width; pc += patch) {
      for (std::size_t r = pr; r < pr + patch; ++r) {
        for (std::size_t x = pc; x < pc + patch; ++x) seq.push_back(r * width + x);
      }
    }
  }
  reverse_if(seq, reverse);
  OrderDescriptor d{OrderKind::local_patch, height, width, 1, patch, {}, reverse};
  return ScanOrder(std::move(seq), d);
}

void check_cube_spec(std::size_t height, std::size_t width, std::size_t channels,
                     const CubeSpec& spec) {
  require_positive(height, width);
  const bool ok = spec.patch > 0 && spec.h > 0 && spec.w > 0 && spec.c > 0 && channels > 0 &&
                  height % spec.patch == 0 && width % spec.patch == 0 &&
                  spec.patch % spec.h == 0 && spec.patch % spec.w == 0 && channels % spec.c == 0;
  if (!ok) {
    std::ostringstream os;
    os << "cube spec P=" << spec.patch << " cube=" << spec.h << 'x' << spec.w << 'x' << spec.c
       << " incompatible with H=" << height << " W=" << width << " C=" << channels
       << " (need P | H, P | W, h | P, w | P, c | C)";
    throw std::invalid_argument(os.str());
  }
}

ScanOrder cross_cube_order(std::size_t height, std::size_t width, std::size_t channels,
                           const CubeSpec& spec) {
  check_cube_spec(height, width, channels, spec);
  const std::size_t plane = height * width;
  std::vector<std::size_t> seq;
  seq.reserve(plane * channels);
  for (std::size_t pr = 0; pr < height; pr += spec.patch) {
    for (std::size_t pc = 0; pc < width; pc += spec.patch) {
      for (std::size_t cr = pr; cr < pr + spec.patch; cr += spec.h) {
        for (std::size_t cc = pc; cc < pc + spec.patch; cc += spec.w) {
          for (std::size_t cb = 0; cb < channels; cb += spec.c) {
            for (std::size_t r = cr; r < cr + spec.h; ++r) {
              for (std::size_t x = cc; x < cc + spec.w; ++x) {
                for (std::size_t b = cb; b < cb + spec.c; ++b) {
                  seq.push_back(b * plane + r * width + x);
                }
              }
            }
          }
        }
      }
    }
  }
  OrderDescriptor d{OrderKind::cross_cube, height, width, channels, spec.patch, spec, false};
  return ScanOrder(std::move(seq), d);
}

ScanOrder spectral_pixel_order(std::size_t height, std::size_t width, std::size_t channels) {
  require_positive(height, width);
  const std::size_t plane = height * width;
  std::vector<std::size_t> seq;
  seq.reserve(plane * channels);
  for (std::size_t p = 0; p < plane; ++p) {
    for (std::size_t b = 0; b < channels; ++b) seq.push_back(b * plane + p);
  }
  OrderDescriptor d{OrderKind::spectral_pixel, height, width, channels, 0, {}, false};
  return ScanOrder(std::move(seq), d);
}

OrderReport validate_order(std::span<const std::size_t> forward) {
  OrderReport report;
  const std::size_t n = forward.size();
  std::vector<bool> seen(n, false);
  report.is_bijection = true;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t src = forward[i];
    if (src >= n || seen[src]) {
      report.is_bijection = false;
    } else {
      seen[src] = true;
    }
    if (i > 0) {
      const std::size_t prev = forward[i - 1];
      const std::size_t jump = src > prev ? src - prev : prev - src;
      report.max_neighbor_distance = std::max(report.max_neighbor_distance, jump);
    }
  }
  return report;
}

template <class Make>
std::shared_ptr<const ScanOrder> OrderCache::get_or_make(const OrderDescriptor& key, Make&& make) {
  {
    std::shared_lock lock(mutex_);
    if (auto it = orders_.find(key); it != orders_.end()) return it->second;
  }
  auto order = std::make_shared<const ScanOrder>(make());
  std::unique_lock lock(mutex_);
  auto [it, inserted] = orders_.emplace(key, std::move(order));
  return it->second;
}

std::shared_ptr<const ScanOrder> OrderCache::global(std::size_t height, std::size_t width,
                                                    bool reverse) {
  OrderDescriptor key{OrderKind::global, height, width, 1, 1, {}, reverse};
  return get_or_make(key, [&] { return global_order(height, width, reverse); });
}

std::shared_ptr<const ScanOrder> OrderCache::local(std::size_t height, std::size_t width,
                                                   std::size_t patch, bool reverse) {
  OrderDescriptor key{OrderKind::local_patch, height, width, 1, patch, {}, reverse};
  return get_or_make(key, [&] { return local_patch_order(height, width, patch, reverse); });
}

std::shared_ptr<const ScanOrder> OrderCache::cross(std::size_t height, std::size_t width,
                                                   std::size_t channels, const CubeSpec& spec) {
  OrderDescriptor key{OrderKind::cross_cube, height, width, channels, spec.patch, spec, false};
  return get_or_make(key, [&] { return cross_cube_order(height, width, channels, spec); });
}

std::size_t OrderCache::size() const {
  std::shared_lock lock(mutex_);
  return orders_.size();
}

OrderCache& OrderCache::shared() {
  static OrderCache cache;
  return cache;
}

}  // namespace csm::scan
