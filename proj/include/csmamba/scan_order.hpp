#pragma once

// Permutations that flatten C x H x W feature maps into 1-D scan sequences.
//
// Index convention: (band b, row r, col x) flattens to b*H*W + r*W + x.
// Purely spatial orders are defined on H*W indices and applied per channel.
// forward[i] is the source index read at sequence position i.

#include <compare>
#include <cstddef>
#include <map>
#include <memory>
#include <shared_mutex>
#include <span>
#include <string>
#include <vector>

namespace csm::scan {

enum class OrderKind { custom, global, local_patch, cross_cube, spectral_pixel };

/// Spatial-spectral cube layout: P x P x C patches split into h x w x c cubes.
struct CubeSpec {
  std::size_t patch = 4;
  std::size_t h = 2;
  std::size_t w = 2;
  std::size_t c = 4;

  auto operator<=>(const CubeSpec&) const = default;
};

struct OrderDescriptor {
  OrderKind kind = OrderKind::custom;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::size_t patch = 0;
  CubeSpec cube{};
  bool reverse = false;

  auto operator<=>(const OrderDescriptor&) const = default;
  std::string to_string() const;
};

class ScanOrder {
 public:
  ScanOrder() = default;
  /// Throws std::invalid_argument unless `forward` is a bijection on [0, L).
  explicit ScanOrder(std::vector<std::size_t> forward, OrderDescriptor desc = {});

  std::size_t length() const { return forward_.size(); }
  std::span<const std::size_t> forward() const { return forward_; }
  std::span<const std::size_t> inverse() const { return inverse_; }
  std::size_t operator[](std::size_t i) const { return forward_[i]; }
  const OrderDescriptor& descriptor() const { return desc_; }

  ScanOrder inverted() const;

 private:
  std::vector<std::size_t> forward_;
  std::vector<std::size_t> inverse_;
  OrderDescriptor desc_;
};

/// Row-major traversal of an H x W grid; `reverse` flips the whole sequence.
ScanOrder global_order(std::size_t height, std::size_t width, bool reverse);

/// P x P patches visited row-major, pixels row-major inside each patch.
ScanOrder local_patch_order(std::size_t height, std::size_t width, std::size_t patch,
                            bool reverse);

/// Cross spatial-spectral order over a C x H x W tensor. Patches (P x P x C)
/// row-major; inside a patch, h x w x c cubes row-major spatially with channel
/// blocks innermost; inside a cube, band fastest then pixels row-major.
ScanOrder cross_cube_order(std::size_t height, std::size_t width, std::size_t channels,
                           const CubeSpec& spec);

/// Direct per-pixel spectral scan: pixels row-major, all bands of a pixel
/// consecutively. Reference order for locality comparisons.
ScanOrder spectral_pixel_order(std::size_t height, std::size_t width, std::size_t channels);

/// Throws std::invalid_argument naming the offending dimensions.
void check_cube_spec(std::size_t height, std::size_t width, std::size_t channels,
                     const CubeSpec& spec);

struct OrderReport {
  bool is_bijection = false;
  std::size_t max_neighbor_distance = 0;
};

OrderReport validate_order(std::span<const std::size_t> forward);
inline OrderReport validate_order(const ScanOrder& order) { return validate_order(order.forward()); }

/// Memoizes generated orders by descriptor. Safe for concurrent use.
class OrderCache {
 public:
  std::shared_ptr<const ScanOrder> global(std::size_t height, std::size_t width, bool reverse);
  std::shared_ptr<const ScanOrder> local(std::size_t height, std::size_t width, std::size_t patch,
                                         bool reverse);
  std::shared_ptr<const ScanOrder> cross(std::size_t height, std::size_t width,
                                         std::size_t channels, const CubeSpec& spec);
  std::size_t size() const;

  static OrderCache& shared();

 private:
  template <class Make>
  std::shared_ptr<const ScanOrder> get_or_make(const OrderDescriptor& key, Make&& make);

  mutable std::shared_mutex mutex_;
  std::map<OrderDescriptor, std::shared_ptr<const ScanOrder>> orders_;
};

}  // namespace csm::scan
