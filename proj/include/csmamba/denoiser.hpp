#pragma once

// U-shaped spatial-spectral SSM denoiser.
//
// Each block is three pre-norm residual units applied in order:
//   f <- f + LE-SSM(LN(f))      four scan directions, merged by sum + 1x1
//   f <- CS-SSM(f)              f + scan over LN(f) in cross-cube order
//   f <- GDFFN(f)               f + gated depthwise feed-forward over LN(f)

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "csmamba/autodiff.hpp"
#include "csmamba/scan_order.hpp"
#include "csmamba/tensor.hpp"

namespace csm::net {

struct BlockConfig {
  std::size_t channels = 28;
  std::size_t patch = 4;
  scan::CubeSpec cube{};
  std::size_t state = 16;
  std::size_t ffn_expand = 2;
};

struct UNetConfig {
  std::size_t levels = 2;
  std::size_t blocks_per_level = 1;
  std::size_t bottleneck_blocks = 1;
  std::size_t base_channels = 28;
  std::size_t patch = 4;
  scan::CubeSpec cube{4, 2, 2, 4};
  std::size_t state = 16;
  std::size_t ffn_expand = 2;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  BlockConfig block_at(std::size_t level) const;
  /// Throws std::invalid_argument when an H x W input cannot pass through
  /// every level (spatial and cube divisibility).
  void validate(std::size_t height, std::size_t width) const;
};

/// Named tensor store with deterministic (lexicographic) iteration order.
class ModelWeights {
 public:
  void set(const std::string& name, Tensor value);
  /// Adds a new tensor; throws if the name already exists.
  void add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }
  void erase(const std::string& name) { tensors_.erase(name); }

  std::vector<std::string> names() const;
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }
  std::size_t parameter_count() const;

  /// All values concatenated in name order.
  Tensor flatten() const;
  void unflatten(const Tensor& flat);

  bool operator==(const ModelWeights& other) const;

 private:
  std::map<std::string, Tensor> tensors_;
};

/// Binds weights onto a tape as leaves, or as slices of one flat variable.
class ParamSet {
 public:
  ParamSet(ad::Tape& tape, const ModelWeights& weights, bool requires_grad = true);
  /// Views every weight as a slice of `flat` (layout of ModelWeights::flatten).
  ParamSet(const ModelWeights& layout, const ad::Var& flat);

  ad::Tape& tape() const { return *tape_; }
  const ad::Var& operator()(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }

  /// Gradients of every bound weight after Tape::backward.
  std::map<std::string, Tensor> gradients() const;

 private:
  ad::Tape* tape_;
  std::map<std::string, ad::Var> vars_;
};

/// Observer for intermediate block outputs.
using BlockHook = std::function<void(std::string_view stage, const ad::Var& value)>;

/// Orders used by the four LE-SSM directions.
struct LeOrders {
  std::shared_ptr<const scan::ScanOrder> global_fwd, global_rev, local_fwd, local_rev;
  static LeOrders make(std::size_t height, std::size_t width, std::size_t patch);
};

// ---- initialization -----------------------------------------------------------

void init_block(ModelWeights& w, const std::string& prefix, const BlockConfig& cfg,
                std::mt19937_64& rng);
void init_denoiser(ModelWeights& w, const std::string& prefix, const UNetConfig& cfg,
                   std::size_t bands, std::mt19937_64& rng);

/// Zeroes the final 3x3 convolution so the denoiser returns its input.
void zero_output_conv(ModelWeights& w, const std::string& prefix);

// ---- forward passes -----------------------------------------------------------------

/// Concatenates x [N,H,W], the mask broadcast to N channels and a constant
/// sigma channel, fuses them with a 1x1 conv back to N channels and embeds to
/// C channels with a 3x3 conv.
ad::Var embed_with_mask(const ParamSet& ps, const std::string& prefix, const ad::Var& x,
                        const Tensor& mask, const ad::Var& sigma);

ad::Var le_ssm_forward(const ParamSet& ps, const std::string& prefix, const ad::Var& f,
                       const LeOrders& orders);

ad::Var cs_ssm_forward(const ParamSet& ps, const std::string& prefix, const ad::Var& f,
                       const scan::ScanOrder& order);

ad::Var gdffn_forward(const ParamSet& ps, const std::string& prefix, const ad::Var& f);

ad::Var block_forward(const ParamSet& ps, const std::string& prefix, const ad::Var& f,
                      const BlockConfig& cfg, const BlockHook& hook = {});

/// Full denoiser: returns x + residual. `feature_mask` (H x W, optional) is
/// multiplied into the embedded feature.
ad::Var denoise(const ParamSet& ps, const std::string& prefix, const ad::Var& x,
                const ad::Var& sigma, const Tensor& mask, const UNetConfig& cfg,
                const Tensor* feature_mask = nullptr, const BlockHook& hook = {});

}  // namespace csm::net
