#pragma once

// Masked training: a fixed 0-1 spatial mask multiplied into the embedded
// feature of every stage's denoiser, identically at train and test time.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "csmamba/autodiff.hpp"
#include "csmamba/cassi.hpp"
#include "csmamba/hqs.hpp"

namespace csm::train {

struct FeatureMask {
  std::size_t height = 0;
  std::size_t width = 0;
  double zero_ratio = 0.0;
  std::uint64_t seed = 0;
  Tensor values;  // [H, W], entries in {0, 1}

  std::size_t zero_count() const;
  /// SHA-256 over the dimensions and mask entries, hex encoded.
  std::string digest() const;
};

/// Exactly round(zero_ratio * H * W) zeros, placed by a seeded shuffle.
FeatureMask generate_mask(std::size_t height, std::size_t width, double zero_ratio,
                          std::uint64_t seed);

/// Multiplies every channel of feature [C,H,W] by the mask.
ad::Var apply_mask(const ad::Var& feature, const FeatureMask& mask);

// Reserved weight entries carrying a persisted mask.
inline const std::string kMaskName = "__feature_mask__";
inline const std::string kMaskMetaName = "__feature_mask_meta__";

void store_mask(net::ModelWeights& w, const FeatureMask& mask);
/// Removes the reserved entries from `w` and returns the mask, if present.
std::optional<FeatureMask> take_mask(net::ModelWeights& w);

enum class LossKind { mse };

struct TrainConfig {
  double learning_rate = 1e-2;
  /// Cosine decay from learning_rate to learning_rate * min_lr_fraction.
  double min_lr_fraction = 0.0;
  std::size_t steps = 500;
  std::size_t batch_size = 1;
  double zero_ratio = 0.5;
  std::uint64_t mask_seed = 0;
  LossKind loss = LossKind::mse;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  /// Shot noise on simulated measurements; 0 disables.
  int noise_bits = 0;
  std::uint64_t noise_seed = 0;
  /// Experimental: draw a fresh mask every step (seed mask_seed + step).
  bool resample_mask = false;

  void validate() const;
  double rate_at(std::size_t step) const;
};

struct Sample {
  cassi::HsiCube cube;
  cassi::SensingOperator op;
};

struct StepResult {
  double loss = 0.0;
  double learning_rate = 0.0;
  double grad_norm = 0.0;
  std::string mask_digest;  // empty when unmasked
};

/// One gradient-descent step over the batch (loss averaged over samples).
/// Throws std::runtime_error naming the first non-finite tensor if the loss or
/// any gradient is not finite; weights are left untouched in that case.
StepResult train_step(const std::vector<Sample>& batch, net::ModelWeights& weights,
                      const hqs::UnfoldConfig& cfg, const TrainConfig& tc, std::size_t step,
                      const FeatureMask* mask = nullptr);

/// Loss of the current weights without updating them.
double evaluate_loss(const std::vector<Sample>& batch, const net::ModelWeights& weights,
                     const hqs::UnfoldConfig& cfg, const FeatureMask* mask = nullptr,
                     int noise_bits = 0, std::uint64_t noise_seed = 0);

class Trainer {
 public:
  Trainer(hqs::UnfoldConfig cfg, TrainConfig tc, net::ModelWeights weights, bool masked);

  StepResult step(const std::vector<Sample>& batch);
  /// Runs the configured number of steps, cycling through `data` in batches.
  std::vector<StepResult> run(const std::vector<Sample>& data,
                              const std::function<void(std::size_t, const StepResult&)>& on_step = {});

  const net::ModelWeights& weights() const { return weights_; }
  const std::optional<FeatureMask>& mask() const { return mask_; }
  std::size_t steps_done() const { return step_; }
  /// Digest of the mask used at every completed step.
  const std::vector<std::string>& mask_digests() const { return digests_; }

 private:
  hqs::UnfoldConfig cfg_;
  TrainConfig tc_;
  net::ModelWeights weights_;
  std::optional<FeatureMask> mask_;
  std::size_t step_ = 0;
  std::vector<std::string> digests_;
};

}  // namespace csm::train
