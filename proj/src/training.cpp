#include "csmamba/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

#include "csmamba/digest.hpp"

namespace csm::train {

std::size_t FeatureMask::zero_count() const {
  return static_cast<std::size_t>(std::count(values.vec().begin(), values.vec().end(), 0.0));
}

std::string FeatureMask::digest() const {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + values.size());
  for (std::uint64_t v : {static_cast<std::uint64_t>(height), static_cast<std::uint64_t>(width)}) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  for (double v : values.vec()) bytes.push_back(v != 0.0 ? 1 : 0);
  return hex(sha256(bytes));
}

FeatureMask generate_mask(std::size_t height, std::size_t width, double zero_ratio,
                          std::uint64_t seed) {
  if (!(zero_ratio >= 0.0 && zero_ratio < 1.0)) {
    throw std::invalid_argument("mask zero ratio must lie in [0, 1), got " + std::to_string(zero_ratio));
  }
  if (height == 0 || width == 0) throw std::invalid_argument("mask dimensions must be positive");
  const std::size_t n = height * width;
  const auto zeros = static_cast<std::size_t>(std::llround(zero_ratio * static_cast<double>(n)));

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);

  FeatureMask m{height, width, zero_ratio, seed, Tensor(Shape{height, width}, 1.0)};
  for (std::size_t i = 0; i < zeros; ++i) m.values[idx[i]] = 0.0;
  return m;
}

ad::Var apply_mask(const ad::Var& feature, const FeatureMask& mask) {
  const Shape& s = feature.shape();
  if (s.size() != 3 || s[1] != mask.height || s[2] != mask.width) {
    throw std::invalid_argument("apply_mask: feature " + shape_str(s) + " does not match mask " +
                                std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  return ad::mul_spatial(feature, mask.values);
}

// Seeds are split into 16-bit chunks so they survive 32-bit float storage.
void store_mask(net::ModelWeights& w, const FeatureMask& mask) {
  w.set(kMaskName, mask.values);
  Tensor meta(Shape{5});
  meta[0] = mask.zero_ratio;
  for (int i = 0; i < 4; ++i) meta[1 + i] = static_cast<double>((mask.seed >> (16 * i)) & 0xFFFF);
  w.set(kMaskMetaName, meta);
}

std::optional<FeatureMask> take_mask(net::ModelWeights& w) {
  if (!w.contains(kMaskName)) return std::nullopt;
  FeatureMask m;
  m.values = w.get(kMaskName);
  if (m.values.rank() != 2) throw std::runtime_error("stored feature mask must be two-dimensional");
  for (double v : m.values.vec()) {
    if (v != 0.0 && v != 1.0) throw std::runtime_error("stored feature mask is not binary");
  }
  m.height = m.values.dim(0);
  m.width = m.values.dim(1);
  if (w.contains(kMaskMetaName)) {
    const Tensor& meta = w.get(kMaskMetaName);
    if (meta.size() != 5) throw std::runtime_error("stored feature mask metadata is malformed");
    m.zero_ratio = meta[0];
    for (int i = 0; i < 4; ++i) m.seed |= static_cast<std::uint64_t>(meta[1 + i]) << (16 * i);
  } else {
    m.zero_ratio = static_cast<double>(m.zero_count()) / static_cast<double>(m.values.size());
  }
  w.erase(kMaskName);
  w.erase(kMaskMetaName);
  return m;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning rate must be finite and non-negative");
  }
  if (!(min_lr_fraction >= 0.0 && min_lr_fraction <= 1.0)) {
    throw std::invalid_argument("min_lr_fraction must lie in [0, 1]");
  }
  if (!(zero_ratio >= 0.0 && zero_ratio < 1.0)) {
    throw std::invalid_argument("zero ratio must lie in [0, 1)");
  }
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (clip_norm < 0.0) throw std::invalid_argument("clip norm must be non-negative");
  if (noise_bits < 0 || noise_bits > 16) throw std::invalid_argument("noise bits must lie in [0, 16]");
}

double TrainConfig::rate_at(std::size_t step) const {
  if (steps <= 1) return learning_rate;
  const double t = static_cast<double>(std::min(step, steps - 1)) / static_cast<double>(steps - 1);
  const double floor = learning_rate * min_lr_fraction;
  return floor + 0.5 * (learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * t));
}

namespace {

cassi::Measurement simulate(const Sample& s, int noise_bits, std::uint64_t seed) {
  cassi::Measurement y = cassi::forward_project(s.cube, s.op);
  if (noise_bits > 0) y = cassi::add_shot_noise(y, noise_bits, seed);
  return y;
}

// Builds the batch loss on `tape`; returns the loss variable.
ad::Var batch_loss(ad::Tape& tape, const net::ParamSet& ps, const std::vector<Sample>& batch,
                   const hqs::UnfoldConfig& cfg, const FeatureMask* mask, int noise_bits,
                   std::uint64_t noise_seed) {
  if (batch.empty()) throw std::invalid_argument("training batch is empty");
  const Tensor* fm = mask ? &mask->values : nullptr;
  ad::Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const cassi::Measurement y = simulate(batch[i], noise_bits, noise_seed + i);
    const ad::Var rec = hqs::reconstruct(ps, y, batch[i].op, cfg, fm);
    const ad::Var l = ad::mse(rec, tape.constant(batch[i].cube.to_tensor()));
    total = total.valid() ? total + l : l;
  }
  return batch.size() == 1 ? total : ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

}  // namespace

double evaluate_loss(const std::vector<Sample>& batch, const net::ModelWeights& weights,
                     const hqs::UnfoldConfig& cfg, const FeatureMask* mask, int noise_bits,
                     std::uint64_t noise_seed) {
  ad::Tape tape;
  const net::ParamSet ps(tape, weights, false);
  return batch_loss(tape, ps, batch, cfg, mask, noise_bits, noise_seed).value().item();
}

StepResult train_step(const std::vector<Sample>& batch, net::ModelWeights& weights,
                      const hqs::UnfoldConfig& cfg, const TrainConfig& tc, std::size_t step,
                      const FeatureMask* mask) {
  tc.validate();
  ad::Tape tape;
  const net::ParamSet ps(tape, weights, true);
  const std::uint64_t noise_seed = tc.noise_seed + step * batch.size();
  const ad::Var loss = batch_loss(tape, ps, batch, cfg, mask, tc.noise_bits, noise_seed);

  StepResult r;
  r.loss = loss.value().item();
  if (!std::isfinite(r.loss)) {
    const auto where = tape.first_non_finite();
    throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                             (where ? "; first non-finite tensor: " + *where : std::string()));
  }
  tape.backward(loss);

  std::map<std::string, Tensor> grads = ps.gradients();
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) {
      throw std::runtime_error("non-finite gradient at step " + std::to_string(step) +
                               " for weight '" + name + "'");
    }
    for (double v : g.vec()) sq += v * v;
  }
  r.grad_norm = std::sqrt(sq);
  r.learning_rate = tc.rate_at(step);
  double factor = r.learning_rate;
  if (tc.clip_norm > 0.0 && r.grad_norm > tc.clip_norm) factor *= tc.clip_norm / r.grad_norm;

  if (factor != 0.0) {
    for (const auto& [name, g] : grads) {
      Tensor& w = weights.get(name);
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= factor * g[i];
    }
  }
  if (mask) r.mask_digest = mask->digest();
  return r;
}

Trainer::Trainer(hqs::UnfoldConfig cfg, TrainConfig tc, net::ModelWeights weights, bool masked)
    : cfg_(std::move(cfg)), tc_(tc), weights_(std::move(weights)) {
  tc_.validate();
  if (masked) mask_ = FeatureMask{};  // sized on the first step
}

StepResult Trainer::step(const std::vector<Sample>& batch) {
  if (batch.empty()) throw std::invalid_argument("training batch is empty");
  const FeatureMask* m = nullptr;
  if (mask_) {
    const std::size_t h = batch.front().cube.height;
    const std::size_t w = batch.front().cube.width;
    const bool fresh = mask_->height != h || mask_->width != w;
    if (tc_.resample_mask) {
      mask_ = generate_mask(h, w, tc_.zero_ratio, tc_.mask_seed + step_);
    } else if (fresh) {
      if (mask_->height != 0) throw std::invalid_argument("fixed feature mask does not match batch size");
      mask_ = generate_mask(h, w, tc_.zero_ratio, tc_.mask_seed);
    }
    m = &*mask_;
  }
  StepResult r = train_step(batch, weights_, cfg_, tc_, step_, m);
  digests_.push_back(r.mask_digest);
  ++step_;
  return r;
}

std::vector<StepResult> Trainer::run(const std::vector<Sample>& data,
                                     const std::function<void(std::size_t, const StepResult&)>& on_step) {
  if (data.empty()) throw std::invalid_argument("no training samples");
  std::vector<StepResult> out;
  out.reserve(tc_.steps);
  std::size_t cursor = 0;
  while (step_ < tc_.steps) {
    std::vector<Sample> batch;
    for (std::size_t i = 0; i < tc_.batch_size; ++i) {
      batch.push_back(data[cursor]);
      cursor = (cursor + 1) % data.size();
    }
    const std::size_t k = step_;
    out.push_back(step(batch));
    if (on_step) on_step(k, out.back());
  }
  return out;
}

}  // namespace csm::train
