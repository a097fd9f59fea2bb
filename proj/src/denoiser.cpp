#include "csmamba/denoiser.hpp"

#include <cmath>
#include <stdexcept>

#include "csmamba/ssm.hpp"

namespace csm::net {

using ad::Var;

// ---- configs ---------------------------------------------------------------------

BlockConfig UNetConfig::block_at(std::size_t level) const {
  return BlockConfig{channels_at(level), patch, cube, state, ffn_expand};
}

void UNetConfig::validate(std::size_t height, std::size_t width) const {
  if (base_channels == 0 || state == 0 || ffn_expand == 0 || patch == 0) {
    throw std::invalid_argument("network config has a zero size field");
  }
  const std::size_t unit = (std::size_t{1} << levels) * patch;
  if (height % unit != 0 || width % unit != 0) {
    throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                " must be divisible by 2^levels * patch = " + std::to_string(unit));
  }
  scan::CubeSpec spec = cube;
  spec.patch = patch;
  for (std::size_t l = 0; l <= levels; ++l) {
    scan::check_cube_spec(height >> l, width >> l, channels_at(l), spec);
  }
}

// ---- weights -----------------------------------------------------------------------

void ModelWeights::set(const std::string& name, Tensor value) { tensors_[name] = std::move(value); }

void ModelWeights::add(const std::string& name, Tensor value) {
  if (!tensors_.emplace(name, std::move(value)).second) {
    throw std::invalid_argument("duplicate weight name '" + name + "'");
  }
}

const Tensor& ModelWeights::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing weight '" + name + "'");
  return it->second;
}

Tensor& ModelWeights::get(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("missing weight '" + name + "'");
  return it->second;
}

std::vector<std::string> ModelWeights::names() const {
  std::vector<std::string> out;
  out.reserve(tensors_.size());
  for (const auto& [k, v] : tensors_) out.push_back(k);
  return out;
}

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [k, v] : tensors_) n += v.size();
  return n;
}

Tensor ModelWeights::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto& [k, v] : tensors_) flat.insert(flat.end(), v.data().begin(), v.data().end());
  const std::size_t n = flat.size();
  return Tensor(Shape{n}, std::move(flat));
}

void ModelWeights::unflatten(const Tensor& flat) {
  if (flat.size() != parameter_count()) {
    throw std::invalid_argument("flat parameter vector has " + std::to_string(flat.size()) +
                                " entries, expected " + std::to_string(parameter_count()));
  }
  std::size_t offset = 0;
  for (auto& [k, v] : tensors_) {
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = flat[offset + i];
    offset += v.size();
  }
}

bool ModelWeights::operator==(const ModelWeights& other) const {
  if (tensors_.size() != other.tensors_.size()) return false;
  for (const auto& [k, v] : tensors_) {
    auto it = other.tensors_.find(k);
    if (it == other.tensors_.end() || it->second.shape() != v.shape() || it->second.vec() != v.vec()) {
      return false;
    }
  }
  return true;
}

ParamSet::ParamSet(ad::Tape& tape, const ModelWeights& weights, bool requires_grad) : tape_(&tape) {
  for (const auto& [name, value] : weights.tensors()) {
    vars_.emplace(name, tape.leaf(value, requires_grad, name));
  }
}

ParamSet::ParamSet(const ModelWeights& layout, const Var& flat) : tape_(&flat.tape()) {
  if (flat.size() != layout.parameter_count()) {
    throw std::invalid_argument("flat parameter variable does not match the weight layout");
  }
  std::size_t offset = 0;
  for (const auto& [name, value] : layout.tensors()) {
    const Var part = ad::slice(flat, offset, offset + value.size());
    vars_.emplace(name, ad::reshape(part, value.shape()));
    offset += value.size();
  }
}

const Var& ParamSet::operator()(const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw std::out_of_range("parameter '" + name + "' is not bound");
  return it->second;
}

std::map<std::string, Tensor> ParamSet::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, var] : vars_) out.emplace(name, tape_->grad(var));
  return out;
}

LeOrders LeOrders::make(std::size_t height, std::size_t width, std::size_t patch) {
  auto& cache = scan::OrderCache::shared();
  return LeOrders{cache.global(height, width, false), cache.global(height, width, true),
                  cache.local(height, width, patch, false), cache.local(height, width, patch, true)};
}

// ---- initialization --------------------------------------------------------------------

namespace {

Tensor uniform(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 1.0) {
  return uniform(std::move(shape), gain / std::sqrt(static_cast<double>(fan_in)), rng);
}

void add_conv(ModelWeights& w, const std::string& name, std::size_t cout, std::size_t cin,
              std::size_t k, std::mt19937_64& rng, double gain = 1.0) {
  w.add(name + ".w", fan_in_uniform({cout, cin, k, k}, cin * k * k, rng, gain));
  w.add(name + ".b", fan_in_uniform({cout}, cin * k * k, rng, gain));
}

void add_norm(ModelWeights& w, const std::string& name, std::size_t c) {
  w.add(name + ".g", Tensor(Shape{c}, 1.0));
  w.add(name + ".b", Tensor(Shape{c}, 0.0));
}

// softplus^-1(0.05): initial timescale of the scans.
constexpr double kDeltaBias = -2.9701952490421637;

void add_scan_params(ModelWeights& w, const std::string& p, std::size_t channels,
                     std::size_t state) {
  Tensor alog(Shape{channels, state});
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t n = 0; n < state; ++n) alog[c * state + n] = std::log(static_cast<double>(n + 1));
  }
  w.add(p + ".alog", std::move(alog));
  w.add(p + ".d", Tensor(Shape{channels}, 1.0));
}

std::string blk(const std::string& prefix, const char* part, std::size_t level, std::size_t i) {
  return prefix + part + std::to_string(level) + ".blk" + std::to_string(i);
}

}  // namespace

void init_block(ModelWeights& w, const std::string& p, const BlockConfig& cfg, std::mt19937_64& rng) {
  const std::size_t c = cfg.channels, n = cfg.state;
  add_norm(w, p + ".norm1", c);
  for (int dir = 0; dir < 4; ++dir) {
    const std::string d = p + ".le.dir" + std::to_string(dir);
    w.add(d + ".wb", fan_in_uniform({n, c}, c, rng));
    w.add(d + ".wc", fan_in_uniform({n, c}, c, rng));
    w.add(d + ".wdt", fan_in_uniform({c, c}, c, rng, 0.1));
    w.add(d + ".bdt", Tensor(Shape{c}, kDeltaBias));
    add_scan_params(w, d, c, n);
  }
  w.add(p + ".le.proj", fan_in_uniform({c, c}, 4 * c, rng));

  const std::string cs = p + ".cs";
  add_norm(w, cs + ".norm", c);
  w.add(cs + ".wb", fan_in_uniform({n, 1}, 1, rng, 0.5));
  w.add(cs + ".bb", fan_in_uniform({n}, 1, rng, 0.5));
  w.add(cs + ".wc", fan_in_uniform({n, 1}, n, rng));
  w.add(cs + ".bc", fan_in_uniform({n}, n, rng));
  w.add(cs + ".wdt", fan_in_uniform({1, 1}, 1, rng, 0.1));
  w.add(cs + ".bdt", Tensor(Shape{1}, kDeltaBias));
  add_scan_params(w, cs, 1, n);
  w.get(cs + ".d")[0] = 0.1;

  const std::string ffn = p + ".ffn";
  const std::size_t hidden = cfg.ffn_expand * c;
  add_norm(w, ffn + ".norm", c);
  w.add(ffn + ".in", fan_in_uniform({2 * hidden, c, 1, 1}, c, rng));
  w.add(ffn + ".dw", fan_in_uniform({2 * hidden, 1, 3, 3}, 9, rng));
  w.add(ffn + ".out", fan_in_uniform({c, hidden, 1, 1}, hidden, rng, 0.5));
}

void init_denoiser(ModelWeights& w, const std::string& p, const UNetConfig& cfg, std::size_t bands,
                   std::mt19937_64& rng) {
  const std::size_t c0 = cfg.base_channels;
  add_conv(w, p + "embed.fuse", bands, 2 * bands + 1, 1, rng);
  add_conv(w, p + "embed.conv", c0, bands, 3, rng);
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    const std::size_t c = cfg.channels_at(l);
    for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) init_block(w, blk(p, "enc", l, i), cfg.block_at(l), rng);
    add_conv(w, p + "down" + std::to_string(l), 2 * c, c, 3, rng);
  }
  for (std::size_t i = 0; i < cfg.bottleneck_blocks; ++i) {
    init_block(w, p + "mid.blk" + std::to_string(i), cfg.block_at(cfg.levels), rng);
  }
  for (std::size_t l = cfg.levels; l-- > 0;) {
    const std::size_t c = cfg.channels_at(l);
    add_conv(w, p + "up" + std::to_string(l), c, 2 * c, 3, rng);
    add_conv(w, p + "fuse" + std::to_string(l), c, 2 * c, 1, rng);
    for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) init_block(w, blk(p, "dec", l, i), cfg.block_at(l), rng);
  }
  add_conv(w, p + "out", bands, c0, 3, rng, 0.1);
}

void zero_output_conv(ModelWeights& w, const std::string& prefix) {
  for (const char* part : {"out.w", "out.b"}) {
    for (double& v : w.get(prefix + part).data()) v = 0.0;
  }
}

// ---- forward ---------------------------------------------------------------------------

namespace {

Var conv(const ParamSet& ps, const std::string& name, const Var& x, std::size_t stride = 1) {
  return ad::add_channel_bias(ad::conv2d(x, ps(name + ".w"), stride), ps(name + ".b"));
}

Var norm(const ParamSet& ps, const std::string& name, const Var& x) {
  return ad::layer_norm_channels(x, ps(name + ".g"), ps(name + ".b"));
}

Var le_direction(const ParamSet& ps, const std::string& d, const Var& tokens,
                 const scan::ScanOrder& order) {
  const Var xs = ad::gather_by_order(tokens, order);
  const Var b = ad::matmul(ps(d + ".wb"), xs);
  const Var c = ad::matmul(ps(d + ".wc"), xs);
  const Var delta = ad::softplus(ad::add_channel_bias(ad::matmul(ps(d + ".wdt"), xs), ps(d + ".bdt")));
  const Var a = ad::neg(ad::exp(ps(d + ".alog")));
  const Var y = ssm::selective_scan(xs, delta, a, b, c, ps(d + ".d"));
  return ad::scatter_by_order(y, order);
}

}  // namespace

Var embed_with_mask(const ParamSet& ps, const std::string& p, const Var& x, const Tensor& mask,
                    const Var& sigma) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("embed_with_mask: x must be [bands,H,W]");
  const std::size_t bands = s[0], h = s[1], w = s[2];
  if (mask.size() != h * w) {
    throw std::invalid_argument("embed_with_mask: mask " + shape_str(mask.shape()) +
                                " does not match input " + shape_str(s));
  }
  Tensor mask_planes(Shape{bands, h, w});
  for (std::size_t b = 0; b < bands; ++b) {
    std::copy(mask.data().begin(), mask.data().end(), mask_planes.data().begin() + b * h * w);
  }
  ad::Tape& tape = x.tape();
  const Var sigma_plane = ad::broadcast_scalar(sigma, Shape{1, h, w});
  const Var stacked = ad::concat({x, tape.constant(std::move(mask_planes)), sigma_plane});
  const Var fused = conv(ps, p + "embed.fuse", stacked);
  return conv(ps, p + "embed.conv", fused);
}

Var le_ssm_forward(const ParamSet& ps, const std::string& p, const Var& f, const LeOrders& orders) {
  const Shape s = f.shape();
  const std::size_t c = s[0], hw = s[1] * s[2];
  if (orders.global_fwd->length() != hw) {
    throw std::invalid_argument("le_ssm_forward: scan orders cover " +
                                std::to_string(orders.global_fwd->length()) + " positions, feature has " +
                                std::to_string(hw));
  }
  const Var tokens = ad::reshape(f, Shape{c, hw});
  const scan::ScanOrder* dirs[4] = {orders.global_fwd.get(), orders.global_rev.get(),
                                    orders.local_fwd.get(), orders.local_rev.get()};
  Var merged;
  for (int i = 0; i < 4; ++i) {
    const Var y = le_direction(ps, p + ".le.dir" + std::to_string(i), tokens, *dirs[i]);
    merged = i == 0 ? y : ad::add(merged, y);
  }
  return ad::reshape(ad::matmul(ps(p + ".le.proj"), merged), s);
}

Var cs_ssm_forward(const ParamSet& ps, const std::string& p, const Var& f,
                   const scan::ScanOrder& order) {
  const Shape s = f.shape();
  const std::string cs = p + ".cs";
  const Var seq = ad::gather_by_order(ad::reshape(norm(ps, cs + ".norm", f), Shape{1, f.size()}), order);
  const Var b = ad::add_channel_bias(ad::matmul(ps(cs + ".wb"), seq), ps(cs + ".bb"));
  const Var c = ad::add_channel_bias(ad::matmul(ps(cs + ".wc"), seq), ps(cs + ".bc"));
  const Var delta = ad::softplus(ad::add_channel_bias(ad::matmul(ps(cs + ".wdt"), seq), ps(cs + ".bdt")));
  const Var a = ad::neg(ad::exp(ps(cs + ".alog")));
  const Var y = ssm::selective_scan(seq, delta, a, b, c, ps(cs + ".d"));
  const Var restored = ad::scatter_by_order(y, order);
  return ad::add(f, ad::reshape(restored, s));
}

Var gdffn_forward(const ParamSet& ps, const std::string& p, const Var& f) {
  const std::string ffn = p + ".ffn";
  const Var n = norm(ps, ffn + ".norm", f);
  const Var expanded = ad::depthwise_conv2d(ad::conv2d(n, ps(ffn + ".in")), ps(ffn + ".dw"));
  const std::size_t hidden = expanded.shape()[0] / 2;
  const Var gate = ad::gelu(ad::slice(expanded, 0, hidden));
  const Var value = ad::slice(expanded, hidden, 2 * hidden);
  return ad::add(f, ad::conv2d(ad::mul(gate, value), ps(ffn + ".out")));
}

Var block_forward(const ParamSet& ps, const std::string& p, const Var& f, const BlockConfig& cfg,
                  const BlockHook& hook) {
  const Shape& s = f.shape();
  const std::size_t h = s[1], w = s[2];
  scan::CubeSpec spec = cfg.cube;
  spec.patch = cfg.patch;
  const LeOrders orders = LeOrders::make(h, w, cfg.patch);
  const auto cross = scan::OrderCache::shared().cross(h, w, s[0], spec);

  const Var n1 = norm(ps, p + ".norm1", f);
  if (hook) hook("norm1", n1);
  const Var le = ad::add(f, le_ssm_forward(ps, p, n1, orders));
  if (hook) hook("le_ssm", le);
  const Var cs = cs_ssm_forward(ps, p, le, *cross);
  if (hook) hook("cs_ssm", cs);
  const Var out = gdffn_forward(ps, p, cs);
  if (hook) hook("gdffn", out);
  return out;
}

Var denoise(const ParamSet& ps, const std::string& p, const Var& x, const Var& sigma,
            const Tensor& mask, const UNetConfig& cfg, const Tensor* feature_mask,
            const BlockHook& hook) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw std::invalid_argument("denoise: x must be [bands,H,W]");
  if (!std::isfinite(sigma.value().item())) throw std::invalid_argument("denoise: non-finite noise level");
  cfg.validate(s[1], s[2]);

  Var feat = embed_with_mask(ps, p, x, mask, sigma);
  if (feature_mask) feat = ad::mul_spatial(feat, *feature_mask);
  if (hook) hook("embed", feat);

  std::vector<Var> skips;
  for (std::size_t l = 0; l < cfg.levels; ++l) {
    for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) {
      feat = block_forward(ps, blk(p, "enc", l, i), feat, cfg.block_at(l), hook);
    }
    skips.push_back(feat);
    feat = conv(ps, p + "down" + std::to_string(l), feat, 2);
  }
  for (std::size_t i = 0; i < cfg.bottleneck_blocks; ++i) {
    feat = block_forward(ps, p + "mid.blk" + std::to_string(i), feat, cfg.block_at(cfg.levels), hook);
  }
  for (std::size_t l = cfg.levels; l-- > 0;) {
    feat = conv(ps, p + "up" + std::to_string(l), ad::upsample_nearest2x(feat));
    feat = conv(ps, p + "fuse" + std::to_string(l), ad::concat({feat, skips[l]}));
    for (std::size_t i = 0; i < cfg.blocks_per_level; ++i) {
      feat = block_forward(ps, blk(p, "dec", l, i), feat, cfg.block_at(l), hook);
    }
  }
  const Var residual = conv(ps, p + "out", feat);
  return ad::add(x, residual);
}

}  // namespace csm::net
