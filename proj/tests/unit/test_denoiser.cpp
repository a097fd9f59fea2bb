#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "csmamba/denoiser.hpp"
#include "helpers.hpp"

using namespace csm;
using ad::Tape;
using ad::Var;

namespace {

net::BlockConfig small_block(std::size_t c = 4) { return {c, 2, scan::CubeSpec{2, 1, 2, 2}, 3, 2}; }

net::UNetConfig one_level() {
  net::UNetConfig cfg;
  cfg.levels = 1;
  cfg.base_channels = 4;
  cfg.patch = 4;
  cfg.cube = {4, 2, 2, 2};
  cfg.state = 3;
  return cfg;
}

net::ModelWeights block_weights(const std::string& p, const net::BlockConfig& cfg, std::uint64_t seed) {
  net::ModelWeights w;
  std::mt19937_64 rng(seed);
  net::init_block(w, p, cfg, rng);
  return w;
}

// Runs `body` with the weights bound to a flat parameter vector and returns
// the worst finite-difference error over `coords` (all when empty).
double weight_fd(const net::ModelWeights& w,
                 const std::function<Var(Tape&, const net::ParamSet&)>& body,
                 std::vector<std::size_t> coords = {}) {
  const ad::ScalarFn f = [&](Tape& t, const Var& flat) { return body(t, net::ParamSet(w, flat)); };
  return ad::finite_diff_check(f, w.flatten(), 1e-6, coords);
}

std::vector<std::size_t> sample_coords(std::size_t n, std::size_t k, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(std::min(n, k));
  return idx;
}

}  // namespace

TEST_SUITE("denoiser") {

TEST_CASE("weights store") {
  net::ModelWeights w;
  w.add("b", Tensor(Shape{2}, 1.0));
  w.add("a", Tensor(Shape{3}, 2.0));
  CHECK_THROWS(w.add("a", Tensor(Shape{1})));
  CHECK(w.names() == std::vector<std::string>{"a", "b"});
  CHECK(w.parameter_count() == 5);
  Tensor flat = w.flatten();
  CHECK(flat.vec() == std::vector<double>{2, 2, 2, 1, 1});
  flat[0] = 9.0;
  w.unflatten(flat);
  CHECK(w.get("a")[0] == 9.0);
  CHECK_THROWS(w.get("missing"));
}

TEST_CASE("embedding examples") {
  const net::UNetConfig cfg = one_level();
  net::ModelWeights w;
  std::mt19937_64 rng(1);
  net::init_denoiser(w, "", cfg, 3, rng);
  for (const char* n : {"embed.fuse.b", "embed.conv.b"})
    for (double& v : w.get(n).data()) v = 0.0;
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Var zero = net::embed_with_mask(ps, "", t.constant(Tensor(Shape{3, 8, 8})), Tensor(Shape{8, 8}),
                                        t.constant(Tensor::scalar(0.0)));
  CHECK(zero.shape() == Shape{4, 8, 8});
  CHECK(std::all_of(zero.value().vec().begin(), zero.value().vec().end(), [](double v) { return v == 0.0; }));
  CHECK_THROWS_AS(net::embed_with_mask(ps, "", t.constant(Tensor(Shape{3, 8, 8})), Tensor(Shape{4, 8}),
                                       t.constant(Tensor::scalar(0.0))),
                  std::invalid_argument);

  const Tensor x = testing::random_tensor({3, 8, 8}, rng), mask = testing::random_tensor({8, 8}, rng, 0, 1);
  CHECK(weight_fd(w, [&](Tape& tp, const net::ParamSet& p) {
          const Var e = net::embed_with_mask(p, "", tp.constant(x), mask, tp.constant(Tensor::scalar(0.3)));
          return ad::sum(e * e);
        }) <= 1e-4);
}

TEST_CASE("LE-SSM identity configuration") {
  const auto cfg = small_block();
  auto w = block_weights("b", cfg, 2);
  for (int d = 0; d < 4; ++d) {
    const std::string p = "b.le.dir" + std::to_string(d);
    for (double& v : w.get(p + ".wb").data()) v = 0.0;  // Bbar = 0
    for (double& v : w.get(p + ".d").data()) v = 1.0;
  }
  Tensor proj(Shape{4, 4});
  for (std::size_t i = 0; i < 4; ++i) proj[i * 4 + i] = 0.25;
  w.set("b.le.proj", proj);

  std::mt19937_64 rng(3);
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Var f = t.constant(testing::random_tensor({4, 4, 4}, rng));
  const Var out = net::le_ssm_forward(ps, "b", f, net::LeOrders::make(4, 4, 2));
  CHECK(out.shape() == f.shape());
  CHECK(testing::max_abs_diff(out.value().vec(), f.value().vec()) <= 1e-10);
}

TEST_CASE("LE-SSM is equivariant under pixel relabeling") {
  const auto cfg = small_block();
  const auto w = block_weights("b", cfg, 4);
  std::mt19937_64 rng(5);
  const std::size_t H = 4, W = 4, HW = 16, C = 4;
  std::vector<std::size_t> pi(HW);
  std::iota(pi.begin(), pi.end(), 0);
  std::shuffle(pi.begin(), pi.end(), rng);
  std::vector<std::size_t> pinv(HW);
  for (std::size_t i = 0; i < HW; ++i) pinv[pi[i]] = i;

  const Tensor f = testing::random_tensor({C, H, W}, rng);
  Tensor fp(f.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < HW; ++q) fp[c * HW + q] = f[c * HW + pi[q]];

  const net::LeOrders base = net::LeOrders::make(H, W, 2);
  auto relabel = [&](const std::shared_ptr<const scan::ScanOrder>& o) {
    std::vector<std::size_t> v(HW);
    for (std::size_t i = 0; i < HW; ++i) v[i] = pinv[(*o)[i]];
    return std::make_shared<const scan::ScanOrder>(std::move(v));
  };
  const net::LeOrders moved{relabel(base.global_fwd), relabel(base.global_rev), relabel(base.local_fwd),
                            relabel(base.local_rev)};
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Tensor out = net::le_ssm_forward(ps, "b", t.constant(f), base).value();
  const Tensor outp = net::le_ssm_forward(ps, "b", t.constant(fp), moved).value();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < HW; ++q) CHECK(outp[c * HW + q] == out[c * HW + pi[q]]);
}

TEST_CASE("CS-SSM examples") {
  const auto cfg = small_block();
  auto w = block_weights("b", cfg, 6);
  std::mt19937_64 rng(7);
  const Tensor f = testing::random_tensor({4, 4, 4}, rng);
  const auto order_a = scan::cross_cube_order(4, 4, 4, scan::CubeSpec{2, 1, 2, 2});
  const auto order_b = scan::cross_cube_order(4, 4, 4, scan::CubeSpec{4, 2, 2, 4});
  {
    Tape t;
    const net::ParamSet ps(t, w, false);
    const Tensor ya = net::cs_ssm_forward(ps, "b", t.constant(f), order_a).value();
    const Tensor yb = net::cs_ssm_forward(ps, "b", t.constant(f), order_b).value();
    CHECK(ya.shape() == f.shape());
    CHECK(testing::max_abs_diff(ya.vec(), yb.vec()) > 1e-6);
  }
  for (const char* n : {"b.cs.wb", "b.cs.bb", "b.cs.d"})
    for (double& v : w.get(n).data()) v = 0.0;
  Tape t;
  const net::ParamSet ps(t, w, false);
  CHECK(net::cs_ssm_forward(ps, "b", t.constant(f), order_a).value().vec() == f.vec());
}

TEST_CASE("GDFFN examples") {
  const auto cfg = small_block();
  auto w = block_weights("b", cfg, 8);
  std::mt19937_64 rng(9);
  const Tensor f = testing::random_tensor({4, 4, 4}, rng);
  CHECK(weight_fd(w, [&](Tape& t, const net::ParamSet& p) {
          const Var y = net::gdffn_forward(p, "b", t.constant(f));
          return ad::sum(y * y);
        }) <= 1e-4);
  for (const auto& n : w.names())
    if (n.rfind("b.ffn.", 0) == 0)
      for (double& v : w.get(n).data()) v = 0.0;
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Var y = net::gdffn_forward(ps, "b", t.constant(f));
  CHECK(y.shape() == f.shape());
  CHECK(y.value().vec() == f.vec());
}

TEST_CASE("branch gradient checks") {
  const auto cfg = small_block();
  const auto w = block_weights("b", cfg, 10);
  std::mt19937_64 rng(11);
  const Tensor f = testing::random_tensor({4, 4, 4}, rng), g = testing::random_tensor({4, 4, 4}, rng);
  const auto orders = net::LeOrders::make(4, 4, 2);
  const auto cross = scan::cross_cube_order(4, 4, 4, scan::CubeSpec{2, 1, 2, 2});
  CHECK(weight_fd(w, [&](Tape& t, const net::ParamSet& p) {
          return ad::sum(net::le_ssm_forward(p, "b", t.constant(f), orders) * t.constant(g));
        }) <= 1e-4);
  CHECK(weight_fd(w, [&](Tape& t, const net::ParamSet& p) {
          return ad::sum(net::cs_ssm_forward(p, "b", t.constant(f), cross) * t.constant(g));
        }) <= 1e-4);
  // With respect to the input feature as well.
  const ad::ScalarFn wrt_input = [&](Tape& t, const Var& x) {
    const net::ParamSet ps(t, w, false);
    const Var v = ad::reshape(x, {4, 4, 4});
    return ad::sum(net::block_forward(ps, "b", v, cfg) * t.constant(g));
  };
  CHECK(ad::finite_diff_check(wrt_input, f.reshaped({64}), 1e-6) <= 1e-4);
}

TEST_CASE("block composition order via hooks") {
  const auto cfg = small_block();
  const auto w = block_weights("b", cfg, 12);
  std::mt19937_64 rng(13);
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Var f = t.constant(testing::random_tensor({4, 4, 4}, rng));
  std::vector<std::pair<std::string, Var>> seen;
  const Var out = net::block_forward(ps, "b", f, cfg, [&](std::string_view s, const Var& v) {
    seen.emplace_back(std::string(s), v);
  });
  REQUIRE(seen.size() == 4);
  CHECK(seen[0].first == "norm1");
  CHECK(seen[1].first == "le_ssm");
  CHECK(seen[2].first == "cs_ssm");
  CHECK(seen[3].first == "gdffn");
  // Replay each unit from the previous probe.
  const Var n1 = ad::layer_norm_channels(f, ps("b.norm1.g"), ps("b.norm1.b"));
  CHECK(n1.value().vec() == seen[0].second.value().vec());
  const Var le = f + net::le_ssm_forward(ps, "b", seen[0].second, net::LeOrders::make(4, 4, 2));
  CHECK(le.value().vec() == seen[1].second.value().vec());
  const auto cross = scan::cross_cube_order(4, 4, 4, scan::CubeSpec{2, 1, 2, 2});
  CHECK(net::cs_ssm_forward(ps, "b", seen[1].second, cross).value().vec() == seen[2].second.value().vec());
  CHECK(net::gdffn_forward(ps, "b", seen[2].second).value().vec() == out.value().vec());
}

TEST_CASE("denoiser residual identity and shapes") {
  const net::UNetConfig cfg = one_level();
  std::mt19937_64 rng(14);
  net::ModelWeights w;
  net::init_denoiser(w, "den.", cfg, 2, rng);
  const Tensor x = testing::random_tensor({2, 8, 8}, rng, 0, 1), mask = testing::random_tensor({8, 8}, rng, 0, 1);
  {
    Tape t;
    const net::ParamSet ps(t, w, false);
    const Var y = net::denoise(ps, "den.", t.constant(x), t.constant(Tensor::scalar(0.1)), mask, cfg);
    CHECK(y.shape() == x.shape());
    CHECK(y.value().vec() != x.vec());
  }
  net::zero_output_conv(w, "den.");
  for (double sigma : {0.0, 0.1, 5.0}) {
    Tape t;
    const net::ParamSet ps(t, w, false);
    CHECK(net::denoise(ps, "den.", t.constant(x), t.constant(Tensor::scalar(sigma)), mask, cfg).value().vec() ==
          x.vec());
  }
  Tape t;
  const net::ParamSet ps(t, w, false);
  CHECK_THROWS_AS(net::denoise(ps, "den.", t.constant(Tensor(Shape{2, 6, 6})), t.constant(Tensor::scalar(0.1)),
                               Tensor(Shape{6, 6}), cfg),
                  std::invalid_argument);
  CHECK_THROWS_AS(net::denoise(ps, "den.", t.constant(x), t.constant(Tensor::scalar(std::nan(""))), mask, cfg),
                  std::invalid_argument);
}

TEST_CASE("two-level denoiser preserves shape") {
  net::UNetConfig cfg = one_level();
  cfg.levels = 2;
  cfg.bottleneck_blocks = 2;
  std::mt19937_64 rng(15);
  net::ModelWeights w;
  net::init_denoiser(w, "", cfg, 3, rng);
  Tape t;
  const net::ParamSet ps(t, w, false);
  const Var y = net::denoise(ps, "", t.constant(testing::random_tensor({3, 16, 16}, rng)),
                             t.constant(Tensor::scalar(0.1)), Tensor(Shape{16, 16}, 1.0), cfg);
  CHECK(y.shape() == Shape{3, 16, 16});
  CHECK(y.value().all_finite());
}

TEST_CASE("full denoiser gradient check and reachability") {
  const net::UNetConfig cfg = one_level();
  std::mt19937_64 rng(16);
  net::ModelWeights w;
  net::init_denoiser(w, "", cfg, 2, rng);
  const Tensor x = testing::random_tensor({2, 8, 8}, rng, 0, 1), mask = testing::random_tensor({8, 8}, rng, 0, 1);
  const Tensor target = testing::random_tensor({2, 8, 8}, rng, 0, 1);
  auto loss = [&](Tape& t, const net::ParamSet& p) {
    return ad::mse(net::denoise(p, "", t.constant(x), t.constant(Tensor::scalar(0.2)), mask, cfg),
                   t.constant(target));
  };
  CHECK(weight_fd(w, loss, sample_coords(w.parameter_count(), 400, 17)) <= 1e-4);

  Tape t;
  const net::ParamSet ps(t, w, true);
  t.backward(loss(t, ps));
  for (const auto& [name, g] : ps.gradients()) {
    CAPTURE(name);
    CHECK(std::any_of(g.vec().begin(), g.vec().end(), [](double v) { return v != 0.0; }));
  }
}

}
