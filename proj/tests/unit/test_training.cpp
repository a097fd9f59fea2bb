#include <doctest.h>

#include <random>

#include "csmamba/training.hpp"
#include "helpers.hpp"

using namespace csm;

namespace {

hqs::UnfoldConfig tiny() {
  hqs::UnfoldConfig cfg;
  cfg.stages = 2;
  cfg.share_weights = true;
  cfg.denoiser.levels = 1;
  cfg.denoiser.base_channels = 4;
  cfg.denoiser.patch = 4;
  cfg.denoiser.cube = {4, 2, 2, 2};
  cfg.denoiser.state = 3;
  return cfg;
}

std::vector<train::Sample> one_sample(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const cassi::SensingOperator op(testing::random_mask(8, 8, rng, true), 2, 2);
  return {train::Sample{testing::random_cube(8, 8, 2, rng), op}};
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("mask zero counts are exact") {
  CHECK(train::generate_mask(4, 4, 0.5, 1).zero_count() == 8);
  CHECK(train::generate_mask(4, 4, 0.0, 1).zero_count() == 0);
  CHECK(train::generate_mask(2, 5, 0.8, 1).zero_count() == 8);
  for (double r : {0.3, 0.5, 0.8})
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto m = train::generate_mask(13, 7, r, s);
      CHECK(m.zero_count() == static_cast<std::size_t>(std::llround(r * 91)));
      for (double v : m.values.vec()) CHECK((v == 0.0 || v == 1.0));
    }
  CHECK_THROWS_AS(train::generate_mask(4, 4, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(train::generate_mask(4, 4, -0.1, 1), std::invalid_argument);
}

TEST_CASE("masks are deterministic under the seed") {
  const auto a = train::generate_mask(16, 16, 0.5, 42), b = train::generate_mask(16, 16, 0.5, 42);
  CHECK(a.values.vec() == b.values.vec());
  CHECK(a.digest() == b.digest());
  CHECK(a.digest() != train::generate_mask(16, 16, 0.5, 43).digest());
}

TEST_CASE("apply_mask behaviour") {
  std::mt19937_64 rng(1);
  const Tensor f = testing::random_tensor({3, 4, 4}, rng);
  ad::Tape t;
  const auto ones = train::generate_mask(4, 4, 0.0, 0);
  CHECK(train::apply_mask(t.constant(f), ones).value().vec() == f.vec());

  const auto m = train::generate_mask(4, 4, 0.5, 3);
  const ad::Var once = train::apply_mask(t.constant(f), m);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 16; ++p)
      if (m.values[p] == 0.0) CHECK(once.value()[c * 16 + p] == 0.0);
  CHECK(train::apply_mask(once, m).value().vec() == once.value().vec());
  CHECK_THROWS_AS(train::apply_mask(t.constant(Tensor(Shape{3, 4, 5})), m), std::invalid_argument);

  ad::Tape g;
  const ad::Var x = g.leaf(f, true);
  const ad::Var y = train::apply_mask(x, m);
  g.backward(ad::sum(y * y));
  const Tensor grad = g.grad(x);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < 16; ++p)
      if (m.values[p] == 0.0) CHECK(grad[c * 16 + p] == 0.0);
  const ad::ScalarFn fn = [&](ad::Tape&, const ad::Var& th) {
    const ad::Var v = train::apply_mask(ad::reshape(th, {3, 4, 4}), m);
    return ad::sum(ad::sigmoid(v) * v);
  };
  CHECK(ad::finite_diff_check(fn, f.reshaped({48}), 1e-6) <= 1e-4);
}

TEST_CASE("mask persistence through reserved weight entries") {
  net::ModelWeights w;
  w.add("x", Tensor(Shape{1}, 1.0));
  const auto m = train::generate_mask(8, 6, 0.3, 0x1234'5678'9ABC'DEF0ull);
  train::store_mask(w, m);
  CHECK(w.contains(train::kMaskName));
  const auto back = train::take_mask(w);
  REQUIRE(back.has_value());
  CHECK(back->values.vec() == m.values.vec());
  CHECK(back->seed == m.seed);
  CHECK(back->digest() == m.digest());
  CHECK_FALSE(w.contains(train::kMaskName));
  CHECK_FALSE(w.contains(train::kMaskMetaName));
  CHECK_FALSE(train::take_mask(w).has_value());
}

TEST_CASE("learning-rate schedule") {
  train::TrainConfig tc;
  tc.learning_rate = 0.1;
  tc.steps = 11;
  tc.min_lr_fraction = 0.1;
  CHECK(tc.rate_at(0) == doctest::Approx(0.1));
  CHECK(tc.rate_at(5) == doctest::Approx(0.055));
  CHECK(tc.rate_at(10) == doctest::Approx(0.01));
  for (std::size_t k = 1; k < 11; ++k) CHECK(tc.rate_at(k) <= tc.rate_at(k - 1));
  tc.zero_ratio = 1.0;
  CHECK_THROWS(tc.validate());
}

TEST_CASE("zero learning rate leaves weights unchanged") {
  const auto data = one_sample(2);
  const auto cfg = tiny();
  auto w = hqs::init_model(cfg, 2, 3);
  const auto before = w;
  train::TrainConfig tc;
  tc.learning_rate = 0.0;
  const auto r = train::train_step(data, w, cfg, tc, 0);
  CHECK(w == before);
  CHECK(r.loss > 0.0);
  CHECK(r.grad_norm > 0.0);
}

TEST_CASE("steps are bit-reproducible and reduce the loss") {
  const auto data = one_sample(4);
  const auto cfg = tiny();
  train::TrainConfig tc;
  tc.learning_rate = 0.05;
  tc.steps = 6;
  auto run = [&] {
    train::Trainer tr(cfg, tc, hqs::init_model(cfg, 2, 5), true);
    std::vector<double> losses;
    for (const auto& r : tr.run(data)) losses.push_back(r.loss);
    return std::make_pair(losses, tr.weights().flatten().vec());
  };
  const auto a = run(), b = run();
  CHECK(a == b);
  CHECK(a.first.back() < a.first.front());
}

TEST_CASE("the same mask is used at every step and at evaluation") {
  const auto data = one_sample(6);
  const auto cfg = tiny();
  train::TrainConfig tc;
  tc.steps = 3;
  tc.zero_ratio = 0.5;
  tc.mask_seed = 77;
  train::Trainer tr(cfg, tc, hqs::init_model(cfg, 2, 7), true);
  tr.run(data);
  REQUIRE(tr.mask_digests().size() == 3);
  for (const auto& d : tr.mask_digests()) CHECK(d == tr.mask_digests().front());
  CHECK(tr.mask()->digest() == train::generate_mask(8, 8, 0.5, 77).digest());

  tc.resample_mask = true;
  train::Trainer rs(cfg, tc, hqs::init_model(cfg, 2, 7), true);
  rs.run(data);
  CHECK(rs.mask_digests()[0] != rs.mask_digests()[1]);
}

TEST_CASE("unmasked training path is the plain model") {
  const auto data = one_sample(8);
  const auto cfg = tiny();
  train::TrainConfig tc;
  tc.steps = 2;
  train::Trainer off(cfg, tc, hqs::init_model(cfg, 2, 9), false);
  auto w = hqs::init_model(cfg, 2, 9);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto r = off.step(data);
    CHECK(r.loss == train::train_step(data, w, cfg, tc, k).loss);
    CHECK(r.mask_digest.empty());
  }
  CHECK(off.weights() == w);
}

TEST_CASE("non-finite loss aborts with a diagnostic") {
  auto data = one_sample(10);
  const auto cfg = tiny();
  auto w = hqs::init_model(cfg, 2, 11);
  w.get("den.out.w")[0] = 1e308;
  const auto before = w;
  train::TrainConfig tc;
  try {
    train::train_step(data, w, cfg, tc, 0);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("non-finite") != std::string::npos);
    CHECK(msg.find("first non-finite tensor") != std::string::npos);
  }
  CHECK(w == before);
}

TEST_CASE("shot noise option is seeded") {
  const auto data = one_sample(12);
  const auto cfg = tiny();
  const auto w = hqs::init_model(cfg, 2, 13);
  const double a = train::evaluate_loss(data, w, cfg, nullptr, 11, 5);
  CHECK(a == train::evaluate_loss(data, w, cfg, nullptr, 11, 5));
  CHECK(a != train::evaluate_loss(data, w, cfg, nullptr, 0, 5));
}

}
