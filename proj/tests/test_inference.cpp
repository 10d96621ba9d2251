#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "ecm/inference.hpp"
#include "ecm/rng.hpp"

using namespace ecm;

namespace {

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.dim = 32;
  cfg.heads = 2;
  cfg.vocab = 16;
  cfg.num_classes = 3;
  cfg.schedule = ScaleSchedule({1, 2, 3});
  return cfg;
}

ControlEncoderConfig small_encoder(const ModelConfig& base) {
  ControlEncoderConfig enc;
  enc.image_side = 12;
  enc.patch = 4;
  enc.depth = 1;
  enc.dim = base.dim;
  enc.heads = base.heads;
  return enc;
}

}  // namespace

TEST_CASE("temperature schedule endpoints and shape") {
  // last scale hits t_low exactly
  CHECK(temperature_at(10, 10, 1.0, 0.8) == doctest::Approx(0.8).epsilon(1e-15));
  // equal endpoints give a constant schedule
  for (int s = 1; s <= 10; ++s) CHECK(temperature_at(s, 10, 0.9, 0.9) == 0.9);
  // midpoint of the canny setting: 0.9 + (0.8-0.9)*(1/2)^2 = 0.875
  CHECK(temperature_at(5, 10, 0.9, 0.8) == doctest::Approx(0.875).epsilon(1e-12));
  // non-increasing when t_low < t_high
  double prev = 1e9;
  for (int s = 1; s <= 10; ++s) {
    const double t = temperature_at(s, 10, 1.0, 0.7);
    CHECK(t <= prev);
    prev = t;
  }
  CHECK_THROWS_AS(temperature_at(0, 10, 1.0, 0.8), TensorError);
  CHECK_THROWS_AS(temperature_at(11, 10, 1.0, 0.8), TensorError);
}

TEST_CASE("classifier-free guidance identities") {
  Rng rng(3);
  Tensor cond({4, 5}), uncond({4, 5});
  for (int64_t i = 0; i < cond.numel(); ++i) {
    cond.data()[i] = rng.normal();
    uncond.data()[i] = rng.normal();
  }
  Tensor zero = apply_cfg(cond, uncond, 0.0);
  Tensor one = apply_cfg(cond, uncond, 1.0);
  Tensor three = apply_cfg(cond, uncond, 3.0);
  for (int64_t i = 0; i < cond.numel(); ++i) {
    CHECK(zero.data()[i] == uncond.data()[i]);  // g = 0 ignores the condition
    CHECK(one.data()[i] == doctest::Approx(cond.data()[i]).epsilon(1e-15));
    // affine in g: uncond + g*(cond - uncond)
    const double expect = uncond.data()[i] + 3.0 * (cond.data()[i] - uncond.data()[i]);
    CHECK(three.data()[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  Tensor bad({3, 5});
  CHECK_THROWS_AS(apply_cfg(cond, bad, 1.0), TensorError);
}

TEST_CASE("top-k/top-p filter: hand-worked case") {
  // keep top-3 {0.5,0.3,0.15}, then the mass prefix reaching 0.8 is {0.5,0.3}
  const std::vector<double> out = filter_top_k_top_p({0.5, 0.3, 0.15, 0.05}, 3, 0.8);
  REQUIRE(out.size() == 4);
  CHECK(out[0] == doctest::Approx(0.625).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.375).epsilon(1e-12));
  CHECK(out[2] == 0.0);
  CHECK(out[3] == 0.0);
}

TEST_CASE("top-k/top-p filter: degenerate and identity settings") {
  const std::vector<double> probs = {0.1, 0.4, 0.2, 0.3};
  // k = 1 keeps only the argmax
  const std::vector<double> one = filter_top_k_top_p(probs, 1, 1.0);
  CHECK(one[1] == 1.0);
  CHECK(one[0] + one[2] + one[3] == 0.0);
  // k = V, p = 1 is the identity
  const std::vector<double> all = filter_top_k_top_p(probs, 4, 1.0);
  for (size_t i = 0; i < probs.size(); ++i) CHECK(all[i] == doctest::Approx(probs[i]).epsilon(1e-12));
  // ties resolve toward the lower index; the renormalized pair {0.5,0.5}
  // again exceeds p = 0.5 at its head, so the fixed point keeps index 0 alone
  const std::vector<double> tied = filter_top_k_top_p({0.25, 0.25, 0.25, 0.25}, 4, 0.5);
  CHECK(tied[0] == 1.0);
  CHECK(tied[1] + tied[2] + tied[3] == 0.0);

  CHECK_THROWS_AS(filter_top_k_top_p(probs, 0, 0.9), TensorError);
  CHECK_THROWS_AS(filter_top_k_top_p(probs, 2, 0.0), TensorError);
  CHECK_THROWS_AS(filter_top_k_top_p(probs, 2, 1.5), TensorError);
}

TEST_CASE("top-k/top-p filter is idempotent, including renormalization traps") {
  // after one naive pass {0.6,0.2} renormalizes to {0.75,0.25}; 0.75 > p=0.7
  // would then shrink the support again, so the filter must reach a fixed point
  std::vector<std::vector<double>> cases = {
      {0.6, 0.2, 0.1, 0.1},
      {0.5, 0.3, 0.15, 0.05},
      {0.25, 0.25, 0.25, 0.25},
      {0.4, 0.35, 0.15, 0.1},
  };
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> probs(8);
    double total = 0.0;
    for (double& x : probs) {
      x = rng.uniform01();
      total += x;
    }
    for (double& x : probs) x /= total;
    cases.push_back(probs);
  }
  for (const auto& probs : cases)
    for (int k : {1, 2, 3, 4})
      for (double p : {0.3, 0.5, 0.7, 0.9, 1.0}) {
        const std::vector<double> once = filter_top_k_top_p(probs, k, p);
        const std::vector<double> twice = filter_top_k_top_p(once, k, p);
        REQUIRE(once.size() == probs.size());
        double mass = 0.0;
        for (size_t i = 0; i < once.size(); ++i) {
          CHECK(once[i] == twice[i]);  // bitwise fixed point
          mass += once[i];
        }
        CHECK(mass == doctest::Approx(1.0).epsilon(1e-12));
      }
}

TEST_CASE("scale sampling: temperature limit and determinism") {
  ModelConfig cfg = small_config();
  Rng rng(11);
  Tensor logits({4, cfg.vocab});
  for (int64_t i = 0; i < logits.numel(); ++i) logits.data()[i] = rng.normal();

  SamplerConfig sampler;
  sampler.top_k = cfg.vocab;
  sampler.top_p = 1.0;
  sampler.t_high = 1e-6;  // near-zero temperature: argmax per row
  sampler.t_low = 1e-6;
  Rng draw(12);
  const std::vector<int> tokens = sample_scale(logits, 1, 3, sampler, draw);
  REQUIRE(tokens.size() == 4);
  for (int r = 0; r < 4; ++r) {
    int argmax = 0;
    for (int v = 1; v < cfg.vocab; ++v)
      if (logits.data()[r * cfg.vocab + v] > logits.data()[r * cfg.vocab + argmax]) argmax = v;
    CHECK(tokens[static_cast<size_t>(r)] == argmax);
  }

  sampler.t_high = 1.0;
  sampler.t_low = 0.8;
  Rng a(99), b(99);
  double ent_a = 0.0, ent_b = 0.0;
  CHECK(sample_scale(logits, 2, 3, sampler, a, &ent_a) ==
        sample_scale(logits, 2, 3, sampler, b, &ent_b));
  CHECK(ent_a == ent_b);
  CHECK(ent_a >= 0.0);
  CHECK(ent_a <= std::log(static_cast<double>(cfg.vocab)));
}

TEST_CASE("categorical draws match filtered probabilities within 3 sigma") {
  const std::vector<double> raw = {2.0, 1.0, 0.5, 0.0, -1.0};
  Tensor logits({1, 5});
  for (int v = 0; v < 5; ++v) logits.data()[v] = raw[static_cast<size_t>(v)];
  SamplerConfig sampler;
  sampler.top_k = 4;
  sampler.top_p = 0.95;
  sampler.t_high = 1.0;
  sampler.t_low = 1.0;

  // reference distribution: softmax at T=1, then the same filter
  std::vector<double> probs(5);
  double z = 0.0;
  for (double x : raw) z += std::exp(x);
  for (int v = 0; v < 5; ++v) probs[static_cast<size_t>(v)] = std::exp(raw[static_cast<size_t>(v)]) / z;
  const std::vector<double> expect = filter_top_k_top_p(probs, sampler.top_k, sampler.top_p);

  const int draws = 100000;
  std::vector<int64_t> counts(5, 0);
  Rng rng(21);
  for (int i = 0; i < draws; ++i) ++counts[static_cast<size_t>(sample_scale(logits, 1, 3, sampler, rng)[0])];
  for (int v = 0; v < 5; ++v) {
    const double e = expect[static_cast<size_t>(v)];
    if (e == 0.0) {
      CHECK(counts[static_cast<size_t>(v)] == 0);
    } else {
      const double sigma = std::sqrt(draws * e * (1.0 - e));
      CHECK(std::fabs(counts[static_cast<size_t>(v)] - draws * e) < 3.0 * sigma);
    }
  }
}

TEST_CASE("generation: zero-signal control stack reproduces base tokens bit-identically") {
  ModelConfig cfg = small_config();
  BaseParameters base = BaseParameters::init(cfg, 31);
  base.freeze();
  AdapterStack stack = init_adapter_from_base(base, {1, 2}, 1, 2, small_encoder(cfg),
                                              GateInitConfig{}, 32);
  Tensor condition({12, 12});
  Rng crng(33);
  for (int64_t i = 0; i < condition.numel(); ++i) condition.data()[i] = crng.uniform01();
  ControlFeatures features = encode_condition(condition, stack.encoder, cfg.schedule);

  SamplerConfig sampler;
  sampler.top_k = 8;
  sampler.top_p = 0.9;
  sampler.cfg_strength = 1.0;  // pure conditional branch
  sampler.seed = 77;

  GenerationTrace base_trace, ctrl_trace;
  const MultiScaleTokens plain = generate(base, nullptr, 1, nullptr, sampler, &base_trace);
  const MultiScaleTokens controlled = generate(base, &stack, 1, &features, sampler, &ctrl_trace);
  REQUIRE(plain.maps.size() == controlled.maps.size());
  for (size_t k = 0; k < plain.maps.size(); ++k) CHECK(plain.maps[k] == controlled.maps[k]);
  CHECK(base_trace.temperature == ctrl_trace.temperature);
  CHECK(base_trace.mean_entropy == ctrl_trace.mean_entropy);
  REQUIRE(base_trace.temperature.size() == 3);
  CHECK(base_trace.temperature[2] == doctest::Approx(sampler.t_low).epsilon(1e-15));
}

TEST_CASE("generation: seeds are reproducible and distinct") {
  ModelConfig cfg = small_config();
  BaseParameters base = BaseParameters::init(cfg, 41);
  base.freeze();
  SamplerConfig sampler;
  sampler.top_k = cfg.vocab;
  sampler.top_p = 1.0;
  sampler.seed = 5;
  const MultiScaleTokens a = generate(base, nullptr, 0, nullptr, sampler);
  const MultiScaleTokens b = generate(base, nullptr, 0, nullptr, sampler);
  for (size_t k = 0; k < a.maps.size(); ++k) CHECK(a.maps[k] == b.maps[k]);

  sampler.seed = 6;
  const MultiScaleTokens c = generate(base, nullptr, 0, nullptr, sampler);
  bool differs = false;
  for (size_t k = 0; k < a.maps.size(); ++k) differs = differs || a.maps[k] != c.maps[k];
  CHECK(differs);
}

TEST_CASE("generation respects the scale schedule shape") {
  ModelConfig cfg = small_config();
  BaseParameters base = BaseParameters::init(cfg, 51);
  base.freeze();
  SamplerConfig sampler;
  sampler.top_k = cfg.vocab;
  sampler.seed = 9;
  const MultiScaleTokens tokens = generate(base, nullptr, 2, nullptr, sampler);
  REQUIRE(static_cast<int>(tokens.maps.size()) == cfg.schedule.num_scales());
  for (int k = 0; k < cfg.schedule.num_scales(); ++k) {
    CHECK(static_cast<int>(tokens.maps[static_cast<size_t>(k)].size()) == cfg.schedule.tokens_at(k));
    for (int v : tokens.maps[static_cast<size_t>(k)]) {
      CHECK(v >= 0);
      CHECK(v < cfg.vocab);
    }
  }
}
