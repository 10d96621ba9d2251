#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ecm/rng.hpp"
#include "ecm/var_core.hpp"

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

MultiScaleTokens random_tokens(const ScaleSchedule& sched, int vocab, uint64_t seed) {
  Rng rng(seed);
  MultiScaleTokens t;
  for (int k = 0; k < sched.num_scales(); ++k) {
    std::vector<int> map(static_cast<size_t>(sched.tokens_at(k)));
    for (int& x : map) x = rng.uniform_int(vocab);
    t.maps.push_back(std::move(map));
  }
  return t;
}

}  // namespace

TEST_CASE("block-causal mask structure") {
  const std::vector<uint8_t> single = build_block_causal_mask(ScaleSchedule({1}));
  REQUIRE(single.size() == 1);
  CHECK(single[0] == 1);

  ScaleSchedule sched({1, 2});
  const std::vector<uint8_t> mask = build_block_causal_mask(sched);
  REQUIRE(mask.size() == 25);
  int allowed = 0;
  for (uint8_t m : mask) allowed += m;
  CHECK(allowed == 21);  // 1 + 4*5: scale-1 sees itself, each scale-2 sees all 5
  // no position attends to a strictly later scale
  for (int j = 1; j < 5; ++j) CHECK(mask[static_cast<size_t>(0 * 5 + j)] == 0);
}

TEST_CASE("mask full within own scale") {
  ScaleSchedule sched({1, 2, 3});
  const int total = sched.total_tokens();
  const std::vector<uint8_t> mask = build_block_causal_mask(sched);
  for (int i = 0; i < total; ++i)
    for (int j = 0; j < total; ++j) {
      const bool expect = sched.scale_of_position(j) <= sched.scale_of_position(i);
      CHECK(static_cast<bool>(mask[static_cast<size_t>(i * total + j)]) == expect);
    }
}

TEST_CASE("scale inputs: class row, constant scale-2 rows, class range check") {
  ModelConfig cfg = small_config();
  cfg.schedule = ScaleSchedule({1, 2});
  BaseParameters p = BaseParameters::init(cfg, 3);
  MultiScaleTokens tokens = random_tokens(cfg.schedule, cfg.vocab, 4);

  Tensor inputs = build_scale_inputs(p, tokens, 1);
  // position 0 carries exactly class embedding + position/scale embeddings
  for (int d = 0; d < cfg.dim; ++d) {
    const double expect = p.cls_emb.data()[1 * cfg.dim + d] + p.pos_emb.data()[d] +
                          p.scale_emb.data()[d];
    CHECK(inputs.data()[d] == doctest::Approx(expect).epsilon(1e-12));
  }
  // scale-2 rows differ only by position embedding (1x1 upsample is constant)
  for (int r = 1; r <= 4; ++r)
    for (int d = 0; d < cfg.dim; ++d) {
      const double depos = inputs.data()[r * cfg.dim + d] - p.pos_emb.data()[r * cfg.dim + d];
      const double first = inputs.data()[1 * cfg.dim + d] - p.pos_emb.data()[1 * cfg.dim + d];
      CHECK(depos == doctest::Approx(first).epsilon(1e-12));
    }
  // different class ids change only through class-dependent channels at scale 1
  Tensor other = build_scale_inputs(p, tokens, 2);
  for (int64_t i = cfg.dim; i < inputs.numel(); ++i)
    CHECK(inputs.data()[i] == other.data()[i]);

  CHECK_THROWS_AS(build_scale_inputs(p, tokens, cfg.num_classes + 1), TensorError);
  CHECK_THROWS_AS(build_scale_inputs(p, tokens, -1), TensorError);
}

TEST_CASE("zero output head gives uniform logits") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 5);
  for (int64_t i = 0; i < p.head_w.numel(); ++i) p.head_w.data()[i] = 0.0;
  for (int64_t i = 0; i < p.head_b.numel(); ++i) p.head_b.data()[i] = 0.0;
  MultiScaleTokens tokens = random_tokens(cfg.schedule, cfg.vocab, 6);
  const int total = cfg.schedule.total_tokens();
  Tensor inputs = build_scale_inputs(p, tokens, 0);
  Tensor bias = mask_bias(build_block_causal_mask(cfg.schedule), total, total);
  Tensor logits = forward_logits(p, inputs, bias, 0);
  for (int i = 0; i < total; ++i)
    for (int v = 1; v < cfg.vocab; ++v)
      CHECK(logits.data()[i * cfg.vocab + v] == doctest::Approx(logits.data()[i * cfg.vocab]));
}

TEST_CASE("causality: later-scale token perturbation leaves earlier logits bit-identical") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 7);
  const int total = cfg.schedule.total_tokens();
  const std::vector<uint8_t> mask = build_block_causal_mask(cfg.schedule);
  Tensor bias = mask_bias(mask, total, total);
  const std::vector<int> cum = cfg.schedule.cumulative();
  for (uint64_t seed = 1; seed <= 32; ++seed) {
    Rng rng(seed);
    MultiScaleTokens tokens = random_tokens(cfg.schedule, cfg.vocab, seed * 1000);
    Tensor base_logits =
        forward_logits(p, build_scale_inputs(p, tokens, 1), bias, 1);
    MultiScaleTokens perturbed = tokens;
    // flip one token in the last scale
    const int pos = rng.uniform_int(cfg.schedule.tokens_at(2));
    perturbed.maps[2][static_cast<size_t>(pos)] =
        (perturbed.maps[2][static_cast<size_t>(pos)] + 1 + rng.uniform_int(cfg.vocab - 1)) % cfg.vocab;
    Tensor new_logits = forward_logits(p, build_scale_inputs(p, perturbed, 1), bias, 1);
    for (int i = 0; i < cum[1]; ++i)  // scales 1..2 predict before seeing scale 3
      for (int v = 0; v < cfg.vocab; ++v)
        CHECK(base_logits.data()[i * cfg.vocab + v] == new_logits.data()[i * cfg.vocab + v]);
  }
}

TEST_CASE("no hook equals hook with zero signal, bit-identical") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 9);
  MultiScaleTokens tokens = random_tokens(cfg.schedule, cfg.vocab, 10);
  const int total = cfg.schedule.total_tokens();
  Tensor inputs = build_scale_inputs(p, tokens, 2);
  Tensor bias = mask_bias(build_block_causal_mask(cfg.schedule), total, total);
  Tensor plain = forward_logits(p, inputs, bias, 2);
  AdapterHook zero_hook = [&](const Tensor& hidden, int) { return Tensor(hidden.shape()); };
  Tensor hooked = forward_logits(p, inputs, bias, 2, zero_hook);
  for (int64_t i = 0; i < plain.numel(); ++i) CHECK(plain.data()[i] == hooked.data()[i]);
}

TEST_CASE("permuting within-scale positions with their embeddings permutes logits") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 21);
  MultiScaleTokens tokens = random_tokens(cfg.schedule, cfg.vocab, 22);
  const int total = cfg.schedule.total_tokens();
  Tensor inputs = build_scale_inputs(p, tokens, 0);
  Tensor bias = mask_bias(build_block_causal_mask(cfg.schedule), total, total);
  Tensor logits = forward_logits(p, inputs, bias, 0);

  // swap two scale-3 rows (positions 5 and 7); mask treats them identically
  Tensor swapped(inputs.shape());
  swapped.vec() = inputs.vec();
  for (int d = 0; d < cfg.dim; ++d)
    std::swap(swapped.data()[5 * cfg.dim + d], swapped.data()[7 * cfg.dim + d]);
  Tensor logits2 = forward_logits(p, swapped, bias, 0);
  for (int v = 0; v < cfg.vocab; ++v) {
    CHECK(logits2.data()[5 * cfg.vocab + v] == doctest::Approx(logits.data()[7 * cfg.vocab + v]));
    CHECK(logits2.data()[7 * cfg.vocab + v] == doctest::Approx(logits.data()[5 * cfg.vocab + v]));
  }
}

TEST_CASE("pretrain: initial loss near ln V, overfit decreases, lr 0 freezes values") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 11);
  std::vector<PretrainSample> batch = {
      PretrainSample{random_tokens(cfg.schedule, cfg.vocab, 12), 1}};

  AdamW opt(1e-3, 0.05);
  const double first = pretrain_step(p, batch, opt);
  CHECK(first == doctest::Approx(std::log(cfg.vocab)).epsilon(0.05));
  double last = first;
  for (int i = 0; i < 99; ++i) last = pretrain_step(p, batch, opt);
  CHECK(last < 0.5 * first);  // single repeated sample is memorized
  CHECK(token_accuracy(p, batch) > 0.9);

  BaseParameters q = BaseParameters::init(cfg, 13);
  const std::vector<double> before = q.head_w.vec();
  AdamW frozen_lr(0.0, 0.05);
  pretrain_step(q, batch, frozen_lr);
  CHECK(q.head_w.vec() == before);
  CHECK(frozen_lr.steps() == 1);  // optimizer state still advances

  q.freeze();
  CHECK_THROWS_AS(pretrain_step(q, batch, frozen_lr), TensorError);
}

TEST_CASE("flops estimator: zero overhead, affine in adapters, quadratic in dim") {
  ModelConfig cfg = small_config();
  const FlopsEstimate none = count_flops(cfg, 0);
  CHECK(none.adapter_overhead_full() == 0.0);
  CHECK(none.adapter_overhead_first() == 0.0);
  CHECK(none.full_base > 0.0);

  // affine growth with zero intercept: constant per-adapter slope
  double prev = 0.0, slope = 0.0;
  for (int a = 1; a <= 6; ++a) {
    const double overhead = count_flops(cfg, a).adapter_overhead_full();
    if (a == 1) {
      slope = overhead;
    } else {
      CHECK(overhead - prev == doctest::Approx(slope).epsilon(1e-9));
    }
    prev = overhead;
  }
  CHECK(slope > 0.0);

  ModelConfig wide = cfg;
  wide.dim = cfg.dim * 2;
  const double ratio = count_flops(wide, 0).full_base / none.full_base;
  CHECK(ratio > 3.0);
  CHECK(ratio < 4.5);
}

TEST_CASE("frozen base keeps values bit-identical through freeze flag") {
  ModelConfig cfg = small_config();
  BaseParameters p = BaseParameters::init(cfg, 15);
  p.freeze();
  CHECK(p.frozen());
  for (auto& [name, t] : p.named()) CHECK_FALSE(t.requires_grad());
}
