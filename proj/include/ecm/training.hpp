#pragma once

#include <cstdint>
#include <vector>

#include "ecm/adapter.hpp"
#include "ecm/optim.hpp"
#include "ecm/rng.hpp"
#include "ecm/var_core.hpp"

namespace ecm {

// Early-centric truncation: training sequences are cut at scale
// s = ceil(S * u^alpha), u ~ Uniform(0,1]. alpha = 0 keeps the full
// sequence; larger alpha concentrates mass on early scales.
struct TruncationLaw {
  double alpha = 2.0;
  ScaleSchedule schedule = ScaleSchedule::toy();

  void validate() const {
    if (!(alpha >= 0.0)) throw TensorError("TruncationLaw: alpha must be finite and >= 0");
  }
};

// Sampled truncation scale, 1-based in {1..S}.
int sample_truncation_scale(const TruncationLaw& law, Rng& rng);

// P(s = k) under the ceil law: (k/S)^(1/alpha) - ((k-1)/S)^(1/alpha).
double truncation_pmf(const TruncationLaw& law, int k);

// Exact expectation of the cumulative token count at the truncation scale.
double expected_token_count(const TruncationLaw& law);

struct TrainConfig {
  int epochs = 15;
  int batch = 8;
  double lr = 1e-4;
  double weight_decay = 0.05;
  double cfg_dropout = 0.10;
  double alpha = 2.0;

  void validate() const {
    if (cfg_dropout < 0.0 || cfg_dropout >= 1.0)
      throw TensorError("TrainConfig: cfg_dropout must be in [0,1)");
    if (epochs < 1 || batch < 1 || lr < 0.0) throw TensorError("TrainConfig: bad values");
  }
};

struct ControlSample {
  MultiScaleTokens tokens;
  int class_id = 0;
  Tensor condition;  // encoder-side image, image_side x image_side
};

struct ControlStepStats {
  double loss = 0.0;
  int64_t tokens_processed = 0;
};

// One AdamW update of the adapter stack on a truncated, dropout-augmented
// batch. The base stays frozen; only stack parameters move.
ControlStepStats control_train_step(const BaseParameters& base, AdapterStack& stack,
                                    const std::vector<ControlSample>& batch,
                                    const TruncationLaw& law, const TrainConfig& cfg, AdamW& opt,
                                    Rng& rng);

}  // namespace ecm
