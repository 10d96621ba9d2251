#pragma once

#include <cstdint>
#include <vector>

#include "ecm/adapter.hpp"
#include "ecm/rng.hpp"
#include "ecm/var_core.hpp"

namespace ecm {

struct SamplerConfig {
  int top_k = 64;
  double top_p = 0.96;
  double t_high = 1.0;
  double t_low = 0.8;
  double cfg_strength = 3.0;
  uint64_t seed = 0;

  void validate(int vocab) const {
    if (top_k < 1 || top_k > vocab) throw TensorError("SamplerConfig: top_k must be in [1, vocab]");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw TensorError("SamplerConfig: top_p must be in (0,1]");
    if (!(t_high > 0.0 && t_low > 0.0)) throw TensorError("SamplerConfig: temperatures must be positive");
    if (!(cfg_strength >= 0.0)) throw TensorError("SamplerConfig: cfg_strength must be >= 0");
  }
};

// T_s = T_high + (T_low - T_high) * (s/S)^2, s in 1..S.
double temperature_at(int s, int s_count, double t_high, double t_low);

// uncond + g * (cond - uncond), elementwise.
Tensor apply_cfg(const Tensor& cond_logits, const Tensor& uncond_logits, double strength);

// Keep the k most probable entries, then the smallest descending-probability
// prefix whose mass reaches p; renormalize. Ties broken toward lower index.
std::vector<double> filter_top_k_top_p(const std::vector<double>& probs, int k, double p);

// Sample every position of scale `s` (1-based) from its logits row:
// temperature division, softmax, top-k/top-p filter, categorical draw.
// mean_entropy, when non-null, receives the mean entropy (nats) of the
// filtered per-position distributions.
std::vector<int> sample_scale(const Tensor& logits, int s, int s_count,
                              const SamplerConfig& sampler, Rng& rng,
                              double* mean_entropy = nullptr);

struct GenerationTrace {
  std::vector<double> temperature;   // per scale
  std::vector<double> mean_entropy;  // per scale
};

// Scale-by-scale conditional generation. `stack`/`features` may be null for
// plain base generation; the CFG unconditional branch uses the null class and
// zero control features. `ablate_scale`, when >= 1, zeroes the control
// features of that scale (1-based) before decoding.
MultiScaleTokens generate(const BaseParameters& base, const AdapterStack* stack, int class_id,
                          const ControlFeatures* features, const SamplerConfig& sampler,
                          GenerationTrace* trace = nullptr, int ablate_scale = 0);

}  // namespace ecm
