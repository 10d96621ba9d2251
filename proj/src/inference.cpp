#include "ecm/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ecm {

double temperature_at(int s, int s_count, double t_high, double t_low) {
  if (s < 1 || s > s_count) throw TensorError("temperature_at: scale index out of range");
  const double r = static_cast<double>(s) / s_count;
  return t_high + (t_low - t_high) * r * r;
}

Tensor apply_cfg(const Tensor& cond_logits, const Tensor& uncond_logits, double strength) {
  if (cond_logits.shape() != uncond_logits.shape())
    throw TensorError("apply_cfg: logits shape mismatch");
  Tensor out(cond_logits.shape());
  // g = 0 and g = 1 are exact identities; the blended form would differ in
  // the last bits through the add/subtract round trip.
  if (strength == 0.0) {
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = uncond_logits.data()[i];
  } else if (strength == 1.0) {
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] = cond_logits.data()[i];
  } else {
    for (int64_t i = 0; i < out.numel(); ++i)
      out.data()[i] =
          uncond_logits.data()[i] + strength * (cond_logits.data()[i] - uncond_logits.data()[i]);
  }
  return out;
}

namespace {

// One top-k + nucleus pass: marks the kept entries, leaves values untouched.
// Zero-probability entries are never kept.
std::vector<char> filter_mask(const std::vector<double>& probs, int k, double p) {
  const int v = static_cast<int>(probs.size());
  std::vector<int> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)])
      return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
    return a < b;  // ties toward the lower token index
  });
  std::vector<char> keep(probs.size(), 0);
  double mass = 0.0;
  for (int i = 0; i < std::min(k, v); ++i) {
    const int idx = order[static_cast<size_t>(i)];
    if (probs[static_cast<size_t>(idx)] <= 0.0) break;
    keep[static_cast<size_t>(idx)] = 1;
    mass += probs[static_cast<size_t>(idx)];
    if (mass >= p) break;  // smallest prefix reaching the nucleus mass
  }
  if (mass <= 0.0) keep[static_cast<size_t>(order[0])] = 1;  // top-1 is always kept
  return keep;
}

}  // namespace

std::vector<double> filter_top_k_top_p(const std::vector<double>& probs, int k, double p) {
  const int v = static_cast<int>(probs.size());
  if (k < 1 || k > v) throw TensorError("filter_top_k_top_p: bad k");
  if (!(p > 0.0 && p <= 1.0)) throw TensorError("filter_top_k_top_p: bad p");
  // Renormalizing can push the new head past the mass threshold, so a single
  // cut is not a fixed point in general. Repeat until the pass cuts nothing;
  // the support shrinks every extra round and never drops below one entry.
  // When nothing is cut the input is returned bit-identically, which makes
  // the whole filter exactly idempotent.
  std::vector<double> out = probs;
  while (true) {
    const std::vector<char> keep = filter_mask(out, k, p);
    bool stable = true;
    double mass = 0.0;
    for (size_t i = 0; i < out.size(); ++i) {
      if (keep[i]) {
        mass += out[i];
      } else if (out[i] > 0.0) {
        stable = false;
      }
    }
    if (mass <= 0.0) {  // degenerate input: put all mass on the kept top-1
      for (size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? 1.0 : 0.0;
      return out;
    }
    if (stable) return out;
    for (size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? out[i] / mass : 0.0;
  }
}

std::vector<int> sample_scale(const Tensor& logits, int s, int s_count,
                              const SamplerConfig& sampler, Rng& rng, double* mean_entropy) {
  if (logits.rank() != 2) throw TensorError("sample_scale: logits must be [n x V]");
  const int n = logits.dim(0), v = logits.dim(1);
  sampler.validate(v);
  const double temp = temperature_at(s, s_count, sampler.t_high, sampler.t_low);
  std::vector<int> out(static_cast<size_t>(n));
  double entropy_sum = 0.0;
  std::vector<double> probs(static_cast<size_t>(v));
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<int64_t>(i) * v;
    double mx = row[0] / temp;
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j] / temp);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) {
      probs[static_cast<size_t>(j)] = std::exp(row[j] / temp - mx);
      sum += probs[static_cast<size_t>(j)];
    }
    for (double& x : probs) x /= sum;
    const std::vector<double> filtered = filter_top_k_top_p(probs, sampler.top_k, sampler.top_p);
    if (mean_entropy) {
      double h = 0.0;
      for (double q : filtered)
        if (q > 0.0) h -= q * std::log(q);
      entropy_sum += h;
    }
    const double u = rng.uniform01();
    double acc = 0.0;
    int pick = v - 1;
    for (int j = 0; j < v; ++j) {
      acc += filtered[static_cast<size_t>(j)];
      if (u < acc) {
        pick = j;
        break;
      }
    }
    out[static_cast<size_t>(i)] = pick;
  }
  if (mean_entropy) *mean_entropy = entropy_sum / n;
  return out;
}

MultiScaleTokens generate(const BaseParameters& base, const AdapterStack* stack, int class_id,
                          const ControlFeatures* features, const SamplerConfig& sampler,
                          GenerationTrace* trace, int ablate_scale) {
  const ScaleSchedule& sched = base.cfg.schedule;
  const int s_count = sched.num_scales();
  const int total = sched.total_tokens();
  sampler.validate(base.cfg.vocab);
  if (stack && !features) throw TensorError("generate: stack given without control features");

  ControlFeatures cond_features;
  ControlFeatures zero_features;
  if (stack) {
    cond_features = *features;
    if (ablate_scale >= 1) {
      if (ablate_scale > s_count) throw TensorError("generate: ablate_scale out of range");
      cond_features.per_scale[static_cast<size_t>(ablate_scale - 1)] =
          Tensor(cond_features.per_scale[static_cast<size_t>(ablate_scale - 1)].shape());
    }
    zero_features = ControlFeatures::zeros(sched, base.cfg.dim);
  }

  const std::vector<uint8_t> mask = build_block_causal_mask(sched);
  const std::vector<int> cum = sched.cumulative();
  Rng rng(sampler.seed);
  MultiScaleTokens tokens;
  for (int k = 0; k < s_count; ++k) {
    const int prefix = cum[static_cast<size_t>(k)];
    const int n_k = sched.tokens_at(k);
    Tensor inputs = build_scale_inputs(base, tokens, class_id, k + 1);
    Tensor bias = mask_bias(mask, total, prefix);

    Tensor cond = stack
                      ? controlled_forward(base, *stack, inputs, bias, class_id, cond_features, k + 1)
                      : forward_logits(base, inputs, bias, class_id);
    Tensor mixed;
    if (sampler.cfg_strength == 1.0) {
      mixed = cond;
    } else {
      const int null_cls = base.cfg.null_class();
      Tensor uncond_inputs = build_scale_inputs(base, tokens, null_cls, k + 1);
      Tensor uncond = stack ? controlled_forward(base, *stack, uncond_inputs, bias, null_cls,
                                                 zero_features, k + 1)
                            : forward_logits(base, uncond_inputs, bias, null_cls);
      mixed = apply_cfg(cond, uncond, sampler.cfg_strength);
    }
    Tensor scale_logits = slice_rows(mixed, prefix - n_k, prefix);
    double entropy = 0.0;
    std::vector<int> map = sample_scale(scale_logits, k + 1, s_count, sampler, rng, &entropy);
    tokens.maps.push_back(std::move(map));
    if (trace) {
      trace->temperature.push_back(temperature_at(k + 1, s_count, sampler.t_high, sampler.t_low));
      trace->mean_entropy.push_back(entropy);
    }
  }
  return tokens;
}

}  // namespace ecm
