#include "ecm/training.hpp"

#include <cmath>

namespace ecm {

int sample_truncation_scale(const TruncationLaw& law, Rng& rng) {
  law.validate();
  const int s_count = law.schedule.num_scales();
  const double u = rng.uniform();  // (0, 1]
  if (law.alpha == 0.0) return s_count;
  const double x = s_count * std::pow(u, law.alpha);
  int s = static_cast<int>(std::ceil(x));
  if (s < 1) s = 1;
  if (s > s_count) s = s_count;
  return s;
}

double truncation_pmf(const TruncationLaw& law, int k) {
  law.validate();
  const int s_count = law.schedule.num_scales();
  if (k < 1 || k > s_count) throw TensorError("truncation_pmf: scale out of range");
  if (law.alpha == 0.0) return k == s_count ? 1.0 : 0.0;
  const double inv = 1.0 / law.alpha;
  const double hi = std::pow(static_cast<double>(k) / s_count, inv);
  const double lo = std::pow(static_cast<double>(k - 1) / s_count, inv);
  return hi - lo;
}

double expected_token_count(const TruncationLaw& law) {
  law.validate();
  const std::vector<int> cum = law.schedule.cumulative();
  if (law.alpha == 0.0) return static_cast<double>(cum.back());
  double e = 0.0;
  for (int k = 1; k <= law.schedule.num_scales(); ++k)
    e += cum[static_cast<size_t>(k - 1)] * truncation_pmf(law, k);
  return e;
}

ControlStepStats control_train_step(const BaseParameters& base, AdapterStack& stack,
                                    const std::vector<ControlSample>& batch,
                                    const TruncationLaw& law, const TrainConfig& cfg, AdamW& opt,
                                    Rng& rng) {
  if (!base.frozen()) throw TensorError("control_train_step: base must be frozen");
  if (batch.empty()) throw TensorError("control_train_step: empty batch");
  cfg.validate();

  const ScaleSchedule& sched = base.cfg.schedule;
  const int total = sched.total_tokens();
  const std::vector<uint8_t> mask = build_block_causal_mask(sched);
  const std::vector<int> cum = sched.cumulative();

  std::vector<Tensor> params = stack.trainable();
  for (Tensor& t : params) t.zero_grad();

  ControlStepStats stats;
  Tape tape;
  Tensor weighted;  // sum of (per-sample mean nll) * tokens_i
  for (const ControlSample& sample : batch) {
    const int s = sample_truncation_scale(law, rng);
    const bool drop_class = rng.uniform01() < cfg.cfg_dropout;
    const bool drop_control = rng.uniform01() < cfg.cfg_dropout;
    const int prefix = cum[static_cast<size_t>(s - 1)];
    const int class_id = drop_class ? base.cfg.null_class() : sample.class_id;

    ControlFeatures features =
        drop_control ? ControlFeatures::zeros(sched, base.cfg.dim)
                     : encode_condition(sample.condition, stack.encoder, sched);
    Tensor inputs = build_scale_inputs(base, sample.tokens, class_id, s);
    Tensor bias = mask_bias(mask, total, prefix);
    Tensor logits = controlled_forward(base, stack, inputs, bias, class_id, features, s);

    std::vector<int> targets = sample.tokens.flat();
    targets.resize(static_cast<size_t>(prefix));
    Tensor nll = scale(cross_entropy(logits, targets), static_cast<double>(prefix));
    weighted = weighted.defined() ? add(weighted, nll) : nll;
    stats.tokens_processed += prefix;
  }
  Tensor loss = scale(weighted, 1.0 / static_cast<double>(stats.tokens_processed));
  stats.loss = loss.item();
  tape.backward(loss);
  opt.lr = cfg.lr;
  opt.weight_decay = cfg.weight_decay;
  opt.step(params);
  for (Tensor& t : params) t.zero_grad();
  return stats;
}

}  // namespace ecm
