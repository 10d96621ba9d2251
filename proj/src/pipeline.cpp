#include "ecm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "ecm/rng.hpp"

namespace ecm {

namespace {

constexpr int kPatch = 4;

// u64 <-> four 16-bit limbs, each exactly representable as f32.
std::vector<float> u64_limbs(uint64_t v) {
  std::vector<float> out(4);
  for (int i = 0; i < 4; ++i) out[static_cast<size_t>(i)] = static_cast<float>((v >> (16 * i)) & 0xffff);
  return out;
}

uint64_t limbs_u64(const std::vector<float>& limbs) {
  uint64_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint64_t>(static_cast<uint32_t>(limbs[static_cast<size_t>(i)])) << (16 * i);
  return v;
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

DerivedSeeds derive_seeds(uint64_t seed) {
  DerivedSeeds s;
  s.codebook = seed ^ 0xc0deb00c01ULL;
  s.patches = seed ^ 0x9e3779b97f4a7c15ULL;
  s.dataset = seed ^ 0xda7a5e70ULL;
  s.base_init = seed ^ 0xba5e1217ULL;
  s.pretrain = seed ^ 0x93779b90ULL;
  s.adapter = seed ^ 0xada9700cULL;
  s.control = seed ^ 0xc0272010ULL;
  s.eval = seed ^ 0xe7a10ULL;
  return s;
}

TokenizedData build_tokenized_data(const RunConfig& cfg, int count) {
  const DerivedSeeds seeds = derive_seeds(cfg.seed);
  TokenizedData data;
  data.embed = PatchEmbed::orthonormal(kPatch, seeds.patches);
  data.codebook = build_codebook(seeds.codebook, cfg.model.vocab, data.embed.latent_dim());
  data.image_side = cfg.model.schedule.latent_side() * kPatch;
  data.raw = make_dataset(seeds.dataset, count, data.image_side);
  for (const SyntheticSample& s : data.raw) {
    const Tensor latent = data.embed.to_latent(s.image, data.image_side);
    MultiScaleTokens tokens = encode_multiscale(latent, cfg.model.schedule, data.codebook);
    const int class_id = s.class_id % cfg.model.num_classes;
    data.pretrain.push_back(PretrainSample{tokens, class_id});
    data.control.push_back(
        ControlSample{std::move(tokens), class_id, edges_tensor(s.edges, data.image_side)});
  }
  return data;
}

ControlEncoderConfig encoder_config_for(const RunConfig& cfg) {
  ControlEncoderConfig enc;
  enc.image_side = cfg.model.schedule.latent_side() * kPatch;
  enc.patch = kPatch;
  enc.depth = 2;
  enc.dim = cfg.model.dim;
  enc.heads = cfg.model.heads;
  return enc;
}

PretrainResult run_pretrain(BaseParameters& base, const std::vector<PretrainSample>& data,
                            int max_steps, int batch, double lr, double target_accuracy,
                            uint64_t seed, std::ostream* log, int eval_every) {
  if (data.empty() || batch < 1 || max_steps < 1) throw TensorError("run_pretrain: bad arguments");
  AdamW opt(lr, 0.05);
  Rng rng(seed);
  const size_t probe_n = std::min<size_t>(16, data.size());
  const std::vector<PretrainSample> probe(data.begin(), data.begin() + static_cast<long>(probe_n));
  if (log) *log << "step,loss,probe_accuracy\n";
  PretrainResult result;
  for (int step = 1; step <= max_steps; ++step) {
    // Step decay: full rate for the first half, then anneal for memorization.
    const double frac = static_cast<double>(step) / max_steps;
    opt.lr = frac < 0.5 ? lr : (frac < 0.8 ? lr / 3.0 : lr / 10.0);
    std::vector<PretrainSample> minibatch;
    minibatch.reserve(static_cast<size_t>(batch));
    for (int b = 0; b < batch; ++b)
      minibatch.push_back(data[static_cast<size_t>(rng.uniform_int(static_cast<int>(data.size())))]);
    result.final_loss = pretrain_step(base, minibatch, opt);
    result.steps = step;
    if (step % eval_every == 0 || step == max_steps) {
      result.final_accuracy = token_accuracy(base, probe);
      if (log) *log << step << ',' << result.final_loss << ',' << result.final_accuracy << '\n';
      if (result.final_accuracy >= target_accuracy) break;
    }
  }
  return result;
}

std::vector<EpochStats> run_control_training(const BaseParameters& base, AdapterStack& stack,
                                             const std::vector<ControlSample>& data,
                                             const TrainConfig& tcfg, uint64_t seed,
                                             std::ostream* csv) {
  if (data.empty()) throw TensorError("run_control_training: empty dataset");
  AdamW opt(tcfg.lr, tcfg.weight_decay);
  Rng rng(seed);
  const TruncationLaw law{tcfg.alpha, base.cfg.schedule};
  std::vector<int> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  if (csv) *csv << "epoch,mean_loss,tokens,wall_seconds\n";
  std::vector<EpochStats> out;
  for (int epoch = 1; epoch <= tcfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<size_t>(rng.uniform_int(static_cast<int>(i)))]);
    EpochStats stats;
    stats.epoch = epoch;
    double loss_weighted = 0.0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tcfg.batch)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(tcfg.batch));
      std::vector<ControlSample> minibatch;
      for (size_t i = start; i < end; ++i) minibatch.push_back(data[static_cast<size_t>(order[i])]);
      const ControlStepStats step = control_train_step(base, stack, minibatch, law, tcfg, opt, rng);
      loss_weighted += step.loss * static_cast<double>(step.tokens_processed);
      stats.tokens += step.tokens_processed;
    }
    stats.mean_loss = loss_weighted / static_cast<double>(stats.tokens);
    stats.wall_seconds = now_seconds() - t0;
    if (csv)
      *csv << stats.epoch << ',' << stats.mean_loss << ',' << stats.tokens << ','
           << stats.wall_seconds << '\n';
    out.push_back(stats);
  }
  return out;
}

namespace {

void add_base_meta(Checkpoint& ckpt, const BaseParameters& base, const TokenizedData& data) {
  const ModelConfig& m = base.cfg;
  ckpt.add("meta.model", {5},
           {static_cast<float>(m.depth), static_cast<float>(m.dim), static_cast<float>(m.heads),
            static_cast<float>(m.vocab), static_cast<float>(m.num_classes)});
  std::vector<float> sides;
  for (int s : m.schedule.sides) sides.push_back(static_cast<float>(s));
  const int side_count = static_cast<int>(sides.size());
  ckpt.add("meta.schedule", {side_count}, std::move(sides));
  ckpt.add("meta.codebook_seed", {4}, u64_limbs(data.codebook.seed));
  ckpt.add("meta.patch", {1}, {static_cast<float>(data.embed.patch)});
  // The patch map is not seeded per array, so persist its weights directly.
  const int d = data.embed.latent_dim();
  std::vector<float> pw(data.embed.weight.begin(), data.embed.weight.end());
  ckpt.add("meta.patch_weight", {d, d}, std::move(pw));
}

}  // namespace

void save_base_checkpoint(const BaseParameters& base, const TokenizedData& data,
                          const std::string& path) {
  Checkpoint ckpt;
  add_base_meta(ckpt, base, data);
  ckpt.add_named(base.named());
  write_checkpoint(ckpt, path);
}

void save_control_checkpoint(const BaseParameters& base, const AdapterStack& stack,
                             const TokenizedData& data, const std::string& path) {
  Checkpoint ckpt;
  add_base_meta(ckpt, base, data);
  ckpt.add_named(base.named());
  std::vector<float> anchors;
  for (const AdapterBlock& b : stack.blocks) anchors.push_back(static_cast<float>(b.anchor));
  const int anchor_count = static_cast<int>(anchors.size());
  ckpt.add("meta.anchors", {anchor_count}, std::move(anchors));
  ckpt.add("meta.adapter", {2},
           {static_cast<float>(stack.ffns.size()), static_cast<float>(stack.ffn_ratio)});
  const ControlEncoderConfig& e = stack.encoder.cfg;
  ckpt.add("meta.encoder", {5},
           {static_cast<float>(e.image_side), static_cast<float>(e.patch),
            static_cast<float>(e.depth), static_cast<float>(e.dim), static_cast<float>(e.heads)});
  ckpt.add("meta.gate", {2},
           {static_cast<float>(stack.gate_cfg.mean), static_cast<float>(stack.gate_cfg.stddev)});
  ckpt.add_named(stack.named());
  write_checkpoint(ckpt, path);
}

LoadedModel load_model_checkpoint(const std::string& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  const auto& m = ckpt.get("meta.model").data;
  ModelConfig cfg;
  cfg.depth = static_cast<int>(m[0]);
  cfg.dim = static_cast<int>(m[1]);
  cfg.heads = static_cast<int>(m[2]);
  cfg.vocab = static_cast<int>(m[3]);
  cfg.num_classes = static_cast<int>(m[4]);
  std::vector<int> sides;
  for (float s : ckpt.get("meta.schedule").data) sides.push_back(static_cast<int>(s));
  cfg.schedule = ScaleSchedule(sides);

  LoadedModel out;
  out.base = BaseParameters::init(cfg, 0);
  ckpt.load_named(out.base.named());
  out.base.freeze();

  const int patch = static_cast<int>(ckpt.get("meta.patch").data[0]);
  out.embed.patch = patch;
  const auto& pw = ckpt.get("meta.patch_weight").data;
  out.embed.weight.assign(pw.begin(), pw.end());
  out.codebook =
      build_codebook(limbs_u64(ckpt.get("meta.codebook_seed").data), cfg.vocab, patch * patch);

  if (ckpt.has("meta.anchors")) {
    std::vector<int> anchors;
    for (float a : ckpt.get("meta.anchors").data) anchors.push_back(static_cast<int>(a));
    const auto& ad = ckpt.get("meta.adapter").data;
    const auto& enc = ckpt.get("meta.encoder").data;
    ControlEncoderConfig enc_cfg;
    enc_cfg.image_side = static_cast<int>(enc[0]);
    enc_cfg.patch = static_cast<int>(enc[1]);
    enc_cfg.depth = static_cast<int>(enc[2]);
    enc_cfg.dim = static_cast<int>(enc[3]);
    enc_cfg.heads = static_cast<int>(enc[4]);
    const auto& g = ckpt.get("meta.gate").data;
    GateInitConfig gate{static_cast<double>(g[0]), static_cast<double>(g[1])};
    out.stack = init_adapter_from_base(out.base, anchors, static_cast<int>(ad[0]),
                                       static_cast<int>(ad[1]), enc_cfg, gate, 0);
    ckpt.load_named(out.stack.named());
    out.has_stack = true;
  }
  return out;
}

std::vector<double> tokens_to_image(const MultiScaleTokens& tokens, const ScaleSchedule& schedule,
                                    const Codebook& codebook, const PatchEmbed& embed) {
  const Tensor latent = decode_multiscale(tokens, schedule, codebook);
  std::vector<double> image = embed.to_image(latent);
  for (double& v : image) v = std::min(1.0, std::max(0.0, v));
  return image;
}

GenerationEval evaluate_generations(const BaseParameters& base, const AdapterStack* stack,
                                    const TokenizedData& data, const std::vector<int>& indices,
                                    SamplerConfig sampler) {
  if (indices.empty()) throw TensorError("evaluate_generations: no indices");
  GenerationEval out;
  const int s_count = base.cfg.schedule.num_scales();
  out.mean_entropy.assign(static_cast<size_t>(s_count), 0.0);
  const uint64_t base_seed = sampler.seed;
  for (int idx : indices) {
    const SyntheticSample& raw = data.raw[static_cast<size_t>(idx)];
    const ControlSample& sample = data.control[static_cast<size_t>(idx)];
    ControlFeatures features;
    if (stack) features = encode_condition(sample.condition, stack->encoder, base.cfg.schedule);
    sampler.seed = base_seed + static_cast<uint64_t>(idx);
    GenerationTrace trace;
    const MultiScaleTokens tokens = generate(base, stack, sample.class_id,
                                             stack ? &features : nullptr, sampler, &trace);
    const std::vector<double> image =
        tokens_to_image(tokens, base.cfg.schedule, data.codebook, data.embed);
    const std::vector<uint8_t> gen_edges = extract_edges(image, data.image_side);
    out.mean_f1 += edge_f1(gen_edges, raw.edges, data.image_side);
    for (int k = 0; k < s_count; ++k)
      out.mean_entropy[static_cast<size_t>(k)] += trace.mean_entropy[static_cast<size_t>(k)];
    if (out.temperature.empty()) out.temperature = trace.temperature;
  }
  out.mean_f1 /= static_cast<double>(indices.size());
  for (double& h : out.mean_entropy) h /= static_cast<double>(indices.size());
  return out;
}

}  // namespace ecm
