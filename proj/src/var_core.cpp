#include "ecm/var_core.hpp"

#include <cmath>

#include "ecm/rng.hpp"

namespace ecm {

namespace {

constexpr double kMaskBias = -1e30;

Tensor randn(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
  return t;
}

}  // namespace

void ModelConfig::validate() const {
  if (depth < 1 || dim < 1 || heads < 1 || vocab < 2 || num_classes < 1)
    throw TensorError("ModelConfig: all sizes must be positive, vocab >= 2");
  if (dim % heads != 0) throw TensorError("ModelConfig: dim must be divisible by heads");
}

void BaseParameters::freeze() {
  frozen_ = true;
  for (Tensor& t : trainable()) t.set_requires_grad(false);
}

std::vector<Tensor> BaseParameters::trainable() {
  std::vector<Tensor> out = {tok_emb, cls_emb, pos_emb, scale_emb};
  for (TransformerLayer& l : layers) {
    for (Tensor* t : {&l.adaln_w, &l.adaln_b, &l.attn.wq, &l.attn.wk, &l.attn.wv, &l.attn.wo,
                      &l.attn.bq, &l.attn.bk, &l.attn.bv, &l.attn.bo, &l.ffn_w1, &l.ffn_b1,
                      &l.ffn_w2, &l.ffn_b2})
      out.push_back(*t);
  }
  out.push_back(final_gain);
  out.push_back(final_bias);
  out.push_back(head_w);
  out.push_back(head_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> BaseParameters::named() const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"base.tok_emb", tok_emb},
      {"base.cls_emb", cls_emb},
      {"base.pos_emb", pos_emb},
      {"base.scale_emb", scale_emb},
  };
  for (size_t i = 0; i < layers.size(); ++i) {
    const TransformerLayer& l = layers[i];
    const std::string p = "base.layers." + std::to_string(i) + ".";
    out.emplace_back(p + "adaln.w", l.adaln_w);
    out.emplace_back(p + "adaln.b", l.adaln_b);
    out.emplace_back(p + "attn.wq", l.attn.wq);
    out.emplace_back(p + "attn.wk", l.attn.wk);
    out.emplace_back(p + "attn.wv", l.attn.wv);
    out.emplace_back(p + "attn.wo", l.attn.wo);
    out.emplace_back(p + "attn.bq", l.attn.bq);
    out.emplace_back(p + "attn.bk", l.attn.bk);
    out.emplace_back(p + "attn.bv", l.attn.bv);
    out.emplace_back(p + "attn.bo", l.attn.bo);
    out.emplace_back(p + "ffn.w1", l.ffn_w1);
    out.emplace_back(p + "ffn.b1", l.ffn_b1);
    out.emplace_back(p + "ffn.w2", l.ffn_w2);
    out.emplace_back(p + "ffn.b2", l.ffn_b2);
  }
  out.emplace_back("base.final.gain", final_gain);
  out.emplace_back("base.final.bias", final_bias);
  out.emplace_back("base.head.w", head_w);
  out.emplace_back("base.head.b", head_b);
  return out;
}

BaseParameters BaseParameters::init(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  BaseParameters p;
  p.cfg = cfg;
  Rng rng(seed);
  const int d = cfg.dim, t = cfg.total_tokens(), s = cfg.schedule.num_scales();
  const double std0 = 0.02;
  const double resid_std = std0 / std::sqrt(2.0 * cfg.depth);
  p.tok_emb = randn(rng, {cfg.vocab, d}, std0);
  p.cls_emb = randn(rng, {cfg.num_classes + 1, d}, std0);
  p.pos_emb = randn(rng, {t, d}, std0);
  p.scale_emb = randn(rng, {s, d}, std0);
  for (int i = 0; i < cfg.depth; ++i) {
    TransformerLayer l;
    l.adaln_w = Tensor({d, 4 * d});  // zero: plain LayerNorm at init
    l.adaln_b = Tensor({4 * d});
    l.attn.wq = randn(rng, {d, d}, std0);
    l.attn.wk = randn(rng, {d, d}, std0);
    l.attn.wv = randn(rng, {d, d}, std0);
    l.attn.wo = randn(rng, {d, d}, resid_std);
    l.attn.bq = Tensor({d});
    l.attn.bk = Tensor({d});
    l.attn.bv = Tensor({d});
    l.attn.bo = Tensor({d});
    l.ffn_w1 = randn(rng, {d, 4 * d}, std0);
    l.ffn_b1 = Tensor({4 * d});
    l.ffn_w2 = randn(rng, {4 * d, d}, resid_std);
    l.ffn_b2 = Tensor({d});
    p.layers.push_back(std::move(l));
  }
  p.final_gain = Tensor({d}, 1.0);
  p.final_bias = Tensor({d});
  p.head_w = randn(rng, {d, cfg.vocab}, std0);
  p.head_b = Tensor({cfg.vocab});
  for (Tensor& w : p.trainable()) w.set_requires_grad(true);
  return p;
}

std::vector<uint8_t> build_block_causal_mask(const ScaleSchedule& schedule) {
  const int t = schedule.total_tokens();
  std::vector<int> scale_of(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) scale_of[static_cast<size_t>(i)] = schedule.scale_of_position(i);
  std::vector<uint8_t> mask(static_cast<size_t>(t) * t, 0);
  for (int i = 0; i < t; ++i)
    for (int j = 0; j < t; ++j)
      mask[static_cast<size_t>(i) * t + j] = scale_of[static_cast<size_t>(j)] <= scale_of[static_cast<size_t>(i)];
  return mask;
}

Tensor mask_bias(const std::vector<uint8_t>& mask, int total, int prefix) {
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(total) * total)
    throw TensorError("mask_bias: mask size mismatch");
  if (prefix < 1 || prefix > total) throw TensorError("mask_bias: bad prefix");
  Tensor bias(Shape{prefix, prefix});
  for (int i = 0; i < prefix; ++i)
    for (int j = 0; j < prefix; ++j)
      bias.data()[static_cast<int64_t>(i) * prefix + j] =
          mask[static_cast<size_t>(i) * total + j] ? 0.0 : kMaskBias;
  return bias;
}

Tensor build_scale_inputs(const BaseParameters& params, const MultiScaleTokens& tokens,
                          int class_id, int upto_scales) {
  const ModelConfig& cfg = params.cfg;
  const ScaleSchedule& sched = cfg.schedule;
  const int s = sched.num_scales();
  if (upto_scales < 0) upto_scales = s;
  if (upto_scales < 1 || upto_scales > s) throw TensorError("build_scale_inputs: bad scale count");
  if (class_id < 0 || class_id > cfg.num_classes)
    throw TensorError("build_scale_inputs: class id out of range");
  if (static_cast<int>(tokens.maps.size()) < upto_scales - 1)
    throw TensorError("build_scale_inputs: not enough token maps for requested scales");

  std::vector<Tensor> parts;
  std::vector<int> scale_idx;
  {
    const int n0 = sched.tokens_at(0);
    parts.push_back(gather_rows(params.cls_emb, std::vector<int>(static_cast<size_t>(n0), class_id)));
    scale_idx.insert(scale_idx.end(), static_cast<size_t>(n0), 0);
  }
  for (int k = 1; k < upto_scales; ++k) {
    const int prev = sched.sides[static_cast<size_t>(k - 1)];
    const int cur = sched.sides[static_cast<size_t>(k)];
    const auto& map = tokens.maps[static_cast<size_t>(k - 1)];
    if (static_cast<int>(map.size()) != prev * prev)
      throw TensorError("build_scale_inputs: token map size mismatch");
    Tensor emb = gather_rows(params.tok_emb, map);
    Tensor grid = reshape(emb, {prev, prev, cfg.dim});
    Tensor up = resize_grid(grid, cur, cur, ResizeMode::Bilinear);
    parts.push_back(reshape(up, {cur * cur, cfg.dim}));
    scale_idx.insert(scale_idx.end(), static_cast<size_t>(cur * cur), k);
  }
  Tensor x = concat_rows(parts);
  const int p = x.dim(0);
  Tensor pos = slice_rows(params.pos_emb, 0, p);
  Tensor sc = gather_rows(params.scale_emb, scale_idx);
  return add(add(x, pos), sc);
}

Tensor multihead_attention(const Tensor& x, const AttentionWeights& w, const Tensor& bias,
                           int heads) {
  const int d = x.dim(1);
  const int dh = d / heads;
  Tensor q = add_rowwise(matmul(x, w.wq), w.bq);
  Tensor k = add_rowwise(matmul(x, w.wk), w.bk);
  Tensor v = add_rowwise(matmul(x, w.wv), w.bv);
  std::vector<Tensor> outs;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor att = softmax(add(scale(matmul_nt(qh, kh), sc), bias), -1);
    outs.push_back(matmul(att, vh));
  }
  return add_rowwise(matmul(concat_cols(outs), w.wo), w.bo);
}

namespace {

struct Modulation {
  Tensor s1, b1, s2, b2;  // each [dim], s* already offset by +1
};

Modulation adaln_modulation(const Tensor& cls_row, const TransformerLayer& l, int d) {
  Tensor m = add_rowwise(matmul(cls_row, l.adaln_w), l.adaln_b);  // [1 x 4d]
  Modulation mod;
  mod.s1 = add_const(reshape(slice_cols(m, 0, d), {d}), 1.0);
  mod.b1 = reshape(slice_cols(m, d, 2 * d), {d});
  mod.s2 = add_const(reshape(slice_cols(m, 2 * d, 3 * d), {d}), 1.0);
  mod.b2 = reshape(slice_cols(m, 3 * d, 4 * d), {d});
  return mod;
}

}  // namespace

Tensor forward_logits(const BaseParameters& params, const Tensor& inputs, const Tensor& bias,
                      int class_id, const AdapterHook& hook) {
  const ModelConfig& cfg = params.cfg;
  if (inputs.rank() != 2 || inputs.dim(1) != cfg.dim)
    throw TensorError("forward_logits: inputs must be [P x dim]");
  if (bias.rank() != 2 || bias.dim(0) != inputs.dim(0) || bias.dim(1) != inputs.dim(0))
    throw TensorError("forward_logits: bias shape mismatch");
  if (class_id < 0 || class_id > cfg.num_classes)
    throw TensorError("forward_logits: class id out of range");

  Tensor cls_row = gather_rows(params.cls_emb, {class_id});
  Tensor x = inputs;
  for (int depth = 1; depth <= cfg.depth; ++depth) {
    if (hook) {
      Tensor signal = hook(x, depth);
      if (signal.defined()) x = add(x, signal);
    }
    const TransformerLayer& l = params.layers[static_cast<size_t>(depth - 1)];
    Modulation mod = adaln_modulation(cls_row, l, cfg.dim);
    x = add(x, multihead_attention(layer_norm(x, mod.s1, mod.b1), l.attn, bias, cfg.heads));
    Tensor f = layer_norm(x, mod.s2, mod.b2);
    f = add_rowwise(matmul(gelu(add_rowwise(matmul(f, l.ffn_w1), l.ffn_b1)), l.ffn_w2), l.ffn_b2);
    x = add(x, f);
  }
  x = layer_norm(x, params.final_gain, params.final_bias);
  return add_rowwise(matmul(x, params.head_w), params.head_b);
}

double pretrain_step(BaseParameters& params, const std::vector<PretrainSample>& batch,
                     AdamW& opt) {
  if (params.frozen()) throw TensorError("pretrain_step: parameters are frozen");
  if (batch.empty()) throw TensorError("pretrain_step: empty batch");
  std::vector<Tensor> trainable = params.trainable();
  for (Tensor& t : trainable) t.zero_grad();

  const int total = params.cfg.total_tokens();
  const std::vector<uint8_t> mask = build_block_causal_mask(params.cfg.schedule);
  const Tensor bias = mask_bias(mask, total, total);

  Tape tape;
  std::vector<Tensor> losses;
  for (const PretrainSample& s : batch) {
    Tensor inputs = build_scale_inputs(params, s.tokens, s.class_id);
    Tensor logits = forward_logits(params, inputs, bias, s.class_id);
    losses.push_back(cross_entropy(logits, s.tokens.flat()));
  }
  Tensor loss = losses[0];
  for (size_t i = 1; i < losses.size(); ++i) loss = add(loss, losses[i]);
  loss = scale(loss, 1.0 / static_cast<double>(losses.size()));
  const double value = loss.item();
  tape.backward(loss);
  opt.step(trainable);
  for (Tensor& t : trainable) t.zero_grad();
  return value;
}

double token_accuracy(const BaseParameters& params, const std::vector<PretrainSample>& samples) {
  const int total = params.cfg.total_tokens();
  const std::vector<uint8_t> mask = build_block_causal_mask(params.cfg.schedule);
  const Tensor bias = mask_bias(mask, total, total);
  int64_t hit = 0, count = 0;
  for (const PretrainSample& s : samples) {
    Tensor inputs = build_scale_inputs(params, s.tokens, s.class_id);
    Tensor logits = forward_logits(params, inputs, bias, s.class_id);
    const std::vector<int> targets = s.tokens.flat();
    const int v = params.cfg.vocab;
    for (int i = 0; i < total; ++i) {
      const double* row = logits.data() + static_cast<int64_t>(i) * v;
      int best = 0;
      for (int j = 1; j < v; ++j)
        if (row[j] > row[best]) best = j;
      hit += (best == targets[static_cast<size_t>(i)]);
      ++count;
    }
  }
  return static_cast<double>(hit) / static_cast<double>(count);
}

FlopsEstimate count_flops(const ModelConfig& cfg, int num_adapters, int ffn_ratio) {
  const double d = cfg.dim;
  // multiply-accumulates for one position at context length ctx
  auto base_pos = [&](double ctx) {
    const double adaln = 4.0 * d * d;
    const double attn = 4.0 * d * d + 2.0 * ctx * d;
    const double ffn = 8.0 * d * d;
    return cfg.depth * (adaln + attn + ffn) + d * cfg.vocab;
  };
  auto adapter_pos = [&](double ctx) {
    const double adaln = 2.0 * d * d;
    const double attn = 4.0 * d * d + 2.0 * ctx * d;
    const double ffn = 2.0 * d * (ffn_ratio * d);
    const double out_proj = d * d;
    return num_adapters * (adaln + attn + ffn + out_proj);
  };
  FlopsEstimate e;
  e.first_token_base = 2.0 * base_pos(1.0);
  e.first_token_total = e.first_token_base + 2.0 * adapter_pos(1.0);
  const std::vector<int> cum = cfg.schedule.cumulative();
  for (int k = 0; k < cfg.schedule.num_scales(); ++k) {
    const double n = cfg.schedule.tokens_at(k);
    const double ctx = cum[static_cast<size_t>(k)];
    e.full_base += 2.0 * n * base_pos(ctx);
    e.full_total += 2.0 * n * (base_pos(ctx) + adapter_pos(ctx));
  }
  return e;
}

}  // namespace ecm
