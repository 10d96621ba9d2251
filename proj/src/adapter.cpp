#include "ecm/adapter.hpp"

#include <cmath>

#include "ecm/rng.hpp"

namespace ecm {

namespace {

Tensor randn(Rng& rng, Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
  return t;
}

Tensor clone(const Tensor& t) { return Tensor::from(t.shape(), t.vec()); }

}  // namespace

void ControlEncoderConfig::validate() const {
  if (image_side < 1 || patch < 1 || depth < 1 || dim < 1 || heads < 1)
    throw TensorError("ControlEncoderConfig: all sizes must be positive");
  if (image_side % patch != 0)
    throw TensorError("ControlEncoderConfig: image side must be divisible by patch size");
  if (dim % heads != 0) throw TensorError("ControlEncoderConfig: dim must be divisible by heads");
}

ControlEncoder ControlEncoder::init(const ControlEncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  ControlEncoder e;
  e.cfg = cfg;
  Rng rng(seed);
  const int d = cfg.dim, p2 = cfg.patch * cfg.patch, g2 = cfg.grid_side() * cfg.grid_side();
  const double std0 = 0.02;
  e.patch_w = randn(rng, {p2, d}, std0);
  e.patch_b = Tensor({d});
  e.pos = randn(rng, {g2, d}, std0);
  for (int i = 0; i < cfg.depth; ++i) {
    EncoderLayer l;
    l.ln1_g = Tensor({d}, 1.0);
    l.ln1_b = Tensor({d});
    l.ln2_g = Tensor({d}, 1.0);
    l.ln2_b = Tensor({d});
    l.attn.wq = randn(rng, {d, d}, std0);
    l.attn.wk = randn(rng, {d, d}, std0);
    l.attn.wv = randn(rng, {d, d}, std0);
    l.attn.wo = randn(rng, {d, d}, std0);
    l.attn.bq = Tensor({d});
    l.attn.bk = Tensor({d});
    l.attn.bv = Tensor({d});
    l.attn.bo = Tensor({d});
    l.ffn_w1 = randn(rng, {d, 4 * d}, std0);
    l.ffn_b1 = Tensor({4 * d});
    l.ffn_w2 = randn(rng, {4 * d, d}, std0);
    l.ffn_b2 = Tensor({d});
    e.layers.push_back(std::move(l));
  }
  e.final_g = Tensor({d}, 1.0);
  e.final_b = Tensor({d});
  for (Tensor& t : e.trainable()) t.set_requires_grad(true);
  return e;
}

std::vector<Tensor> ControlEncoder::trainable() {
  std::vector<Tensor> out = {patch_w, patch_b, pos};
  for (EncoderLayer& l : layers)
    for (Tensor* t : {&l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b, &l.attn.wq, &l.attn.wk, &l.attn.wv,
                      &l.attn.wo, &l.attn.bq, &l.attn.bk, &l.attn.bv, &l.attn.bo, &l.ffn_w1,
                      &l.ffn_b1, &l.ffn_w2, &l.ffn_b2})
      out.push_back(*t);
  out.push_back(final_g);
  out.push_back(final_b);
  return out;
}

std::vector<std::pair<std::string, Tensor>> ControlEncoder::named() const {
  std::vector<std::pair<std::string, Tensor>> out = {
      {"encoder.patch.w", patch_w}, {"encoder.patch.b", patch_b}, {"encoder.pos", pos}};
  for (size_t i = 0; i < layers.size(); ++i) {
    const EncoderLayer& l = layers[i];
    const std::string p = "encoder.layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.g", l.ln1_g);
    out.emplace_back(p + "ln1.b", l.ln1_b);
    out.emplace_back(p + "ln2.g", l.ln2_g);
    out.emplace_back(p + "ln2.b", l.ln2_b);
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
  out.emplace_back("encoder.final.g", final_g);
  out.emplace_back("encoder.final.b", final_b);
  return out;
}

Tensor ControlFeatures::prefix(int upto_scales) const {
  if (upto_scales < 1 || upto_scales > static_cast<int>(per_scale.size()))
    throw TensorError("ControlFeatures::prefix: bad scale count");
  std::vector<Tensor> parts(per_scale.begin(), per_scale.begin() + upto_scales);
  return concat_rows(parts);
}

ControlFeatures ControlFeatures::zeros(const ScaleSchedule& schedule, int dim) {
  ControlFeatures f;
  for (int k = 0; k < schedule.num_scales(); ++k)
    f.per_scale.push_back(Tensor({schedule.tokens_at(k), dim}));
  return f;
}

ControlFeatures encode_condition(const Tensor& image, const ControlEncoder& encoder,
                                 const ScaleSchedule& schedule) {
  const ControlEncoderConfig& cfg = encoder.cfg;
  if (image.rank() != 2 || image.dim(0) != cfg.image_side || image.dim(1) != cfg.image_side)
    throw TensorError("encode_condition: image size does not match encoder config");
  const int g = cfg.grid_side(), p = cfg.patch, d = cfg.dim;

  // patchify into [g^2 x p^2] rows (row-major within each patch)
  Tensor patches(Shape{g * g, p * p});
  for (int pi = 0; pi < g; ++pi)
    for (int pj = 0; pj < g; ++pj)
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j)
          patches.data()[(static_cast<int64_t>(pi) * g + pj) * p * p + i * p + j] =
              image.data()[static_cast<int64_t>(pi * p + i) * cfg.image_side + pj * p + j];

  Tensor x = add(add_rowwise(matmul(patches, encoder.patch_w), encoder.patch_b),
                 reshape(encoder.pos, {g * g, d}));
  Tensor bias(Shape{g * g, g * g});  // full attention
  for (const EncoderLayer& l : encoder.layers) {
    x = add(x, multihead_attention(layer_norm(x, l.ln1_g, l.ln1_b), l.attn, bias, cfg.heads));
    Tensor f = layer_norm(x, l.ln2_g, l.ln2_b);
    f = add_rowwise(matmul(gelu(add_rowwise(matmul(f, l.ffn_w1), l.ffn_b1)), l.ffn_w2), l.ffn_b2);
    x = add(x, f);
  }
  x = layer_norm(x, encoder.final_g, encoder.final_b);

  Tensor grid = reshape(x, {g, g, d});
  ControlFeatures feats;
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int side = schedule.sides[static_cast<size_t>(k)];
    Tensor r = resize_grid(grid, side, side, ResizeMode::Bilinear);
    feats.per_scale.push_back(reshape(r, {side * side, d}));
  }
  return feats;
}

Tensor shared_gated_ffn(const Tensor& x, const SharedFFN& ffn, const Tensor& gate) {
  if (gate.rank() != 1 || gate.dim(0) != ffn.w1.dim(1))
    throw TensorError("shared_gated_ffn: gate length does not match FFN hidden width");
  Tensor h = gelu(add_rowwise(matmul(x, ffn.w1), ffn.b1));
  h = mul_rowwise(h, sigmoid(gate));
  return add_rowwise(matmul(h, ffn.w2), ffn.b2);
}

std::vector<Tensor> AdapterStack::trainable() {
  std::vector<Tensor> out = encoder.trainable();
  for (SharedFFN& f : ffns)
    for (Tensor* t : {&f.w1, &f.b1, &f.w2, &f.b2}) out.push_back(*t);
  for (AdapterBlock& b : blocks)
    for (Tensor* t : {&b.adaln_w, &b.adaln_b, &b.attn.wq, &b.attn.wk, &b.attn.wv, &b.attn.wo,
                      &b.attn.bq, &b.attn.bk, &b.attn.bv, &b.attn.bo, &b.gate, &b.out_w, &b.out_b})
      out.push_back(*t);
  return out;
}

std::vector<std::pair<std::string, Tensor>> AdapterStack::named() const {
  std::vector<std::pair<std::string, Tensor>> out = encoder.named();
  for (size_t g = 0; g < ffns.size(); ++g) {
    const std::string p = "ffn." + std::to_string(g) + ".";
    out.emplace_back(p + "w1", ffns[g].w1);
    out.emplace_back(p + "b1", ffns[g].b1);
    out.emplace_back(p + "w2", ffns[g].w2);
    out.emplace_back(p + "b2", ffns[g].b2);
  }
  for (size_t i = 0; i < blocks.size(); ++i) {
    const AdapterBlock& b = blocks[i];
    const std::string p = "adapter." + std::to_string(i) + ".";
    out.emplace_back(p + "adaln.w", b.adaln_w);
    out.emplace_back(p + "adaln.b", b.adaln_b);
    out.emplace_back(p + "attn.wq", b.attn.wq);
    out.emplace_back(p + "attn.wk", b.attn.wk);
    out.emplace_back(p + "attn.wv", b.attn.wv);
    out.emplace_back(p + "attn.wo", b.attn.wo);
    out.emplace_back(p + "attn.bq", b.attn.bq);
    out.emplace_back(p + "attn.bk", b.attn.bk);
    out.emplace_back(p + "attn.bv", b.attn.bv);
    out.emplace_back(p + "attn.bo", b.attn.bo);
    out.emplace_back(p + "out.w", b.out_w);
    out.emplace_back(p + "out.b", b.out_b);
    out.emplace_back("gate." + std::to_string(i), b.gate);
  }
  return out;
}

int64_t AdapterStack::control_parameter_count() const {
  int64_t n = 0;
  for (const SharedFFN& f : ffns) n += f.w1.numel() + f.b1.numel() + f.w2.numel() + f.b2.numel();
  for (const AdapterBlock& b : blocks)
    n += b.adaln_w.numel() + b.adaln_b.numel() + b.attn.wq.numel() + b.attn.wk.numel() +
         b.attn.wv.numel() + b.attn.wo.numel() + b.attn.bq.numel() + b.attn.bk.numel() +
         b.attn.bv.numel() + b.attn.bo.numel() + b.gate.numel() + b.out_w.numel() +
         b.out_b.numel();
  return n;
}

int64_t AdapterStack::encoder_parameter_count() const {
  int64_t n = 0;
  for (const auto& [name, t] : encoder.named()) n += t.numel();
  return n;
}

AdapterStack init_adapter_from_base(const BaseParameters& base, const std::vector<int>& anchors,
                                    int ffn_groups, int ffn_ratio,
                                    const ControlEncoderConfig& enc_cfg,
                                    const GateInitConfig& gate_cfg, uint64_t seed) {
  gate_cfg.validate();
  if (anchors.empty()) throw TensorError("init_adapter_from_base: no anchors");
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (anchors[i] < 1 || anchors[i] > base.cfg.depth)
      throw TensorError("init_adapter_from_base: anchor out of range [1, depth]");
    if (i > 0 && anchors[i] <= anchors[i - 1])
      throw TensorError("init_adapter_from_base: anchors must be strictly increasing");
  }
  if (ffn_groups < 1 || ffn_groups > static_cast<int>(anchors.size()))
    throw TensorError("init_adapter_from_base: bad FFN group count");
  if (enc_cfg.dim != base.cfg.dim)
    throw TensorError("init_adapter_from_base: encoder output dim must equal base dim");

  AdapterStack stack;
  stack.base_cfg = base.cfg;
  stack.cls_emb = base.cls_emb;
  stack.gate_cfg = gate_cfg;
  stack.ffn_ratio = ffn_ratio;
  stack.encoder = ControlEncoder::init(enc_cfg, seed ^ 0x9e3779b97f4a7c15ULL);

  Rng rng(seed);
  const int d = base.cfg.dim;
  const int hidden = ffn_ratio * d;
  for (int g = 0; g < ffn_groups; ++g) {
    SharedFFN f;
    f.w1 = randn(rng, {d, hidden}, 0.02);
    f.b1 = Tensor({hidden});
    f.w2 = randn(rng, {hidden, d}, 0.02);
    f.b2 = Tensor({d});
    stack.ffns.push_back(std::move(f));
  }

  const int a = static_cast<int>(anchors.size());
  for (int i = 0; i < a; ++i) {
    const TransformerLayer& src = base.layers[static_cast<size_t>(anchors[static_cast<size_t>(i)] - 1)];
    AdapterBlock b;
    b.anchor = anchors[static_cast<size_t>(i)];
    // contiguous split of anchors over sharing groups
    b.ffn_group = std::min(i * ffn_groups / a, ffn_groups - 1);
    // attention-site scale/shift columns of the base AdaLN projection
    b.adaln_w = Tensor({d, 2 * d});
    for (int r = 0; r < d; ++r)
      std::copy_n(src.adaln_w.data() + static_cast<int64_t>(r) * 4 * d, 2 * d,
                  b.adaln_w.data() + static_cast<int64_t>(r) * 2 * d);
    b.adaln_b = Tensor({2 * d});
    std::copy_n(src.adaln_b.data(), 2 * d, b.adaln_b.data());
    b.attn.wq = clone(src.attn.wq);
    b.attn.wk = clone(src.attn.wk);
    b.attn.wv = clone(src.attn.wv);
    b.attn.wo = clone(src.attn.wo);
    b.attn.bq = clone(src.attn.bq);
    b.attn.bk = clone(src.attn.bk);
    b.attn.bv = clone(src.attn.bv);
    b.attn.bo = clone(src.attn.bo);
    b.gate = Tensor({hidden});
    for (int64_t j = 0; j < b.gate.numel(); ++j)
      b.gate.data()[j] = rng.normal(gate_cfg.mean, gate_cfg.stddev);
    b.out_w = Tensor({d, d});  // zero: the initial signal is exactly zero
    b.out_b = Tensor({d});
    stack.blocks.push_back(std::move(b));
  }
  for (Tensor& t : stack.trainable()) t.set_requires_grad(true);
  return stack;
}

Tensor adapter_block_forward(const AdapterStack& stack, int block_index, const Tensor& hidden,
                             const Tensor& control, int class_id, const Tensor& bias) {
  if (block_index < 0 || block_index >= static_cast<int>(stack.blocks.size()))
    throw TensorError("adapter_block_forward: block index out of range");
  const AdapterBlock& b = stack.blocks[static_cast<size_t>(block_index)];
  if (hidden.shape() != control.shape())
    throw TensorError("adapter_block_forward: hidden/control shape mismatch");
  if (class_id < 0 || class_id > stack.base_cfg.num_classes)
    throw TensorError("adapter_block_forward: class id out of range");
  const int d = stack.base_cfg.dim;

  // fuse image and control tokens, then AdaLN -> attention -> gated FFN;
  // the output projection produces the raw additive signal (no residual)
  Tensor x = add(hidden, control);
  Tensor cls_row = gather_rows(stack.cls_emb, {class_id});
  Tensor m = add_rowwise(matmul(cls_row, b.adaln_w), b.adaln_b);  // [1 x 2d]
  Tensor s = add_const(reshape(slice_cols(m, 0, d), {d}), 1.0);
  Tensor sh = reshape(slice_cols(m, d, 2 * d), {d});
  x = layer_norm(x, s, sh);
  x = multihead_attention(x, b.attn, bias, stack.base_cfg.heads);
  x = shared_gated_ffn(x, stack.ffns[static_cast<size_t>(b.ffn_group)], b.gate);
  return add_rowwise(matmul(x, b.out_w), b.out_b);
}

Tensor controlled_forward(const BaseParameters& base, const AdapterStack& stack,
                          const Tensor& inputs, const Tensor& bias, int class_id,
                          const ControlFeatures& features, int upto_scales) {
  if (!base.frozen())
    throw TensorError("controlled_forward: base must be frozen (plug-and-play contract)");
  const ScaleSchedule& sched = base.cfg.schedule;
  if (upto_scales < 0) upto_scales = sched.num_scales();
  Tensor control = features.prefix(upto_scales);
  if (control.dim(0) != inputs.dim(0))
    throw TensorError("controlled_forward: control feature rows do not cover the input prefix");

  AdapterHook hook = [&](const Tensor& hidden, int depth) -> Tensor {
    for (size_t i = 0; i < stack.blocks.size(); ++i)
      if (stack.blocks[i].anchor == depth)
        return adapter_block_forward(stack, static_cast<int>(i), hidden, control, class_id, bias);
    return Tensor();
  };
  return forward_logits(base, inputs, bias, class_id, hook);
}

Tensor controlled_forward(const BaseParameters& base, const AdapterStack& stack,
                          const MultiScaleTokens& tokens, int class_id,
                          const Tensor& condition_image) {
  ControlFeatures features = encode_condition(condition_image, stack.encoder, base.cfg.schedule);
  Tensor inputs = build_scale_inputs(base, tokens, class_id);
  const int total = base.cfg.total_tokens();
  Tensor bias = mask_bias(build_block_causal_mask(base.cfg.schedule), total, total);
  return controlled_forward(base, stack, inputs, bias, class_id, features);
}

}  // namespace ecm
