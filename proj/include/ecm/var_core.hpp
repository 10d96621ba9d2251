#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "ecm/optim.hpp"
#include "ecm/quantizer.hpp"
#include "ecm/tensor.hpp"

namespace ecm {

struct ModelConfig {
  int depth = 8;
  int dim = 128;
  int heads = 4;
  int vocab = 64;
  int num_classes = 4;
  ScaleSchedule schedule = ScaleSchedule::toy();

  void validate() const;
  int total_tokens() const { return schedule.total_tokens(); }
  int null_class() const { return num_classes; }  // extra embedding row for CFG dropout
  static ModelConfig toy() { return ModelConfig{}; }
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;  // dim x dim
  Tensor bq, bk, bv, bo;  // dim
};

// Masked multi-head self-attention; bias is the additive attention mask.
Tensor multihead_attention(const Tensor& x, const AttentionWeights& w, const Tensor& bias,
                           int heads);

// One transformer layer: AdaLN modulation projection, attention, FFN.
struct TransformerLayer {
  Tensor adaln_w, adaln_b;  // dim -> 4*dim (scale/shift for both sublayers)
  AttentionWeights attn;
  Tensor ffn_w1, ffn_b1;  // dim x 4dim, 4dim
  Tensor ffn_w2, ffn_b2;  // 4dim x dim, dim
};

struct BaseParameters {
  ModelConfig cfg;
  Tensor tok_emb;    // vocab x dim
  Tensor cls_emb;    // (num_classes + 1) x dim, last row = null class
  Tensor pos_emb;    // T x dim
  Tensor scale_emb;  // S x dim
  std::vector<TransformerLayer> layers;
  Tensor final_gain, final_bias;  // dim
  Tensor head_w, head_b;          // dim x vocab, vocab

  bool frozen() const { return frozen_; }
  void freeze();

  std::vector<Tensor> trainable();
  std::vector<std::pair<std::string, Tensor>> named() const;

  static BaseParameters init(const ModelConfig& cfg, uint64_t seed);

 private:
  bool frozen_ = false;
};

// mask[i*T+j] is true iff position i (scale k_i) may attend to j (scale k_j <= k_i).
std::vector<uint8_t> build_block_causal_mask(const ScaleSchedule& schedule);

// Additive attention bias for the first `prefix` positions: 0 where allowed,
// a large negative floor where masked.
Tensor mask_bias(const std::vector<uint8_t>& mask, int total, int prefix);

// Teacher-forcing inputs for the first `upto_scales` scales (default: all).
// Scale-0 positions carry the class embedding; scale-k positions carry the
// embedded scale-(k-1) map upsampled to the scale-k grid. Scale and position
// embeddings are added on top.
Tensor build_scale_inputs(const BaseParameters& params, const MultiScaleTokens& tokens,
                          int class_id, int upto_scales = -1);

// Hook invoked before each layer; returns an additive signal for the hidden
// state or an undefined tensor to leave the layer untouched. Depth is 1-based.
using AdapterHook = std::function<Tensor(const Tensor& hidden, int depth)>;

Tensor forward_logits(const BaseParameters& params, const Tensor& inputs, const Tensor& bias,
                      int class_id, const AdapterHook& hook = nullptr);

struct PretrainSample {
  MultiScaleTokens tokens;
  int class_id = 0;
};

double pretrain_step(BaseParameters& params, const std::vector<PretrainSample>& batch,
                     AdamW& opt);

// Fraction of token positions whose argmax logit equals the target token.
double token_accuracy(const BaseParameters& params, const std::vector<PretrainSample>& samples);

struct FlopsEstimate {
  double first_token_base = 0;   // one forward pass over the first position
  double first_token_total = 0;  // with adapter overhead
  double full_base = 0;          // whole schedule, scale by scale
  double full_total = 0;
  double adapter_overhead_first() const { return first_token_total - first_token_base; }
  double adapter_overhead_full() const { return full_total - full_base; }
};

// Analytic multiply-accumulate count (x2 for FLOPs) of a forward pass, with
// and without `num_adapters` adapter blocks of hidden ratio `ffn_ratio`.
FlopsEstimate count_flops(const ModelConfig& cfg, int num_adapters = 0, int ffn_ratio = 4);

}  // namespace ecm
