#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ecm/var_core.hpp"

namespace ecm {

struct GateInitConfig {
  double mean = 4.0;    // sigmoid(4) ~ 0.982: nearly fully open
  double stddev = 1.0;

  void validate() const {
    if (stddev <= 0.0) throw TensorError("GateInitConfig: stddev must be positive");
  }
};

struct ControlEncoderConfig {
  int image_side = 16;
  int patch = 4;
  int depth = 2;
  int dim = 128;
  int heads = 4;

  int grid_side() const { return image_side / patch; }
  void validate() const;
};

struct EncoderLayer {
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;
  AttentionWeights attn;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// ViT-style condition encoder, trained from scratch.
struct ControlEncoder {
  ControlEncoderConfig cfg;
  Tensor patch_w, patch_b;  // patch^2 -> dim
  Tensor pos;               // grid^2 x dim
  std::vector<EncoderLayer> layers;
  Tensor final_g, final_b;

  static ControlEncoder init(const ControlEncoderConfig& cfg, uint64_t seed);
  std::vector<Tensor> trainable();
  std::vector<std::pair<std::string, Tensor>> named() const;
};

// Per-scale condition feature maps r_k, stored as flattened [h_k^2 x dim] rows.
struct ControlFeatures {
  std::vector<Tensor> per_scale;

  // Rows for scales 0..upto_scales-1 concatenated in position order.
  Tensor prefix(int upto_scales) const;
  static ControlFeatures zeros(const ScaleSchedule& schedule, int dim);
};

ControlFeatures encode_condition(const Tensor& image, const ControlEncoder& encoder,
                                 const ScaleSchedule& schedule);

// Two linear maps with a hidden width of ratio*dim; the same storage serves
// every adapter in its sharing group.
struct SharedFFN {
  Tensor w1, b1;  // dim x hidden, hidden
  Tensor w2, b2;  // hidden x dim, dim
};

Tensor shared_gated_ffn(const Tensor& x, const SharedFFN& ffn, const Tensor& gate);

struct AdapterBlock {
  int anchor = 1;     // 1-based base-layer depth where the signal is injected
  int ffn_group = 0;  // index into AdapterStack::ffns
  Tensor adaln_w, adaln_b;  // dim -> 2*dim
  AttentionWeights attn;
  Tensor gate;              // hidden
  Tensor out_w, out_b;      // dim x dim (zero at init), dim
};

struct AdapterStack {
  ModelConfig base_cfg;
  Tensor cls_emb;  // frozen base class table, shared (not part of the stack's weights)
  ControlEncoder encoder;
  std::vector<SharedFFN> ffns;
  std::vector<AdapterBlock> blocks;
  GateInitConfig gate_cfg;
  int ffn_ratio = 4;

  std::vector<Tensor> trainable();
  std::vector<std::pair<std::string, Tensor>> named() const;
  // Adapter parameters excluding the condition encoder:
  // A*(AdaLN + attention + out proj) + #groups*FFN + A*hidden gate entries.
  int64_t control_parameter_count() const;
  int64_t encoder_parameter_count() const;
};

AdapterStack init_adapter_from_base(const BaseParameters& base, const std::vector<int>& anchors,
                                    int ffn_groups, int ffn_ratio,
                                    const ControlEncoderConfig& enc_cfg,
                                    const GateInitConfig& gate_cfg, uint64_t seed);

// Raw additive control signal for one anchored adapter. `hidden` and
// `control` cover the same position prefix; no residual is added inside.
Tensor adapter_block_forward(const AdapterStack& stack, int block_index, const Tensor& hidden,
                             const Tensor& control, int class_id, const Tensor& bias);

// Base forward with the adapter hook attached: at each anchored depth the
// adapter signal is added to the hidden state. The base must be frozen.
Tensor controlled_forward(const BaseParameters& base, const AdapterStack& stack,
                          const Tensor& inputs, const Tensor& bias, int class_id,
                          const ControlFeatures& features, int upto_scales = -1);

// Convenience wrapper: teacher-forcing inputs from tokens, condition encoded
// through the stack's encoder.
Tensor controlled_forward(const BaseParameters& base, const AdapterStack& stack,
                          const MultiScaleTokens& tokens, int class_id,
                          const Tensor& condition_image);

}  // namespace ecm
