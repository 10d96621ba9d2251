#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ecm/checkpoint.hpp"
#include "ecm/config.hpp"
#include "ecm/dataset.hpp"
#include "ecm/inference.hpp"
#include "ecm/quantizer.hpp"
#include "ecm/training.hpp"

namespace ecm {

// Deterministic sub-seeds for the independent random streams of a run.
struct DerivedSeeds {
  uint64_t codebook, patches, dataset, base_init, pretrain, adapter, control, eval;
};
DerivedSeeds derive_seeds(uint64_t seed);

// Dataset tokenized against the run's codebook and patch map. Conditions are
// edge maps; image side is latent side times the patch factor.
struct TokenizedData {
  Codebook codebook;
  PatchEmbed embed;
  int image_side = 0;
  std::vector<SyntheticSample> raw;
  std::vector<PretrainSample> pretrain;
  std::vector<ControlSample> control;
};
TokenizedData build_tokenized_data(const RunConfig& cfg, int count);

ControlEncoderConfig encoder_config_for(const RunConfig& cfg);

struct PretrainResult {
  int steps = 0;
  double final_accuracy = 0.0;
  double final_loss = 0.0;
};
// Random-batch training until `target_accuracy` (measured on a fixed probe
// subset every `eval_every` steps) or `max_steps`.
PretrainResult run_pretrain(BaseParameters& base, const std::vector<PretrainSample>& data,
                            int max_steps, int batch, double lr, double target_accuracy,
                            uint64_t seed, std::ostream* log = nullptr, int eval_every = 50);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  int64_t tokens = 0;
  double wall_seconds = 0.0;
};
// Shuffled epochs over `data`; one row per epoch. When `csv` is non-null the
// rows stream out as "epoch,mean_loss,tokens,wall_seconds".
std::vector<EpochStats> run_control_training(const BaseParameters& base, AdapterStack& stack,
                                             const std::vector<ControlSample>& data,
                                             const TrainConfig& tcfg, uint64_t seed,
                                             std::ostream* csv = nullptr);

// Checkpoints are self-describing: model/adapter geometry and the tokenizer
// seeds travel as small "meta.*" arrays next to the weights.
void save_base_checkpoint(const BaseParameters& base, const TokenizedData& data,
                          const std::string& path);
void save_control_checkpoint(const BaseParameters& base, const AdapterStack& stack,
                             const TokenizedData& data, const std::string& path);

struct LoadedModel {
  BaseParameters base;     // frozen
  AdapterStack stack;      // valid only when has_stack
  bool has_stack = false;
  Codebook codebook;
  PatchEmbed embed;
};
LoadedModel load_model_checkpoint(const std::string& path);

// Decoded image from generated tokens, clamped to [0,1].
std::vector<double> tokens_to_image(const MultiScaleTokens& tokens, const ScaleSchedule& schedule,
                                    const Codebook& codebook, const PatchEmbed& embed);

struct GenerationEval {
  double mean_f1 = 0.0;
  std::vector<double> mean_entropy;  // per scale, averaged over generations
  std::vector<double> temperature;   // per scale
};
// Generates one sample per index (conditioned on that sample's edge map when
// a stack is given) and scores edge agreement against the condition.
GenerationEval evaluate_generations(const BaseParameters& base, const AdapterStack* stack,
                                    const TokenizedData& data, const std::vector<int>& indices,
                                    SamplerConfig sampler);

}  // namespace ecm
