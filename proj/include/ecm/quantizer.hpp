#pragma once

#include <cstdint>
#include <vector>

#include "ecm/tensor.hpp"

namespace ecm {

// Ordered grid side lengths, one per generation scale. The last side is the
// latent grid side; token counts are side^2.
struct ScaleSchedule {
  std::vector<int> sides;

  ScaleSchedule() = default;
  explicit ScaleSchedule(std::vector<int> s);

  int num_scales() const { return static_cast<int>(sides.size()); }
  int latent_side() const { return sides.back(); }
  int tokens_at(int k) const { return sides[static_cast<size_t>(k)] * sides[static_cast<size_t>(k)]; }
  int total_tokens() const;
  // cumulative()[k] = tokens in scales 0..k inclusive
  std::vector<int> cumulative() const;
  // offset()[k] = first flat position of scale k
  std::vector<int> offsets() const;
  // scale index owning flat position p
  int scale_of_position(int p) const;

  static ScaleSchedule toy() { return ScaleSchedule({1, 2, 3, 4}); }
  static ScaleSchedule ten_scale() { return ScaleSchedule({1, 2, 3, 4, 5, 6, 8, 10, 13, 16}); }
};

// Fixed pseudo-random codebook: unit-norm rows, row 0 forced to zero so the
// residual procedure can terminate exactly.
struct Codebook {
  int vocab = 0;
  int dim = 0;
  uint64_t seed = 0;
  std::vector<double> vectors;  // vocab x dim, row-major

  const double* row(int i) const { return vectors.data() + static_cast<int64_t>(i) * dim; }
};

Codebook build_codebook(uint64_t seed, int vocab, int dim);

struct MultiScaleTokens {
  std::vector<std::vector<int>> maps;  // maps[k] has sides[k]^2 indices

  bool operator==(const MultiScaleTokens&) const = default;
  // All token indices flattened in scale order.
  std::vector<int> flat() const;
  static MultiScaleTokens from_flat(const std::vector<int>& flat, const ScaleSchedule& schedule);
};

// Residual multi-scale encoding: repeatedly downsample the running residual,
// quantize per cell against the codebook, upsample and subtract.
MultiScaleTokens encode_multiscale(const Tensor& latent, const ScaleSchedule& schedule,
                                   const Codebook& codebook,
                                   ResizeMode mode = ResizeMode::Bilinear);

// Sum over scales of the upsampled code vectors.
Tensor decode_multiscale(const MultiScaleTokens& tokens, const ScaleSchedule& schedule,
                         const Codebook& codebook, ResizeMode mode = ResizeMode::Bilinear);

// Nearest codebook row by L2 distance, ties broken toward the lower index.
int nearest_code(const Codebook& codebook, const double* vec);

}  // namespace ecm
