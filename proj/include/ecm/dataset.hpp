#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecm/tensor.hpp"

namespace ecm {

// Procedural stand-in for a labeled image dataset with spatial conditions.
// Classes are shape families; conditions are derived from the image itself.
struct SyntheticSample {
  int side = 0;
  std::vector<double> image;   // side*side grayscale in [0,1]
  int class_id = 0;            // 0 square, 1 circle, 2 triangle, 3 stripes
  std::vector<uint8_t> edges;  // binary edge map
  std::vector<double> depth;   // normalized distance-to-edge
};

constexpr int kNumShapeClasses = 4;

std::vector<SyntheticSample> make_dataset(uint64_t seed, int count, int side);

// Gradient-magnitude edge detector (forward differences, fixed threshold).
std::vector<uint8_t> extract_edges(const std::vector<double>& image, int side,
                                   double threshold = 0.25);

// Normalized BFS distance to the nearest edge pixel; zeros when no edges.
std::vector<double> pseudo_depth(const std::vector<uint8_t>& edges, int side);

// Precision/recall F1 of edge pixels matched within tolerance_radius
// (Chebyshev). Both maps empty counts as a perfect match.
double edge_f1(const std::vector<uint8_t>& generated, const std::vector<uint8_t>& condition,
               int side, int tolerance_radius = 1);

Tensor image_tensor(const std::vector<double>& image, int side);
Tensor edges_tensor(const std::vector<uint8_t>& edges, int side);

// Fixed orthonormal per-patch linear map between image patches and latent
// channels (depth = patch^2, so the map is exactly invertible).
struct PatchEmbed {
  int patch = 4;
  std::vector<double> weight;  // (patch^2) x (patch^2), orthonormal rows

  static PatchEmbed orthonormal(int patch, uint64_t seed);
  int latent_dim() const { return patch * patch; }
  // image side*side -> latent [g x g x patch^2]
  Tensor to_latent(const std::vector<double>& image, int side) const;
  // latent [g x g x patch^2] -> image (g*patch) x (g*patch)
  std::vector<double> to_image(const Tensor& latent) const;
};

// PGM (P5) image I/O, values clamped to [0,1].
void write_pgm(const std::string& path, const std::vector<double>& image, int side);
std::vector<double> read_pgm(const std::string& path, int& side);

}  // namespace ecm
