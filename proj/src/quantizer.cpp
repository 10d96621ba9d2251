#include "ecm/quantizer.hpp"

#include <cmath>

#include "ecm/rng.hpp"

namespace ecm {

ScaleSchedule::ScaleSchedule(std::vector<int> s) : sides(std::move(s)) {
  if (sides.empty()) throw TensorError("ScaleSchedule: empty");
  for (size_t i = 0; i < sides.size(); ++i) {
    if (sides[i] < 1) throw TensorError("ScaleSchedule: sides must be positive");
    if (i > 0 && sides[i] <= sides[i - 1])
      throw TensorError("ScaleSchedule: sides must be strictly increasing");
  }
}

int ScaleSchedule::total_tokens() const {
  int t = 0;
  for (int s : sides) t += s * s;
  return t;
}

std::vector<int> ScaleSchedule::cumulative() const {
  std::vector<int> c;
  int t = 0;
  for (int s : sides) {
    t += s * s;
    c.push_back(t);
  }
  return c;
}

std::vector<int> ScaleSchedule::offsets() const {
  std::vector<int> o;
  int t = 0;
  for (int s : sides) {
    o.push_back(t);
    t += s * s;
  }
  return o;
}

int ScaleSchedule::scale_of_position(int p) const {
  int t = 0;
  for (int k = 0; k < num_scales(); ++k) {
    t += tokens_at(k);
    if (p < t) return k;
  }
  throw TensorError("ScaleSchedule: position out of range");
}

Codebook build_codebook(uint64_t seed, int vocab, int dim) {
  if (vocab < 2 || dim < 1) throw TensorError("build_codebook: need vocab >= 2, dim >= 1");
  Codebook cb;
  cb.vocab = vocab;
  cb.dim = dim;
  cb.seed = seed;
  cb.vectors.assign(static_cast<size_t>(vocab) * dim, 0.0);
  Rng rng(seed);
  for (int i = 1; i < vocab; ++i) {
    double norm2 = 0.0;
    double* row = cb.vectors.data() + static_cast<int64_t>(i) * dim;
    for (int j = 0; j < dim; ++j) {
      row[j] = rng.normal();
      norm2 += row[j] * row[j];
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (int j = 0; j < dim; ++j) row[j] *= inv;
  }
  return cb;
}

std::vector<int> MultiScaleTokens::flat() const {
  std::vector<int> out;
  for (const auto& m : maps) out.insert(out.end(), m.begin(), m.end());
  return out;
}

MultiScaleTokens MultiScaleTokens::from_flat(const std::vector<int>& flat,
                                             const ScaleSchedule& schedule) {
  if (static_cast<int>(flat.size()) != schedule.total_tokens())
    throw TensorError("MultiScaleTokens::from_flat: length mismatch");
  MultiScaleTokens t;
  size_t p = 0;
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int n = schedule.tokens_at(k);
    t.maps.emplace_back(flat.begin() + static_cast<long>(p), flat.begin() + static_cast<long>(p) + n);
    p += static_cast<size_t>(n);
  }
  return t;
}

int nearest_code(const Codebook& cb, const double* vec) {
  int best = 0;
  double best_d = 0.0;
  for (int i = 0; i < cb.vocab; ++i) {
    const double* row = cb.row(i);
    double d = 0.0;
    for (int j = 0; j < cb.dim; ++j) {
      const double diff = vec[j] - row[j];
      d += diff * diff;
    }
    if (i == 0 || d < best_d) {
      best = i;
      best_d = d;
    }
  }
  return best;
}

MultiScaleTokens encode_multiscale(const Tensor& latent, const ScaleSchedule& schedule,
                                   const Codebook& codebook, ResizeMode mode) {
  if (latent.rank() != 3 || latent.dim(0) != latent.dim(1))
    throw TensorError("encode_multiscale: latent must be [H x H x D]");
  if (latent.dim(0) != schedule.latent_side())
    throw TensorError("encode_multiscale: latent side does not match schedule");
  if (latent.dim(2) != codebook.dim)
    throw TensorError("encode_multiscale: latent depth does not match codebook");

  const int h = latent.dim(0), d = latent.dim(2);
  Tensor residual = Tensor::from(latent.shape(), latent.vec());
  MultiScaleTokens tokens;
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int side = schedule.sides[static_cast<size_t>(k)];
    Tensor down = resize_grid(residual, side, side, mode);
    std::vector<int> map(static_cast<size_t>(side) * side);
    Tensor quant(Shape{side, side, d});
    for (int c = 0; c < side * side; ++c) {
      const int idx = nearest_code(codebook, down.data() + static_cast<int64_t>(c) * d);
      map[static_cast<size_t>(c)] = idx;
      std::copy_n(codebook.row(idx), d, quant.data() + static_cast<int64_t>(c) * d);
    }
    Tensor up = resize_grid(quant, h, h, mode);
    for (int64_t i = 0; i < residual.numel(); ++i) residual.data()[i] -= up.data()[i];
    tokens.maps.push_back(std::move(map));
  }
  return tokens;
}

Tensor decode_multiscale(const MultiScaleTokens& tokens, const ScaleSchedule& schedule,
                         const Codebook& codebook, ResizeMode mode) {
  if (static_cast<int>(tokens.maps.size()) != schedule.num_scales())
    throw TensorError("decode_multiscale: scale count mismatch");
  const int h = schedule.latent_side(), d = codebook.dim;
  Tensor out(Shape{h, h, d});
  for (int k = 0; k < schedule.num_scales(); ++k) {
    const int side = schedule.sides[static_cast<size_t>(k)];
    const auto& map = tokens.maps[static_cast<size_t>(k)];
    if (static_cast<int>(map.size()) != side * side)
      throw TensorError("decode_multiscale: token map size mismatch");
    Tensor quant(Shape{side, side, d});
    for (int c = 0; c < side * side; ++c) {
      const int idx = map[static_cast<size_t>(c)];
      if (idx < 0 || idx >= codebook.vocab)
        throw TensorError("decode_multiscale: token index out of range");
      std::copy_n(codebook.row(idx), d, quant.data() + static_cast<int64_t>(c) * d);
    }
    Tensor up = resize_grid(quant, h, h, mode);
    for (int64_t i = 0; i < out.numel(); ++i) out.data()[i] += up.data()[i];
  }
  return out;
}

}  // namespace ecm
