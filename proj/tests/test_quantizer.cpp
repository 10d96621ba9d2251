#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "ecm/quantizer.hpp"
#include "ecm/rng.hpp"

using namespace ecm;

namespace {

Tensor random_latent(uint64_t seed, int side, int dim, double stddev = 1.0) {
  Rng rng(seed);
  Tensor t({side, side, dim});
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * stddev;
  return t;
}

double norm(const Tensor& t) {
  double acc = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) acc += t.data()[i] * t.data()[i];
  return std::sqrt(acc);
}

Tensor residual_after(const Tensor& latent, const ScaleSchedule& schedule, const Codebook& cb,
                      int upto) {
  // Reconstruction with the first `upto` scales only.
  MultiScaleTokens tokens = encode_multiscale(latent, schedule, cb);
  tokens.maps.resize(static_cast<size_t>(upto));
  ScaleSchedule partial(std::vector<int>(schedule.sides.begin(), schedule.sides.begin() + upto));
  // Partial decode needs upsampling to the full side, so rebuild through a
  // truncated schedule whose last side matches the full grid.
  Tensor recon({schedule.latent_side(), schedule.latent_side(), cb.dim});
  for (int k = 0; k < upto; ++k) {
    Tensor stage({schedule.sides[static_cast<size_t>(k)], schedule.sides[static_cast<size_t>(k)], cb.dim});
    for (size_t i = 0; i < tokens.maps[static_cast<size_t>(k)].size(); ++i) {
      const double* row = cb.row(tokens.maps[static_cast<size_t>(k)][i]);
      for (int d = 0; d < cb.dim; ++d) stage.data()[static_cast<int64_t>(i) * cb.dim + d] = row[d];
    }
    Tensor up = resize_grid(stage, schedule.latent_side(), schedule.latent_side(), ResizeMode::Bilinear);
    for (int64_t i = 0; i < recon.numel(); ++i) recon.data()[i] += up.data()[i];
  }
  Tensor res(latent.shape());
  for (int64_t i = 0; i < res.numel(); ++i) res.data()[i] = latent.data()[i] - recon.data()[i];
  return res;
}

}  // namespace

TEST_CASE("schedule bookkeeping") {
  ScaleSchedule sched({1, 2, 3, 4});
  CHECK(sched.total_tokens() == 30);
  CHECK(sched.cumulative() == std::vector<int>{1, 5, 14, 30});
  CHECK(sched.offsets() == std::vector<int>{0, 1, 5, 14});
  CHECK(sched.scale_of_position(0) == 0);
  CHECK(sched.scale_of_position(4) == 1);
  CHECK(sched.scale_of_position(29) == 3);
  CHECK(ScaleSchedule::ten_scale().total_tokens() == 680);
  CHECK_THROWS_AS(ScaleSchedule({2, 2, 3}), TensorError);
  CHECK_THROWS_AS(ScaleSchedule({3, 2}), TensorError);
}

TEST_CASE("codebook construction") {
  Codebook a = build_codebook(123, 64, 16);
  Codebook b = build_codebook(123, 64, 16);
  CHECK(a.vectors == b.vectors);  // determinism
  CHECK(a.vocab == 64);
  CHECK(a.dim == 16);
  for (int d = 0; d < 16; ++d) CHECK(a.row(0)[d] == 0.0);
  for (int v = 1; v < 64; ++v) {
    double n = 0.0;
    for (int d = 0; d < 16; ++d) n += a.row(v)[d] * a.row(v)[d];
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-9));
  }
  Codebook c = build_codebook(124, 64, 16);
  CHECK(a.vectors != c.vectors);
}

TEST_CASE("nearest_code ties break toward lower index") {
  Codebook cb;
  cb.vocab = 3;
  cb.dim = 1;
  cb.vectors = {0.0, 1.0, 1.0};  // rows 1 and 2 identical
  const double q = 0.9;
  CHECK(nearest_code(cb, &q) == 1);
  const double z = 0.1;
  CHECK(nearest_code(cb, &z) == 0);
}

TEST_CASE("zero latent encodes to all zero tokens and zero residual") {
  ScaleSchedule sched({1, 2, 3, 4});
  Codebook cb = build_codebook(7, 64, 16);
  Tensor latent({4, 4, 16});
  MultiScaleTokens tokens = encode_multiscale(latent, sched, cb);
  for (const auto& map : tokens.maps)
    for (int t : map) CHECK(t == 0);
  Tensor recon = decode_multiscale(tokens, sched, cb);
  CHECK(norm(recon) == doctest::Approx(0.0));
}

TEST_CASE("single-scale schedule is plain per-cell VQ") {
  ScaleSchedule sched({4});
  Codebook cb = build_codebook(11, 32, 8);
  Tensor latent = random_latent(3, 4, 8);
  MultiScaleTokens tokens = encode_multiscale(latent, sched, cb);
  REQUIRE(tokens.maps.size() == 1);
  for (int i = 0; i < 16; ++i)
    CHECK(tokens.maps[0][static_cast<size_t>(i)] ==
          nearest_code(cb, latent.data() + static_cast<int64_t>(i) * 8));
}

TEST_CASE("residual norm non-increasing across scales, 50 seeds") {
  ScaleSchedule sched({1, 2, 3, 4});
  Codebook cb = build_codebook(99, 64, 16);
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    Tensor latent = random_latent(seed, 4, 16);
    double prev = norm(latent);
    for (int k = 1; k <= sched.num_scales(); ++k) {
      const double cur = norm(residual_after(latent, sched, cb, k));
      CHECK(cur <= prev + 1e-9);
      prev = cur;
    }
  }
}

TEST_CASE("four scales reconstruct better than one, 20 seeds") {
  Codebook cb = build_codebook(5, 64, 16);
  ScaleSchedule multi({1, 2, 3, 4});
  ScaleSchedule single({4});
  double multi_total = 0.0, single_total = 0.0;
  for (uint64_t seed = 101; seed <= 120; ++seed) {
    Tensor latent = random_latent(seed, 4, 16);
    Tensor rm = decode_multiscale(encode_multiscale(latent, multi, cb), multi, cb);
    Tensor rs = decode_multiscale(encode_multiscale(latent, single, cb), single, cb);
    for (int64_t i = 0; i < latent.numel(); ++i) {
      rm.data()[i] -= latent.data()[i];
      rs.data()[i] -= latent.data()[i];
    }
    multi_total += norm(rm);
    single_total += norm(rs);
  }
  CHECK(multi_total < single_total);
}

TEST_CASE("decode is linear in the summed code vectors") {
  ScaleSchedule sched({1, 2});
  Codebook cb = build_codebook(21, 16, 4);
  MultiScaleTokens a, b;
  a.maps = {{3}, {1, 2, 3, 4}};
  b.maps = {{5}, {4, 3, 2, 1}};
  Tensor da = decode_multiscale(a, sched, cb);
  Tensor db = decode_multiscale(b, sched, cb);

  // Manual sum of the same code vectors, upsampled scale by scale.
  Tensor total({2, 2, 4});
  for (int k = 0; k < 2; ++k) {
    const int side = sched.sides[static_cast<size_t>(k)];
    Tensor stage({side, side, 4});
    for (int i = 0; i < side * side; ++i)
      for (int d = 0; d < 4; ++d)
        stage.data()[static_cast<int64_t>(i) * 4 + d] =
            cb.row(a.maps[static_cast<size_t>(k)][static_cast<size_t>(i)])[d] +
            cb.row(b.maps[static_cast<size_t>(k)][static_cast<size_t>(i)])[d];
    Tensor up = resize_grid(stage, 2, 2, ResizeMode::Bilinear);
    for (int64_t i = 0; i < total.numel(); ++i) total.data()[i] += up.data()[i];
  }
  for (int64_t i = 0; i < total.numel(); ++i)
    CHECK(da.data()[i] + db.data()[i] == doctest::Approx(total.data()[i]).epsilon(1e-12));
}

TEST_CASE("round trip deterministic and flat/from_flat invert") {
  ScaleSchedule sched({1, 2, 3, 4});
  Codebook cb = build_codebook(17, 64, 16);
  Tensor latent = random_latent(55, 4, 16);
  MultiScaleTokens t1 = encode_multiscale(latent, sched, cb);
  MultiScaleTokens t2 = encode_multiscale(latent, sched, cb);
  CHECK(t1 == t2);
  CHECK(MultiScaleTokens::from_flat(t1.flat(), sched) == t1);
  CHECK(static_cast<int>(t1.flat().size()) == sched.total_tokens());
  CHECK_THROWS_AS(encode_multiscale(random_latent(1, 3, 16), sched, cb), TensorError);
}
