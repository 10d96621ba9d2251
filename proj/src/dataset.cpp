#include "ecm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <stdexcept>

#include "ecm/rng.hpp"

namespace ecm {

namespace {

double clamp01(double x) { return std::min(1.0, std::max(0.0, x)); }

// Shapes are drawn from a small discrete variant set per class. Continuous
// parameter draws make coarse-scale tokens irreducibly ambiguous given the
// class (the Bayes accuracy ceiling of the token sequences drops below 0.9);
// a finite variant set keeps the sequences learnable while preserving
// per-class diversity. Intensity varies with the variant so even the global
// mean carries variant information.
constexpr int kVariantsPerClass = 8;

// Levels stay well above the edge-detection threshold so every variant keeps
// a crisp contour after decode; the spread still separates variants at the
// coarsest token.
double variant_level(int v) { return 0.55 + 0.05 * v; }

// Anchor corner for a box of extent `size`: four quadrants.
std::pair<int, int> quadrant_corner(int q, int side, int size) {
  const int lo = 1, hi = side - size - 1;
  return {q / 2 == 0 ? lo : hi, q % 2 == 0 ? lo : hi};
}

void draw_square(std::vector<double>& img, int side, int v) {
  const int size = v < 4 ? side / 3 : side / 2;
  const auto [r0, c0] = quadrant_corner(v % 4, side, size);
  const double level = variant_level(v);
  for (int r = r0; r < r0 + size; ++r)
    for (int c = c0; c < c0 + size; ++c) img[static_cast<size_t>(r * side + c)] = level;
}

void draw_circle(std::vector<double>& img, int side, int v) {
  const double rad = v < 4 ? side / 5.0 : side / 3.5;
  const int ext = static_cast<int>(2.0 * rad);
  const auto [r0, c0] = quadrant_corner(v % 4, side, ext);
  const double cy = r0 + rad, cx = c0 + rad;
  const double level = variant_level(v);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r + 0.5 - cy, dx = c + 0.5 - cx;
      if (dy * dy + dx * dx <= rad * rad) img[static_cast<size_t>(r * side + c)] = level;
    }
}

void draw_triangle(std::vector<double>& img, int side, int v) {
  // Axis-aligned right triangle: filled below the diagonal of its bounding box.
  const int size = v < 4 ? side / 3 + 1 : side / 2 + 1;
  const auto [r0, c0] = quadrant_corner(v % 4, side, size);
  const double level = variant_level(v);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c <= r; ++c)
      img[static_cast<size_t>((r0 + r) * side + (c0 + c))] = level;
}

void draw_stripes(std::vector<double>& img, int side, int v) {
  const int period = v < 4 ? 2 : 4;
  const int phase = v % 2;
  const bool horizontal = (v / 2) % 2 == 0;
  const double level = variant_level(v);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const int t = horizontal ? r : c;
      if ((t + phase) % period < (period + 1) / 2)
        img[static_cast<size_t>(r * side + c)] = level;
    }
}

}  // namespace

std::vector<uint8_t> extract_edges(const std::vector<double>& image, int side, double threshold) {
  if (static_cast<int>(image.size()) != side * side)
    throw std::invalid_argument("extract_edges: size mismatch");
  std::vector<uint8_t> edges(image.size(), 0);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double v = image[static_cast<size_t>(r * side + c)];
      const double gx = c + 1 < side ? image[static_cast<size_t>(r * side + c + 1)] - v : 0.0;
      const double gy = r + 1 < side ? image[static_cast<size_t>((r + 1) * side + c)] - v : 0.0;
      if (std::abs(gx) + std::abs(gy) > threshold) edges[static_cast<size_t>(r * side + c)] = 1;
    }
  return edges;
}

std::vector<double> pseudo_depth(const std::vector<uint8_t>& edges, int side) {
  if (static_cast<int>(edges.size()) != side * side)
    throw std::invalid_argument("pseudo_depth: size mismatch");
  const int unset = -1;
  std::vector<int> dist(edges.size(), unset);
  std::deque<int> queue;
  for (int i = 0; i < side * side; ++i)
    if (edges[static_cast<size_t>(i)]) {
      dist[static_cast<size_t>(i)] = 0;
      queue.push_back(i);
    }
  std::vector<double> out(edges.size(), 0.0);
  if (queue.empty()) return out;
  while (!queue.empty()) {
    const int i = queue.front();
    queue.pop_front();
    const int r = i / side, c = i % side;
    const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
    for (int d = 0; d < 4; ++d) {
      const int nr = r + dr[d], nc = c + dc[d];
      if (nr < 0 || nr >= side || nc < 0 || nc >= side) continue;
      const int j = nr * side + nc;
      if (dist[static_cast<size_t>(j)] == unset) {
        dist[static_cast<size_t>(j)] = dist[static_cast<size_t>(i)] + 1;
        queue.push_back(j);
      }
    }
  }
  const int mx = *std::max_element(dist.begin(), dist.end());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = mx > 0 ? static_cast<double>(dist[i]) / mx : 0.0;
  return out;
}

std::vector<SyntheticSample> make_dataset(uint64_t seed, int count, int side) {
  if (count < 1 || side < 8) throw std::invalid_argument("make_dataset: bad arguments");
  Rng rng(seed);
  std::vector<SyntheticSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    SyntheticSample s;
    s.side = side;
    s.image.assign(static_cast<size_t>(side * side), 0.0);
    s.class_id = i % kNumShapeClasses;  // balanced by construction
    const int variant = rng.uniform_int(kVariantsPerClass);
    switch (s.class_id) {
      case 0: draw_square(s.image, side, variant); break;
      case 1: draw_circle(s.image, side, variant); break;
      case 2: draw_triangle(s.image, side, variant); break;
      default: draw_stripes(s.image, side, variant); break;
    }
    s.edges = extract_edges(s.image, side);
    s.depth = pseudo_depth(s.edges, side);
    out.push_back(std::move(s));
  }
  return out;
}

double edge_f1(const std::vector<uint8_t>& generated, const std::vector<uint8_t>& condition,
               int side, int tolerance_radius) {
  if (generated.size() != condition.size() ||
      static_cast<int>(generated.size()) != side * side)
    throw std::invalid_argument("edge_f1: size mismatch");
  auto matched = [&](const std::vector<uint8_t>& from, const std::vector<uint8_t>& against) {
    int64_t hit = 0, total = 0;
    for (int r = 0; r < side; ++r)
      for (int c = 0; c < side; ++c) {
        if (!from[static_cast<size_t>(r * side + c)]) continue;
        ++total;
        bool found = false;
        for (int dr = -tolerance_radius; dr <= tolerance_radius && !found; ++dr)
          for (int dc = -tolerance_radius; dc <= tolerance_radius && !found; ++dc) {
            const int nr = r + dr, nc = c + dc;
            if (nr >= 0 && nr < side && nc >= 0 && nc < side &&
                against[static_cast<size_t>(nr * side + nc)])
              found = true;
          }
        if (found) ++hit;
      }
    return std::pair<int64_t, int64_t>{hit, total};
  };
  const auto [tp_p, n_gen] = matched(generated, condition);   // precision side
  const auto [tp_r, n_cond] = matched(condition, generated);  // recall side
  if (n_gen == 0 && n_cond == 0) return 1.0;
  if (n_gen == 0 || n_cond == 0) return 0.0;
  const double precision = static_cast<double>(tp_p) / n_gen;
  const double recall = static_cast<double>(tp_r) / n_cond;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

Tensor image_tensor(const std::vector<double>& image, int side) {
  if (static_cast<int>(image.size()) != side * side)
    throw std::invalid_argument("image_tensor: size mismatch");
  Tensor t({side, side});
  std::copy(image.begin(), image.end(), t.data());
  return t;
}

Tensor edges_tensor(const std::vector<uint8_t>& edges, int side) {
  std::vector<double> as_double(edges.begin(), edges.end());
  return image_tensor(as_double, side);
}

PatchEmbed PatchEmbed::orthonormal(int patch, uint64_t seed) {
  PatchEmbed pe;
  pe.patch = patch;
  const int d = patch * patch;
  Rng rng(seed);
  pe.weight.assign(static_cast<size_t>(d * d), 0.0);
  // Gram-Schmidt on Gaussian rows; retry a row on (vanishingly unlikely)
  // near-degeneracy.
  for (int r = 0; r < d; ++r) {
    while (true) {
      for (int c = 0; c < d; ++c) pe.weight[static_cast<size_t>(r * d + c)] = rng.normal();
      for (int prev = 0; prev < r; ++prev) {
        double dot = 0.0;
        for (int c = 0; c < d; ++c)
          dot += pe.weight[static_cast<size_t>(r * d + c)] *
                 pe.weight[static_cast<size_t>(prev * d + c)];
        for (int c = 0; c < d; ++c)
          pe.weight[static_cast<size_t>(r * d + c)] -=
              dot * pe.weight[static_cast<size_t>(prev * d + c)];
      }
      double norm = 0.0;
      for (int c = 0; c < d; ++c) {
        const double x = pe.weight[static_cast<size_t>(r * d + c)];
        norm += x * x;
      }
      norm = std::sqrt(norm);
      if (norm > 1e-6) {
        for (int c = 0; c < d; ++c) pe.weight[static_cast<size_t>(r * d + c)] /= norm;
        break;
      }
    }
  }
  return pe;
}

Tensor PatchEmbed::to_latent(const std::vector<double>& image, int side) const {
  if (side % patch != 0) throw std::invalid_argument("to_latent: side not divisible by patch");
  if (static_cast<int>(image.size()) != side * side)
    throw std::invalid_argument("to_latent: size mismatch");
  const int g = side / patch;
  const int d = latent_dim();
  if (d > 64) throw std::invalid_argument("to_latent: patch too large");
  Tensor latent({g, g, d});
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      double pix[64];
      int n = 0;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c)
          pix[n++] = image[static_cast<size_t>((pr * patch + r) * side + pc * patch + c)];
      double* out = latent.data() + static_cast<int64_t>((pr * g + pc)) * d;
      for (int k = 0; k < d; ++k) {
        double acc = 0.0;
        for (int c = 0; c < d; ++c) acc += weight[static_cast<size_t>(k * d + c)] * pix[c];
        out[k] = acc;
      }
    }
  return latent;
}

std::vector<double> PatchEmbed::to_image(const Tensor& latent) const {
  if (latent.rank() != 3 || latent.dim(2) != latent_dim())
    throw std::invalid_argument("to_image: bad latent shape");
  const int g = latent.dim(0);
  if (latent.dim(1) != g) throw std::invalid_argument("to_image: latent grid must be square");
  const int side = g * patch;
  const int d = latent_dim();
  std::vector<double> image(static_cast<size_t>(side * side), 0.0);
  for (int pr = 0; pr < g; ++pr)
    for (int pc = 0; pc < g; ++pc) {
      const double* in = latent.data() + static_cast<int64_t>((pr * g + pc)) * d;
      for (int r = 0; r < patch; ++r)
        for (int c = 0; c < patch; ++c) {
          const int local = r * patch + c;
          double acc = 0.0;
          for (int k = 0; k < d; ++k) acc += weight[static_cast<size_t>(k * d + local)] * in[k];
          image[static_cast<size_t>((pr * patch + r) * side + pc * patch + c)] = acc;
        }
    }
  return image;
}

void write_pgm(const std::string& path, const std::vector<double>& image, int side) {
  if (static_cast<int>(image.size()) != side * side)
    throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << side << " " << side << "\n255\n";
  for (double v : image) {
    const int byte = static_cast<int>(std::lround(clamp01(v) * 255.0));
    out.put(static_cast<char>(byte));
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

std::vector<double> read_pgm(const std::string& path, int& side) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P5" || w != h || w <= 0 || maxval <= 0 || maxval > 255)
    throw std::runtime_error("read_pgm: unsupported header in " + path);
  in.get();  // single whitespace after maxval
  std::vector<double> image(static_cast<size_t>(w * h));
  for (double& v : image) {
    const int byte = in.get();
    if (byte < 0) throw std::runtime_error("read_pgm: truncated payload in " + path);
    v = static_cast<double>(byte) / maxval;
  }
  side = w;
  return image;
}

}  // namespace ecm
