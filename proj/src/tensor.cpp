#include "ecm/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ecm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool g_checked = false;

constexpr double kMaskFloor = -1e29;  // entries at/below this count as masked out
constexpr double kLnEps = 1e-12;      // layer_norm variance stabilizer

std::string shape_str(const Shape& s) {
  std::string r = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + ")";
}

void check_finite(const Tensor& t, const char* op) {
  if (!g_checked) return;
  for (double v : t.vec()) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

bool tracked(const Tensor& t) { return t.impl()->requires_grad || t.impl()->has_history; }

void maybe_record(Tensor& out, std::initializer_list<const Tensor*> ins, std::function<void()> fn) {
  Tape* tp = Tape::current();
  if (!tp) return;
  bool any = false;
  for (const Tensor* t : ins) any = any || tracked(*t);
  if (!any) return;
  out.impl()->has_history = true;
  tp->record(out.impl_ptr(), std::move(fn));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw TensorError(msg);
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw TensorError("shape dimensions must be positive");
    n *= d;
  }
  return n;
}

void set_checked_mode(bool enabled) { g_checked = enabled; }
bool checked_mode() { return g_checked; }

Tensor::Tensor(Shape shape, double fill, bool requires_grad) {
  impl_ = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl_->shape = std::move(shape);
  impl_->data.assign(static_cast<size_t>(n), fill);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size()))
    throw TensorError("Tensor::from: data length does not match shape " + shape_str(shape));
  Tensor t(shape);
  t.impl_->data = std::move(data);
  return t;
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

Tensor Tensor::zeros_like(const Tensor& t) { return Tensor(t.shape()); }

int Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw TensorError("Tensor::dim: axis out of range");
  return impl_->shape[static_cast<size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("Tensor::item: tensor is not scalar");
  return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (!impl_->grad.empty()) return impl_->grad;
  return std::vector<double>(impl_->data.size(), 0.0);
}

// ---- Tape ----

namespace {
thread_local Tape* g_current_tape = nullptr;
}

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::shared_ptr<TensorImpl> out, std::function<void()> backward_fn) {
  entries_.push_back(Entry{std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TensorError("Tape::backward called twice without reset");
  if (!loss.defined() || loss.numel() != 1) throw TensorError("backward: loss must be scalar");
  if (!loss.impl()->has_history)
    throw TensorError("backward: loss is not reachable from recorded ops");
  consumed_ = true;
  loss.impl()->grad.assign(1, 1.0);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // nothing flowed into this node
    it->fn();
  }
}

void Tape::reset() {
  entries_.clear();
  consumed_ = false;
}

std::vector<double>* grad_buf(TensorImpl* t) {
  if (!t->requires_grad && !t->has_history) return nullptr;
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return &t->grad;
}

// ---- elementwise ----

namespace {

template <class Fwd, class Bwd>
Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* name, Fwd fwd, Bwd bwd) {
  require(a.shape() == b.shape(), std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = fwd(a.data()[i], b.data()[i]);
  check_finite(out, name);
  maybe_record(out, {&a, &b}, [a, b, o = out.impl_ptr(), bwd]() {
    const auto& go = o->grad;
    auto* ga = grad_buf(a.impl());
    auto* gb = grad_buf(b.impl());
    const int64_t n = static_cast<int64_t>(go.size());
    for (int64_t i = 0; i < n; ++i) {
      double da, db;
      bwd(a.data()[i], b.data()[i], go[i], da, db);
      if (ga) (*ga)[i] += da;
      if (gb) (*gb)[i] += db;
    }
  });
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double, double g, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

namespace {

// x treated as [N x d] over its last axis; v has shape [d].
void rowwise_check(const Tensor& x, const Tensor& v, const char* name) {
  require(x.rank() >= 1 && v.rank() == 1, std::string(name) + ": expects vector second arg");
  require(x.dim(-1) == v.dim(0), std::string(name) + ": width mismatch");
}

}  // namespace

Tensor add_rowwise(const Tensor& x, const Tensor& v) {
  rowwise_check(x, v, "add_rowwise");
  const int d = v.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] + v.data()[j];
  check_finite(out, "add_rowwise");
  maybe_record(out, {&x, &v}, [x, v, o = out.impl_ptr(), rows, d]() {
    const auto& go = o->grad;
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i];
    if (auto* gv = grad_buf(v.impl()))
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < d; ++j) (*gv)[j] += go[r * d + j];
  });
  return out;
}

Tensor mul_rowwise(const Tensor& x, const Tensor& v) {
  rowwise_check(x, v, "mul_rowwise");
  const int d = v.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] * v.data()[j];
  check_finite(out, "mul_rowwise");
  maybe_record(out, {&x, &v}, [x, v, o = out.impl_ptr(), rows, d]() {
    const auto& go = o->grad;
    auto* gx = grad_buf(x.impl());
    auto* gv = grad_buf(v.impl());
    for (int64_t r = 0; r < rows; ++r)
      for (int j = 0; j < d; ++j) {
        const double g = go[r * d + j];
        if (gx) (*gx)[r * d + j] += g * v.data()[j];
        if (gv) (*gv)[j] += g * x.data()[r * d + j];
      }
  });
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] * c;
  check_finite(out, "scale");
  maybe_record(out, {&x}, [x, o = out.impl_ptr(), c]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i) (*gx)[i] += o->grad[i] * c;
  });
  return out;
}

Tensor add_const(const Tensor& x, double c) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] + c;
  check_finite(out, "add_const");
  maybe_record(out, {&x}, [x, o = out.impl_ptr()]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i) (*gx)[i] += o->grad[i];
  });
  return out;
}

// ---- matmul ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: expects rank-2 tensors");
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions mismatch " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  MapMat(out.data(), m, n).noalias() = CMapMat(a.data(), m, k) * CMapMat(b.data(), k, n);
  check_finite(out, "matmul");
  maybe_record(out, {&a, &b}, [a, b, o = out.impl_ptr(), m, k, n]() {
    CMapMat go(o->grad.data(), m, n);
    if (auto* ga = grad_buf(a.impl()))
      MapMat(ga->data(), m, k).noalias() += go * CMapMat(b.data(), k, n).transpose();
    if (auto* gb = grad_buf(b.impl()))
      MapMat(gb->data(), k, n).noalias() += CMapMat(a.data(), m, k).transpose() * go;
  });
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul_nt: expects rank-2 tensors");
  require(a.dim(1) == b.dim(1), "matmul_nt: inner dimensions mismatch");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  Tensor out(Shape{m, n});
  MapMat(out.data(), m, n).noalias() =
      CMapMat(a.data(), m, k) * CMapMat(b.data(), n, k).transpose();
  check_finite(out, "matmul_nt");
  maybe_record(out, {&a, &b}, [a, b, o = out.impl_ptr(), m, k, n]() {
    CMapMat go(o->grad.data(), m, n);
    if (auto* ga = grad_buf(a.impl()))
      MapMat(ga->data(), m, k).noalias() += go * CMapMat(b.data(), n, k);
    if (auto* gb = grad_buf(b.impl()))
      MapMat(gb->data(), n, k).noalias() += go.transpose() * CMapMat(a.data(), m, k);
  });
  return out;
}

// ---- nonlinearities ----

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  require(axis >= 0 && axis < x.rank(), "softmax: axis out of range");
  const Shape& s = x.shape();
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= s[static_cast<size_t>(i)];
  const int n = s[static_cast<size_t>(axis)];

  Tensor out(x.shape());
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * n * inner + in;
      double mx = x.data()[base];
      for (int i = 1; i < n; ++i) mx = std::max(mx, x.data()[base + i * inner]);
      if (mx <= kMaskFloor)
        throw DegenerateRowError("softmax: fully masked slice (all entries at mask floor)");
      double sum = 0.0;
      for (int i = 0; i < n; ++i) {
        double e = std::exp(x.data()[base + i * inner] - mx);
        out.data()[base + i * inner] = e;
        sum += e;
      }
      for (int i = 0; i < n; ++i) out.data()[base + i * inner] /= sum;
    }
  }
  check_finite(out, "softmax");
  maybe_record(out, {&x}, [x, o = out.impl_ptr(), outer, inner, n]() {
    auto* gx = grad_buf(x.impl());
    if (!gx) return;
    const auto& go = o->grad;
    const auto& y = o->data;
    for (int64_t ou = 0; ou < outer; ++ou) {
      for (int64_t in = 0; in < inner; ++in) {
        const int64_t base = ou * n * inner + in;
        double dot = 0.0;
        for (int i = 0; i < n; ++i) dot += go[base + i * inner] * y[base + i * inner];
        for (int i = 0; i < n; ++i)
          (*gx)[base + i * inner] += y[base + i * inner] * (go[base + i * inner] - dot);
      }
    }
  });
  return out;
}

Tensor sigmoid(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  check_finite(out, "sigmoid");
  maybe_record(out, {&x}, [x, o = out.impl_ptr()]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i) {
        const double y = o->data[i];
        (*gx)[i] += o->grad[i] * y * (1.0 - y);
      }
  });
  return out;
}

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

double gelu_fwd(double v) {
  const double u = kGeluC * (v + kGeluA * v * v * v);
  return 0.5 * v * (1.0 + std::tanh(u));
}

double gelu_bwd(double v) {
  const double u = kGeluC * (v + kGeluA * v * v * v);
  const double t = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
}

}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) out.data()[i] = gelu_fwd(x.data()[i]);
  check_finite(out, "gelu");
  maybe_record(out, {&x}, [x, o = out.impl_ptr()]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i) (*gx)[i] += o->grad[i] * gelu_bwd(x.data()[i]);
  });
  return out;
}

// ---- layer_norm ----

Tensor layer_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
  rowwise_check(x, g, "layer_norm");
  rowwise_check(x, b, "layer_norm");
  const int d = g.dim(0);
  const int64_t rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> inv_sigma(static_cast<size_t>(rows));
  std::vector<double> xhat(static_cast<size_t>(x.numel()));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + kLnEps);
    inv_sigma[static_cast<size_t>(r)] = is;
    for (int j = 0; j < d; ++j) {
      const double xh = (xr[j] - mu) * is;
      xhat[static_cast<size_t>(r * d + j)] = xh;
      out.data()[r * d + j] = xh * g.data()[j] + b.data()[j];
    }
  }
  check_finite(out, "layer_norm");
  maybe_record(out, {&x, &g, &b},
               [x, g, b, o = out.impl_ptr(), rows, d, inv_sigma = std::move(inv_sigma),
                xhat = std::move(xhat)]() {
                 const auto& go = o->grad;
                 auto* gx = grad_buf(x.impl());
                 auto* gg = grad_buf(g.impl());
                 auto* gb = grad_buf(b.impl());
                 for (int64_t r = 0; r < rows; ++r) {
                   const double* gor = go.data() + r * d;
                   const double* xh = xhat.data() + r * d;
                   if (gg || gb)
                     for (int j = 0; j < d; ++j) {
                       if (gg) (*gg)[j] += gor[j] * xh[j];
                       if (gb) (*gb)[j] += gor[j];
                     }
                   if (gx) {
                     double m1 = 0.0, m2 = 0.0;
                     for (int j = 0; j < d; ++j) {
                       const double dxh = gor[j] * g.data()[j];
                       m1 += dxh;
                       m2 += dxh * xh[j];
                     }
                     m1 /= d;
                     m2 /= d;
                     const double is = inv_sigma[static_cast<size_t>(r)];
                     for (int j = 0; j < d; ++j) {
                       const double dxh = gor[j] * g.data()[j];
                       (*gx)[r * d + j] += is * (dxh - m1 - xh[j] * m2);
                     }
                   }
                 }
               });
  return out;
}

// ---- cross entropy ----

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  return cross_entropy(logits, targets, std::vector<double>());
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights) {
  require(logits.rank() == 2, "cross_entropy: logits must be [N x V]");
  const int n = logits.dim(0), v = logits.dim(1);
  require(static_cast<int>(targets.size()) == n, "cross_entropy: target count mismatch");
  require(weights.empty() || static_cast<int>(weights.size()) == n,
          "cross_entropy: weight count mismatch");
  for (int t : targets)
    if (t < 0 || t >= v) throw TensorError("cross_entropy: target index out of range");

  std::vector<double> probs(static_cast<size_t>(logits.numel()));
  double total = 0.0, wsum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<int64_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int j = 0; j < v; ++j) {
      double e = std::exp(row[j] - mx);
      probs[static_cast<size_t>(i) * v + j] = e;
      sum += e;
    }
    for (int j = 0; j < v; ++j) probs[static_cast<size_t>(i) * v + j] /= sum;
    const double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(i)];
    total += w * (std::log(sum) + mx - row[targets[static_cast<size_t>(i)]]);
    wsum += w;
  }
  require(wsum > 0.0, "cross_entropy: total weight is zero");
  Tensor out = Tensor::scalar(total / wsum);
  check_finite(out, "cross_entropy");
  maybe_record(out, {&logits},
               [logits, o = out.impl_ptr(), targets, weights, probs = std::move(probs), n, v,
                wsum]() {
                 auto* gl = grad_buf(logits.impl());
                 if (!gl) return;
                 const double gout = o->grad[0];
                 for (int i = 0; i < n; ++i) {
                   const double w = weights.empty() ? 1.0 : weights[static_cast<size_t>(i)];
                   if (w == 0.0) continue;
                   const double c = gout * w / wsum;
                   for (int j = 0; j < v; ++j) {
                     double p = probs[static_cast<size_t>(i) * v + j];
                     (*gl)[static_cast<int64_t>(i) * v + j] +=
                         c * (p - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
                   }
                 }
               });
  return out;
}

// ---- structure ----

Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
  require(table.rank() == 2, "gather_rows: table must be rank 2");
  const int v = table.dim(0), d = table.dim(1);
  for (int i : idx)
    if (i < 0 || i >= v) throw TensorError("gather_rows: index out of range");
  const int n = static_cast<int>(idx.size());
  Tensor out(Shape{n, d});
  for (int i = 0; i < n; ++i)
    std::copy_n(table.data() + static_cast<int64_t>(idx[static_cast<size_t>(i)]) * d, d,
                out.data() + static_cast<int64_t>(i) * d);
  maybe_record(out, {&table}, [table, o = out.impl_ptr(), idx, d]() {
    if (auto* gt = grad_buf(table.impl()))
      for (size_t i = 0; i < idx.size(); ++i)
        for (int j = 0; j < d; ++j)
          (*gt)[static_cast<int64_t>(idx[i]) * d + j] += o->grad[i * d + j];
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  check_finite(out, "sum");
  maybe_record(out, {&x}, [x, o = out.impl_ptr()]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < gx->size(); ++i) (*gx)[i] += o->grad[0];
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.numel());
  return scale(sum(x), inv);
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  require(x.rank() == 2, "slice_rows: expects rank-2 tensor");
  require(0 <= r0 && r0 < r1 && r1 <= x.dim(0), "slice_rows: bad range");
  const int d = x.dim(1);
  Tensor out(Shape{r1 - r0, d});
  std::copy_n(x.data() + static_cast<int64_t>(r0) * d, static_cast<int64_t>(r1 - r0) * d,
              out.data());
  maybe_record(out, {&x}, [x, o = out.impl_ptr(), r0, d]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i)
        (*gx)[static_cast<int64_t>(r0) * d + static_cast<int64_t>(i)] += o->grad[i];
  });
  return out;
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  require(x.rank() == 2, "slice_cols: expects rank-2 tensor");
  require(0 <= c0 && c0 < c1 && c1 <= x.dim(1), "slice_cols: bad range");
  const int n = x.dim(0), d = x.dim(1), w = c1 - c0;
  Tensor out(Shape{n, w});
  for (int r = 0; r < n; ++r)
    std::copy_n(x.data() + static_cast<int64_t>(r) * d + c0, w,
                out.data() + static_cast<int64_t>(r) * w);
  maybe_record(out, {&x}, [x, o = out.impl_ptr(), c0, n, d, w]() {
    if (auto* gx = grad_buf(x.impl()))
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < w; ++j)
          (*gx)[static_cast<int64_t>(r) * d + c0 + j] += o->grad[static_cast<size_t>(r) * w + j];
  });
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: empty input");
  const int d = parts[0].dim(1);
  int total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.dim(1) == d, "concat_rows: width mismatch");
    total += p.dim(0);
  }
  Tensor out(Shape{total, d});
  int row = 0;
  std::vector<int> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(row);
    std::copy_n(p.data(), p.numel(), out.data() + static_cast<int64_t>(row) * d);
    row += p.dim(0);
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || tracked(p);
  if (Tape* tp = Tape::current(); tp && any) {
    out.impl()->has_history = true;
    tp->record(out.impl_ptr(), [parts, o = out.impl_ptr(), offsets, d]() {
      for (size_t k = 0; k < parts.size(); ++k) {
        if (auto* gp = grad_buf(parts[k].impl())) {
          const int64_t base = static_cast<int64_t>(offsets[k]) * d;
          for (size_t i = 0; i < gp->size(); ++i) (*gp)[i] += o->grad[static_cast<size_t>(base) + i];
        }
      }
    });
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: empty input");
  const int n = parts[0].dim(0);
  int total = 0;
  for (const Tensor& p : parts) {
    require(p.rank() == 2 && p.dim(0) == n, "concat_cols: row count mismatch");
    total += p.dim(1);
  }
  Tensor out(Shape{n, total});
  int col = 0;
  std::vector<int> offsets;
  for (const Tensor& p : parts) {
    offsets.push_back(col);
    const int w = p.dim(1);
    for (int r = 0; r < n; ++r)
      std::copy_n(p.data() + static_cast<int64_t>(r) * w, w,
                  out.data() + static_cast<int64_t>(r) * total + col);
    col += w;
  }
  bool any = false;
  for (const Tensor& p : parts) any = any || tracked(p);
  if (Tape* tp = Tape::current(); tp && any) {
    out.impl()->has_history = true;
    tp->record(out.impl_ptr(), [parts, o = out.impl_ptr(), offsets, n, total]() {
      for (size_t k = 0; k < parts.size(); ++k) {
        if (auto* gp = grad_buf(parts[k].impl())) {
          const int w = parts[k].dim(1);
          for (int r = 0; r < n; ++r)
            for (int j = 0; j < w; ++j)
              (*gp)[static_cast<int64_t>(r) * w + j] +=
                  o->grad[static_cast<size_t>(r) * total + static_cast<size_t>(offsets[k]) + j];
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape: element count mismatch");
  Tensor out = Tensor::from(std::move(shape), x.vec());
  maybe_record(out, {&x}, [x, o = out.impl_ptr()]() {
    if (auto* gx = grad_buf(x.impl()))
      for (size_t i = 0; i < o->grad.size(); ++i) (*gx)[i] += o->grad[i];
  });
  return out;
}

// ---- resize ----

namespace {

struct AxisWeights {
  // For output index i, sources[i] holds (source index, weight) pairs.
  std::vector<std::vector<std::pair<int, double>>> sources;
};

AxisWeights axis_weights(int src, int dst, ResizeMode mode) {
  AxisWeights w;
  w.sources.resize(static_cast<size_t>(dst));
  if (mode == ResizeMode::Nearest) {
    for (int i = 0; i < dst; ++i) {
      int j = static_cast<int>((static_cast<int64_t>(i) * 2 + 1) * src / (2 * dst));
      j = std::min(j, src - 1);
      w.sources[static_cast<size_t>(i)].emplace_back(j, 1.0);
    }
    return w;
  }
  if (dst == src) {
    for (int i = 0; i < dst; ++i) w.sources[static_cast<size_t>(i)].emplace_back(i, 1.0);
  } else if (dst < src) {
    // area averaging over the covered source interval
    const double r = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
      const double a = i * r, b = (i + 1) * r;
      for (int j = static_cast<int>(a); j < src && j < b; ++j) {
        const double lo = std::max(a, static_cast<double>(j));
        const double hi = std::min(b, static_cast<double>(j + 1));
        if (hi > lo) w.sources[static_cast<size_t>(i)].emplace_back(j, (hi - lo) / r);
      }
    }
  } else {
    // corner-aligned linear interpolation
    if (src == 1) {
      for (int i = 0; i < dst; ++i) w.sources[static_cast<size_t>(i)].emplace_back(0, 1.0);
    } else {
      for (int i = 0; i < dst; ++i) {
        const double x = static_cast<double>(i) * (src - 1) / (dst - 1);
        int j = std::min(static_cast<int>(x), src - 2);
        const double f = x - j;
        if (f < 1.0) w.sources[static_cast<size_t>(i)].emplace_back(j, 1.0 - f);
        if (f > 0.0) w.sources[static_cast<size_t>(i)].emplace_back(j + 1, f);
      }
    }
  }
  return w;
}

}  // namespace

Tensor resize_grid(const Tensor& x, int h2, int w2, ResizeMode mode) {
  require(x.rank() == 3, "resize_grid: expects [h x w x d]");
  require(h2 >= 1 && w2 >= 1, "resize_grid: target sides must be >= 1");
  const int h = x.dim(0), w = x.dim(1), d = x.dim(2);
  const AxisWeights wr = axis_weights(h, h2, mode);
  const AxisWeights wc = axis_weights(w, w2, mode);
  Tensor out(Shape{h2, w2, d});
  for (int i = 0; i < h2; ++i) {
    for (int j = 0; j < w2; ++j) {
      double* dst = out.data() + (static_cast<int64_t>(i) * w2 + j) * d;
      for (const auto& [si, vi] : wr.sources[static_cast<size_t>(i)])
        for (const auto& [sj, vj] : wc.sources[static_cast<size_t>(j)]) {
          const double* src = x.data() + (static_cast<int64_t>(si) * w + sj) * d;
          const double wt = vi * vj;
          for (int c = 0; c < d; ++c) dst[c] += wt * src[c];
        }
    }
  }
  check_finite(out, "resize_grid");
  maybe_record(out, {&x}, [x, o = out.impl_ptr(), wr, wc, h2, w2, w, d]() {
    auto* gx = grad_buf(x.impl());
    if (!gx) return;
    for (int i = 0; i < h2; ++i)
      for (int j = 0; j < w2; ++j) {
        const double* go = o->grad.data() + (static_cast<int64_t>(i) * w2 + j) * d;
        for (const auto& [si, vi] : wr.sources[static_cast<size_t>(i)])
          for (const auto& [sj, vj] : wc.sources[static_cast<size_t>(j)]) {
            const double wt = vi * vj;
            double* dst = gx->data() + (static_cast<int64_t>(si) * w + sj) * d;
            for (int c = 0; c < d; ++c) dst[c] += wt * go[c];
          }
      }
  });
  return out;
}

ResizeMode resize_mode_from_string(const std::string& s) {
  if (s == "nearest") return ResizeMode::Nearest;
  if (s == "bilinear") return ResizeMode::Bilinear;
  throw TensorError("unknown resize mode: " + s);
}

}  // namespace ecm
