#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecm {

struct TensorError : std::runtime_error {
  explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when a softmax row is fully masked (all entries at the mask floor).
struct DegenerateRowError : TensorError {
  explicit DegenerateRowError(const std::string& msg) : TensorError(msg) {}
};

struct NumericError : TensorError {
  explicit NumericError(const std::string& msg) : TensorError(msg) {}
};

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& shape);

// When enabled every op scans its output for NaN/Inf and throws NumericError.
void set_checked_mode(bool enabled);
bool checked_mode();

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool has_history = false;  // produced by an op recorded on a tape
  std::vector<double> grad;  // allocated lazily during backward
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);

  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor zeros_like(const Tensor& t);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& vec() { return impl_->data; }
  const std::vector<double>& vec() const { return impl_->data; }
  double item() const;  // scalar tensors only

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  // Gradient of the last backward pass; zeros if this leaf never participated.
  std::vector<double> grad() const;
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { impl_->grad.clear(); }

  TensorImpl* impl() const { return impl_.get(); }
  std::shared_ptr<TensorImpl> impl_ptr() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode computation record. Constructing a Tape makes it the active
// recorder for the current thread; ops executed while it is alive append
// backward closures in execution order. backward() replays them in reverse,
// visiting each recorded node exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  void record(std::shared_ptr<TensorImpl> out, std::function<void()> backward_fn);
  void backward(const Tensor& loss);
  void reset();
  size_t size() const { return entries_.size(); }

 private:
  struct Entry {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> fn;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// Returns the gradient accumulation buffer for t, or nullptr if t does not
// participate in differentiation. Used by op backward closures.
std::vector<double>* grad_buf(TensorImpl* t);

// ---- elementwise / broadcast ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowwise(const Tensor& x, const Tensor& v);  // x [N x d] + v [d]
Tensor mul_rowwise(const Tensor& x, const Tensor& v);  // x [N x d] * v [d]
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // [m x k] x [k x n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m x k] x [n x k]^T

// ---- nonlinearities ----
Tensor softmax(const Tensor& x, int axis);
Tensor sigmoid(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation, forward and backward

// ---- normalization / loss ----
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets);
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                     const std::vector<double>& weights);

// ---- structure ----
Tensor gather_rows(const Tensor& table, const std::vector<int>& idx);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& x, Shape shape);

enum class ResizeMode { Nearest, Bilinear };

// Channelwise 2D resize of x [h x w x d]. Bilinear uses area averaging when
// shrinking an axis and corner-aligned linear interpolation when growing it;
// a 1x1 source fills the target with the single value.
Tensor resize_grid(const Tensor& x, int h2, int w2, ResizeMode mode);

ResizeMode resize_mode_from_string(const std::string& s);

}  // namespace ecm
