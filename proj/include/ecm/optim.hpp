#pragma once

#include <cmath>
#include <vector>

#include "ecm/tensor.hpp"

namespace ecm {

// AdamW with decoupled weight decay. Slot order is fixed by the parameter
// list passed to step(), which callers must keep stable across steps.
class AdamW {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;

  AdamW() = default;
  AdamW(double lr_, double wd) : lr(lr_), weight_decay(wd) {}

  int64_t steps() const { return t_; }

  void step(std::vector<Tensor>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params[i].numel()), 0.0);
        v_[i].assign(static_cast<size_t>(params[i].numel()), 0.0);
      }
    }
    if (m_.size() != params.size()) throw TensorError("AdamW: parameter list changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor& p = params[i];
      const std::vector<double> g = p.grad();
      double* x = p.data();
      for (size_t j = 0; j < g.size(); ++j) {
        m_[i][j] = beta1 * m_[i][j] + (1.0 - beta1) * g[j];
        v_[i][j] = beta2 * v_[i][j] + (1.0 - beta2) * g[j] * g[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        x[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * x[j]);
      }
    }
  }

 private:
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace ecm
