#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "ecm/tensor.hpp"

namespace ecm {

// Central-finite-difference gradient check. The loss function must be pure:
// it is re-evaluated many times with perturbed leaf values. Reverse-mode
// gradients are compared element by element against (f(x+h) - f(x-h)) / 2h.
// Returns the maximum relative error over all leaf elements.
inline double gradcheck_max_rel_error(const std::function<Tensor()>& loss_fn,
                                      const std::vector<Tensor>& leaves, double step = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    for (const Tensor& leaf : leaves) {
      Tensor l = leaf;
      l.zero_grad();
    }
    Tape tape;
    Tensor loss = loss_fn();
    tape.backward(loss);
    for (const Tensor& leaf : leaves) analytic.push_back(leaf.grad());
  }
  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    Tensor leaf = leaves[li];
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + step;
      const double fp = loss_fn().item();
      leaf.data()[i] = saved - step;
      const double fm = loss_fn().item();
      leaf.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[li][static_cast<size_t>(i)];
      const double denom = std::max({1e-3, std::fabs(a), std::fabs(numeric)});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace ecm
