#pragma once

#include <functional>
#include <vector>

#include "tasft/tensor.hpp"
#include "tasft/util.hpp"

namespace tasft::testsupport {

// Central finite differences: the independent oracle for every analytic
// gradient in the project. f must recompute the scalar loss from scratch.
inline Tensor2 fd_gradient(const std::function<double(const std::vector<Tensor2>&)>& f,
                           std::vector<Tensor2> inputs, std::size_t which,
                           double h = 1e-5) {
  Tensor2 grad(inputs[which].rows, inputs[which].cols);
  for (std::size_t k = 0; k < grad.size(); ++k) {
    const double orig = inputs[which].data[k];
    inputs[which].data[k] = orig + h;
    const double fp = f(inputs);
    inputs[which].data[k] = orig - h;
    const double fm = f(inputs);
    inputs[which].data[k] = orig;
    grad.data[k] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Worst relative error |a-b| / max(1, |a|, |b|) across all entries.
inline double max_rel_err(const Tensor2& a, const Tensor2& b) {
  double worst = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k)
    worst = std::max(worst, rel_err(a.data[k], b.data[k]));
  return worst;
}

}  // namespace tasft::testsupport
