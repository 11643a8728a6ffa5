#pragma once

#include "onh/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace onh::testing {

struct GradCheck {
  double max_rel = 0;
  double max_abs = 0;
  std::size_t checked = 0;
};

/// Compares the gradients left in each Parameter::grad by `run(true)` with central
/// differences of `run(false)`. `run` returns the loss and must be deterministic.
inline GradCheck check_gradients(const std::vector<tensor::Parameter*>& params,
                                 const std::function<double(bool)>& run, double h = 1e-5, double floor = 1e-6) {
  for (auto* p : params) p->zero_grad();
  run(true);
  std::vector<tensor::Matrix> analytic;
  for (auto* p : params) analytic.push_back(p->grad);

  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    tensor::Matrix& w = params[k]->value;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
      const double keep = w.data()[i];
      w.data()[i] = keep + h;
      const double up = run(false);
      w.data()[i] = keep - h;
      const double down = run(false);
      w.data()[i] = keep;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k].data()[i];
      const double err = std::abs(a - numeric);
      out.max_abs = std::max(out.max_abs, err);
      out.max_rel = std::max(out.max_rel, err / std::max({std::abs(a), std::abs(numeric), floor}));
      ++out.checked;
    }
  }
  return out;
}

}  // namespace onh::testing
