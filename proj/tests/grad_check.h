#ifndef SKEWSPLIT_TESTS_GRAD_CHECK_H_
#define SKEWSPLIT_TESTS_GRAD_CHECK_H_

// Central finite-difference oracle. Only evaluates the forward function, so
// it is independent of every backward rule it is used to check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "skewsplit/tensor.h"

namespace skewsplit::testing {

// d f / d params[p][i] by central differences with step h.
inline std::vector<std::vector<double>> NumericalGradients(
    const std::function<double()>& f, const std::vector<Tensor*>& params,
    double h = 1e-5) {
  std::vector<std::vector<double>> out;
  for (Tensor* p : params) {
    std::vector<double> g(p->size());
    auto values = p->mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f();
      values[i] = saved - h;
      const double down = f();
      values[i] = saved;
      g[i] = (up - down) / (2 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// max_i |a_i - b_i| / max(1, max_i |b_i|). Scale-aware relative error.
inline double RelativeError(std::span<const double> analytic,
                            const std::vector<double>& numeric) {
  double diff = 0.0, scale = 1e-3;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / scale;
}

}  // namespace skewsplit::testing

#endif  // SKEWSPLIT_TESTS_GRAD_CHECK_H_
