#ifndef SKEWSPLIT_TESTS_ORACLES_H_
#define SKEWSPLIT_TESTS_ORACLES_H_

// Brute-force reimplementations and random fixtures shared by the unit tests
// and the acceptance suite.

#include <algorithm>
#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "skewsplit/tensor.h"
#include "skewsplit/xai.h"

namespace skewsplit::testing {

inline Tensor RandomTensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = u(rng);
  return Tensor::FromData(std::move(shape), std::move(v));
}

// f(x) = x . w for x shaped [N, 1, 1, C]; one output column.
inline BatchFn LinearFn(std::vector<double> w) {
  const int c = static_cast<int>(w.size());
  Tensor wt = Tensor::FromData({c, 1}, std::move(w));
  return [wt, c](const Tensor& x) {
    return MatMul(Reshape(x, {x.dim(0), c}), wt);
  };
}

// Smooth random net: 3x3 conv -> sigmoid -> GAP -> dense, Glorot-uniform
// weights. Independent of the library's layer classes so the oracle does not
// share their code.
struct SmoothNet {
  Tensor kernel, bias, weight;
  SmoothNet(int cin, int width, int out, std::mt19937_64& rng) {
    const double kb = std::sqrt(6.0 / (9 * cin + 9 * width));
    const double wb = std::sqrt(6.0 / (width + out));
    kernel = RandomTensor({3, 3, cin, width}, rng, -kb, kb);
    bias = RandomTensor({width}, rng, -0.5, 0.5);
    weight = RandomTensor({width, out}, rng, -wb, wb);
  }
  Tensor operator()(const Tensor& x) const {
    Tensor h = Sigmoid(AddBias(Conv2d(x, kernel, {1, 1}), bias));
    return MatMul(GlobalAveragePool(h), weight);
  }
};


inline double OracleDisorder(const std::vector<double>& i1, const std::vector<double>& i2) {
  double worst = 0.0;
  for (double a : i1) {
    for (double b : i2) worst = std::max(worst, b - a);
  }
  return worst;
}

inline double OracleSkewness(const std::vector<double>& i1, double rho) {
  double s = 0.0;
  for (std::size_t i = 0; i < i1.size(); ++i) s += i1[i];
  return rho - s > 0.0 ? rho - s : 0.0;
}

inline double OracleDescent(std::vector<double> v) {
  std::vector<double> sorted = v;
  // Selection sort, largest first.
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    std::size_t best = i;
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      if (sorted[j] > sorted[best]) best = j;
    }
    std::swap(sorted[i], sorted[best]);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    s += (v[i] - sorted[i]) * (v[i] - sorted[i]);
  }
  return s;
}

// Channel c is in a sample's top k if fewer than k channels beat it, where a
// channel beats c by being larger or equal with a lower index.
inline std::vector<double> OracleLikelihood(const std::vector<std::vector<double>>& imps,
                                     int k) {
  const int c = static_cast<int>(imps[0].size());
  std::vector<double> p(c, 0.0);
  for (const auto& v : imps) {
    for (int ch = 0; ch < c; ++ch) {
      int beaten_by = 0;
      for (int o = 0; o < c; ++o) {
        if (v[o] > v[ch] || (v[o] == v[ch] && o < ch)) ++beaten_by;
      }
      if (beaten_by < k) p[ch] += 1.0 / imps.size();
    }
  }
  return p;
}

inline std::vector<double> RandomSimplex(int c, std::mt19937_64& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(c);
  double s = 0.0;
  for (double& x : v) s += (x = e(rng));
  for (double& x : v) x /= s;
  return v;
}

}  // namespace skewsplit::testing

#endif  // SKEWSPLIT_TESTS_ORACLES_H_
