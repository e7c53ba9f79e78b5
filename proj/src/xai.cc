#include "skewsplit/xai.h"

#include <algorithm>
#include <cmath>
#include <functional>

#include "skewsplit/errors.h"

namespace skewsplit {

void AttributionConfig::Validate() const {
  if (ig_steps < 1) {
    throw ConfigError("integrated gradients needs at least one step, got " +
                      std::to_string(ig_steps));
  }
  if (baseline == BaselineKind::kDatasetMean && dataset_mean.empty()) {
    throw ConfigError("dataset-mean baseline requested without a mean");
  }
}

ImportanceVector NormalizeImportance(std::vector<double> raw) {
  ImportanceVector iv;
  double total = 0.0;
  for (double r : raw) total += std::abs(r);
  iv.normalized.resize(raw.size());
  if (total > 0.0) {
    for (std::size_t c = 0; c < raw.size(); ++c) {
      iv.normalized[c] = std::abs(raw[c]) / total;
    }
  } else {
    std::fill(iv.normalized.begin(), iv.normalized.end(),
              raw.empty() ? 0.0 : 1.0 / raw.size());
    iv.degenerate = true;
  }
  iv.raw = std::move(raw);
  return iv;
}

Tensor MakeBaseline(const Tensor& features, const AttributionConfig& config) {
  if (config.baseline == BaselineKind::kZeros) {
    return Tensor::Zeros(features.shape());
  }
  const std::size_t per_sample = features.size() / features.dim(0);
  if (config.dataset_mean.size() != per_sample) {
    throw ShapeError("dataset-mean baseline has " +
                     std::to_string(config.dataset_mean.size()) +
                     " values, features need " + std::to_string(per_sample));
  }
  std::vector<double> v(features.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = config.dataset_mean[i % per_sample];
  }
  return Tensor::FromData(features.shape(), std::move(v));
}

Tensor MeanPathGradient(const BatchFn& f, const Tensor& x,
                        const Tensor& baseline, int steps,
                        std::span<const int> targets) {
  if (steps < 1) {
    throw ConfigError("path gradient needs at least one step");
  }
  if (x.shape() != baseline.shape()) {
    throw ShapeError("baseline " + ShapeToString(baseline.shape()) +
                     " does not match input " + ShapeToString(x.shape()));
  }
  const int n = x.dim(0);
  if (!targets.empty() && static_cast<int>(targets.size()) != n) {
    throw ShapeError("need one attribution target per sample");
  }
  const std::size_t per = x.size() / n;
  const std::size_t rows = std::size_t(n) * steps;
  std::vector<double> path(rows * per);
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < steps; ++s) {
      const double t = double(s + 1) / steps;
      double* dst = &path[(std::size_t(i) * steps + s) * per];
      for (std::size_t e = 0; e < per; ++e) {
        const double b = baseline.at(i * per + e);
        dst[e] = b + t * (x.at(i * per + e) - b);
      }
    }
  }
  Shape batch_shape = x.shape();
  batch_shape[0] = static_cast<int>(rows);
  Tensor batch = Tensor::FromData(batch_shape, std::move(path), true);
  Tensor out = f(batch);
  if (out.rank() == 1) out = Reshape(out, {out.dim(0), 1});
  if (out.rank() != 2 || static_cast<std::size_t>(out.dim(0)) != rows) {
    throw ShapeError("attribution target must yield one row per input, got " +
                     ShapeToString(out.shape()) + " for " +
                     std::to_string(rows) + " rows");
  }
  const int k = out.dim(1);
  std::vector<std::size_t> pick(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const int target = targets.empty() ? 0 : targets[r / steps];
    if (target < 0 || target >= k) {
      throw ShapeError("attribution target " + std::to_string(target) +
                       " out of range for " + std::to_string(k) + " outputs");
    }
    pick[r] = r * k + target;
  }
  std::vector<double> mean(x.size(), 0.0);
  if (!out.requires_grad()) {
    // Output does not depend on the input: zero gradient everywhere.
    return Tensor::FromData(x.shape(), std::move(mean));
  }
  Backward(Sum(Gather(out, std::move(pick), {static_cast<int>(rows)})));
  const std::span<const double> g = batch.grad();
  if (g.size() != batch.size()) {
    return Tensor::FromData(x.shape(), std::move(mean));
  }
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < steps; ++s) {
      const double* src = &g[(std::size_t(i) * steps + s) * per];
      for (std::size_t e = 0; e < per; ++e) mean[i * per + e] += src[e];
    }
  }
  for (double& v : mean) v /= steps;
  return Tensor::FromData(x.shape(), std::move(mean));
}

std::vector<std::vector<double>> ChannelSums(const Tensor& per_element) {
  const int n = per_element.dim(0);
  const int c = per_element.shape().back();
  const std::size_t per = per_element.size() / n;
  std::vector<std::vector<double>> out(n, std::vector<double>(c, 0.0));
  for (int i = 0; i < n; ++i) {
    for (std::size_t e = 0; e < per; ++e) {
      out[i][e % c] += per_element.at(i * per + e);
    }
  }
  return out;
}

Tensor IntegratedGradientsElementwise(const BatchFn& f, const Tensor& x,
                                      std::span<const int> targets,
                                      const AttributionConfig& config) {
  config.Validate();
  Tensor xd = x.Detach();
  Tensor baseline = MakeBaseline(xd, config);
  Tensor grad = MeanPathGradient(f, xd, baseline, config.ig_steps, targets);
  return Mul(Sub(xd, baseline), grad);
}

std::vector<ImportanceVector> IntegratedGradients(
    const BatchFn& f, const Tensor& x, std::span<const int> targets,
    const AttributionConfig& config) {
  std::vector<ImportanceVector> out;
  for (auto& raw :
       ChannelSums(IntegratedGradientsElementwise(f, x, targets, config))) {
    out.push_back(NormalizeImportance(std::move(raw)));
  }
  return out;
}

std::vector<ImportanceVector> GradientSaliency(const BatchFn& f,
                                               const Tensor& x,
                                               std::span<const int> targets) {
  Tensor xd = x.Detach();
  Tensor grad = MeanPathGradient(f, xd, Tensor::Zeros(xd.shape()), 1, targets);
  std::vector<ImportanceVector> out;
  for (auto& raw : ChannelSums(Abs(grad))) {
    out.push_back(NormalizeImportance(std::move(raw)));
  }
  return out;
}

std::vector<ImportanceVector> Attribute(const BatchFn& f, const Tensor& x,
                                        std::span<const int> targets,
                                        const AttributionConfig& config) {
  if (config.method == AttributionMethod::kGradientSaliency) {
    return GradientSaliency(f, x, targets);
  }
  return IntegratedGradients(f, x, targets, config);
}

std::size_t GatedAttribution::kept_count() const {
  return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), true));
}

GatedAttribution GatedImportance(const ReferenceNet& reference,
                                 const Tensor& features,
                                 std::span<const int> labels,
                                 const AttributionConfig& config) {
  config.Validate();
  Tensor xd = features.Detach();
  const int n = xd.dim(0);
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("gated importance needs one label per sample");
  }
  Tensor logits = reference.Forward(xd);
  const int classes = logits.dim(1);
  for (int y : labels) {
    if (y < 0 || y >= classes) {
      throw Error("label " + std::to_string(y) + " out of range for " +
                  std::to_string(classes) + " classes");
    }
  }
  const std::vector<int> predicted = ArgMax(logits);

  GatedAttribution out;
  out.kept.resize(n);
  out.importance.resize(n);
  out.baseline = MakeBaseline(xd, config);
  std::vector<std::size_t> kept_rows;
  for (int i = 0; i < n; ++i) {
    out.kept[i] = predicted[i] == labels[i];
    if (out.kept[i]) kept_rows.push_back(i);
  }
  const std::size_t per = xd.size() / n;
  std::vector<double> full_grad(xd.size(), 0.0);
  if (!kept_rows.empty()) {
    // Attribute only the kept samples.
    std::vector<std::size_t> idx;
    idx.reserve(kept_rows.size() * per);
    for (std::size_t r : kept_rows) {
      for (std::size_t e = 0; e < per; ++e) idx.push_back(r * per + e);
    }
    Shape sub_shape = xd.shape();
    sub_shape[0] = static_cast<int>(kept_rows.size());
    Tensor sub = Gather(xd, idx, sub_shape);
    Tensor sub_base = Gather(out.baseline, idx, sub_shape);
    std::vector<int> targets;
    for (std::size_t r : kept_rows) targets.push_back(labels[r]);
    const bool ig = config.method == AttributionMethod::kIntegratedGradients;
    BatchFn f = [&reference](const Tensor& b) { return reference.Forward(b); };
    Tensor grad = MeanPathGradient(f, sub, ig ? sub_base : sub,
                                   ig ? config.ig_steps : 1, targets);
    Tensor per_element = ig ? Mul(Sub(sub, sub_base), grad) : Abs(grad);
    auto sums = ChannelSums(per_element);
    for (std::size_t j = 0; j < kept_rows.size(); ++j) {
      const std::size_t r = kept_rows[j];
      out.importance[r] = NormalizeImportance(std::move(sums[j]));
      std::copy(grad.data().begin() + j * per, grad.data().begin() + (j + 1) * per,
                full_grad.begin() + r * per);
    }
  }
  out.path_gradient = Tensor::FromData(xd.shape(), std::move(full_grad));
  return out;
}

double Skewness(const ImportanceVector& iv, int k) {
  const int c = static_cast<int>(iv.normalized.size());
  if (k < 1 || k >= c) {
    throw ConfigError("skewness needs 1 <= k < C (k=" + std::to_string(k) +
                      ", C=" + std::to_string(c) + ")");
  }
  std::vector<double> sorted = iv.normalized;
  std::partial_sort(sorted.begin(), sorted.begin() + k, sorted.end(),
                    std::greater<>());
  double s = 0.0;
  for (int i = 0; i < k; ++i) s += sorted[i];
  return s;
}

}  // namespace skewsplit
