#ifndef SKEWSPLIT_XAI_H_
#define SKEWSPLIT_XAI_H_

// Channel-level feature attribution: Integrated Gradients and gradient
// saliency, aggregation to per-channel importance, reference-network gating
// and the skewness metric.
//
// Attribution functions take a batched model `f` mapping [rows, ...] to
// [rows, K] and a target column per sample; the scalar being explained for
// sample i is f(x)[i, target[i]]. Rows must be independent of each other
// (true for every network here), which lets all interpolation points of all
// samples go through `f` as one batch.

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "skewsplit/nn.h"
#include "skewsplit/tensor.h"

namespace skewsplit {

using BatchFn = std::function<Tensor(const Tensor&)>;

enum class AttributionMethod { kIntegratedGradients, kGradientSaliency };
enum class BaselineKind { kZeros, kDatasetMean };

struct AttributionConfig {
  AttributionMethod method = AttributionMethod::kIntegratedGradients;
  int ig_steps = 32;
  BaselineKind baseline = BaselineKind::kZeros;
  // Per-element mean of one sample's features; required for kDatasetMean.
  std::vector<double> dataset_mean;

  // Throws ConfigError.
  void Validate() const;
};

struct ImportanceVector {
  std::vector<double> raw;         // signed channel sums (IG) or |grad| sums (GS)
  std::vector<double> normalized;  // |raw| / sum |raw|
  // True when sum |raw| == 0; normalized is then uniform and the sample
  // carries no skew signal.
  bool degenerate = false;
};

// |raw| normalised to sum 1; uniform with degenerate=true on an all-zero input.
ImportanceVector NormalizeImportance(std::vector<double> raw);

// Baseline for a feature batch shaped like `features`.
Tensor MakeBaseline(const Tensor& features, const AttributionConfig& config);

// Mean over the path points x_bar + (i/m)(x - x_bar), i = 1..m, of the
// gradient of the explained scalar w.r.t. the input. Shaped like `x`.
// With m = 1 this is the plain gradient at x.
Tensor MeanPathGradient(const BatchFn& f, const Tensor& x,
                        const Tensor& baseline, int steps,
                        std::span<const int> targets);

// Per-sample signed sums over every axis except the last: [N, ..., C] -> N x C.
std::vector<std::vector<double>> ChannelSums(const Tensor& per_element);

// IG attributions, one ImportanceVector per sample of `x`.
std::vector<ImportanceVector> IntegratedGradients(
    const BatchFn& f, const Tensor& x, std::span<const int> targets,
    const AttributionConfig& config);
// Raw per-element IG attributions (x - x_bar) * mean path gradient.
Tensor IntegratedGradientsElementwise(const BatchFn& f, const Tensor& x,
                                      std::span<const int> targets,
                                      const AttributionConfig& config);

// raw[c] = sum over positions of |d f / d x|.
std::vector<ImportanceVector> GradientSaliency(const BatchFn& f,
                                               const Tensor& x,
                                               std::span<const int> targets);

// Dispatches on config.method.
std::vector<ImportanceVector> Attribute(const BatchFn& f, const Tensor& x,
                                        std::span<const int> targets,
                                        const AttributionConfig& config);

// Attribution of the reference network's true-class logit, gated on the
// reference network predicting the label correctly.
struct GatedAttribution {
  std::vector<bool> kept;                       // per sample
  std::vector<std::optional<ImportanceVector>> importance;
  // Mean path gradient (IG) or gradient (GS), zero rows for skipped samples.
  Tensor path_gradient;
  Tensor baseline;
  std::size_t kept_count() const;
};

// features: [N, H', W', C]. Throws Error for a label outside the class range.
GatedAttribution GatedImportance(const ReferenceNet& reference,
                                 const Tensor& features,
                                 std::span<const int> labels,
                                 const AttributionConfig& config);

// Sum of the k largest normalised importances. Throws ConfigError unless
// 1 <= k < C.
double Skewness(const ImportanceVector& iv, int k);

}  // namespace skewsplit

#endif  // SKEWSPLIT_XAI_H_
