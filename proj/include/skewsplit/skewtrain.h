#ifndef SKEWSPLIT_SKEWTRAIN_H_
#define SKEWSPLIT_SKEWTRAIN_H_

// Skewness-manipulating training: the ordering and skewness losses, initial
// channel selection, the training-time channel mapping and the epoch loop.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "skewsplit/data.h"
#include "skewsplit/nn.h"
#include "skewsplit/tensor.h"
#include "skewsplit/xai.h"

namespace skewsplit {

struct SkewnessSpec {
  int k = 2;
  double rho = 0.8;
  double lambda = 0.3;
  double temperature = 6.0;

  // Throws ConfigError unless 1 <= k < channels, 0 <= rho <= 1,
  // 0 < lambda < 1 and temperature > 0.
  void Validate(int channels) const;
};

// max(0, max(I2) - min(I1)). Throws ShapeError on an empty operand.
double DisorderLoss(std::span<const double> i1, std::span<const double> i2);
// max(0, rho - sum(I1)). Throws ConfigError for rho outside [0, 1].
double SkewnessLoss(std::span<const double> i1, double rho);
// Squared L2 distance between I and I sorted in descending order.
double DescentLoss(std::span<const double> importance);
// lambda * pred + (1 - lambda) * (skew + disorder). Throws ConfigError unless
// 0 < lambda < 1.
double CombinedLoss(double pred, double skew, double disorder, double lambda);
// True when some channel at position >= k strictly outranks a channel < k.
bool IsDisordered(std::span<const double> importance, int k);

// Row-wise taped versions over [N, C] importances whose first k columns are
// I1. Each returns [N].
Tensor DisorderLossRows(const Tensor& importance, int k);
Tensor SkewnessLossRows(const Tensor& importance, int k, double rho);
// The descending order is treated as fixed (piecewise-constant in I).
Tensor DescentLossRows(const Tensor& importance);

struct ChannelSelection {
  std::vector<double> likelihood;  // C entries summing to k
  std::vector<int> channels;       // k channels, most likely first
};

// Every sample adds 1/N to each of its top-k channels; the k channels with the
// highest likelihood win. Ties go to the lower channel index throughout.
// Throws DataError for an empty set.
ChannelSelection SelectInitialChannels(
    const std::vector<std::vector<double>>& importances, int k);

// Channel permutation that moves `selected` to the front (in order) followed
// by the other channels in ascending order.
class MappingLayer {
 public:
  MappingLayer() = default;
  // Throws ConfigError unless `permutation` is a bijection over [0, C).
  explicit MappingLayer(std::vector<int> permutation);
  static MappingLayer FromSelection(std::span<const int> selected, int channels);

  Tensor Apply(const Tensor& features) const;
  const std::vector<int>& permutation() const { return permutation_; }
  std::vector<int> Inverse() const;

 private:
  std::vector<int> permutation_;
};

struct TrainConfig {
  int epochs = 50;
  int warmup_epochs = 3;
  int batch_size = 64;
  double lr = 0.1;
  double weight_decay = 5e-4;
  // Attribution used for the training feedback; must be Integrated Gradients.
  AttributionConfig attribution;
  // Soft quantisation sharpness: starts at sigma_start, doubles every
  // sigma_double_every joint epochs, capped at sigma_max.
  double sigma_start = 1.0;
  double sigma_max = 100.0;
  int sigma_double_every = 10;
  // Warmup continues past warmup_epochs until the reference network reaches
  // this train accuracy, for at most reference_max_epochs.
  double reference_target_accuracy = 0.9;
  int reference_max_epochs = 30;
  // Keep fitting the reference network to the current features while the
  // extractor moves.
  bool refresh_reference = true;
  // Swap the disorder loss for the descent-order loss (comparison baseline).
  bool descent_loss = false;
  std::uint64_t seed = 1;

  void Validate() const;
  double SigmaAt(int joint_epoch) const;  // joint_epoch counts from 1
};

struct SkewMetrics {
  double accuracy = 0.0;       // split-model accuracy (hard quantisation)
  double mean_skewness = 0.0;  // over attributed samples
  double disorder_rate = 0.0;  // over attributed samples
  int attributed = 0;          // samples kept by gating and not degenerate
  int skipped = 0;
  std::vector<double> skewness;  // per attributed sample
};

// Achieved skewness and disorder of the model's (mapped) features, attributed
// through the reference network with gating.
SkewMetrics EvaluateSkew(const SplitModel& model, const ReferenceNet& reference,
                         const Dataset& data, int k,
                         const AttributionConfig& attribution);

// Fraction of samples the model classifies correctly.
double Accuracy(const SplitModel& model, const Dataset& data);
double ReferenceAccuracy(const SplitModel& model, const ReferenceNet& reference,
                         const Dataset& data);

struct EpochRecord {
  int epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double mean_skewness = 0.0;
  double disorder_rate = 0.0;
  double alpha = 0.0;
  double sigma = 0.0;
  double pred_loss = 0.0;
  double skew_loss = 0.0;
  double disorder_loss = 0.0;
  double total_loss = 0.0;
  double kept_fraction = 0.0;
  double reference_acc = 0.0;

  std::string ToJson() const;  // one line, no trailing newline
};

struct TrainResult {
  std::vector<EpochRecord> log;
  ChannelSelection selection;
  int warmup_epochs_run = 0;
  double reference_train_accuracy = 0.0;
};

// Warmup, reference fitting, channel selection, joint training; finally the
// mapping is folded into the extractor and the reference inputs are permuted
// to match. Throws DivergenceError on a non-finite loss.
TrainResult JointTrain(SplitModel& model, ReferenceNet& reference,
                       const SkewnessSpec& spec, const TrainConfig& config,
                       const Dataset& train, const Dataset& test,
                       const std::function<void(const EpochRecord&)>& on_epoch = {});

}  // namespace skewsplit

#endif  // SKEWSPLIT_SKEWTRAIN_H_
