#ifndef SKEWSPLIT_NN_H_
#define SKEWSPLIT_NN_H_

// The four networks of the split pipeline and the prediction combiner.
//
//   input --extractor--> C-channel feature map
//     channels [0, k)  -> LocalHead  (global average pool + dense)
//     channels [k, C)  -> quantise -> RemoteHead (3 conv + pool + dense)
//   logits = alpha * local + (1 - alpha) * remote,  alpha = sigmoid(w / T)
//
// ReferenceNet is a wider head over all C channels that exists only to make
// feature attributions trustworthy during training.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "skewsplit/codec.h"
#include "skewsplit/tensor.h"

namespace skewsplit {

using NamedParameter = std::pair<std::string, Tensor*>;

class Conv2dLayer {
 public:
  Conv2dLayer() = default;
  Conv2dLayer(int kernel, int in_channels, int out_channels, int stride,
              std::mt19937_64& rng);

  Tensor Forward(const Tensor& x) const;
  void AppendParameters(const std::string& prefix,
                        std::vector<NamedParameter>* out);
  // Reorders output channels: new channel i is old channel order[i].
  void PermuteOutputs(const std::vector<int>& order);
  // Reorders input channels the same way.
  void PermuteInputs(const std::vector<int>& order);
  // Multiply-accumulates x2 for an input of spatial size h x w.
  double Flops(int h, int w) const;
  std::pair<int, int> OutputSize(int h, int w) const;
  int out_channels() const { return kernel_.tensor().dim(3); }

 private:
  Parameter kernel_;  // [K, K, Cin, Cout]
  Parameter bias_;    // [Cout]
  Conv2dOptions options_;
};

class DenseLayer {
 public:
  DenseLayer() = default;
  DenseLayer(int in, int out, double init_scale, std::mt19937_64& rng);

  // x: [N, in] -> [N, out]
  Tensor Forward(const Tensor& x) const;
  void AppendParameters(const std::string& prefix,
                        std::vector<NamedParameter>* out);
  double Flops() const;

 private:
  Parameter weight_;  // [in, out]
  Parameter bias_;    // [out]
};

struct ExtractorConfig {
  int conv_layers = 2;
  int channels_out = 24;  // C
  int kernel = 3;
  int input_h = 16;
  int input_w = 16;
  int input_c = 1;

  // Throws ConfigError.
  void Validate() const;
  // Spatial size of the feature map; the first two layers downsample by 2.
  std::pair<int, int> FeatureSize() const;
};

// Feature map plus (optionally) per-channel normalised importance.
struct FeatureVector {
  Tensor values;  // [N, H', W', C]
  std::optional<std::vector<double>> importance;
};

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  FeatureExtractor(const ExtractorConfig& config, std::mt19937_64& rng);

  // x: [N, H, W, Cin] -> [N, H', W', C], ReLU after every conv.
  Tensor Forward(const Tensor& x) const;
  FeatureVector Extract(const Tensor& x) const;
  void AppendParameters(std::vector<NamedParameter>* out);
  // Moves output channel order[i] to position i (folds a channel mapping).
  void PermuteOutputs(const std::vector<int>& order);
  double Flops() const;
  const ExtractorConfig& config() const { return config_; }

 private:
  ExtractorConfig config_;
  std::vector<Conv2dLayer> convs_;
};

// Global average pooling followed by one dense layer.
class LocalHead {
 public:
  LocalHead() = default;
  LocalHead(int in_channels, int classes, std::mt19937_64& rng);
  Tensor Forward(const Tensor& top) const;
  void AppendParameters(std::vector<NamedParameter>* out);
  double Flops(int h, int w) const;

 private:
  int in_channels_ = 0;
  DenseLayer dense_;
};

// Three 3x3 convolutions, global average pooling, one dense layer.
class RemoteHead {
 public:
  RemoteHead() = default;
  RemoteHead(int in_channels, int width, int classes, std::mt19937_64& rng);
  Tensor Forward(const Tensor& rest) const;
  void AppendParameters(std::vector<NamedParameter>* out);
  double Flops(int h, int w) const;

 private:
  std::vector<Conv2dLayer> convs_;
  DenseLayer dense_;
};

// Wide head over all C feature channels, used as the attribution target.
class ReferenceNet {
 public:
  ReferenceNet() = default;
  ReferenceNet(int in_channels, int width, int classes, std::mt19937_64& rng);
  Tensor Forward(const Tensor& features) const;
  void AppendParameters(std::vector<NamedParameter>* out);
  std::vector<Tensor*> Parameters();
  void PermuteInputs(const std::vector<int>& order);
  bool initialized() const { return initialized_; }

 private:
  bool initialized_ = false;
  Conv2dLayer conv_;
  DenseLayer hidden_;
  DenseLayer out_;
};

// alpha(w; T) = 1 / (1 + exp(-w / T)). Throws ConfigError for T <= 0.
double Alpha(double w, double temperature);

class Combiner {
 public:
  explicit Combiner(double temperature = 6.0, double w = 0.0);
  double alpha() const;
  double temperature() const { return temperature_; }
  double w() const { return w_.tensor().item(); }
  // alpha as a taped scalar so w receives gradients.
  Tensor AlphaTensor() const;
  Tensor* mutable_w() { return w_.mutable_tensor(); }

 private:
  double temperature_;
  Parameter w_;
};

// a * local + (1 - a) * remote. Throws ShapeError on mismatched shapes.
Tensor Combine(const Tensor& local_logits, const Tensor& remote_logits,
               double a);
// Same, with a taped alpha.
Tensor Combine(const Tensor& local_logits, const Tensor& remote_logits,
               const Tensor& alpha);

// Channels [0, k) and [k, C). Throws ConfigError unless 0 < k < C.
std::pair<Tensor, Tensor> SplitFeatures(const Tensor& features, int k);

struct Prediction {
  int label = -1;
  std::vector<double> confidence;  // softmax of the combined logits
};

struct SplitModelConfig {
  ExtractorConfig extractor;
  int k = 2;
  int classes = 4;
  int remote_width = 16;
  int reference_width = 32;
  int quantizer_levels = 8;
  double temperature = 6.0;

  void Validate() const;
};

// Per-sample outputs of a training forward pass.
struct TrainingForward {
  Tensor features;  // extractor output, natural channel order
  Tensor mapped;    // after the channel mapping
  Tensor local_logits;
  Tensor remote_logits;
  Tensor logits;    // combined
};

class SplitModel {
 public:
  SplitModel() = default;
  SplitModel(const SplitModelConfig& config, std::uint64_t seed);

  bool initialized() const { return initialized_; }
  const SplitModelConfig& config() const { return config_; }
  int k() const { return config_.k; }
  int channels() const { return config_.extractor.channels_out; }
  int classes() const { return config_.classes; }

  const FeatureExtractor& extractor() const { return extractor_; }
  const LocalHead& local_head() const { return local_; }
  const RemoteHead& remote_head() const { return remote_; }
  const Combiner& combiner() const { return combiner_; }
  Combiner& mutable_combiner() { return combiner_; }
  const Quantizer& quantizer() const { return quantizer_; }
  Quantizer& mutable_quantizer() { return quantizer_; }

  // Training-only channel mapping: position i reads extractor channel
  // mapping[i]. Empty means identity.
  const std::vector<int>& mapping() const { return mapping_; }
  void set_mapping(std::vector<int> mapping);
  // Bakes the mapping into the extractor's last layer and clears it.
  void FoldMapping();

  // Training forward: soft quantisation (sigma) on the remote branch.
  TrainingForward ForwardTraining(const Tensor& x, double sigma) const;
  // Inference logits with hard quantisation on the remote branch. Remote
  // logits are rounded to float32, the precision they are returned at.
  Tensor Logits(const Tensor& x) const;
  Tensor LocalLogits(const Tensor& top) const;
  Tensor RemoteLogits(const Tensor& rest) const;
  // Hard quantise + dequantise, as the server sees the features.
  Tensor QuantizeRoundTrip(const Tensor& rest) const;
  // Throws Error for an uninitialised model.
  std::vector<Prediction> Predict(const Tensor& x) const;

  std::vector<NamedParameter> NamedParameters();
  std::vector<Tensor*> Parameters();

  double ExtractorFlops() const;
  double LocalFlops() const;
  double RemoteFlops() const;

 private:
  void RequireInitialized() const;
  Tensor ApplyMapping(const Tensor& features) const;

  bool initialized_ = false;
  SplitModelConfig config_;
  FeatureExtractor extractor_;
  LocalHead local_;
  RemoteHead remote_;
  Combiner combiner_;
  Quantizer quantizer_{std::vector<double>{0.0, 1.0}};
  std::vector<int> mapping_;
};

// Index of the largest entry per row of [N, K] logits; ties to lowest index.
std::vector<int> ArgMax(const Tensor& logits);

}  // namespace skewsplit

#endif  // SKEWSPLIT_NN_H_
