#include "skewsplit/nn.h"

#include <cmath>
#include <numeric>

#include "skewsplit/errors.h"

namespace skewsplit {

namespace {

Tensor NormalInit(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(NumElements(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::FromData(std::move(shape), std::move(v), true);
}

void CheckPermutation(const std::vector<int>& order, int n) {
  std::vector<bool> seen(n, false);
  if (static_cast<int>(order.size()) != n) {
    throw ConfigError("channel permutation has " + std::to_string(order.size()) +
                      " entries, expected " + std::to_string(n));
  }
  for (int c : order) {
    if (c < 0 || c >= n || seen[c]) {
      throw ConfigError("channel mapping is not a permutation of [0, " +
                        std::to_string(n) + ")");
    }
    seen[c] = true;
  }
}

}  // namespace

// ---- Layers ----------------------------------------------------------------

Conv2dLayer::Conv2dLayer(int kernel, int in_channels, int out_channels,
                         int stride, std::mt19937_64& rng) {
  kernel_ = Parameter(NormalInit({kernel, kernel, in_channels, out_channels},
                                 std::sqrt(2.0 / (kernel * kernel * in_channels)),
                                 rng));
  bias_ = Parameter(Tensor::Zeros({out_channels}, true));
  options_ = {.stride = stride, .padding = kernel / 2};
}

Tensor Conv2dLayer::Forward(const Tensor& x) const {
  return AddBias(Conv2d(x, kernel_.tensor(), options_), bias_.tensor());
}

void Conv2dLayer::AppendParameters(const std::string& prefix,
                                   std::vector<NamedParameter>* out) {
  out->emplace_back(prefix + ".kernel", kernel_.mutable_tensor());
  out->emplace_back(prefix + ".bias", bias_.mutable_tensor());
}

void Conv2dLayer::PermuteOutputs(const std::vector<int>& order) {
  const Shape s = kernel_.tensor().shape();
  const int cout = s[3];
  CheckPermutation(order, cout);
  std::span<double> k = kernel_.mutable_tensor()->mutable_data();
  const std::vector<double> old(k.begin(), k.end());
  for (std::size_t row = 0; row < old.size() / cout; ++row) {
    for (int i = 0; i < cout; ++i) k[row * cout + i] = old[row * cout + order[i]];
  }
  std::span<double> b = bias_.mutable_tensor()->mutable_data();
  const std::vector<double> old_b(b.begin(), b.end());
  for (int i = 0; i < cout; ++i) b[i] = old_b[order[i]];
}

void Conv2dLayer::PermuteInputs(const std::vector<int>& order) {
  const Shape s = kernel_.tensor().shape();
  const int cin = s[2], cout = s[3];
  CheckPermutation(order, cin);
  std::span<double> k = kernel_.mutable_tensor()->mutable_data();
  const std::vector<double> old(k.begin(), k.end());
  for (int tap = 0; tap < s[0] * s[1]; ++tap) {
    for (int i = 0; i < cin; ++i) {
      for (int co = 0; co < cout; ++co) {
        k[(std::size_t(tap) * cin + i) * cout + co] =
            old[(std::size_t(tap) * cin + order[i]) * cout + co];
      }
    }
  }
}

std::pair<int, int> Conv2dLayer::OutputSize(int h, int w) const {
  const int k = kernel_.tensor().dim(0);
  const int p = options_.padding, s = options_.stride;
  return {(h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1};
}

double Conv2dLayer::Flops(int h, int w) const {
  const Shape& s = kernel_.tensor().shape();
  const auto [oh, ow] = OutputSize(h, w);
  return double(oh) * ow * s[3] * (2.0 * s[0] * s[1] * s[2] + 1.0);
}

DenseLayer::DenseLayer(int in, int out, double init_scale,
                       std::mt19937_64& rng) {
  weight_ = Parameter(NormalInit({in, out}, init_scale / std::sqrt(in), rng));
  bias_ = Parameter(Tensor::Zeros({out}, true));
}

Tensor DenseLayer::Forward(const Tensor& x) const {
  return AddBias(MatMul(x, weight_.tensor()), bias_.tensor());
}

void DenseLayer::AppendParameters(const std::string& prefix,
                                  std::vector<NamedParameter>* out) {
  out->emplace_back(prefix + ".weight", weight_.mutable_tensor());
  out->emplace_back(prefix + ".bias", bias_.mutable_tensor());
}

double DenseLayer::Flops() const {
  const Shape& s = weight_.tensor().shape();
  return double(s[1]) * (2.0 * s[0] + 1.0);
}

// ---- Extractor -------------------------------------------------------------

void ExtractorConfig::Validate() const {
  if (conv_layers < 1) throw ConfigError("extractor needs at least one conv layer");
  if (channels_out < 2) throw ConfigError("extractor needs at least 2 output channels");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("extractor kernel must be odd");
  if (input_h < 1 || input_w < 1 || input_c < 1) {
    throw ConfigError("extractor input shape must be positive");
  }
}

std::pair<int, int> ExtractorConfig::FeatureSize() const {
  int h = input_h, w = input_w;
  const int p = kernel / 2;
  for (int i = 0; i < conv_layers; ++i) {
    const int s = i < 2 ? 2 : 1;
    h = (h + 2 * p - kernel) / s + 1;
    w = (w + 2 * p - kernel) / s + 1;
  }
  return {h, w};
}

FeatureExtractor::FeatureExtractor(const ExtractorConfig& config,
                                   std::mt19937_64& rng)
    : config_(config) {
  config_.Validate();
  int in = config_.input_c;
  for (int i = 0; i < config_.conv_layers; ++i) {
    convs_.emplace_back(config_.kernel, in, config_.channels_out, i < 2 ? 2 : 1,
                        rng);
    in = config_.channels_out;
  }
}

Tensor FeatureExtractor::Forward(const Tensor& x) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != config_.input_h || s[2] != config_.input_w ||
      s[3] != config_.input_c) {
    throw ShapeError("extractor input " + ShapeToString(s) + " does not match [N," +
                     std::to_string(config_.input_h) + "," +
                     std::to_string(config_.input_w) + "," +
                     std::to_string(config_.input_c) + "]");
  }
  Tensor h = x;
  for (const Conv2dLayer& conv : convs_) h = Relu(conv.Forward(h));
  return h;
}

FeatureVector FeatureExtractor::Extract(const Tensor& x) const {
  return FeatureVector{Forward(x), std::nullopt};
}

void FeatureExtractor::AppendParameters(std::vector<NamedParameter>* out) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].AppendParameters("extractor.conv" + std::to_string(i), out);
  }
}

void FeatureExtractor::PermuteOutputs(const std::vector<int>& order) {
  convs_.back().PermuteOutputs(order);
}

double FeatureExtractor::Flops() const {
  double total = 0.0;
  int h = config_.input_h, w = config_.input_w;
  for (const Conv2dLayer& conv : convs_) {
    total += conv.Flops(h, w);
    std::tie(h, w) = conv.OutputSize(h, w);
    total += double(h) * w * conv.out_channels();  // ReLU
  }
  return total;
}

// ---- Heads -----------------------------------------------------------------

LocalHead::LocalHead(int in_channels, int classes, std::mt19937_64& rng)
    : in_channels_(in_channels), dense_(in_channels, classes, 1.0, rng) {}

Tensor LocalHead::Forward(const Tensor& top) const {
  return dense_.Forward(GlobalAveragePool(top));
}

void LocalHead::AppendParameters(std::vector<NamedParameter>* out) {
  dense_.AppendParameters("local.dense", out);
}

double LocalHead::Flops(int h, int w) const {
  return double(h) * w * in_channels_ + dense_.Flops();
}

RemoteHead::RemoteHead(int in_channels, int width, int classes,
                       std::mt19937_64& rng) {
  convs_.emplace_back(3, in_channels, width, 1, rng);
  convs_.emplace_back(3, width, width, 1, rng);
  convs_.emplace_back(3, width, width, 1, rng);
  dense_ = DenseLayer(width, classes, 1.0, rng);
}

Tensor RemoteHead::Forward(const Tensor& rest) const {
  Tensor h = rest;
  for (const Conv2dLayer& conv : convs_) h = Relu(conv.Forward(h));
  return dense_.Forward(GlobalAveragePool(h));
}

void RemoteHead::AppendParameters(std::vector<NamedParameter>* out) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].AppendParameters("remote.conv" + std::to_string(i), out);
  }
  dense_.AppendParameters("remote.dense", out);
}

double RemoteHead::Flops(int h, int w) const {
  double total = 0.0;
  for (const Conv2dLayer& conv : convs_) {
    total += conv.Flops(h, w) + double(h) * w * conv.out_channels();
  }
  return total + double(h) * w * convs_.back().out_channels() + dense_.Flops();
}

ReferenceNet::ReferenceNet(int in_channels, int width, int classes,
                           std::mt19937_64& rng)
    : initialized_(true),
      conv_(3, in_channels, width, 1, rng),
      hidden_(width, width, std::sqrt(2.0), rng),
      out_(width, classes, 1.0, rng) {}

Tensor ReferenceNet::Forward(const Tensor& features) const {
  if (!initialized_) throw Error("reference network is not initialised");
  Tensor h = GlobalAveragePool(Relu(conv_.Forward(features)));
  return out_.Forward(Relu(hidden_.Forward(h)));
}

void ReferenceNet::AppendParameters(std::vector<NamedParameter>* out) {
  conv_.AppendParameters("reference.conv0", out);
  hidden_.AppendParameters("reference.hidden", out);
  out_.AppendParameters("reference.out", out);
}

std::vector<Tensor*> ReferenceNet::Parameters() {
  std::vector<NamedParameter> named;
  AppendParameters(&named);
  std::vector<Tensor*> out;
  for (auto& [name, t] : named) out.push_back(t);
  return out;
}

void ReferenceNet::PermuteInputs(const std::vector<int>& order) {
  conv_.PermuteInputs(order);
}

// ---- Combiner --------------------------------------------------------------

double Alpha(double w, double temperature) {
  if (!(temperature > 0.0)) {
    throw ConfigError("combiner temperature must be positive");
  }
  const double z = w / temperature;
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

Combiner::Combiner(double temperature, double w)
    : temperature_(temperature), w_(Tensor::Scalar(w, true)) {
  Alpha(w, temperature);
}

double Combiner::alpha() const { return Alpha(w(), temperature_); }

Tensor Combiner::AlphaTensor() const {
  return Sigmoid(Scale(w_.tensor(), 1.0 / temperature_));
}

Tensor Combine(const Tensor& local_logits, const Tensor& remote_logits,
               double a) {
  if (local_logits.shape() != remote_logits.shape()) {
    throw ShapeError("combine: shape mismatch " +
                     ShapeToString(local_logits.shape()) + " vs " +
                     ShapeToString(remote_logits.shape()));
  }
  return Add(Scale(local_logits, a), Scale(remote_logits, 1.0 - a));
}

Tensor Combine(const Tensor& local_logits, const Tensor& remote_logits,
               const Tensor& alpha) {
  if (local_logits.shape() != remote_logits.shape()) {
    throw ShapeError("combine: shape mismatch " +
                     ShapeToString(local_logits.shape()) + " vs " +
                     ShapeToString(remote_logits.shape()));
  }
  return Add(Mul(alpha, local_logits),
             Mul(AddScalar(Scale(alpha, -1.0), 1.0), remote_logits));
}

std::pair<Tensor, Tensor> SplitFeatures(const Tensor& features, int k) {
  const int c = features.shape().back();
  if (k <= 0 || k >= c) {
    throw ConfigError("split needs 0 < k < C, got k=" + std::to_string(k) +
                      " C=" + std::to_string(c));
  }
  std::vector<int> top(k), rest(c - k);
  std::iota(top.begin(), top.end(), 0);
  std::iota(rest.begin(), rest.end(), k);
  return {SelectChannels(features, top), SelectChannels(features, rest)};
}

std::vector<int> ArgMax(const Tensor& logits) {
  const int rows = logits.dim(0), c = logits.dim(1);
  std::vector<int> out(rows);
  for (int r = 0; r < rows; ++r) {
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (logits.at(std::size_t(r) * c + j) > logits.at(std::size_t(r) * c + best)) {
        best = j;
      }
    }
    out[r] = best;
  }
  return out;
}

// ---- SplitModel ------------------------------------------------------------

void SplitModelConfig::Validate() const {
  extractor.Validate();
  const int c = extractor.channels_out;
  if (k < 1 || k >= c) {
    throw ConfigError("k must satisfy 1 <= k < C (k=" + std::to_string(k) +
                      ", C=" + std::to_string(c) + ")");
  }
  if (classes < 2) throw ConfigError("need at least 2 classes");
  if (remote_width < 1 || reference_width < 1) {
    throw ConfigError("head widths must be positive");
  }
  if (quantizer_levels < 2 || quantizer_levels > 256) {
    throw ConfigError("quantizer levels must be in [2, 256]");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature T must be positive");
}

SplitModel::SplitModel(const SplitModelConfig& config, std::uint64_t seed)
    : initialized_(true), config_(config), combiner_(config.temperature) {
  config_.Validate();
  std::mt19937_64 rng(seed);
  extractor_ = FeatureExtractor(config_.extractor, rng);
  local_ = LocalHead(config_.k, config_.classes, rng);
  remote_ = RemoteHead(channels() - config_.k, config_.remote_width,
                       config_.classes, rng);
  quantizer_ = Quantizer::Uniform(0.0, 1.0, config_.quantizer_levels);
}

void SplitModel::set_mapping(std::vector<int> mapping) {
  if (!mapping.empty()) CheckPermutation(mapping, channels());
  mapping_ = std::move(mapping);
}

void SplitModel::FoldMapping() {
  if (mapping_.empty()) return;
  extractor_.PermuteOutputs(mapping_);
  mapping_.clear();
}

void SplitModel::RequireInitialized() const {
  if (!initialized_) throw Error("split model has no weights (uninitialised)");
}

Tensor SplitModel::ApplyMapping(const Tensor& features) const {
  if (mapping_.empty()) return features;
  return SelectChannels(features, mapping_);
}

TrainingForward SplitModel::ForwardTraining(const Tensor& x,
                                            double sigma) const {
  RequireInitialized();
  TrainingForward out;
  out.features = extractor_.Forward(x);
  out.mapped = ApplyMapping(out.features);
  auto [top, rest] = SplitFeatures(out.mapped, config_.k);
  out.local_logits = local_.Forward(top);
  out.remote_logits = remote_.Forward(quantizer_.SoftQuantize(rest, sigma));
  out.logits = Combine(out.local_logits, out.remote_logits,
                       combiner_.AlphaTensor());
  return out;
}

Tensor SplitModel::LocalLogits(const Tensor& top) const {
  RequireInitialized();
  return local_.Forward(top);
}

Tensor SplitModel::RemoteLogits(const Tensor& rest) const {
  RequireInitialized();
  return remote_.Forward(rest);
}

Tensor SplitModel::QuantizeRoundTrip(const Tensor& rest) const {
  const std::vector<double> values =
      quantizer_.Dequantize(quantizer_.Quantize(rest.data()));
  return Tensor::FromData(rest.shape(), values);
}

Tensor SplitModel::Logits(const Tensor& x) const {
  RequireInitialized();
  Tensor f = ApplyMapping(extractor_.Forward(x.Detach()));
  auto [top, rest] = SplitFeatures(f, config_.k);
  const Tensor remote_logits = RemoteLogits(QuantizeRoundTrip(rest));
  std::vector<double> remote(remote_logits.data().begin(), remote_logits.data().end());
  for (double& v : remote) v = static_cast<float>(v);
  return Combine(LocalLogits(top),
                 Tensor::FromData({f.dim(0), config_.classes}, std::move(remote)),
                 combiner_.alpha());
}

std::vector<Prediction> SplitModel::Predict(const Tensor& x) const {
  RequireInitialized();
  Tensor logits = Logits(x);
  Tensor probs = Softmax(logits.Detach());
  const std::vector<int> labels = ArgMax(logits);
  const int c = classes();
  std::vector<Prediction> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    out[i].label = labels[i];
    out[i].confidence.assign(probs.data().begin() + i * c,
                             probs.data().begin() + (i + 1) * c);
  }
  return out;
}

std::vector<NamedParameter> SplitModel::NamedParameters() {
  std::vector<NamedParameter> out;
  extractor_.AppendParameters(&out);
  local_.AppendParameters(&out);
  remote_.AppendParameters(&out);
  out.emplace_back("combiner.w", combiner_.mutable_w());
  out.emplace_back("quantizer.centers", quantizer_.mutable_center_tensor());
  return out;
}

std::vector<Tensor*> SplitModel::Parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : NamedParameters()) out.push_back(t);
  return out;
}

double SplitModel::ExtractorFlops() const { return extractor_.Flops(); }

double SplitModel::LocalFlops() const {
  const auto [h, w] = config_.extractor.FeatureSize();
  return local_.Flops(h, w);
}

double SplitModel::RemoteFlops() const {
  const auto [h, w] = config_.extractor.FeatureSize();
  return remote_.Flops(h, w);
}

}  // namespace skewsplit
