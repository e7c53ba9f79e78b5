#include "skewsplit/skewtrain.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "json.hpp"
#include "skewsplit/errors.h"
#include "skewsplit/optim.h"

namespace skewsplit {

namespace {

constexpr int kEvalChunk = 128;

std::vector<std::size_t> Range(int begin, int end) {
  std::vector<std::size_t> v(end - begin);
  std::iota(v.begin(), v.end(), static_cast<std::size_t>(begin));
  return v;
}

// Rows `rows` of a [N, ...] tensor, keeping the graph.
Tensor GatherRows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t per = t.size() / t.dim(0);
  std::vector<std::size_t> idx;
  idx.reserve(rows.size() * per);
  for (std::size_t r : rows) {
    for (std::size_t e = 0; e < per; ++e) idx.push_back(r * per + e);
  }
  Shape s = t.shape();
  s[0] = static_cast<int>(rows.size());
  return Gather(t, std::move(idx), s);
}

Tensor Mapped(const SplitModel& model, const Tensor& features) {
  return model.mapping().empty() ? features
                                 : SelectChannels(features, model.mapping());
}

void ClearGrads(const std::vector<Tensor*>& params) {
  for (Tensor* p : params) p->ClearGrad();
}

void CheckFinite(double v, const char* component, int epoch) {
  if (!std::isfinite(v)) {
    throw DivergenceError(std::string("non-finite ") + component +
                          " loss at epoch " + std::to_string(epoch));
  }
}

// Centers spread uniformly over [0, 99th percentile] of the rest channels.
void FitQuantizerRange(SplitModel& model, const Dataset& data) {
  std::vector<double> rest_values;
  const int k = model.k();
  for (int b = 0; b < data.size(); b += kEvalChunk) {
    const auto idx = Range(b, std::min(data.size(), b + kEvalChunk));
    auto [x, y] = data.Batch(idx);
    Tensor f = Mapped(model, model.extractor().Forward(x));
    const int c = f.shape().back();
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (static_cast<int>(i % c) >= k) rest_values.push_back(f.at(i));
    }
  }
  std::sort(rest_values.begin(), rest_values.end());
  double hi = rest_values.empty()
                  ? 1.0
                  : rest_values[static_cast<std::size_t>(0.99 * (rest_values.size() - 1))];
  if (!(hi > 1e-6)) hi = 1.0;
  const int levels = model.quantizer().levels();
  model.mutable_quantizer() = Quantizer::Uniform(0.0, hi, levels);
}

double FitReference(const SplitModel& model, ReferenceNet& reference,
                    const Dataset& train, const TrainConfig& config,
                    std::mt19937_64& rng, int max_epochs) {
  std::vector<Tensor*> params = reference.Parameters();
  double acc = ReferenceAccuracy(model, reference, train);
  std::vector<std::size_t> order = Range(0, train.size());
  for (int e = 0; e < max_epochs && acc < config.reference_target_accuracy; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b = 0; b < train.size(); b += config.batch_size) {
      std::vector<std::size_t> idx(order.begin() + b,
                                   order.begin() + std::min(train.size(), b + config.batch_size));
      auto [x, y] = train.Batch(idx);
      Tensor f = model.extractor().Forward(x).Detach();
      ClearGrads(params);
      Backward(SoftmaxCrossEntropy(reference.Forward(f), y));
      SgdStep(params, config.lr, config.weight_decay);
    }
    acc = ReferenceAccuracy(model, reference, train);
  }
  return acc;
}

}  // namespace

// ---- Spec and losses -------------------------------------------------------

void SkewnessSpec::Validate(int channels) const {
  if (k < 1 || k >= channels) {
    throw ConfigError("k must satisfy 1 <= k < C (k=" + std::to_string(k) +
                      ", C=" + std::to_string(channels) + ")");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw ConfigError("lambda must lie in (0, 1)");
  }
  if (!(temperature > 0.0)) throw ConfigError("temperature T must be positive");
}

double DisorderLoss(std::span<const double> i1, std::span<const double> i2) {
  if (i1.empty() || i2.empty()) {
    throw ShapeError("disorder loss needs non-empty I1 and I2");
  }
  const double hi = *std::max_element(i2.begin(), i2.end());
  const double lo = *std::min_element(i1.begin(), i1.end());
  return std::max(0.0, hi - lo);
}

double SkewnessLoss(std::span<const double> i1, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  double s = 0.0;
  for (double v : i1) s += v;
  return std::max(0.0, rho - s);
}

double DescentLoss(std::span<const double> importance) {
  std::vector<double> sorted(importance.begin(), importance.end());
  std::stable_sort(sorted.begin(), sorted.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const double d = importance[i] - sorted[i];
    s += d * d;
  }
  return s;
}

double CombinedLoss(double pred, double skew, double disorder, double lambda) {
  if (!(lambda > 0.0 && lambda < 1.0)) {
    throw ConfigError("lambda must lie in (0, 1)");
  }
  return lambda * pred + (1.0 - lambda) * (skew + disorder);
}

bool IsDisordered(std::span<const double> importance, int k) {
  return DisorderLoss(importance.first(k), importance.subspan(k)) > 0.0;
}

namespace {

std::pair<Tensor, Tensor> SplitColumns(const Tensor& importance, int k) {
  const int c = importance.dim(1);
  if (k < 1 || k >= c) {
    throw ConfigError("need 1 <= k < C for importance rows");
  }
  std::vector<int> top(k), rest(c - k);
  std::iota(top.begin(), top.end(), 0);
  std::iota(rest.begin(), rest.end(), k);
  return {SelectChannels(importance, top), SelectChannels(importance, rest)};
}

}  // namespace

Tensor DisorderLossRows(const Tensor& importance, int k) {
  auto [i1, i2] = SplitColumns(importance, k);
  return Relu(Sub(Max(i2, 1), Min(i1, 1)));
}

Tensor SkewnessLossRows(const Tensor& importance, int k, double rho) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("rho must lie in [0, 1]");
  auto [i1, i2] = SplitColumns(importance, k);
  return Relu(AddScalar(Scale(Sum(i1, 1), -1.0), rho));
}

Tensor DescentLossRows(const Tensor& importance) {
  const int n = importance.dim(0), c = importance.dim(1);
  std::vector<std::size_t> sorted_idx(importance.size());
  for (int r = 0; r < n; ++r) {
    std::vector<int> order(c);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t base = std::size_t(r) * c;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return importance.at(base + a) > importance.at(base + b);
    });
    for (int j = 0; j < c; ++j) sorted_idx[base + j] = base + order[j];
  }
  Tensor sorted = Gather(importance, std::move(sorted_idx), importance.shape());
  Tensor d = Sub(importance, sorted);
  return Sum(Mul(d, d), 1);
}

// ---- Channel selection and mapping ----------------------------------------

ChannelSelection SelectInitialChannels(
    const std::vector<std::vector<double>>& importances, int k) {
  if (importances.empty()) {
    throw DataError("channel selection needs at least one sample");
  }
  const int c = static_cast<int>(importances[0].size());
  if (k < 1 || k >= c) {
    throw ConfigError("channel selection needs 1 <= k < C");
  }
  const double inc = 1.0 / importances.size();
  ChannelSelection sel;
  sel.likelihood.assign(c, 0.0);
  std::vector<int> order(c);
  for (const auto& iv : importances) {
    if (static_cast<int>(iv.size()) != c) {
      throw ShapeError("importance vectors differ in length");
    }
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return iv[a] > iv[b]; });
    for (int j = 0; j < k; ++j) sel.likelihood[order[j]] += inc;
  }
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return sel.likelihood[a] > sel.likelihood[b];
  });
  sel.channels.assign(order.begin(), order.begin() + k);
  return sel;
}

MappingLayer::MappingLayer(std::vector<int> permutation)
    : permutation_(std::move(permutation)) {
  const int n = static_cast<int>(permutation_.size());
  std::vector<bool> seen(n, false);
  for (int c : permutation_) {
    if (c < 0 || c >= n || seen[c]) {
      throw ConfigError("mapping is not a permutation of [0, " +
                        std::to_string(n) + ")");
    }
    seen[c] = true;
  }
}

MappingLayer MappingLayer::FromSelection(std::span<const int> selected,
                                         int channels) {
  std::vector<int> perm(selected.begin(), selected.end());
  for (int c = 0; c < channels; ++c) {
    if (std::find(selected.begin(), selected.end(), c) == selected.end()) {
      perm.push_back(c);
    }
  }
  if (static_cast<int>(perm.size()) != channels) {
    throw ConfigError("selected channels repeat or fall outside [0, C)");
  }
  return MappingLayer(std::move(perm));
}

Tensor MappingLayer::Apply(const Tensor& features) const {
  if (features.shape().back() != static_cast<int>(permutation_.size())) {
    throw ShapeError("mapping over " + std::to_string(permutation_.size()) +
                     " channels applied to " + ShapeToString(features.shape()));
  }
  return SelectChannels(features, permutation_);
}

std::vector<int> MappingLayer::Inverse() const {
  std::vector<int> inv(permutation_.size());
  for (std::size_t i = 0; i < permutation_.size(); ++i) inv[permutation_[i]] = i;
  return inv;
}

// ---- Config ---------------------------------------------------------------

void TrainConfig::Validate() const {
  if (epochs < 0 || warmup_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (!(sigma_start > 0.0) || sigma_max < sigma_start) {
    throw ConfigError("need 0 < sigma_start <= sigma_max");
  }
  if (sigma_double_every < 1) throw ConfigError("sigma_double_every must be >= 1");
  if (attribution.method != AttributionMethod::kIntegratedGradients) {
    throw ConfigError(
        "training feedback needs Integrated Gradients; gradient saliency has no "
        "first-order dependence on the features");
  }
  attribution.Validate();
}

double TrainConfig::SigmaAt(int joint_epoch) const {
  const int doublings = std::max(0, joint_epoch - 1) / sigma_double_every;
  return std::min(sigma_max, sigma_start * std::pow(2.0, doublings));
}

// ---- Evaluation -----------------------------------------------------------

double Accuracy(const SplitModel& model, const Dataset& data) {
  int correct = 0;
  for (int b = 0; b < data.size(); b += kEvalChunk) {
    const auto idx = Range(b, std::min(data.size(), b + kEvalChunk));
    auto [x, y] = data.Batch(idx);
    const std::vector<int> pred = ArgMax(model.Logits(x));
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  }
  return double(correct) / data.size();
}

double ReferenceAccuracy(const SplitModel& model, const ReferenceNet& reference,
                         const Dataset& data) {
  int correct = 0;
  for (int b = 0; b < data.size(); b += kEvalChunk) {
    const auto idx = Range(b, std::min(data.size(), b + kEvalChunk));
    auto [x, y] = data.Batch(idx);
    const std::vector<int> pred =
        ArgMax(reference.Forward(model.extractor().Forward(x)));
    for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
  }
  return double(correct) / data.size();
}

SkewMetrics EvaluateSkew(const SplitModel& model, const ReferenceNet& reference,
                         const Dataset& data, int k,
                         const AttributionConfig& attribution) {
  SkewMetrics m;
  m.accuracy = Accuracy(model, data);
  int disordered = 0;
  for (int b = 0; b < data.size(); b += kEvalChunk) {
    const auto idx = Range(b, std::min(data.size(), b + kEvalChunk));
    auto [x, y] = data.Batch(idx);
    Tensor f = model.extractor().Forward(x);
    GatedAttribution g = GatedImportance(reference, f, y, attribution);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (!g.importance[i] || g.importance[i]->degenerate) {
        ++m.skipped;
        continue;
      }
      const ImportanceVector& iv = *g.importance[i];
      std::vector<double> mapped = iv.normalized;
      if (!model.mapping().empty()) {
        for (std::size_t c = 0; c < mapped.size(); ++c) {
          mapped[c] = iv.normalized[model.mapping()[c]];
        }
      }
      ++m.attributed;
      m.skewness.push_back(Skewness(iv, k));
      disordered += IsDisordered(mapped, k);
    }
  }
  if (m.attributed > 0) {
    m.mean_skewness =
        std::accumulate(m.skewness.begin(), m.skewness.end(), 0.0) / m.attributed;
    m.disorder_rate = double(disordered) / m.attributed;
  }
  return m;
}

std::string EpochRecord::ToJson() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["train_acc"] = train_acc;
  j["test_acc"] = test_acc;
  j["mean_skewness"] = mean_skewness;
  j["disorder_rate"] = disorder_rate;
  j["alpha"] = alpha;
  j["sigma"] = sigma;
  j["pred_loss"] = pred_loss;
  j["skew_loss"] = skew_loss;
  j["disorder_loss"] = disorder_loss;
  j["total_loss"] = total_loss;
  j["kept_fraction"] = kept_fraction;
  j["reference_acc"] = reference_acc;
  return j.dump();
}

// ---- Training loop --------------------------------------------------------

TrainResult JointTrain(SplitModel& model, ReferenceNet& reference,
                       const SkewnessSpec& spec, const TrainConfig& config,
                       const Dataset& train, const Dataset& test,
                       const std::function<void(const EpochRecord&)>& on_epoch) {
  if (!model.initialized() || !reference.initialized()) {
    throw Error("training needs initialised model and reference networks");
  }
  spec.Validate(model.channels());
  config.Validate();
  if (spec.k != model.k()) {
    throw ConfigError("spec k=" + std::to_string(spec.k) +
                      " does not match model k=" + std::to_string(model.k()));
  }
  if (spec.temperature != model.combiner().temperature()) {
    throw ConfigError("spec temperature does not match the model combiner");
  }
  train.Validate();
  test.Validate();
  if (train.classes != model.classes()) {
    throw DataError("dataset has " + std::to_string(train.classes) +
                    " classes, model expects " + std::to_string(model.classes()));
  }

  std::mt19937_64 rng(config.seed);
  TrainResult result;
  std::vector<Tensor*> model_params = model.Parameters();
  std::vector<Tensor*> ref_params = reference.Parameters();
  std::vector<std::size_t> order = Range(0, train.size());
  model.set_mapping({});

  // Warmup on prediction loss; the reference network learns alongside on
  // detached features.
  FitQuantizerRange(model, train);
  for (int e = 0; e < config.warmup_epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int b = 0; b < train.size(); b += config.batch_size) {
      std::vector<std::size_t> idx(order.begin() + b,
                                   order.begin() + std::min(train.size(), b + config.batch_size));
      auto [x, y] = train.Batch(idx);
      try {
        TrainingForward fw = model.ForwardTraining(x, config.sigma_start);
        Tensor loss = SoftmaxCrossEntropy(fw.logits, y);
        CheckFinite(loss.item(), "prediction", 0);
        Backward(loss);
        SgdStep(model_params, config.lr, config.weight_decay);
        model.mutable_quantizer().Canonicalize();
        ClearGrads(ref_params);
        Backward(SoftmaxCrossEntropy(reference.Forward(fw.features.Detach()), y));
        SgdStep(ref_params, config.lr, config.weight_decay);
      } catch (const NonFiniteError& err) {
        throw DivergenceError(std::string("warmup: ") + err.what());
      }
    }
    ++result.warmup_epochs_run;
  }
  result.reference_train_accuracy = FitReference(
      model, reference, train, config, rng, config.reference_max_epochs);

  // Initial channel selection from gated attributions over the training set.
  std::vector<std::vector<double>> importances;
  for (int b = 0; b < train.size(); b += kEvalChunk) {
    const auto idx = Range(b, std::min(train.size(), b + kEvalChunk));
    auto [x, y] = train.Batch(idx);
    GatedAttribution g = GatedImportance(reference, model.extractor().Forward(x),
                                         y, config.attribution);
    for (auto& iv : g.importance) {
      if (iv && !iv->degenerate) importances.push_back(iv->normalized);
    }
  }
  if (importances.empty()) {
    throw DivergenceError(
        "reference network classifies no training sample correctly; cannot "
        "select channels");
  }
  result.selection = SelectInitialChannels(importances, spec.k);
  const MappingLayer mapping =
      MappingLayer::FromSelection(result.selection.channels, model.channels());
  model.set_mapping(mapping.permutation());
  FitQuantizerRange(model, train);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const double sigma = config.SigmaAt(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double pred_sum = 0, skew_sum = 0, dis_sum = 0, total_sum = 0;
    int batches = 0, correct = 0, kept = 0;
    for (int b = 0; b < train.size(); b += config.batch_size) {
      std::vector<std::size_t> idx(order.begin() + b,
                                   order.begin() + std::min(train.size(), b + config.batch_size));
      auto [x, y] = train.Batch(idx);
      const char* stage = "prediction";
      try {
        TrainingForward fw = model.ForwardTraining(x, sigma);
        Tensor pred = SoftmaxCrossEntropy(fw.logits, y);
        const std::vector<int> arg = ArgMax(fw.logits);
        for (std::size_t i = 0; i < y.size(); ++i) correct += arg[i] == y[i];

        stage = "attribution";
        GatedAttribution g = GatedImportance(reference, fw.features, y,
                                             config.attribution);
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < y.size(); ++i) {
          if (g.importance[i] && !g.importance[i]->degenerate) rows.push_back(i);
        }
        kept += static_cast<int>(rows.size());

        Tensor skew = Tensor::Scalar(0.0), disorder = Tensor::Scalar(0.0);
        if (!rows.empty()) {
          // First-order attribution: the path gradient is held constant.
          const int n = static_cast<int>(rows.size());
          const int c = model.channels();
          Tensor feats = GatherRows(fw.features, rows);
          Tensor elem = Mul(Sub(feats, GatherRows(g.baseline, rows)),
                            GatherRows(g.path_gradient, rows));
          Tensor raw = Sum(Reshape(elem, {n, static_cast<int>(elem.size()) / (n * c), c}), 1);
          Tensor imp = SelectChannels(NormalizeRows(Abs(raw)), model.mapping());
          stage = "skewness";
          skew = Mean(SkewnessLossRows(imp, spec.k, spec.rho));
          stage = "disorder";
          disorder = Mean(config.descent_loss ? DescentLossRows(imp)
                                              : DisorderLossRows(imp, spec.k));
        }
        CheckFinite(pred.item(), "prediction", epoch);
        CheckFinite(skew.item(), "skewness", epoch);
        CheckFinite(disorder.item(), config.descent_loss ? "descent" : "disorder",
                    epoch);
        stage = "combined";
        Tensor total = Add(Scale(pred, spec.lambda),
                           Scale(Add(skew, disorder), 1.0 - spec.lambda));
        Backward(total);
        SgdStep(model_params, config.lr, config.weight_decay);
        model.mutable_quantizer().Canonicalize();
        pred_sum += pred.item();
        skew_sum += skew.item();
        dis_sum += disorder.item();
        total_sum += total.item();
        ++batches;

        if (config.refresh_reference) {
          stage = "reference";
          ClearGrads(ref_params);
          Backward(SoftmaxCrossEntropy(reference.Forward(fw.features.Detach()), y));
          SgdStep(ref_params, config.lr, config.weight_decay);
        }
      } catch (const NonFiniteError& err) {
        throw DivergenceError("epoch " + std::to_string(epoch) + ", " + stage +
                              ": " + err.what());
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.sigma = sigma;
    rec.alpha = model.combiner().alpha();
    rec.train_acc = double(correct) / train.size();
    rec.kept_fraction = double(kept) / train.size();
    rec.pred_loss = pred_sum / batches;
    rec.skew_loss = skew_sum / batches;
    rec.disorder_loss = dis_sum / batches;
    rec.total_loss = total_sum / batches;
    const SkewMetrics m =
        EvaluateSkew(model, reference, test, spec.k, config.attribution);
    rec.test_acc = m.accuracy;
    rec.mean_skewness = m.mean_skewness;
    rec.disorder_rate = m.disorder_rate;
    rec.reference_acc = ReferenceAccuracy(model, reference, test);
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }

  reference.PermuteInputs(model.mapping());
  model.FoldMapping();
  return result;
}

}  // namespace skewsplit
