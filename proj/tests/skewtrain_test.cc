#include "skewsplit/skewtrain.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "grad_check.h"
#include "gtest/gtest.h"
#include "oracles.h"
#include "skewsplit/errors.h"

namespace skewsplit {
namespace {

using testing::OracleDescent;
using testing::OracleDisorder;
using testing::OracleLikelihood;
using testing::OracleSkewness;
using testing::RandomSimplex;

// ---- Loss examples ---------------------------------------------------------

TEST(DisorderLossTest, Examples) {
  EXPECT_EQ(DisorderLoss(std::vector<double>{0.5, 0.3}, std::vector<double>{0.1, 0.1}), 0.0);
  EXPECT_NEAR(DisorderLoss(std::vector<double>{0.2, 0.1}, std::vector<double>{0.3, 0.05}),
              0.2, 1e-15);
  EXPECT_EQ(DisorderLoss(std::vector<double>{0.37}, std::vector<double>{0.37}), 0.0);
  EXPECT_THROW(DisorderLoss(std::vector<double>{}, std::vector<double>{0.1}), ShapeError);
  EXPECT_THROW(DisorderLoss(std::vector<double>{0.1}, std::vector<double>{}), ShapeError);
}

TEST(SkewnessLossTest, Examples) {
  EXPECT_EQ(SkewnessLoss(std::vector<double>{0.5, 0.4}, 0.8), 0.0);
  EXPECT_NEAR(SkewnessLoss(std::vector<double>{0.35, 0.25}, 0.8), 0.2, 1e-15);
  EXPECT_EQ(SkewnessLoss(std::vector<double>{0.0, 0.0}, 0.0), 0.0);
  EXPECT_THROW(SkewnessLoss(std::vector<double>{0.5}, 1.2), ConfigError);
  EXPECT_THROW(SkewnessLoss(std::vector<double>{0.5}, -0.1), ConfigError);
}

TEST(DescentLossTest, Examples) {
  EXPECT_EQ(DescentLoss(std::vector<double>{0.5, 0.3, 0.2}), 0.0);
  EXPECT_EQ(DescentLoss(std::vector<double>{0.0, 1.0}), 2.0);
}

TEST(CombinedLossTest, Examples) {
  EXPECT_NEAR(CombinedLoss(1.0, 0.2, 0.1, 0.5), 0.65, 1e-15);
  EXPECT_EQ(CombinedLoss(2.0, 0.0, 0.0, 0.3), 0.3 * 2.0);
  EXPECT_THROW(CombinedLoss(1, 0, 0, 0.0), ConfigError);
  EXPECT_THROW(CombinedLoss(1, 0, 0, 1.0), ConfigError);
  EXPECT_EQ(SkewnessSpec().lambda, 0.3);
}

TEST(LossOracleTest, MatchesBruteForceExactly) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 10000; ++trial) {
    const int c = 2 + trial % 23;
    const int k = 1 + static_cast<int>(rng() % (c - 1));
    const std::vector<double> v = RandomSimplex(c, rng);
    const std::vector<double> i1(v.begin(), v.begin() + k), i2(v.begin() + k, v.end());
    const double rho = u(rng), lambda = 0.01 + 0.98 * u(rng), pred = 3 * u(rng);
    ASSERT_EQ(DisorderLoss(i1, i2), OracleDisorder(i1, i2));
    ASSERT_EQ(SkewnessLoss(i1, rho), OracleSkewness(i1, rho));
    ASSERT_EQ(DescentLoss(v), OracleDescent(v));
    const double skew = OracleSkewness(i1, rho), dis = OracleDisorder(i1, i2);
    ASSERT_EQ(CombinedLoss(pred, skew, dis, lambda),
              lambda * pred + (1 - lambda) * (skew + dis));
    // Zero disorder exactly when every I1 entry is at least every I2 entry.
    bool ordered = true;
    for (double a : i1) {
      for (double b : i2) ordered = ordered && a >= b;
    }
    ASSERT_EQ(DisorderLoss(i1, i2) == 0.0, ordered);
    ASSERT_EQ(IsDisordered(v, k), !ordered);
  }
}

TEST(LossOracleTest, RowFormsMatchScalarForms) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + trial % 5, c = 3 + trial % 6, k = 1 + trial % (c - 1);
    std::vector<double> flat;
    std::vector<std::vector<double>> rows;
    for (int r = 0; r < n; ++r) {
      rows.push_back(RandomSimplex(c, rng));
      flat.insert(flat.end(), rows.back().begin(), rows.back().end());
    }
    Tensor imp = Tensor::FromData({n, c}, flat);
    Tensor dis = DisorderLossRows(imp, k), skew = SkewnessLossRows(imp, k, 0.7),
           desc = DescentLossRows(imp);
    for (int r = 0; r < n; ++r) {
      const std::vector<double> i1(rows[r].begin(), rows[r].begin() + k),
          i2(rows[r].begin() + k, rows[r].end());
      EXPECT_EQ(dis.at(r), OracleDisorder(i1, i2));
      EXPECT_NEAR(skew.at(r), OracleSkewness(i1, 0.7), 1e-15);
      EXPECT_NEAR(desc.at(r), OracleDescent(rows[r]), 1e-15);
    }
  }
}

TEST(LossOracleTest, GradientsThroughNormalization) {
  // Loss as a function of signed raw channel attributions, away from kinks.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 1);
  int checked = 0;
  while (checked < 50) {
    std::vector<double> raw(6);
    for (double& r : raw) r = n(rng);
    Tensor x = Tensor::FromData({1, 6}, raw, true);
    auto f = [&] {
      Tensor imp = NormalizeRows(Abs(x));
      return Add(Add(Sum(SkewnessLossRows(imp, 2, 0.9)), Sum(DisorderLossRows(imp, 2))),
                 Sum(DescentLossRows(imp)));
    };
    // Skip points within 1e-3 of a kink: sign change, tie, or rho boundary.
    std::vector<double> a(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) a[i] = std::abs(raw[i]);
    std::vector<double> s = a;
    std::sort(s.begin(), s.end());
    bool near_kink = s[0] < 1e-3;
    for (std::size_t i = 1; i < s.size(); ++i) near_kink |= s[i] - s[i - 1] < 1e-3;
    const double total = std::accumulate(a.begin(), a.end(), 0.0);
    near_kink |= std::abs((a[0] + a[1]) / total - 0.9) < 1e-3;
    if (near_kink) continue;
    ++checked;
    Backward(f());
    auto numeric = testing::NumericalGradients([&] { return f().item(); }, {&x}, 1e-7);
    EXPECT_LT(testing::RelativeError(x.grad(), numeric[0]), 1e-4);
  }
}

// ---- Channel selection -----------------------------------------------------

TEST(SelectChannelsTest, HandTrace) {
  // Two samples, both ranking channel 1 (the second of three) highest.
  const std::vector<std::vector<double>> imps{{0.2, 0.7, 0.1}, {0.3, 0.5, 0.2}};
  ChannelSelection sel = SelectInitialChannels(imps, 1);
  EXPECT_EQ(sel.likelihood, (std::vector<double>{0.0, 1.0, 0.0}));
  EXPECT_EQ(sel.channels, (std::vector<int>{1}));
}

TEST(SelectChannelsTest, TiesPickLowestIndices) {
  const std::vector<std::vector<double>> imps{{0.4, 0.4, 0.1, 0.1},
                                              {0.1, 0.1, 0.4, 0.4}};
  ChannelSelection sel = SelectInitialChannels(imps, 2);
  EXPECT_EQ(sel.likelihood, (std::vector<double>{0.5, 0.5, 0.5, 0.5}));
  EXPECT_EQ(sel.channels, (std::vector<int>{0, 1}));
  // Equal importances inside a sample also resolve to the lower index.
  ChannelSelection flat = SelectInitialChannels({{0.25, 0.25, 0.25, 0.25}}, 3);
  EXPECT_EQ(flat.channels, (std::vector<int>{0, 1, 2}));
}

TEST(SelectChannelsTest, SingleSample) {
  ChannelSelection sel = SelectInitialChannels({{0.1, 0.3, 0.05, 0.55}}, 2);
  EXPECT_EQ(sel.likelihood, (std::vector<double>{0, 1, 0, 1}));
  EXPECT_EQ(sel.channels, (std::vector<int>{1, 3}));
}

TEST(SelectChannelsTest, RandomizedAgainstBruteForce) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 100; ++trial) {
    const int c = 2 + trial % 10, k = 1 + trial % (c - 1);
    const int n = 1 + static_cast<int>(rng() % 60);
    std::vector<std::vector<double>> imps;
    for (int i = 0; i < n; ++i) {
      std::vector<double> v = RandomSimplex(c, rng);
      // Quantise some vectors to create ties.
      if (i % 3 == 0) {
        for (double& x : v) x = std::round(x * 4) / 4;
      }
      imps.push_back(v);
    }
    ChannelSelection sel = SelectInitialChannels(imps, k);
    const std::vector<double> p = OracleLikelihood(imps, k);
    ASSERT_EQ(sel.likelihood, p) << trial;
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), k, 1e-9);
    // Oracle selection: repeatedly take the first maximum.
    std::vector<int> expected;
    std::vector<bool> used(c, false);
    for (int j = 0; j < k; ++j) {
      int best = -1;
      for (int ch = 0; ch < c; ++ch) {
        if (!used[ch] && (best < 0 || p[ch] > p[best])) best = ch;
      }
      used[best] = true;
      expected.push_back(best);
    }
    ASSERT_EQ(sel.channels, expected) << trial;
  }
}

TEST(SelectChannelsTest, Errors) {
  EXPECT_THROW(SelectInitialChannels({}, 1), DataError);
  EXPECT_THROW(SelectInitialChannels({{0.5, 0.5}}, 2), ConfigError);
  EXPECT_THROW(SelectInitialChannels({{0.5, 0.5}, {1.0}}, 1), ShapeError);
}

// ---- Mapping layer ---------------------------------------------------------

TEST(MappingLayerTest, SelectedChannelsFirst) {
  const std::vector<int> selected{2, 0};
  MappingLayer m = MappingLayer::FromSelection(selected, 4);
  EXPECT_EQ(m.permutation(), (std::vector<int>{2, 0, 1, 3}));
  EXPECT_EQ(m.Inverse(), (std::vector<int>{1, 2, 0, 3}));
  Tensor f = Tensor::FromData({1, 1, 1, 4}, {10, 11, 12, 13});
  Tensor g = m.Apply(f);
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()),
            (std::vector<double>{12, 10, 11, 13}));
  Tensor back = MappingLayer(m.Inverse()).Apply(g);
  EXPECT_TRUE(std::equal(back.data().begin(), back.data().end(), f.data().begin()));
  EXPECT_THROW(MappingLayer({0, 0, 1}), ConfigError);
  EXPECT_THROW(m.Apply(Tensor::Zeros({1, 3})), ShapeError);
  const std::vector<int> dup{1, 1};
  EXPECT_THROW(MappingLayer::FromSelection(dup, 4), ConfigError);
}

// ---- Config ----------------------------------------------------------------

TEST(ConfigTest, SpecValidation) {
  SkewnessSpec s;
  EXPECT_NO_THROW(s.Validate(8));
  s.k = 8;
  EXPECT_THROW(s.Validate(8), ConfigError);
  s = SkewnessSpec();
  s.rho = 1.5;
  EXPECT_THROW(s.Validate(8), ConfigError);
  s = SkewnessSpec();
  s.lambda = 1.0;
  EXPECT_THROW(s.Validate(8), ConfigError);
  s = SkewnessSpec();
  s.temperature = 0;
  EXPECT_THROW(s.Validate(8), ConfigError);
}

TEST(ConfigTest, DefaultsAndSigmaSchedule) {
  TrainConfig c;
  EXPECT_EQ(c.lr, 0.1);
  EXPECT_EQ(c.weight_decay, 5e-4);
  EXPECT_EQ(c.batch_size, 64);
  EXPECT_EQ(c.attribution.ig_steps, 32);
  EXPECT_EQ(c.SigmaAt(1), 1.0);
  EXPECT_EQ(c.SigmaAt(10), 1.0);
  EXPECT_EQ(c.SigmaAt(11), 2.0);
  EXPECT_EQ(c.SigmaAt(61), 64.0);
  EXPECT_EQ(c.SigmaAt(71), 100.0);
  c.attribution.method = AttributionMethod::kGradientSaliency;
  EXPECT_THROW(c.Validate(), ConfigError);
}

// ---- Training loop ---------------------------------------------------------

class JointTrainTest : public ::testing::Test {
 protected:
  void SetUp() override {
    train_ = GenSynthetic(SyntheticTask::kRadial, 96, 11);
    test_ = GenSynthetic(SyntheticTask::kRadial, 48, 12);
    cfg_.extractor.channels_out = 4;
    cfg_.k = 1;
    cfg_.remote_width = 4;
    cfg_.reference_width = 8;
    spec_.k = 1;
    train_cfg_.epochs = 2;
    train_cfg_.warmup_epochs = 1;
    train_cfg_.reference_max_epochs = 2;
    train_cfg_.attribution.ig_steps = 4;
    train_cfg_.batch_size = 32;
  }

  std::pair<SplitModel, ReferenceNet> Fresh() const {
    std::mt19937_64 rng(5);
    return {SplitModel(cfg_, 3), ReferenceNet(4, cfg_.reference_width, 4, rng)};
  }

  Dataset train_, test_;
  SplitModelConfig cfg_;
  SkewnessSpec spec_;
  TrainConfig train_cfg_;
};

TEST_F(JointTrainTest, ReproducibleAndLogged) {
  auto [m1, r1] = Fresh();
  auto [m2, r2] = Fresh();
  std::vector<std::string> lines;
  TrainResult a = JointTrain(m1, r1, spec_, train_cfg_, train_, test_,
                             [&](const EpochRecord& e) { lines.push_back(e.ToJson()); });
  TrainResult b = JointTrain(m2, r2, spec_, train_cfg_, train_, test_);
  ASSERT_EQ(lines.size(), 2u);
  EXPECT_NE(lines[0].find("\"mean_skewness\""), std::string::npos);
  EXPECT_EQ(lines[0].find('\n'), std::string::npos);
  auto p1 = m1.NamedParameters(), p2 = m2.NamedParameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    EXPECT_TRUE(std::equal(p1[i].second->data().begin(), p1[i].second->data().end(),
                           p2[i].second->data().begin()))
        << p1[i].first;
  }
  EXPECT_EQ(a.selection.channels, b.selection.channels);
  EXPECT_NEAR(std::accumulate(a.selection.likelihood.begin(),
                              a.selection.likelihood.end(), 0.0), spec_.k, 1e-9);
  EXPECT_TRUE(m1.mapping().empty());
  for (const EpochRecord& e : a.log) {
    EXPECT_GE(e.disorder_rate, 0.0);
    EXPECT_LE(e.disorder_rate, 1.0);
    EXPECT_GT(e.alpha, 0.0);
    EXPECT_LT(e.alpha, 1.0);
  }
}

TEST_F(JointTrainTest, LoggedSkewnessMatchesIndependentRecomputation) {
  auto [model, ref] = Fresh();
  TrainResult r = JointTrain(model, ref, spec_, train_cfg_, train_, test_);
  // The mapping is folded now; attribute the final features directly.
  std::vector<std::size_t> all(test_.size());
  std::iota(all.begin(), all.end(), 0);
  auto [x, y] = test_.Batch(all);
  GatedAttribution g = GatedImportance(ref, model.extractor().Forward(x), y,
                                       train_cfg_.attribution);
  double sum = 0.0;
  int n = 0;
  for (const auto& iv : g.importance) {
    if (iv && !iv->degenerate) {
      sum += Skewness(*iv, spec_.k);
      ++n;
    }
  }
  ASSERT_GT(n, 0);
  EXPECT_NEAR(r.log.back().mean_skewness, sum / n, 1e-9);
}

TEST_F(JointTrainTest, RejectsMismatchedConfig) {
  auto [model, ref] = Fresh();
  SkewnessSpec wrong_k = spec_;
  wrong_k.k = 2;
  EXPECT_THROW(JointTrain(model, ref, wrong_k, train_cfg_, train_, test_), ConfigError);
  SkewnessSpec wrong_t = spec_;
  wrong_t.temperature = 4;
  EXPECT_THROW(JointTrain(model, ref, wrong_t, train_cfg_, train_, test_), ConfigError);
  Dataset xor_data = GenSynthetic(SyntheticTask::kXorGrid, 32, 1);
  EXPECT_THROW(JointTrain(model, ref, spec_, train_cfg_, xor_data, test_), DataError);
}

TEST_F(JointTrainTest, DivergenceIsReported) {
  auto [model, ref] = Fresh();
  train_cfg_.lr = 1e200;
  try {
    JointTrain(model, ref, spec_, train_cfg_, train_, test_);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

}  // namespace
}  // namespace skewsplit
