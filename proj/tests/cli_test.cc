#include "commands.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "gtest/gtest.h"
#include "skewsplit/archive.h"
#include "skewsplit/errors.h"

namespace skewsplit::cli {
namespace {

namespace fs = std::filesystem;

std::string TempDir(const std::string& name) {
  return (fs::temp_directory_path() /
          ("skewsplit_cli_" + std::to_string(::getpid()) + "_" + name))
      .string();
}

std::string ReadAll(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig Tiny(const std::string& out) {
  ExperimentConfig c;
  c.data.n_train = 96;
  c.data.n_test = 48;
  c.train.epochs = 2;
  c.train.reference_max_epochs = 2;
  c.train.attribution.ig_steps = 4;
  c.eval_ig_steps = 8;
  c.out_dir = out;
  return c;
}

TEST(ConfigTest, DefaultsAreDeskScale) {
  const ExperimentConfig c;
  EXPECT_EQ(c.model.extractor.channels_out, 8);
  EXPECT_EQ(c.model.k, 2);
  EXPECT_EQ(c.train.lr, 0.1);
  EXPECT_EQ(c.train.weight_decay, 5e-4);
  EXPECT_EQ(c.train.epochs, 50);
  EXPECT_EQ(c.rho, 0.8);
  EXPECT_EQ(c.lambda, 0.3);
  EXPECT_EQ(c.model.temperature, 6.0);
  EXPECT_EQ(c.timeout_ms, 500);
  EXPECT_NO_THROW(c.Validate());
}

TEST(ConfigTest, JsonRoundTripAndOverlay) {
  ExperimentConfig c;
  c.rho = 0.65;
  c.model.k = 3;
  c.bandwidths = {1e5, 2e5};
  c.seed = 42;
  const ExperimentConfig d = ExperimentConfig::FromJson(c.ToJson(), ExperimentConfig());
  EXPECT_EQ(d.ToJson(), c.ToJson());

  const Json partial = {{"skewness", {{"rho", 0.5}}}, {"train", {{"epochs", 7}}}};
  const ExperimentConfig e = ExperimentConfig::FromJson(partial, c);
  EXPECT_EQ(e.rho, 0.5);
  EXPECT_EQ(e.train.epochs, 7);
  EXPECT_EQ(e.model.k, 3);  // untouched keys keep the base value
  EXPECT_EQ(e.seed, 42u);
}

TEST(ConfigTest, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(ExperimentConfig::FromJson({{"bogus", 1}}, {}), ConfigError);
  EXPECT_THROW(ExperimentConfig::FromJson({{"train", {{"epoch", 1}}}}, {}), ConfigError);
  EXPECT_THROW(ExperimentConfig::FromJson({{"seed", "one"}}, {}), ConfigError);
  ExperimentConfig c;
  c.model.k = 8;
  EXPECT_THROW(c.Validate(), ConfigError);
  c = ExperimentConfig();
  c.mode = "cloud";
  EXPECT_THROW(c.Validate(), ConfigError);
  c = ExperimentConfig();
  c.bandwidths.clear();
  EXPECT_THROW(c.Validate(), ConfigError);
  c = ExperimentConfig();
  c.server = "nohost";
  EXPECT_THROW(c.Validate(), ConfigError);
  c = ExperimentConfig();
  c.data.task = "spiral";
  EXPECT_THROW(c.Validate(), ConfigError);
  c = ExperimentConfig();
  c.data.source = "idx";
  EXPECT_THROW(c.Validate(), ConfigError);
}

TEST(ConfigTest, SyntheticTaskSetsClasses) {
  ExperimentConfig c;
  c.data.task = "xor-grid";
  EXPECT_EQ(c.ModelConfig().classes, 2);
  c.data.task = "stripe";
  EXPECT_EQ(c.ModelConfig().classes, 4);
}

TEST(ExitCodeTest, Mapping) {
  EXPECT_EQ(ExitCodeFor(ConfigError("x")), 2);
  EXPECT_EQ(ExitCodeFor(DataError("x")), 3);
  EXPECT_EQ(ExitCodeFor(FormatError("x")), 3);
  EXPECT_EQ(ExitCodeFor(DivergenceError("x")), 4);
  EXPECT_EQ(ExitCodeFor(TransportError("x")), 5);
  EXPECT_EQ(ExitCodeFor(std::runtime_error("x")), 1);
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new std::string(TempDir("pipeline"));
    std::ostringstream log;
    trained_ = new TrainOutput(CmdTrain(Tiny(*dir_), log));
  }
  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete trained_;
    delete dir_;
  }

  static std::string* dir_;
  static TrainOutput* trained_;
};

std::string* PipelineTest::dir_ = nullptr;
TrainOutput* PipelineTest::trained_ = nullptr;

TEST_F(PipelineTest, TrainWritesArchiveLogAndReport) {
  std::ifstream log(trained_->log_path);
  int rows = 0;
  for (std::string line; std::getline(log, line);) {
    EXPECT_TRUE(Json::parse(line).contains("mean_skewness"));
    ++rows;
  }
  EXPECT_EQ(rows, 2);
  const Json report = Json::parse(ReadAll(trained_->report_path));
  EXPECT_EQ(report["config"]["skewness"]["rho"], 0.8);
  EXPECT_EQ(report["seed"], 1);
  EXPECT_EQ(report["epochs"].size(), 2u);
  const ModelArchive a = LoadModel(trained_->archive_path, 2);
  EXPECT_TRUE(a.reference.initialized());
  EXPECT_EQ(a.selected_channels, report["selected_channels"].get<std::vector<int>>());
}

TEST_F(PipelineTest, EvalReportBounds) {
  std::ostringstream log;
  const Json r = CmdEval(Tiny(*dir_), trained_->archive_path, std::nullopt, log);
  double prev = 0.0;
  for (const Json& point : r["skewness_cdf"]) {
    const double f = point["fraction"].get<double>();
    EXPECT_GE(f, prev);
    prev = f;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
  const double d = r["disorder_rate"].get<double>();
  EXPECT_GE(d, 0.0);
  EXPECT_LE(d, 1.0);
  EXPECT_GT(r["compression_ratio"].get<double>(), 1.0);
  EXPECT_LT(r["mean_payload_bytes"].get<double>(), r["mean_edge_payload_bytes"].get<double>());
  EXPECT_THROW(CmdEval(Tiny(*dir_), trained_->archive_path, 3, log), ConfigError);
}

TEST_F(PipelineTest, OffloadSweepMonotoneInBandwidth) {
  std::ostringstream log;
  ExperimentConfig c = Tiny(*dir_);
  c.bandwidths = {270e3, 1e6, 6e6};
  const Json r = CmdOffload(c, trained_->archive_path, std::nullopt, log);
  ASSERT_EQ(r["sweep"].size(), 3u);
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_LE(r["sweep"][i]["mean_tx_s"].get<double>(),
              r["sweep"][i - 1]["mean_tx_s"].get<double>());
  }
  c.mode = "local_only";
  const Json l = CmdOffload(c, trained_->archive_path, std::nullopt, log);
  for (const Json& row : l["sweep"]) EXPECT_EQ(row["mean_tx_s"].get<double>(), 0.0);
  std::ifstream csv(*dir_ + "/offload_local_only.csv");
  std::string line;
  std::getline(csv, line);
  int rows = 0;
  while (std::getline(csv, line)) {
    // t_tx is the tenth column.
    std::stringstream ss(line);
    std::string field;
    for (int i = 0; i < 10; ++i) std::getline(ss, field, ',');
    EXPECT_EQ(std::stod(field), 0.0);
    ++rows;
  }
  EXPECT_EQ(rows, 3 * 48);
}

TEST_F(PipelineTest, OffloadToUnreachableServerFallsBack) {
  std::ostringstream log;
  ExperimentConfig c = Tiny(*dir_);
  c.server = "127.0.0.1:1";
  c.bandwidths = {6e6};
  bool connected = true;
  const Json r = CmdOffload(c, trained_->archive_path, std::nullopt, log, &connected);
  EXPECT_FALSE(connected);
  EXPECT_EQ(r["sweep"][0]["fallbacks"], 48);
}

TEST(ReportTest, GroupsByKAndRhoDeterministically) {
  const std::string dir = TempDir("report");
  fs::create_directories(dir);
  std::vector<std::string> paths;
  int n = 0;
  for (int k : {1, 2, 3}) {
    for (int seed : {1, 2}) {
      Json r;
      r["command"] = "train";
      r["config"] = {{"skewness", {{"k", k}, {"rho", 0.8}, {"lambda", 0.3}}}};
      r["final"] = {{"test_acc", 0.9 + 0.01 * seed},
                    {"mean_skewness", 0.8 + 0.01 * k},
                    {"disorder_rate", 0.01 * seed}};
      paths.push_back(dir + "/r" + std::to_string(n++) + ".json");
      std::ofstream(paths.back()) << r.dump();
    }
  }
  const ReportTables a = CmdReport(paths), b = CmdReport(paths);
  EXPECT_EQ(a.csv, b.csv);
  EXPECT_EQ(a.json, b.json);
  const Json j = Json::parse(a.json);
  ASSERT_EQ(j["rows"].size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(j["rows"][i]["k"], i + 1);
    EXPECT_EQ(j["rows"][i]["runs"], 2);
    EXPECT_NEAR(j["rows"][i]["test_acc"].get<double>(), 0.915, 1e-12);
  }
  EXPECT_EQ(std::count(a.csv.begin(), a.csv.end(), '\n'), 4);
  EXPECT_THROW(CmdReport({}), DataError);
  std::ofstream(dir + "/bad.json") << R"({"command":"train","config":{}})";
  EXPECT_THROW(CmdReport({dir + "/bad.json"}), DataError);
  std::ofstream(dir + "/junk.json") << "not json";
  EXPECT_THROW(CmdReport({dir + "/junk.json"}), DataError);
  fs::remove_all(dir);
}

TEST(DemoTest, SmallDemoIsDeterministic) {
  const std::string dir = TempDir("demo");
  ExperimentConfig c = Tiny(dir);
  c.train.epochs = 1;
  std::ostringstream log1, log2;
  CmdDemo(c, log1);
  const std::string first = ReadAll(dir + "/demo_report.json");
  CmdDemo(c, log2);
  EXPECT_EQ(ReadAll(dir + "/demo_report.json"), first);
  EXPECT_EQ(log1.str(), log2.str());
  fs::remove_all(dir);
}

}  // namespace
}  // namespace skewsplit::cli
