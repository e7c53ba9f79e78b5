#ifndef SKEWSPLIT_TOOLS_COMMANDS_H_
#define SKEWSPLIT_TOOLS_COMMANDS_H_

// Subcommand implementations shared by the skewsplit binary and the
// acceptance suite.

#include <atomic>
#include <cstdint>
#include <exception>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "skewsplit/data.h"
#include "skewsplit/nn.h"
#include "skewsplit/offload.h"
#include "skewsplit/skewtrain.h"

namespace skewsplit::cli {

using Json = nlohmann::ordered_json;

// Environment variable holding the default server address (host:port).
inline constexpr const char* kServerEnv = "SKEWSPLIT_SERVER";

struct DataSpec {
  std::string source = "synthetic";  // synthetic | idx | csv
  std::string task = "radial";
  int n_train = 800;
  int n_test = 400;
  int height = 16;
  int width = 16;
  int channels = 1;  // csv only; idx and synthetic carry their own
  std::string train_images, train_labels, test_images, test_labels;
  std::string train_csv, test_csv;
};

struct ExperimentConfig {
  DataSpec data;
  SplitModelConfig model;
  double rho = 0.8;
  double lambda = 0.3;
  TrainConfig train;
  int eval_ig_steps = 128;
  LinkModel link;
  CostModel cost;
  std::string mode = "partitioned";
  std::vector<double> bandwidths = {270e3, 1e6, 6e6};
  int timeout_ms = 500;
  bool simulated = true;
  std::string server;  // empty: in-process loopback
  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  ExperimentConfig();
  // Throws ConfigError on the first invalid field.
  void Validate() const;
  SkewnessSpec Skewness() const;
  // `model` with input dims taken from the data spec and, for synthetic
  // tasks, the task's class count.
  SplitModelConfig ModelConfig() const;
  Json ToJson() const;
  // Overlays the keys present in `j` onto `base`. Unknown keys are rejected.
  static ExperimentConfig FromJson(const Json& j, ExperimentConfig base);
};

// Reads a JSON config file. Throws ConfigError.
Json ReadConfigFile(const std::string& path);

// Train and test splits; synthetic data is seeded from config.seed.
std::pair<Dataset, Dataset> LoadData(const ExperimentConfig& config);

struct TrainOutput {
  std::string archive_path;
  std::string log_path;
  std::string report_path;
  Json report;
};

// Writes <out>/model.ssa, <out>/train_log.jsonl and <out>/train_report.json.
TrainOutput CmdTrain(const ExperimentConfig& config, std::ostream& log);

// Writes <out>/eval_report.json and <out>/eval_skewness_cdf.csv.
Json CmdEval(const ExperimentConfig& config, const std::string& model_path,
             std::optional<int> expected_k, std::ostream& log);

// Bandwidth sweep in config.mode. Writes <out>/offload_<mode>.csv (per
// sample) and <out>/offload_<mode>.json (summary). `connected` reports
// whether a requested remote server was reachable.
Json CmdOffload(const ExperimentConfig& config, const std::string& model_path,
                std::optional<int> expected_k, std::ostream& log,
                bool* connected = nullptr);

// Serves until *stop becomes true.
void CmdServe(const ExperimentConfig& config, const std::string& model_path,
              const std::string& listen, const std::atomic<bool>& stop,
              std::ostream& log);

struct ReportTables {
  std::string csv;
  std::string json;
};
// One row per (k, rho) over train or demo reports. Throws DataError for an
// empty input list or a report missing required fields.
ReportTables CmdReport(const std::vector<std::string>& inputs);

// train -> eval -> offload (all modes) -> report. Writes
// <out>/demo_report.json and returns it.
Json CmdDemo(const ExperimentConfig& config, std::ostream& log);

// 0 success, 2 config, 3 data, 4 divergence, 5 transport, 1 anything else.
int ExitCodeFor(const std::exception& e);

}  // namespace skewsplit::cli

#endif  // SKEWSPLIT_TOOLS_COMMANDS_H_
