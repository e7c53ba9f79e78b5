#include "commands.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "skewsplit/archive.h"
#include "skewsplit/codec.h"
#include "skewsplit/errors.h"

namespace skewsplit::cli {
namespace fs = std::filesystem;

namespace {

std::string Fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::string FmtG(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

void CheckKeys(const Json& obj, const std::string& section,
               std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : obj.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* a) { return key == a; });
    if (!known) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) +
                        "'");
    }
  }
}

template <typename T>
void Take(const Json& obj, const char* key, T& dst) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config key '") + key + "' has the wrong type");
  }
}

void WriteFile(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

fs::path OutDir(const ExperimentConfig& config) {
  fs::path dir(config.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory " + dir.string());
  return dir;
}

Json ReadJsonFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + " is not valid JSON: " + e.what());
  }
}

// Fails with DataError when a dataset cannot feed the model.
void CheckCompatible(const Dataset& d, const SplitModelConfig& m) {
  const ExtractorConfig& e = m.extractor;
  if (d.height() != e.input_h || d.width() != e.input_w || d.channels() != e.input_c) {
    throw DataError("dataset '" + d.split + "' has images " + std::to_string(d.height()) +
                    "x" + std::to_string(d.width()) + "x" + std::to_string(d.channels()) +
                    " but the model expects " + std::to_string(e.input_h) + "x" +
                    std::to_string(e.input_w) + "x" + std::to_string(e.input_c));
  }
  const int max_label = *std::max_element(d.labels.begin(), d.labels.end());
  if (max_label >= m.classes) {
    throw DataError("dataset '" + d.split + "' has label " + std::to_string(max_label) +
                    " but the model has " + std::to_string(m.classes) + " classes");
  }
}

AttributionConfig EvalAttribution(const ExperimentConfig& config) {
  AttributionConfig a;
  a.ig_steps = config.eval_ig_steps;
  return a;
}

}  // namespace

// ---- Config ------------------------------------------------------------------

ExperimentConfig::ExperimentConfig() {
  // Desk-scale defaults: 16x16x1 inputs, C=8, k=2.
  model.extractor.channels_out = 8;
  model.k = 2;
}

SkewnessSpec ExperimentConfig::Skewness() const {
  SkewnessSpec s;
  s.k = model.k;
  s.rho = rho;
  s.lambda = lambda;
  s.temperature = model.temperature;
  return s;
}

SplitModelConfig ExperimentConfig::ModelConfig() const {
  SplitModelConfig m = model;
  m.extractor.input_h = data.height;
  m.extractor.input_w = data.width;
  m.extractor.input_c = data.channels;
  if (data.source == "synthetic") {
    m.extractor.input_c = 1;
    try {
      m.classes = TaskClasses(ParseTask(data.task));
    } catch (const DataError&) {
    }
  }
  return m;
}

void ExperimentConfig::Validate() const {
  if (data.source == "synthetic") {
    try {
      ParseTask(data.task);
    } catch (const DataError& e) {
      throw ConfigError(e.what());
    }
    if (data.n_train < 1 || data.n_test < 1) throw ConfigError("n_train and n_test must be >= 1");
  } else if (data.source == "idx") {
    if (data.train_images.empty() || data.train_labels.empty() ||
        data.test_images.empty() || data.test_labels.empty()) {
      throw ConfigError("idx data needs train/test image and label paths");
    }
  } else if (data.source == "csv") {
    if (data.train_csv.empty() || data.test_csv.empty()) {
      throw ConfigError("csv data needs train_csv and test_csv");
    }
  } else {
    throw ConfigError("unknown data source '" + data.source + "' (synthetic, idx, csv)");
  }
  if (data.height < 1 || data.width < 1 || data.channels < 1) {
    throw ConfigError("image dimensions must be positive");
  }
  ModelConfig().Validate();
  Skewness().Validate(model.extractor.channels_out);
  train.Validate();
  if (eval_ig_steps < 1) throw ConfigError("eval ig_steps must be >= 1");
  link.Validate();
  cost.Validate();
  ParseMode(mode);
  if (bandwidths.empty()) throw ConfigError("bandwidth sweep is empty");
  for (double b : bandwidths) LinkModel{b, link.rtt_s}.Validate();
  if (timeout_ms < 1) throw ConfigError("timeout_ms must be >= 1");
  if (!server.empty()) ParseAddress(server);
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

Json ExperimentConfig::ToJson() const {
  Json j;
  j["seed"] = seed;
  j["data"] = {{"source", data.source},       {"task", data.task},
               {"n_train", data.n_train},     {"n_test", data.n_test},
               {"height", data.height},       {"width", data.width},
               {"channels", data.channels},   {"train_images", data.train_images},
               {"train_labels", data.train_labels}, {"test_images", data.test_images},
               {"test_labels", data.test_labels},   {"train_csv", data.train_csv},
               {"test_csv", data.test_csv}};
  j["model"] = skewsplit::ToJson(ModelConfig());
  j["skewness"] = {{"k", model.k}, {"rho", rho}, {"lambda", lambda},
                   {"temperature", model.temperature}};
  j["train"] = {{"epochs", train.epochs},
                {"warmup_epochs", train.warmup_epochs},
                {"batch_size", train.batch_size},
                {"lr", train.lr},
                {"weight_decay", train.weight_decay},
                {"ig_steps", train.attribution.ig_steps},
                {"sigma_start", train.sigma_start},
                {"sigma_max", train.sigma_max},
                {"sigma_double_every", train.sigma_double_every},
                {"reference_target_accuracy", train.reference_target_accuracy},
                {"reference_max_epochs", train.reference_max_epochs},
                {"refresh_reference", train.refresh_reference},
                {"descent_loss", train.descent_loss}};
  j["eval"] = {{"ig_steps", eval_ig_steps}};
  j["link"] = {{"bandwidth_bps", link.bandwidth_bps}, {"rtt_s", link.rtt_s}};
  j["cost"] = {{"device_flops", cost.device_flops},
               {"server_flops", cost.server_flops},
               {"compress_bytes_per_s", cost.compress_bytes_per_s}};
  j["offload"] = {{"mode", mode},
                  {"bandwidths", bandwidths},
                  {"timeout_ms", timeout_ms},
                  {"simulated", simulated},
                  {"server", server}};
  j["out_dir"] = out_dir;
  return j;
}

ExperimentConfig ExperimentConfig::FromJson(const Json& j, ExperimentConfig c) {
  CheckKeys(j, "", {"seed", "data", "model", "skewness", "train", "eval", "link",
                    "cost", "offload", "out_dir"});
  Take(j, "seed", c.seed);
  Take(j, "out_dir", c.out_dir);
  if (j.contains("data")) {
    const Json& d = j["data"];
    CheckKeys(d, "data", {"source", "task", "n_train", "n_test", "height", "width",
                          "channels", "train_images", "train_labels", "test_images",
                          "test_labels", "train_csv", "test_csv"});
    Take(d, "source", c.data.source);
    Take(d, "task", c.data.task);
    Take(d, "n_train", c.data.n_train);
    Take(d, "n_test", c.data.n_test);
    Take(d, "height", c.data.height);
    Take(d, "width", c.data.width);
    Take(d, "channels", c.data.channels);
    Take(d, "train_images", c.data.train_images);
    Take(d, "train_labels", c.data.train_labels);
    Take(d, "test_images", c.data.test_images);
    Take(d, "test_labels", c.data.test_labels);
    Take(d, "train_csv", c.data.train_csv);
    Take(d, "test_csv", c.data.test_csv);
  }
  if (j.contains("model")) {
    const Json& m = j["model"];
    CheckKeys(m, "model", {"extractor", "k", "classes", "remote_width", "reference_width",
                           "quantizer_levels", "temperature"});
    if (m.contains("extractor")) {
      const Json& e = m["extractor"];
      CheckKeys(e, "model.extractor", {"conv_layers", "channels_out", "kernel", "input_h",
                                       "input_w", "input_c"});
      Take(e, "conv_layers", c.model.extractor.conv_layers);
      Take(e, "channels_out", c.model.extractor.channels_out);
      Take(e, "kernel", c.model.extractor.kernel);
      Take(e, "input_h", c.data.height);
      Take(e, "input_w", c.data.width);
      Take(e, "input_c", c.data.channels);
    }
    Take(m, "k", c.model.k);
    Take(m, "classes", c.model.classes);
    Take(m, "remote_width", c.model.remote_width);
    Take(m, "reference_width", c.model.reference_width);
    Take(m, "quantizer_levels", c.model.quantizer_levels);
    Take(m, "temperature", c.model.temperature);
  }
  if (j.contains("skewness")) {
    const Json& s = j["skewness"];
    CheckKeys(s, "skewness", {"k", "rho", "lambda", "temperature"});
    Take(s, "k", c.model.k);
    Take(s, "rho", c.rho);
    Take(s, "lambda", c.lambda);
    Take(s, "temperature", c.model.temperature);
  }
  if (j.contains("train")) {
    const Json& t = j["train"];
    CheckKeys(t, "train", {"epochs", "warmup_epochs", "batch_size", "lr", "weight_decay",
                           "ig_steps", "sigma_start", "sigma_max", "sigma_double_every",
                           "reference_target_accuracy", "reference_max_epochs",
                           "refresh_reference", "descent_loss"});
    Take(t, "epochs", c.train.epochs);
    Take(t, "warmup_epochs", c.train.warmup_epochs);
    Take(t, "batch_size", c.train.batch_size);
    Take(t, "lr", c.train.lr);
    Take(t, "weight_decay", c.train.weight_decay);
    Take(t, "ig_steps", c.train.attribution.ig_steps);
    Take(t, "sigma_start", c.train.sigma_start);
    Take(t, "sigma_max", c.train.sigma_max);
    Take(t, "sigma_double_every", c.train.sigma_double_every);
    Take(t, "reference_target_accuracy", c.train.reference_target_accuracy);
    Take(t, "reference_max_epochs", c.train.reference_max_epochs);
    Take(t, "refresh_reference", c.train.refresh_reference);
    Take(t, "descent_loss", c.train.descent_loss);
  }
  if (j.contains("eval")) {
    CheckKeys(j["eval"], "eval", {"ig_steps"});
    Take(j["eval"], "ig_steps", c.eval_ig_steps);
  }
  if (j.contains("link")) {
    CheckKeys(j["link"], "link", {"bandwidth_bps", "rtt_s"});
    Take(j["link"], "bandwidth_bps", c.link.bandwidth_bps);
    Take(j["link"], "rtt_s", c.link.rtt_s);
  }
  if (j.contains("cost")) {
    CheckKeys(j["cost"], "cost", {"device_flops", "server_flops", "compress_bytes_per_s"});
    Take(j["cost"], "device_flops", c.cost.device_flops);
    Take(j["cost"], "server_flops", c.cost.server_flops);
    Take(j["cost"], "compress_bytes_per_s", c.cost.compress_bytes_per_s);
  }
  if (j.contains("offload")) {
    const Json& o = j["offload"];
    CheckKeys(o, "offload", {"mode", "bandwidths", "timeout_ms", "simulated", "server"});
    Take(o, "mode", c.mode);
    Take(o, "bandwidths", c.bandwidths);
    Take(o, "timeout_ms", c.timeout_ms);
    Take(o, "simulated", c.simulated);
    Take(o, "server", c.server);
  }
  return c;
}

Json ReadConfigFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

std::pair<Dataset, Dataset> LoadData(const ExperimentConfig& config) {
  const DataSpec& d = config.data;
  Dataset train, test;
  if (d.source == "synthetic") {
    const SyntheticTask task = ParseTask(d.task);
    train = GenSynthetic(task, d.n_train, config.seed, d.height, d.width);
    test = GenSynthetic(task, d.n_test, config.seed + 1000003, d.height, d.width);
  } else if (d.source == "idx") {
    const int classes = config.ModelConfig().classes;
    train = LoadIdx(d.train_images, d.train_labels, classes);
    test = LoadIdx(d.test_images, d.test_labels, classes);
  } else {
    const int classes = config.ModelConfig().classes;
    train = LoadCsv(d.train_csv, d.height, d.width, d.channels, classes);
    test = LoadCsv(d.test_csv, d.height, d.width, d.channels, classes);
  }
  train.split = "train";
  test.split = "test";
  return {std::move(train), std::move(test)};
}

// ---- train -------------------------------------------------------------------

TrainOutput CmdTrain(const ExperimentConfig& config, std::ostream& log) {
  config.Validate();
  const fs::path dir = OutDir(config);
  const SplitModelConfig model_config = config.ModelConfig();
  auto [train, test] = LoadData(config);
  CheckCompatible(train, model_config);
  CheckCompatible(test, model_config);

  const SkewnessSpec spec = config.Skewness();
  log << "# train seed=" << config.seed << " task=" << config.data.task
      << " C=" << config.model.extractor.channels_out << " k=" << spec.k
      << " rho=" << spec.rho << " lambda=" << spec.lambda << " T=" << spec.temperature
      << " epochs=" << config.train.epochs << "\n";

  SplitModel model(model_config, config.seed);
  std::mt19937_64 ref_rng(config.seed + 1);
  ReferenceNet reference(model_config.extractor.channels_out, model_config.reference_width,
                         model_config.classes, ref_rng);
  TrainConfig tc = config.train;
  tc.seed = config.seed;

  TrainOutput out;
  out.log_path = (dir / "train_log.jsonl").string();
  std::ofstream epoch_log(out.log_path, std::ios::trunc);
  if (!epoch_log) throw DataError("cannot write " + out.log_path);
  Json epochs = Json::array();
  const TrainResult result =
      JointTrain(model, reference, spec, tc, train, test, [&](const EpochRecord& r) {
        epoch_log << r.ToJson() << "\n";
        epoch_log.flush();
        epochs.push_back(Json::parse(r.ToJson()));
        log << "epoch " << r.epoch << "/" << tc.epochs << "  train_acc " << Fmt(r.train_acc, 3)
            << "  test_acc " << Fmt(r.test_acc, 3) << "  skew " << Fmt(r.mean_skewness, 3)
            << "  disorder " << Fmt(r.disorder_rate, 3) << "  loss " << Fmt(r.total_loss, 4)
            << "\n";
      });

  const SkewMetrics final_test =
      EvaluateSkew(model, reference, test, spec.k, EvalAttribution(config));
  const double train_acc = Accuracy(model, train);

  ModelArchive archive;
  archive.model = model;
  archive.reference = reference;
  archive.spec = spec;
  archive.selected_channels = result.selection.channels;
  archive.metadata = {{"seed", config.seed}, {"config", config.ToJson()}};
  out.archive_path = (dir / "model.ssa").string();
  SaveModel(archive, out.archive_path);

  Json report;
  report["command"] = "train";
  report["seed"] = config.seed;
  report["config"] = config.ToJson();
  report["warmup_epochs_run"] = result.warmup_epochs_run;
  report["reference_train_accuracy"] = result.reference_train_accuracy;
  report["selected_channels"] = result.selection.channels;
  report["channel_likelihood"] = result.selection.likelihood;
  report["epochs"] = std::move(epochs);
  report["final"] = {{"train_acc", train_acc},
                     {"test_acc", final_test.accuracy},
                     {"mean_skewness", final_test.mean_skewness},
                     {"disorder_rate", final_test.disorder_rate},
                     {"attributed", final_test.attributed},
                     {"skipped", final_test.skipped},
                     {"alpha", model.combiner().alpha()},
                     {"eval_ig_steps", config.eval_ig_steps}};
  report["archive"] = "model.ssa";
  out.report_path = (dir / "train_report.json").string();
  WriteFile(out.report_path, report.dump(2) + "\n");
  out.report = std::move(report);

  log << "final  test_acc " << Fmt(final_test.accuracy, 3) << "  skewness "
      << Fmt(final_test.mean_skewness, 3) << "  disorder " << Fmt(final_test.disorder_rate, 3)
      << "  selected";
  for (int c : result.selection.channels) log << " " << c;
  log << "\nwrote " << out.archive_path << "\n";
  return out;
}

// ---- eval --------------------------------------------------------------------

Json CmdEval(const ExperimentConfig& config, const std::string& model_path,
             std::optional<int> expected_k, std::ostream& log) {
  config.Validate();
  const fs::path dir = OutDir(config);
  const ModelArchive archive = LoadModel(model_path, expected_k);
  const SplitModel& model = archive.model;
  Dataset test = LoadData(config).second;
  CheckCompatible(test, model.config());

  Json report;
  report["command"] = "eval";
  report["seed"] = config.seed;
  report["config"] = config.ToJson();
  report["model_config"] = skewsplit::ToJson(model.config());
  report["model_skewness"] = skewsplit::ToJson(archive.spec);
  report["selected_channels"] = archive.selected_channels;

  const double accuracy = Accuracy(model, test);
  report["test_accuracy"] = accuracy;
  std::vector<double> skewness;
  if (archive.reference.initialized()) {
    const SkewMetrics m =
        EvaluateSkew(model, archive.reference, test, model.k(), EvalAttribution(config));
    report["mean_skewness"] = m.mean_skewness;
    report["disorder_rate"] = m.disorder_rate;
    report["attributed"] = m.attributed;
    report["skipped"] = m.skipped;
    skewness = m.skewness;
  } else {
    report["mean_skewness"] = nullptr;
    report["disorder_rate"] = nullptr;
    log << "archive has no reference network; skewness not measured\n";
  }
  std::sort(skewness.begin(), skewness.end());
  Json cdf = Json::array();
  std::string cdf_csv = "threshold,fraction\n";
  for (int i = 0; i <= 20; ++i) {
    const double t = i / 20.0;
    const auto below = std::upper_bound(skewness.begin(), skewness.end(), t + 1e-12);
    const double frac =
        skewness.empty() ? 0.0 : double(below - skewness.begin()) / skewness.size();
    cdf.push_back({{"threshold", t}, {"fraction", frac}});
    cdf_csv += Fmt(t, 2) + "," + Fmt(frac) + "\n";
  }
  report["skewness_cdf"] = std::move(cdf);

  // Payload and compression over the test set.
  OffloadClient client(model, nullptr, ClientOptions{});
  const auto [fh, fw] = model.config().extractor.FeatureSize();
  const double raw_bits = 64.0 * fh * fw * (model.channels() - model.k());
  double part_bytes = 0.0, edge_bytes = 0.0, block_bits = 0.0;
  for (int i = 0; i < test.size(); ++i) {
    const std::vector<std::size_t> idx{static_cast<std::size_t>(i)};
    const Tensor x = test.Batch(idx).first;
    const FeaturePacket p = client.BuildPacket(x, i, OffloadMode::kPartitioned);
    part_bytes += p.Serialize().size();
    block_bits += 8.0 * p.block.size();
    edge_bytes += client.BuildPacket(x, i, OffloadMode::kEdgeOnly).Serialize().size();
  }
  const double n = test.size();
  report["mean_payload_bytes"] = part_bytes / n;
  report["mean_edge_payload_bytes"] = edge_bytes / n;
  report["raw_feature_bits"] = raw_bits;
  report["compression_ratio"] = CompressionRatio(raw_bits, block_bits / n);

  WriteFile(dir / "eval_report.json", report.dump(2) + "\n");
  WriteFile(dir / "eval_skewness_cdf.csv", cdf_csv);
  log << "eval  test_acc " << Fmt(accuracy, 3);
  if (!skewness.empty()) {
    log << "  skewness " << Fmt(report["mean_skewness"].get<double>(), 3) << "  disorder "
        << Fmt(report["disorder_rate"].get<double>(), 3);
  }
  log << "  payload " << Fmt(part_bytes / n, 1) << " B (edge-only " << Fmt(edge_bytes / n, 1)
      << " B)  compression " << Fmt(report["compression_ratio"].get<double>(), 2) << "x\n";
  return report;
}

// ---- offload -----------------------------------------------------------------

Json CmdOffload(const ExperimentConfig& config, const std::string& model_path,
                std::optional<int> expected_k, std::ostream& log, bool* connected) {
  config.Validate();
  const fs::path dir = OutDir(config);
  const ModelArchive archive = LoadModel(model_path, expected_k);
  const SplitModel& model = archive.model;
  Dataset test = LoadData(config).second;
  CheckCompatible(test, model.config());
  const OffloadMode mode = ParseMode(config.mode);

  RemoteServer local_server(model);
  LoopbackTransport loopback(&local_server);
  std::unique_ptr<TcpTransport> tcp;
  Transport* transport = &loopback;
  std::string transport_name = "loopback";
  if (connected) *connected = true;
  if (mode != OffloadMode::kLocalOnly && !config.server.empty()) {
    transport_name = "tcp";
    const auto [host, port] = ParseAddress(config.server);
    try {
      tcp = std::make_unique<TcpTransport>(host, port);
      transport = tcp.get();
    } catch (const TransportError& e) {
      log << "warning: " << e.what() << "; every sample falls back to the local head\n";
      transport = nullptr;
      if (connected) *connected = false;
    }
  }

  std::string csv =
      "bandwidth_bps,sample,label,prediction,fallback,payload_bytes,t_extract,t_local,"
      "t_compress,t_tx,t_remote,t_combine,t_total,t_serial\n";
  Json sweep = Json::array();
  log << "offload mode=" << config.mode << " transport=" << transport_name
      << (config.simulated ? " (simulated costs)" : " (wall-clock)") << "\n";
  log << "  bandwidth_bps   accuracy  mean_total_ms  p95_total_ms  mean_tx_ms  payload_B  fallbacks\n";
  for (double bw : config.bandwidths) {
    ClientOptions opt;
    opt.link = LinkModel{bw, config.link.rtt_s};
    opt.cost = config.cost;
    opt.timeout = std::chrono::milliseconds(config.timeout_ms);
    opt.simulated = config.simulated;
    OffloadClient client(model, transport, opt);
    const OffloadSummary s = RunOffload(client, test, mode);
    for (int i = 0; i < s.samples; ++i) {
      const LatencyReport& r = s.reports[i];
      csv += FmtG(bw) + "," + std::to_string(i) + "," + std::to_string(test.labels[i]) + "," +
             std::to_string(s.predictions[i]) + "," + (r.fallback ? "1" : "0") + "," +
             std::to_string(r.payload_bytes) + "," + FmtG(r.t_extract) + "," +
             FmtG(r.t_local) + "," + FmtG(r.t_compress) + "," + FmtG(r.t_tx) + "," +
             FmtG(r.t_remote) + "," + FmtG(r.t_combine) + "," + FmtG(r.t_total) + "," +
             FmtG(r.t_serial) + "\n";
    }
    sweep.push_back({{"bandwidth_bps", bw},
                     {"accuracy", s.accuracy},
                     {"mean_total_s", s.mean_total},
                     {"p95_total_s", s.p95_total},
                     {"mean_tx_s", s.mean_tx},
                     {"mean_payload_bytes", s.mean_payload_bytes},
                     {"fallbacks", s.fallbacks},
                     {"samples", s.samples}});
    char line[160];
    std::snprintf(line, sizeof(line), "  %13.0f   %8.4f  %13.4f  %12.4f  %10.4f  %9.1f  %9d\n",
                  bw, s.accuracy, 1e3 * s.mean_total, 1e3 * s.p95_total, 1e3 * s.mean_tx,
                  s.mean_payload_bytes, s.fallbacks);
    log << line;
  }

  Json report;
  report["command"] = "offload";
  report["seed"] = config.seed;
  report["config"] = config.ToJson();
  report["mode"] = config.mode;
  report["transport"] = transport_name;
  report["sweep"] = std::move(sweep);
  const std::string stem = "offload_" + config.mode;
  WriteFile(dir / (stem + ".csv"), csv);
  WriteFile(dir / (stem + ".json"), report.dump(2) + "\n");
  return report;
}

// ---- serve -------------------------------------------------------------------

void CmdServe(const ExperimentConfig& config, const std::string& model_path,
              const std::string& listen, const std::atomic<bool>& stop, std::ostream& log) {
  const ModelArchive archive = LoadModel(model_path, std::nullopt);
  const auto [host, port] = ParseAddress(listen);
  RemoteServer server(archive.model);
  std::mutex mu;
  server.set_log([&](const std::string& m) {
    std::lock_guard<std::mutex> lock(mu);
    log << m << "\n";
    log.flush();
  });
  TcpServer tcp(&server, host, port);
  tcp.Start();
  {
    std::lock_guard<std::mutex> lock(mu);
    log << "serving " << model_path << " (seed " << config.seed << ") on " << host << ":"
        << tcp.port() << "\n";
    log.flush();
  }
  while (!stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  tcp.Stop();
  log << "served " << server.served() << " requests, dropped " << server.dropped() << "\n";
}

// ---- report ------------------------------------------------------------------

ReportTables CmdReport(const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw DataError("report needs at least one train or demo report");
  struct Acc {
    int runs = 0;
    double lambda = 0, acc = 0, skew = 0, disorder = 0;
  };
  std::map<std::pair<int, double>, Acc> rows;
  for (const std::string& path : inputs) {
    Json j = ReadJsonFile(path);
    if (j.value("command", "") == "demo" && j.contains("train")) j = j["train"];
    if (j.value("command", "") != "train") {
      throw DataError(path + ": not a train or demo report (missing \"command\": \"train\")");
    }
    try {
      const Json& s = j.at("config").at("skewness");
      const Json& f = j.at("final");
      const int k = s.at("k").get<int>();
      const double rho = s.at("rho").get<double>();
      Acc& a = rows[{k, rho}];
      ++a.runs;
      a.lambda += s.at("lambda").get<double>();
      a.acc += f.at("test_acc").get<double>();
      a.skew += f.at("mean_skewness").get<double>();
      a.disorder += f.at("disorder_rate").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ": report schema mismatch: " + e.what());
    }
  }
  std::string csv = "k,rho,lambda,runs,test_acc,mean_skewness,disorder_rate\n";
  Json list = Json::array();
  for (const auto& [key, a] : rows) {
    const double n = a.runs;
    csv += std::to_string(key.first) + "," + Fmt(key.second, 4) + "," + Fmt(a.lambda / n, 4) +
           "," + std::to_string(a.runs) + "," + Fmt(a.acc / n) + "," + Fmt(a.skew / n) + "," +
           Fmt(a.disorder / n) + "\n";
    list.push_back({{"k", key.first},
                    {"rho", key.second},
                    {"lambda", a.lambda / n},
                    {"runs", a.runs},
                    {"test_acc", a.acc / n},
                    {"mean_skewness", a.skew / n},
                    {"disorder_rate", a.disorder / n}});
  }
  Json out;
  out["command"] = "report";
  out["inputs"] = inputs;
  out["rows"] = std::move(list);
  return {csv, out.dump(2) + "\n"};
}

// ---- demo --------------------------------------------------------------------

Json CmdDemo(const ExperimentConfig& config, std::ostream& log) {
  config.Validate();
  const fs::path dir = OutDir(config);
  const TrainOutput trained = CmdTrain(config, log);
  const Json eval = CmdEval(config, trained.archive_path, config.model.k, log);

  Json offload;
  for (const char* m : {"partitioned", "edge_only", "local_only"}) {
    ExperimentConfig c = config;
    c.mode = m;
    c.server.clear();
    offload[m] = CmdOffload(c, trained.archive_path, config.model.k, log)["sweep"];
  }
  const ReportTables tables = CmdReport({trained.report_path});
  WriteFile(dir / "report.csv", tables.csv);
  WriteFile(dir / "report.json", tables.json);

  const double part = offload["partitioned"][0]["mean_payload_bytes"].get<double>();
  const double edge = offload["edge_only"][0]["mean_payload_bytes"].get<double>();
  Json report;
  report["command"] = "demo";
  report["seed"] = config.seed;
  report["config"] = config.ToJson();
  report["train"] = trained.report;
  report["eval"] = eval;
  report["offload"] = std::move(offload);
  report["summary"] = {{"test_acc", eval["test_accuracy"]},
                       {"mean_skewness", eval["mean_skewness"]},
                       {"disorder_rate", eval["disorder_rate"]},
                       {"partitioned_payload_bytes", part},
                       {"edge_only_payload_bytes", edge},
                       {"payload_reduction", 1.0 - part / edge}};
  WriteFile(dir / "demo_report.json", report.dump(2) + "\n");
  log << "demo  payload partitioned " << Fmt(part, 1) << " B vs edge-only " << Fmt(edge, 1)
      << " B (" << Fmt(100.0 * (1.0 - part / edge), 1) << "% less)\n"
      << "wrote " << (dir / "demo_report.json").string() << "\n";
  return report;
}

int ExitCodeFor(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const ShapeError*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const DivergenceError*>(&e) || dynamic_cast<const NonFiniteError*>(&e)) {
    return 4;
  }
  if (dynamic_cast<const TransportError*>(&e)) return 5;
  return 1;
}

}  // namespace skewsplit::cli
