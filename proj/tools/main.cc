// skewsplit: train, evaluate and serve skewness-manipulated split models.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "commands.h"
#include "skewsplit/errors.h"

namespace {

using skewsplit::cli::ExperimentConfig;

std::atomic<bool> g_stop{false};

void OnSignal(int) { g_stop = true; }

// Flag values; unset options leave the config untouched.
struct Overrides {
  std::optional<std::string> config_file;
  std::optional<std::string> source, task, train_images, train_labels, test_images,
      test_labels, train_csv, test_csv, mode, server, out;
  std::optional<int> n_train, n_test, height, width, input_channels, channels, k, levels,
      classes, epochs, warmup, batch, ig_steps, eval_ig_steps, timeout_ms;
  std::optional<double> rho, lambda, temperature, lr, wd, rtt, device_flops, server_flops;
  std::optional<std::uint64_t> seed;
  std::vector<double> bandwidths;
  bool live = false;
  bool descent_loss = false;
};

void AddConfigFlags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_file, "JSON config file (flags win)");
  app->add_option("--source", o.source, "data source: synthetic, idx, csv");
  app->add_option("--task", o.task, "synthetic task: radial, xor-grid, stripe");
  app->add_option("--train-images", o.train_images, "IDX training images");
  app->add_option("--train-labels", o.train_labels, "IDX training labels");
  app->add_option("--test-images", o.test_images, "IDX test images");
  app->add_option("--test-labels", o.test_labels, "IDX test labels");
  app->add_option("--train-csv", o.train_csv, "CSV training set");
  app->add_option("--test-csv", o.test_csv, "CSV test set");
  app->add_option("--n-train", o.n_train, "synthetic training samples");
  app->add_option("--n-test", o.n_test, "synthetic test samples");
  app->add_option("--height", o.height, "image height");
  app->add_option("--width", o.width, "image width");
  app->add_option("--input-channels", o.input_channels, "image channels (csv)");
  app->add_option("--channels", o.channels, "feature channels C");
  app->add_option("--k", o.k, "channels kept on the device");
  app->add_option("--rho", o.rho, "target skewness");
  app->add_option("--lambda", o.lambda, "prediction-loss weight");
  app->add_option("--T", o.temperature, "combiner temperature");
  app->add_option("--levels", o.levels, "quantizer levels");
  app->add_option("--classes", o.classes, "class count for file datasets");
  app->add_option("--epochs", o.epochs, "joint training epochs");
  app->add_option("--warmup", o.warmup, "warmup epochs");
  app->add_option("--batch", o.batch, "batch size");
  app->add_option("--lr", o.lr, "learning rate");
  app->add_option("--wd", o.wd, "weight decay");
  app->add_option("--ig-steps", o.ig_steps, "IG steps during training");
  app->add_option("--eval-ig-steps", o.eval_ig_steps, "IG steps for evaluation");
  app->add_flag("--descent-loss", o.descent_loss, "use the descent-order loss");
  app->add_option("--seed", o.seed, "random seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--mode", o.mode, "partitioned, edge_only, local_only");
  app->add_option("--bandwidth", o.bandwidths, "link bandwidth(s) in bit/s");
  app->add_option("--rtt", o.rtt, "fixed round-trip time in seconds");
  app->add_option("--timeout-ms", o.timeout_ms, "remote reply timeout");
  app->add_option("--server", o.server,
                  std::string("server host:port (default $") + skewsplit::cli::kServerEnv + ")");
  app->add_option("--device-flops", o.device_flops, "device FLOP/s for the cost model");
  app->add_option("--server-flops", o.server_flops, "server FLOP/s for the cost model");
  app->add_flag("--live", o.live, "wall-clock compute times instead of the cost model");
}

template <typename T, typename U>
void Set(const std::optional<T>& v, U& dst) {
  if (v) dst = *v;
}

ExperimentConfig Resolve(const Overrides& o) {
  ExperimentConfig c;
  if (const char* env = std::getenv(skewsplit::cli::kServerEnv)) c.server = env;
  if (o.config_file) {
    c = ExperimentConfig::FromJson(skewsplit::cli::ReadConfigFile(*o.config_file), c);
  }
  Set(o.source, c.data.source);
  Set(o.task, c.data.task);
  Set(o.train_images, c.data.train_images);
  Set(o.train_labels, c.data.train_labels);
  Set(o.test_images, c.data.test_images);
  Set(o.test_labels, c.data.test_labels);
  Set(o.train_csv, c.data.train_csv);
  Set(o.test_csv, c.data.test_csv);
  Set(o.n_train, c.data.n_train);
  Set(o.n_test, c.data.n_test);
  Set(o.height, c.data.height);
  Set(o.width, c.data.width);
  Set(o.input_channels, c.data.channels);
  Set(o.channels, c.model.extractor.channels_out);
  Set(o.k, c.model.k);
  Set(o.rho, c.rho);
  Set(o.lambda, c.lambda);
  Set(o.temperature, c.model.temperature);
  Set(o.levels, c.model.quantizer_levels);
  Set(o.classes, c.model.classes);
  Set(o.epochs, c.train.epochs);
  Set(o.warmup, c.train.warmup_epochs);
  Set(o.batch, c.train.batch_size);
  Set(o.lr, c.train.lr);
  Set(o.wd, c.train.weight_decay);
  Set(o.ig_steps, c.train.attribution.ig_steps);
  Set(o.eval_ig_steps, c.eval_ig_steps);
  if (o.descent_loss) c.train.descent_loss = true;
  Set(o.seed, c.seed);
  Set(o.out, c.out_dir);
  Set(o.mode, c.mode);
  if (!o.bandwidths.empty()) c.bandwidths = o.bandwidths;
  Set(o.rtt, c.link.rtt_s);
  Set(o.timeout_ms, c.timeout_ms);
  Set(o.server, c.server);
  Set(o.device_flops, c.cost.device_flops);
  Set(o.server_flops, c.cost.server_flops);
  if (o.live) c.simulated = false;
  c.Validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Skewness-manipulated split inference: train, evaluate, offload"};
  app.require_subcommand(1);
  Overrides o;
  std::string model_path;
  std::string listen;
  double duration = 0.0;
  std::vector<std::string> report_inputs;
  std::string report_csv, report_json;

  CLI::App* train = app.add_subcommand("train", "train a split model");
  CLI::App* eval = app.add_subcommand("eval", "measure accuracy, skewness and payload");
  CLI::App* offload = app.add_subcommand("offload", "run split inference over a link sweep");
  CLI::App* serve = app.add_subcommand("serve", "serve the remote half over TCP");
  CLI::App* report = app.add_subcommand("report", "aggregate train reports per (k, rho)");
  CLI::App* demo = app.add_subcommand("demo", "train, evaluate, offload and report");
  for (CLI::App* sub : {train, eval, offload, serve, demo}) AddConfigFlags(sub, o);
  for (CLI::App* sub : {eval, offload, serve}) {
    sub->add_option("--model", model_path, "model archive")->required();
  }
  serve->add_option("--listen", listen, "host:port to listen on (default $SKEWSPLIT_SERVER or 127.0.0.1:7070)");
  serve->add_option("--duration", duration, "stop after this many seconds (0 = until signalled)");
  report->add_option("inputs", report_inputs, "train or demo report JSON files");
  report->add_option("--csv", report_csv, "CSV output path (default stdout)");
  report->add_option("--json", report_json, "JSON output path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<int> expected_k;
    if (o.k) expected_k = *o.k;
    if (report->parsed()) {
      const auto tables = skewsplit::cli::CmdReport(report_inputs);
      if (report_csv.empty()) {
        std::cout << tables.csv;
      } else {
        std::ofstream(report_csv, std::ios::trunc) << tables.csv;
      }
      if (!report_json.empty()) std::ofstream(report_json, std::ios::trunc) << tables.json;
      return 0;
    }
    const ExperimentConfig config = Resolve(o);
    if (train->parsed()) {
      skewsplit::cli::CmdTrain(config, std::cout);
    } else if (eval->parsed()) {
      skewsplit::cli::CmdEval(config, model_path, expected_k, std::cout);
    } else if (offload->parsed()) {
      bool connected = true;
      skewsplit::cli::CmdOffload(config, model_path, expected_k, std::cout, &connected);
      if (!connected) return 5;
    } else if (serve->parsed()) {
      if (listen.empty()) listen = config.server.empty() ? "127.0.0.1:7070" : config.server;
      std::signal(SIGINT, OnSignal);
      std::signal(SIGTERM, OnSignal);
      if (duration > 0) {
        std::thread([duration] {
          std::this_thread::sleep_for(std::chrono::duration<double>(duration));
          g_stop = true;
        }).detach();
      }
      skewsplit::cli::CmdServe(config, model_path, listen, g_stop, std::cout);
    } else if (demo->parsed()) {
      skewsplit::cli::CmdDemo(config, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return skewsplit::cli::ExitCodeFor(e);
  }
  return 0;
}
