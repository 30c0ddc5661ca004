#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abstractnet/inception.hpp"
#include "abstractnet/optim.hpp"
#include "abstractnet/shapes.hpp"

namespace abstractnet {

struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<ShapeFamily> train_families{ShapeFamily::filled_rect};
  ShapeFamily test_family = ShapeFamily::filled_ellipse;
  std::vector<int> train_sizes{10, 25, 50, 100, 250, 500};
  int repeats = 10;
  int test_per_class = 250;
  NetPreset net = NetPreset::mini;
  /// Grayscale images are replicated across this many input channels.
  int input_channels = 1;
  /// Overrides the preset's head dropout when set.
  std::optional<double> head_dropout;
  OptimConfig optim;
  TrainConfig train;
  RenderParams render;
  std::uint64_t master_seed = 20160601;

  void validate() const;
  /// Network spec for this experiment, input size taken from `render`.
  NetworkSpec network_spec() const;
};

/// Seeds of one sweep. Train, test and initialization streams come from
/// distinct first keys of derive_seed, so they never collide.
std::uint64_t test_seed(const ExperimentConfig& cfg);
std::uint64_t run_seed(const ExperimentConfig& cfg, int train_size, int repeat);

struct RunResult {
  int train_size = 0;
  int repeat = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  double final_loss = 0.0;
  double seconds = 0.0;
  std::vector<LossPoint> trace;
};

struct SizeSummary {
  int train_size = 0;
  std::vector<RunResult> runs;
  double mean = 0.0;
  double band_low = 0.0;
  double band_high = 0.0;
};

struct SweepResult {
  std::string name;
  std::vector<SizeSummary> sizes;
};

/// Linear interpolation between order statistics: position q * (n - 1) in the
/// sorted sample (the "linear" rule of Hyndman & Fan type 7).
double percentile(std::span<const double> values, double q);

/// Groups runs by train size (ascending) and fills mean and the 5th/95th
/// percentile band. Throws RangeError on an empty group.
SizeSummary aggregate(int train_size, std::vector<RunResult> runs);
SweepResult aggregate(const std::string& name, std::vector<RunResult> runs);

/// Fraction of images whose argmax main logit matches the label (ties to class 0).
double evaluate_accuracy(const Network& net, const Dataset& test_set, int batch_size = 64);

struct SweepOptions {
  /// Output directory; nothing is written when empty.
  std::filesystem::path out_dir;
  bool write_checkpoints = false;
  bool write_loss_traces = false;
  /// Fill the `seconds` CSV column with measured wall-clock time. Off by
  /// default so reruns are byte-identical; timing.csv always gets the real values.
  bool record_timing = false;
  /// 0 means hardware concurrency. ABSTRACTNET_THREADS caps either choice.
  int threads = 0;
  /// Called once per finished run (from worker threads, serialized).
  std::function<void(const RunResult&)> on_run;
};

/// Job parallelism: the explicit request (or hardware concurrency when it is
/// 0), capped by ABSTRACTNET_THREADS when that is set; at least 1.
int resolve_threads(int requested);

/// Trains a fresh network per (train_size, repeat) on a freshly generated
/// training set and evaluates it on one shared test set.
SweepResult run_sweep(const ExperimentConfig& cfg, const SweepOptions& options = {});

/// One (train_size, repeat) job of a sweep; `test_set` must come from test_seed(cfg).
RunResult run_single(const ExperimentConfig& cfg, int train_size, int repeat, const Dataset& test_set,
                     std::optional<Network>* trained = nullptr);

Dataset make_test_set(const ExperimentConfig& cfg);

/// experiment,train_size,repeat,seed,accuracy,final_loss,seconds
void emit_csv(const SweepResult& sweep, const std::filesystem::path& path, bool record_timing = false);
std::string csv_text(const SweepResult& sweep, bool record_timing = false);
/// Parses the rows of an emitted CSV back into runs (trace left empty).
std::vector<RunResult> parse_csv(const std::string& text, std::string* experiment = nullptr);

/// Accuracy-vs-training-set-size plot: log-scaled x, mean dots, shaded 90% band.
std::string svg_text(const SweepResult& sweep);
void emit_svg_plot(const SweepResult& sweep, const std::filesystem::path& path);

/// fig4, fig6, fig7, fig8, fig9, fig11, fig13.
std::vector<ExperimentConfig> preset_experiments();
ExperimentConfig preset_experiment(const std::string& name);

/// Canonical key=value text of an experiment config, as read by the CLI.
std::string describe(const ExperimentConfig& cfg);

}  // namespace abstractnet
