// abstractnet command line: dataset export, experiment sweeps, checkpoint
// evaluation and the built-in self-test.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "abstractnet/error.hpp"
#include "abstractnet/experiment.hpp"
#include "abstractnet/selftest.hpp"
#include "abstractnet/shapes.hpp"

namespace an = abstractnet;
namespace fs = std::filesystem;

namespace {

struct Size2 {
  int h = 0;
  int w = 0;
};

Size2 parse_size(const std::string& text) {
  Size2 s;
  char x = 0;
  char rest = 0;
  if (std::sscanf(text.c_str(), "%d%c%d%c", &s.h, &x, &s.w, &rest) != 3 || (x != 'x' && x != 'X') || s.h < 1 ||
      s.w < 1) {
    throw an::ParamError("--size expects HxW with positive integers, got '" + text + "'");
  }
  return s;
}

// Flat key=value config. Blank lines and lines starting with '#' are skipped.
std::vector<std::pair<std::string, std::string>> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw an::IoError("cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw an::ParamError(path.string() + ":" + std::to_string(lineno) + ": expected key=value");
    }
    out.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return out;
}

// Options of the `train` subcommand. Long names double as config keys, with
// '-' and '_' interchangeable.
struct TrainArgs {
  std::string preset;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  std::string net;
  std::string optim;
  std::optional<double> lr;
  std::optional<double> momentum;
  std::optional<double> epsilon;
  std::optional<int> iters;
  std::optional<int> batch;
  std::optional<int> report_every;
  std::vector<int> sizes;
  std::optional<int> repeats;
  std::optional<int> test_per_class;
  std::optional<double> dropout;
  std::optional<int> channels;
  std::string size;
  std::vector<std::string> train_families;
  std::string test_family;
  int threads = 0;
  bool record_timing = false;
  bool loss_traces = false;
  bool no_ckpt = false;
  bool quiet = false;
};

void add_train_options(CLI::App& app, TrainArgs& a) {
  app.add_option("--preset,--name", a.preset, "Experiment preset: fig4 fig6 fig7 fig8 fig9 fig11 fig13");
  app.add_option("--config", a.config, "key=value file; flags on the command line take precedence");
  app.add_option("--seed", a.seed, "Master seed (default: preset seed)");
  app.add_option("--out", a.out, "Output directory");
  app.add_option("--net", a.net, "Network preset: mini or faithful");
  app.add_option("--optim", a.optim, "adagrad or sgd (SGD with momentum)");
  app.add_option("--lr", a.lr, "Base learning rate");
  app.add_option("--momentum", a.momentum, "Momentum for sgd");
  app.add_option("--epsilon", a.epsilon, "ADAGRAD epsilon");
  app.add_option("--iters", a.iters, "Training iterations per run");
  app.add_option("--batch", a.batch, "Mini-batch size");
  app.add_option("--report-every", a.report_every, "Loss trace interval");
  app.add_option("--sizes", a.sizes, "Training-set sizes per class, comma separated")->delimiter(',');
  app.add_option("--repeats", a.repeats, "Repeats per training-set size");
  app.add_option("--test-per-class", a.test_per_class, "Test images per class");
  app.add_option("--dropout", a.dropout, "Head dropout rate override");
  app.add_option("--channels", a.channels, "Input channels (grayscale replicated)");
  app.add_option("--size", a.size, "Image size HxW (default 64x64, 224x224 for faithful)");
  app.add_option("--train-families", a.train_families, "Training shape families, comma separated")->delimiter(',');
  app.add_option("--test-family", a.test_family, "Test shape family");
  app.add_option("--threads", a.threads, "Parallel runs (default: hardware threads; ABSTRACTNET_THREADS caps it)");
  app.add_flag("--record-timing", a.record_timing, "Write measured seconds into results.csv");
  app.add_flag("--loss-traces", a.loss_traces, "Write per-run loss traces");
  app.add_flag("--no-ckpt", a.no_ckpt, "Skip writing checkpoints");
  app.add_flag("--quiet", a.quiet, "Only print the summary");
}

std::string option_key(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

// Parses `train` arguments, layering the config file underneath: a file key is
// applied only when the same option was not given on the command line.
TrainArgs parse_train_args(const std::vector<std::string>& cli_args) {
  auto parse = [](std::vector<std::string> args, TrainArgs& a) {
    CLI::App app("train", "abstractnet train");
    add_train_options(app, a);
    std::reverse(args.begin(), args.end());
    app.parse(args);
    std::map<std::string, bool> given;
    for (const CLI::Option* opt : app.get_options()) {
      for (const std::string& name : opt->get_lnames()) given[name] = opt->count() > 0;
    }
    return given;
  };
  TrainArgs first;
  const auto given = parse(cli_args, first);
  if (first.config.empty()) return first;

  std::vector<std::string> merged;
  for (const auto& [raw_key, value] : read_config(first.config)) {
    const std::string key = option_key(raw_key);
    const auto it = given.find(key);
    if (it == given.end() || key == "config") {
      throw an::ParamError(first.config + ": unknown key '" + raw_key + "'");
    }
    if (it->second) continue;
    if (key == "record-timing" || key == "loss-traces" || key == "no-ckpt" || key == "quiet") {
      if (value == "true" || value == "1") merged.push_back("--" + key);
      continue;
    }
    merged.push_back("--" + key);
    merged.push_back(value);
  }
  merged.insert(merged.end(), cli_args.begin(), cli_args.end());
  TrainArgs out;
  parse(merged, out);
  return out;
}

an::ExperimentConfig build_experiment(const TrainArgs& a) {
  if (a.preset.empty()) throw an::ParamError("train: --preset is required (or name= in --config)");
  an::ExperimentConfig cfg = an::preset_experiment(a.preset);
  if (a.seed != 0) cfg.master_seed = a.seed;
  if (!a.net.empty()) cfg.net = an::parse_net_preset(a.net);
  if (cfg.net == an::NetPreset::faithful) cfg.render.height = cfg.render.width = 224;
  if (!a.size.empty()) {
    const Size2 s = parse_size(a.size);
    cfg.render.height = s.h;
    cfg.render.width = s.w;
  }
  if (!a.optim.empty()) cfg.optim.method = an::parse_optim_method(a.optim);
  if (a.lr) cfg.optim.base_lr = *a.lr;
  if (a.momentum) cfg.optim.momentum = *a.momentum;
  if (a.epsilon) cfg.optim.epsilon = *a.epsilon;
  if (a.iters) cfg.train.iterations = *a.iters;
  if (a.batch) cfg.train.batch_size = *a.batch;
  if (a.report_every) cfg.train.loss_report_every = *a.report_every;
  if (!a.sizes.empty()) cfg.train_sizes = a.sizes;
  if (a.repeats) cfg.repeats = *a.repeats;
  if (a.test_per_class) cfg.test_per_class = *a.test_per_class;
  if (a.dropout) cfg.head_dropout = *a.dropout;
  if (a.channels) cfg.input_channels = *a.channels;
  if (!a.train_families.empty()) {
    cfg.train_families.clear();
    for (const std::string& f : a.train_families) cfg.train_families.push_back(an::parse_family(f));
  }
  if (!a.test_family.empty()) cfg.test_family = an::parse_family(a.test_family);
  cfg.validate();
  return cfg;
}

int cmd_gen(const std::string& family, const std::string& cls, int n, std::uint64_t seed, const std::string& out,
            const std::string& size, int margin, double aspect, int thickness, int stripe_period) {
  an::RenderParams params;
  if (!size.empty()) {
    const Size2 s = parse_size(size);
    params.height = s.h;
    params.width = s.w;
  }
  params.margin = margin;
  params.aspect_min = aspect;
  params.outline_thickness = thickness;
  params.stripe_period = stripe_period;
  params.validate();
  const an::ShapeFamily fam = an::parse_family(family);
  an::Dataset data;
  if (cls == "both") {
    const an::ShapeFamily families[] = {fam};
    data = an::generate_dataset(families, n, seed, params);
  } else {
    if (n < 1) throw an::ParamError("gen: --n must be >= 1");
    const an::ShapeClass c = an::parse_class(cls);
    const int label = an::label_of(c);
    // Same per-image seeds as the corresponding class of a "both" export.
    for (int i = 0; i < n; ++i) {
      const std::uint64_t s = an::derive_seed(seed, {static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(i)});
      data.push_back({an::rasterize(an::gen_scene(fam, c, s, params)), label, fam, s});
    }
  }
  an::export_dataset(data, out);
  std::printf("wrote %zu images to %s\n", data.size(), out.c_str());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  const an::ExperimentConfig cfg = build_experiment(a);
  if (a.out.empty()) throw an::ParamError("train: --out is required");
  an::SweepOptions opts;
  opts.out_dir = a.out;
  opts.write_checkpoints = !a.no_ckpt;
  opts.write_loss_traces = a.loss_traces;
  opts.record_timing = a.record_timing;
  opts.threads = a.threads;
  const std::size_t total = cfg.train_sizes.size() * static_cast<std::size_t>(cfg.repeats);
  std::size_t done = 0;
  if (!a.quiet) {
    opts.on_run = [&](const an::RunResult& r) {
      ++done;
      std::printf("[%zu/%zu] n=%d repeat=%d accuracy=%.4f final_loss=%.3g (%.1fs)\n", done, total, r.train_size,
                  r.repeat, r.accuracy, r.final_loss, r.seconds);
      std::fflush(stdout);
    };
  }
  const an::SweepResult sweep = an::run_sweep(cfg, opts);
  std::string families;
  for (an::ShapeFamily f : cfg.train_families) families += (families.empty() ? "" : "+") + an::to_string(f);
  std::printf("%s: train %s -> test %s\n", cfg.name.c_str(), families.c_str(), an::to_string(cfg.test_family).c_str());
  std::printf("%10s %8s %8s %8s\n", "train_size", "mean", "p5", "p95");
  for (const an::SizeSummary& s : sweep.sizes) {
    std::printf("%10d %8.4f %8.4f %8.4f\n", s.train_size, s.mean, s.band_low, s.band_high);
  }
  std::printf("results: %s\n", (fs::path(a.out) / "results.csv").string().c_str());
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir) {
  const an::Network net = an::load_checkpoint(ckpt);
  const an::Dataset data = an::load_dataset(data_dir);
  if (data.empty()) throw an::IoError("eval: no images in " + data_dir);
  const an::NetworkSpec& spec = net.spec();
  for (const an::LabeledImage& item : data) {
    if (item.image.height != spec.in_h || item.image.width != spec.in_w) {
      throw an::ShapeError("eval: image is " + std::to_string(item.image.height) + "x" +
                           std::to_string(item.image.width) + " but the network expects " + std::to_string(spec.in_h) +
                           "x" + std::to_string(spec.in_w));
    }
  }
  const double acc = an::evaluate_accuracy(net, data);
  std::printf("accuracy=%.6f images=%zu\n", acc, data.size());
  return 0;
}

int cmd_selftest(std::uint64_t seed, int per_class) {
  const auto results = an::selftest::run_all(seed, per_class);
  int failed = 0;
  for (const auto& r : results) {
    std::printf("%s %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    failed += r.passed ? 0 : 1;
  }
  std::printf("%zu checks, %d failed\n", results.size(), failed);
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inception network on procedurally generated abstract shape classes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen", "Export a generated dataset as PGM files plus manifest.csv");
  std::string family;
  std::string cls = "both";
  int n = 0;
  std::uint64_t gen_seed = 0;
  std::string gen_out;
  std::string gen_size;
  an::RenderParams defaults;
  int margin = defaults.margin;
  double aspect = defaults.aspect_min;
  int thickness = defaults.outline_thickness;
  int stripe_period = defaults.stripe_period;
  gen->add_option("--family", family, "Shape family")->required();
  gen->add_option("--class", cls, "horizontal, vertical or both");
  gen->add_option("--n", n, "Images per class")->required();
  gen->add_option("--seed", gen_seed, "Base seed")->required();
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--size", gen_size, "Image size HxW (default 64x64)");
  gen->add_option("--margin", margin, "Blank border in pixels");
  gen->add_option("--aspect", aspect, "Minimum long/short side ratio");
  gen->add_option("--thickness", thickness, "Outline thickness in pixels");
  gen->add_option("--stripe-period", stripe_period, "Texture stripe period in pixels");

  // `train` is parsed separately so that --config can be layered underneath.
  auto* train = app.add_subcommand("train", "Run one experiment sweep and write CSV, SVG and checkpoints");
  TrainArgs help_args;
  add_train_options(*train, help_args);

  auto* eval = app.add_subcommand("eval", "Print the accuracy of a checkpoint on an exported dataset");
  std::string ckpt;
  std::string data_dir;
  eval->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  eval->add_option("--data", data_dir, "Dataset directory (with manifest.csv)")->required();

  auto* self = app.add_subcommand("selftest", "Gradient checks and oracle suites; nonzero exit on failure");
  std::uint64_t self_seed = 1234;
  int per_class = 1000;
  self->add_option("--seed", self_seed, "Seed for the randomized checks");
  self->add_option("--per-class", per_class, "Images per class for the generator checks (0 skips them)");

  // Hand `train` its raw arguments before CLI11 sees them.
  if (argc >= 2 && std::string(argv[1]) == "train") {
    std::vector<std::string> rest(argv + 2, argv + argc);
    const bool wants_help = std::find_if(rest.begin(), rest.end(), [](const std::string& s) {
                              return s == "-h" || s == "--help";
                            }) != rest.end();
    if (!wants_help) {
      try {
        return cmd_train(parse_train_args(rest));
      } catch (const CLI::ParseError& e) {
        CLI::App help("train");
        TrainArgs tmp;
        add_train_options(help, tmp);
        return help.exit(e);
      } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
      }
    }
  }

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen(family, cls, n, gen_seed, gen_out, gen_size, margin, aspect, thickness, stripe_period);
    if (*eval) return cmd_eval(ckpt, data_dir);
    if (*self) return cmd_selftest(self_seed, per_class);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
