#include "abstractnet/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "abstractnet/error.hpp"

namespace abstractnet {

namespace {

constexpr std::uint64_t kTrainStream = 0x747261696E;  // "train"
constexpr std::uint64_t kTestStream = 0x74657374;     // "test"

std::string format(const char* fmt, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot open for writing: " + path.string());
  }
  os << text;
  if (!os) {
    throw IoError("write failed: " + path.string());
  }
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

}  // namespace

// Config --------------------------------------------------------------------

void ExperimentConfig::validate() const {
  if (train_families.empty()) throw ParamError("experiment '" + name + "': no training families");
  if (train_sizes.empty()) throw ParamError("experiment '" + name + "': no training sizes");
  for (int s : train_sizes) {
    if (s < 1) throw ParamError("experiment '" + name + "': training sizes must be >= 1");
  }
  if (repeats < 1) throw ParamError("experiment '" + name + "': repeats must be >= 1");
  if (test_per_class < 1) throw ParamError("experiment '" + name + "': test_per_class must be >= 1");
  if (input_channels < 1) throw ParamError("experiment '" + name + "': input_channels must be >= 1");
  optim.validate();
  train.validate();
  render.validate();
}

NetworkSpec ExperimentConfig::network_spec() const {
  NetworkSpec spec = preset_spec(net);
  spec.in_h = render.height;
  spec.in_w = render.width;
  spec.in_channels = input_channels;
  // The first convolution reads the raw input, wherever it sits in the stem.
  for (StemLayer& l : spec.stem) {
    if (auto* c = std::get_if<ConvSpec>(&l)) {
      c->in_channels = input_channels;
      break;
    }
  }
  if (head_dropout) {
    spec.head_dropout = *head_dropout;
  }
  return spec;
}

std::uint64_t test_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.master_seed, {kTestStream}); }

std::uint64_t run_seed(const ExperimentConfig& cfg, int train_size, int repeat) {
  return derive_seed(cfg.master_seed,
                     {kTrainStream, static_cast<std::uint64_t>(train_size), static_cast<std::uint64_t>(repeat)});
}

// Aggregation -----------------------------------------------------------------

double percentile(std::span<const double> values, double q) {
  if (values.empty()) {
    throw RangeError("percentile: empty sample");
  }
  if (!(q >= 0.0 && q <= 1.0)) {
    throw RangeError("percentile: q must lie in [0, 1]");
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

SizeSummary aggregate(int train_size, std::vector<RunResult> runs) {
  if (runs.empty()) {
    throw RangeError("aggregate: no runs for training size " + std::to_string(train_size));
  }
  std::sort(runs.begin(), runs.end(), [](const RunResult& a, const RunResult& b) { return a.repeat < b.repeat; });
  SizeSummary s;
  s.train_size = train_size;
  std::vector<double> acc;
  acc.reserve(runs.size());
  for (const RunResult& r : runs) {
    acc.push_back(r.accuracy);
  }
  s.mean = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
  s.band_low = percentile(acc, 0.05);
  s.band_high = percentile(acc, 0.95);
  s.runs = std::move(runs);
  return s;
}

SweepResult aggregate(const std::string& name, std::vector<RunResult> runs) {
  std::map<int, std::vector<RunResult>> groups;
  for (RunResult& r : runs) {
    groups[r.train_size].push_back(std::move(r));
  }
  SweepResult sweep;
  sweep.name = name;
  for (auto& [size, group] : groups) {
    sweep.sizes.push_back(aggregate(size, std::move(group)));
  }
  return sweep;
}

// Evaluation ------------------------------------------------------------------

double evaluate_accuracy(const Network& net, const Dataset& test_set, int batch_size) {
  if (test_set.empty()) {
    throw RangeError("evaluate_accuracy: empty test set");
  }
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test_set.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(test_set.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> pred = predict(net, make_batch(test_set, idx, net.spec().in_channels));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      correct += pred[k] == test_set[idx[k]].label ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test_set.size());
}

Dataset make_test_set(const ExperimentConfig& cfg) {
  const ShapeFamily family[] = {cfg.test_family};
  return generate_dataset(family, cfg.test_per_class, test_seed(cfg), cfg.render);
}

RunResult run_single(const ExperimentConfig& cfg, int train_size, int repeat, const Dataset& test_set,
                     std::optional<Network>* trained) {
  const auto start = std::chrono::steady_clock::now();
  RunResult r;
  r.train_size = train_size;
  r.repeat = repeat;
  r.seed = run_seed(cfg, train_size, repeat);
  const Dataset train_set = generate_dataset(cfg.train_families, train_size, derive_seed(r.seed, {1}), cfg.render);
  SeededRng init_rng(derive_seed(r.seed, {2}));
  Network net = Network::build(cfg.network_spec(), init_rng);
  const TrainResult tr = train(net, train_set, cfg.optim, cfg.train, SeededRng(derive_seed(r.seed, {3})));
  r.final_loss = tr.final_loss;
  r.trace = tr.trace;
  r.accuracy = evaluate_accuracy(net, test_set);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (trained != nullptr) {
    trained->emplace(std::move(net));
  }
  return r;
}

int resolve_threads(int requested) {
  int n = requested > 0 ? requested : std::max(1, static_cast<int>(std::thread::hardware_concurrency()));
  if (const char* env = std::getenv("ABSTRACTNET_THREADS"); env != nullptr && *env != '\0') {
    int cap = 0;
    const char* end = env + std::strlen(env);
    const auto [ptr, ec] = std::from_chars(env, end, cap);
    if (ec != std::errc() || ptr != end || cap < 1) {
      throw ParamError(std::string("ABSTRACTNET_THREADS is not a positive integer: ") + env);
    }
    n = std::min(n, cap);
  }
  return n;
}

SweepResult run_sweep(const ExperimentConfig& cfg, const SweepOptions& options) {
  namespace fs = std::filesystem;
  cfg.validate();
  // Fail on an inconsistent architecture before spending time on data.
  {
    SeededRng probe(0);
    (void)Network::build(cfg.network_spec(), probe);
  }
  const Dataset test_set = make_test_set(cfg);

  struct Job {
    int size;
    int repeat;
  };
  std::vector<int> sizes = cfg.train_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  std::vector<Job> jobs;
  for (int s : sizes) {
    for (int r = 0; r < cfg.repeats; ++r) {
      jobs.push_back({s, r});
    }
  }

  const bool write = !options.out_dir.empty();
  if (write) {
    std::error_code ec;
    fs::create_directories(options.out_dir, ec);
    if (options.write_checkpoints) fs::create_directories(options.out_dir / "checkpoints", ec);
    if (options.write_loss_traces) fs::create_directories(options.out_dir / "loss", ec);
    if (ec) {
      throw IoError("cannot create output directory " + options.out_dir.string() + ": " + ec.message());
    }
  }

  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex mu;
  std::string failure;

  auto worker = [&] {
    for (;;) {
      if (failed.load()) return;
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job job = jobs[i];
      try {
        std::optional<Network> net;
        RunResult r = run_single(cfg, job.size, job.repeat, test_set, &net);
        const std::string stem =
            cfg.name + "_n" + std::to_string(job.size) + "_r" + std::to_string(job.repeat);
        if (write && options.write_checkpoints) {
          save_checkpoint(*net, options.out_dir / "checkpoints" / (stem + ".ckpt"));
        }
        if (write && options.write_loss_traces) {
          write_loss_trace(r.trace, options.out_dir / "loss" / (stem + ".csv"));
        }
        std::lock_guard lock(mu);
        if (options.on_run) options.on_run(r);
        results[i] = std::move(r);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failed.exchange(true)) {
          failure = "run failed (experiment " + cfg.name + ", train_size " + std::to_string(job.size) +
                    ", repeat " + std::to_string(job.repeat) + ", seed " +
                    std::to_string(run_seed(cfg, job.size, job.repeat)) + "): " + e.what();
        }
        return;
      }
    }
  };

  const int threads = std::min<int>(resolve_threads(options.threads), static_cast<int>(jobs.size()));
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (failed) {
    throw Error(failure);
  }

  SweepResult sweep = aggregate(cfg.name, std::move(results));
  if (write) {
    emit_csv(sweep, options.out_dir / "results.csv", options.record_timing);
    emit_svg_plot(sweep, options.out_dir / "plot.svg");
    std::ostringstream timing;
    timing << "train_size,repeat,seconds\n";
    for (const SizeSummary& s : sweep.sizes) {
      for (const RunResult& r : s.runs) {
        timing << r.train_size << ',' << r.repeat << ',' << format("%.3f", r.seconds) << '\n';
      }
    }
    write_text(options.out_dir / "timing.csv", timing.str());
    write_text(options.out_dir / "config.txt", describe(cfg));
  }
  return sweep;
}

// CSV -----------------------------------------------------------------------

std::string csv_text(const SweepResult& sweep, bool record_timing) {
  std::ostringstream os;
  os << "experiment,train_size,repeat,seed,accuracy,final_loss,seconds\n";
  for (const SizeSummary& s : sweep.sizes) {
    for (const RunResult& r : s.runs) {
      os << sweep.name << ',' << r.train_size << ',' << r.repeat << ',' << r.seed << ','
         << format("%.6f", r.accuracy) << ',' << format("%.17g", r.final_loss) << ','
         << format("%.3f", record_timing ? r.seconds : 0.0) << '\n';
    }
  }
  return os.str();
}

void emit_csv(const SweepResult& sweep, const std::filesystem::path& path, bool record_timing) {
  write_text(path, csv_text(sweep, record_timing));
}

std::vector<RunResult> parse_csv(const std::string& text, std::string* experiment) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != "experiment,train_size,repeat,seed,accuracy,final_loss,seconds") {
    throw IoError("results CSV: unexpected header '" + line + "'");
  }
  std::vector<RunResult> runs;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) f.push_back(cell);
    if (f.size() != 7) {
      throw IoError("results CSV: expected 7 fields in '" + line + "'");
    }
    if (experiment != nullptr) *experiment = f[0];
    RunResult r;
    try {
      r.train_size = std::stoi(f[1]);
      r.repeat = std::stoi(f[2]);
      r.seed = std::stoull(f[3]);
      r.accuracy = std::stod(f[4]);
      r.final_loss = std::stod(f[5]);
      r.seconds = std::stod(f[6]);
    } catch (const std::exception&) {
      throw IoError("results CSV: bad number in '" + line + "'");
    }
    runs.push_back(std::move(r));
  }
  return runs;
}

// SVG -----------------------------------------------------------------------

std::string svg_text(const SweepResult& sweep) {
  if (sweep.sizes.empty()) {
    throw RangeError("svg plot: sweep has no sizes");
  }
  constexpr double kWidth = 640, kHeight = 420;
  constexpr double kLeft = 70, kRight = 20, kTop = 50, kBottom = 60;
  constexpr double kPlotW = kWidth - kLeft - kRight;
  constexpr double kPlotH = kHeight - kTop - kBottom;

  const double lo = std::log(static_cast<double>(sweep.sizes.front().train_size) / 1.25);
  const double hi = std::log(static_cast<double>(sweep.sizes.back().train_size) * 1.25);
  auto px = [&](int size) { return kLeft + (std::log(static_cast<double>(size)) - lo) / (hi - lo) * kPlotW; };
  auto py = [&](double acc) { return kTop + (1.0 - acc) * kPlotH; };
  auto num = [](double v) { return format("%.2f", v); };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n";
  os << "  <rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
  os << "  <text class=\"title\" x=\"" << num(kWidth / 2) << "\" y=\"28\" text-anchor=\"middle\" "
     << "font-family=\"sans-serif\" font-size=\"16\">" << xml_escape(sweep.name) << "</text>\n";

  os << "  <g class=\"grid\" stroke=\"#dddddd\" stroke-width=\"1\">\n";
  for (int k = 0; k <= 10; ++k) {
    const double y = py(k / 10.0);
    os << "    <line x1=\"" << num(kLeft) << "\" y1=\"" << num(y) << "\" x2=\"" << num(kLeft + kPlotW) << "\" y2=\""
       << num(y) << "\"/>\n";
  }
  os << "  </g>\n";

  os << "  <g class=\"axes\" stroke=\"black\" stroke-width=\"1\">\n";
  os << "    <line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop + kPlotH) << "\" x2=\"" << num(kLeft + kPlotW)
     << "\" y2=\"" << num(kTop + kPlotH) << "\"/>\n";
  os << "    <line x1=\"" << num(kLeft) << "\" y1=\"" << num(kTop) << "\" x2=\"" << num(kLeft) << "\" y2=\""
     << num(kTop + kPlotH) << "\"/>\n";
  os << "  </g>\n";

  os << "  <g class=\"ticks\" font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int k = 0; k <= 10; k += 2) {
    os << "    <text x=\"" << num(kLeft - 8) << "\" y=\"" << num(py(k / 10.0) + 4) << "\" text-anchor=\"end\">"
       << format("%.1f", k / 10.0) << "</text>\n";
  }
  for (const SizeSummary& s : sweep.sizes) {
    os << "    <text x=\"" << num(px(s.train_size)) << "\" y=\"" << num(kTop + kPlotH + 18)
       << "\" text-anchor=\"middle\">" << s.train_size << "</text>\n";
  }
  os << "  </g>\n";

  os << "  <text x=\"" << num(kLeft + kPlotW / 2) << "\" y=\"" << num(kHeight - 15)
     << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">"
     << "training images per class (log scale)</text>\n";
  os << "  <text x=\"18\" y=\"" << num(kTop + kPlotH / 2) << "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
     << "font-size=\"13\" transform=\"rotate(-90 18 " << num(kTop + kPlotH / 2) << ")\">accuracy</text>\n";

  // Band: upper edge left to right, lower edge right to left.
  os << "  <polygon class=\"band\" fill=\"#1f4fd8\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  bool first = true;
  for (const SizeSummary& s : sweep.sizes) {
    os << (first ? "" : " ") << num(px(s.train_size)) << ',' << num(py(s.band_high));
    first = false;
  }
  for (auto it = sweep.sizes.rbegin(); it != sweep.sizes.rend(); ++it) {
    os << ' ' << num(px(it->train_size)) << ',' << num(py(it->band_low));
  }
  os << "\"/>\n";

  for (const SizeSummary& s : sweep.sizes) {
    os << "  <circle class=\"mean\" cx=\"" << num(px(s.train_size)) << "\" cy=\"" << num(py(s.mean))
       << "\" r=\"4\" fill=\"#1f4fd8\"/>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void emit_svg_plot(const SweepResult& sweep, const std::filesystem::path& path) { write_text(path, svg_text(sweep)); }

// Presets -------------------------------------------------------------------

std::vector<ExperimentConfig> preset_experiments() {
  using F = ShapeFamily;
  struct Row {
    const char* name;
    std::vector<F> train;
    F test;
  };
  const Row rows[] = {
      {"fig4", {F::filled_rect}, F::filled_ellipse},
      {"fig6", {F::rect_outline}, F::filled_rect},
      {"fig7", {F::rect_outline, F::ellipse_outline}, F::filled_rect},
      {"fig8", {F::random_outline}, F::random_outline},
      {"fig9", {F::random_outline}, F::random_filled},
      {"fig11", {F::random_outline}, F::filled_rect},
      {"fig13", {F::random_outline}, F::random_textured},
  };
  std::vector<ExperimentConfig> out;
  for (const Row& row : rows) {
    ExperimentConfig cfg;
    cfg.name = row.name;
    cfg.train_families = row.train;
    cfg.test_family = row.test;
    out.push_back(std::move(cfg));
  }
  return out;
}

ExperimentConfig preset_experiment(const std::string& name) {
  for (ExperimentConfig& cfg : preset_experiments()) {
    if (cfg.name == name) {
      return cfg;
    }
  }
  throw ParamError("unknown experiment preset '" + name + "'");
}

std::string describe(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "name=" << cfg.name << '\n';
  os << "train_families=";
  for (std::size_t i = 0; i < cfg.train_families.size(); ++i) {
    os << (i ? "," : "") << to_string(cfg.train_families[i]);
  }
  os << "\ntest_family=" << to_string(cfg.test_family) << '\n';
  os << "sizes=";
  for (std::size_t i = 0; i < cfg.train_sizes.size(); ++i) {
    os << (i ? "," : "") << cfg.train_sizes[i];
  }
  os << "\nrepeats=" << cfg.repeats << '\n';
  os << "test_per_class=" << cfg.test_per_class << '\n';
  os << "net=" << to_string(cfg.net) << '\n';
  os << "channels=" << cfg.input_channels << '\n';
  if (cfg.head_dropout) os << "dropout=" << format("%.17g", *cfg.head_dropout) << '\n';
  os << "optim=" << to_string(cfg.optim.method) << '\n';
  os << "lr=" << format("%.17g", cfg.optim.base_lr) << '\n';
  os << "momentum=" << format("%.17g", cfg.optim.momentum) << '\n';
  os << "epsilon=" << format("%.17g", cfg.optim.epsilon) << '\n';
  os << "iters=" << cfg.train.iterations << '\n';
  os << "batch=" << cfg.train.batch_size << '\n';
  os << "report_every=" << cfg.train.loss_report_every << '\n';
  os << "size=" << cfg.render.height << 'x' << cfg.render.width << '\n';
  os << "seed=" << cfg.master_seed << '\n';
  return os.str();
}

}  // namespace abstractnet
