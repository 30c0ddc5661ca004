#include <gtest/gtest.h>

#include <cstdlib>
#include <regex>
#include <string>
#include <vector>

#include "abstractnet/error.hpp"
#include "abstractnet/experiment.hpp"
#include "test_support.hpp"

namespace an = abstractnet;

namespace {

an::RunResult run(int size, int repeat, double acc, double loss = 0.0) {
  an::RunResult r;
  r.train_size = size;
  r.repeat = repeat;
  r.seed = 1000u + static_cast<unsigned>(size * 10 + repeat);
  r.accuracy = acc;
  r.final_loss = loss;
  return r;
}

/// A sweep small enough for a unit test: 16x16 images, a handful of updates.
an::ExperimentConfig tiny_config() {
  an::ExperimentConfig cfg = an::preset_experiment("fig4");
  cfg.name = "tiny";
  cfg.render.height = 16;
  cfg.render.width = 16;
  cfg.render.margin = 1;
  cfg.train_sizes = {3, 2};
  cfg.repeats = 2;
  cfg.test_per_class = 5;
  cfg.train.iterations = 4;
  cfg.train.batch_size = 4;
  cfg.train.loss_report_every = 2;
  return cfg;
}

/// Stack-based tag balance check; enough to catch malformed output.
bool well_formed(const std::string& xml) {
  std::vector<std::string> stack;
  const std::regex tag(R"(<(/?)([A-Za-z][\w-]*)[^>]*?(/?)>)");
  for (auto it = std::sregex_iterator(xml.begin(), xml.end(), tag); it != std::sregex_iterator(); ++it) {
    const std::smatch& m = *it;
    if (m[3] == "/") continue;
    if (m[1] == "/") {
      if (stack.empty() || stack.back() != m[2]) return false;
      stack.pop_back();
    } else {
      stack.push_back(m[2]);
    }
  }
  return stack.empty();
}

std::size_t count_of(const std::string& text, const std::string& needle) {
  std::size_t n = 0;
  for (std::size_t p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
  return n;
}

class ScopedEnv {
 public:
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) old_ = old;
    ::setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (old_.empty()) {
      ::unsetenv(name_);
    } else {
      ::setenv(name_, old_.c_str(), 1);
    }
  }

 private:
  const char* name_;
  std::string old_;
};

}  // namespace

TEST(Percentile, LinearInterpolationOfOrderStatistics) {
  const std::vector<double> v{1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1};
  EXPECT_NEAR(an::percentile(v, 0.05), 0.145, 1e-12);
  EXPECT_NEAR(an::percentile(v, 0.95), 0.955, 1e-12);
  EXPECT_DOUBLE_EQ(an::percentile(v, 0.0), 0.1);
  EXPECT_DOUBLE_EQ(an::percentile(v, 1.0), 1.0);
  EXPECT_NEAR(an::percentile(v, 0.5), 0.55, 1e-12);
  const std::vector<double> one{0.3};
  EXPECT_EQ(an::percentile(one, 0.05), 0.3);
  EXPECT_THROW(an::percentile(std::vector<double>{}, 0.5), an::RangeError);
  EXPECT_THROW(an::percentile(v, 1.5), an::RangeError);
}

TEST(Aggregate, ConstantAccuracies) {
  std::vector<an::RunResult> runs;
  for (int r = 0; r < 10; ++r) runs.push_back(run(10, r, 0.9));
  const an::SizeSummary s = an::aggregate(10, runs);
  EXPECT_DOUBLE_EQ(s.mean, 0.9);
  EXPECT_DOUBLE_EQ(s.band_low, 0.9);
  EXPECT_DOUBLE_EQ(s.band_high, 0.9);
}

TEST(Aggregate, MeanOfTwo) {
  const an::SizeSummary s = an::aggregate(5, {run(5, 0, 0.0), run(5, 1, 1.0)});
  EXPECT_DOUBLE_EQ(s.mean, 0.5);
  EXPECT_LE(s.band_low, s.mean);
  EXPECT_GE(s.band_high, s.mean);
}

TEST(Aggregate, BandExcludesOnlyTheExtremes) {
  std::vector<an::RunResult> runs;
  for (int r = 0; r < 10; ++r) runs.push_back(run(50, r, 0.1 * (r + 1)));
  const an::SizeSummary s = an::aggregate(50, runs);
  EXPECT_NEAR(s.band_low, 0.145, 1e-12);
  EXPECT_NEAR(s.band_high, 0.955, 1e-12);
  int outside = 0;
  for (const an::RunResult& r : s.runs) outside += r.accuracy < s.band_low || r.accuracy > s.band_high;
  EXPECT_EQ(outside, 2);
}

TEST(Aggregate, GroupsBySizeAscendingAndRepeatOrder) {
  const an::SweepResult sw =
      an::aggregate("x", {run(100, 1, 0.8), run(10, 0, 0.5), run(100, 0, 0.6), run(10, 1, 0.7)});
  ASSERT_EQ(sw.sizes.size(), 2u);
  EXPECT_EQ(sw.sizes[0].train_size, 10);
  EXPECT_EQ(sw.sizes[1].train_size, 100);
  EXPECT_EQ(sw.sizes[1].runs[0].repeat, 0);
  EXPECT_DOUBLE_EQ(sw.sizes[1].mean, 0.7);
  EXPECT_THROW(an::aggregate(3, {}), an::RangeError);
}

TEST(Csv, HeaderRowsAndRoundTrip) {
  std::vector<an::RunResult> runs;
  for (int size : {10, 100})
    for (int r = 0; r < 10; ++r) runs.push_back(run(size, r, 0.5 + 0.001 * r + 0.0000004 * size, 0.001234 * r));
  const an::SweepResult sw = an::aggregate("fig4", runs);
  const std::string text = an::csv_text(sw);
  EXPECT_EQ(text.rfind("experiment,train_size,repeat,seed,accuracy,final_loss,seconds\n", 0), 0u);
  EXPECT_EQ(count_of(text, "\n"), 21u);
  EXPECT_NE(text.find("\nfig4,10,0,1100,0.500004,"), std::string::npos);

  std::string name;
  const std::vector<an::RunResult> back = an::parse_csv(text, &name);
  EXPECT_EQ(name, "fig4");
  ASSERT_EQ(back.size(), 20u);
  for (std::size_t i = 0; i < back.size(); ++i) {
    const an::RunResult& a = sw.sizes[i / 10].runs[i % 10];
    EXPECT_EQ(back[i].train_size, a.train_size);
    EXPECT_EQ(back[i].repeat, a.repeat);
    EXPECT_EQ(back[i].seed, a.seed);
    EXPECT_EQ(back[i].accuracy, a.accuracy);  // six decimals are exact for these values
    EXPECT_EQ(back[i].final_loss, a.final_loss);
  }
  EXPECT_EQ(an::csv_text(an::aggregate("fig4", back)), text);
  EXPECT_THROW(an::parse_csv("a,b\n"), an::IoError);
}

TEST(Csv, SecondsOnlyWithTiming) {
  an::RunResult r = run(10, 0, 1.0);
  r.seconds = 12.5;
  const an::SweepResult sw = an::aggregate("t", {r});
  EXPECT_NE(an::csv_text(sw, false).find(",0.000\n"), std::string::npos);
  EXPECT_NE(an::csv_text(sw, true).find(",12.500\n"), std::string::npos);
}

TEST(Csv, WriteErrorNamesPath) {
  const an::SweepResult sw = an::aggregate("t", {run(10, 0, 1.0)});
  try {
    an::emit_csv(sw, "/nonexistent-dir/results.csv");
    FAIL() << "expected IoError";
  } catch (const an::IoError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent-dir/results.csv"), std::string::npos);
  }
}

TEST(Svg, WellFormedWithOneDotPerSize) {
  std::vector<an::RunResult> runs;
  for (int size : {10, 25, 50, 100})
    for (int r = 0; r < 3; ++r) runs.push_back(run(size, r, 0.6 + 0.1 * r));
  const std::string svg = an::svg_text(an::aggregate("fig <4> & co", runs));
  EXPECT_TRUE(well_formed(svg));
  EXPECT_EQ(count_of(svg, "<circle class=\"mean\""), 4u);
  EXPECT_EQ(count_of(svg, "<polygon class=\"band\""), 1u);
  EXPECT_NE(svg.find("fig &lt;4&gt; &amp; co"), std::string::npos);
  EXPECT_EQ(svg, an::svg_text(an::aggregate("fig <4> & co", runs)));
}

TEST(Svg, ConstantSweepBandCollapsesOntoMeans) {
  std::vector<an::RunResult> runs;
  for (int size : {10, 100})
    for (int r = 0; r < 4; ++r) runs.push_back(run(size, r, 0.75));
  const std::string svg = an::svg_text(an::aggregate("flat", runs));
  const std::smatch pts = [&] {
    std::smatch m;
    std::regex_search(svg, m, std::regex("class=\"band\"[^>]*points=\"([^\"]*)\""));
    return m;
  }();
  ASSERT_FALSE(pts.empty());
  std::smatch dot;
  ASSERT_TRUE(std::regex_search(svg, dot, std::regex("cy=\"([0-9.]+)\"")));
  const std::string y = dot[1];
  const std::string points = pts[1];
  const std::regex pair(R"(([0-9.]+),([0-9.]+))");
  int n = 0;
  for (auto it = std::sregex_iterator(points.begin(), points.end(), pair); it != std::sregex_iterator(); ++it, ++n) {
    EXPECT_EQ((*it)[2].str(), y);
  }
  EXPECT_EQ(n, 4);
}

TEST(Presets, SevenFiguresDifferingOnlyInFamilies) {
  const auto presets = an::preset_experiments();
  ASSERT_EQ(presets.size(), 7u);
  const std::vector<std::string> names{"fig4", "fig6", "fig7", "fig8", "fig9", "fig11", "fig13"};
  for (std::size_t i = 0; i < presets.size(); ++i) {
    EXPECT_EQ(presets[i].name, names[i]);
    an::ExperimentConfig a = presets[i];
    an::ExperimentConfig b = presets[0];
    a.name = b.name;
    a.train_families = b.train_families;
    a.test_family = b.test_family;
    EXPECT_EQ(an::describe(a), an::describe(b)) << names[i];
  }
  using F = an::ShapeFamily;
  EXPECT_EQ(an::preset_experiment("fig4").train_families, std::vector<F>{F::filled_rect});
  EXPECT_EQ(an::preset_experiment("fig4").test_family, F::filled_ellipse);
  EXPECT_EQ(an::preset_experiment("fig6").train_families, std::vector<F>{F::rect_outline});
  EXPECT_EQ(an::preset_experiment("fig6").test_family, F::filled_rect);
  EXPECT_EQ(an::preset_experiment("fig7").train_families, (std::vector<F>{F::rect_outline, F::ellipse_outline}));
  EXPECT_EQ(an::preset_experiment("fig8").test_family, F::random_outline);
  EXPECT_EQ(an::preset_experiment("fig9").test_family, F::random_filled);
  EXPECT_EQ(an::preset_experiment("fig11").test_family, F::filled_rect);
  EXPECT_EQ(an::preset_experiment("fig13").test_family, F::random_textured);
  EXPECT_THROW(an::preset_experiment("fig5"), an::ParamError);
}

TEST(Presets, Defaults) {
  const an::ExperimentConfig c = an::preset_experiment("fig4");
  EXPECT_EQ(c.train_sizes, (std::vector<int>{10, 25, 50, 100, 250, 500}));
  EXPECT_EQ(c.repeats, 10);
  EXPECT_EQ(c.test_per_class, 250);
  EXPECT_EQ(c.train.iterations, 1000);
  EXPECT_EQ(c.optim.method, an::OptimMethod::adagrad);
  EXPECT_DOUBLE_EQ(c.optim.base_lr, 0.01);
  EXPECT_EQ(c.render.height, 64);
}

TEST(Seeds, TrainTestAndRunStreamsAreDistinct) {
  const an::ExperimentConfig c = an::preset_experiment("fig4");
  std::set<std::uint64_t> seen{an::test_seed(c)};
  for (int size : c.train_sizes)
    for (int r = 0; r < c.repeats; ++r) EXPECT_TRUE(seen.insert(an::run_seed(c, size, r)).second);
  an::ExperimentConfig other = c;
  other.master_seed += 1;
  EXPECT_NE(an::test_seed(other), an::test_seed(c));
}

TEST(EvaluateAccuracy, HandBuiltLogits) {
  // No stem or body: logits = W * mean(image) + b with W = (1, -1), b = (-0.5, 0.5),
  // so class 0 wins exactly when the mean pixel exceeds 0.5 (a tie goes to 0).
  an::NetworkSpec s;
  s.in_channels = 1;
  s.in_h = 2;
  s.in_w = 2;
  s.head_dropout = 0.0;
  an::SeededRng rng(1);
  an::Network net = an::Network::build(s, rng);
  an::LayerState& fc = net.state("head.fc");
  fc.weights[0] = 1.0;
  fc.weights[1] = -1.0;
  fc.bias[0] = -0.5;
  fc.bias[1] = 0.5;
  auto image = [](std::vector<double> px) { return an::ImageGray{2, 2, std::move(px)}; };
  an::Dataset d;
  d.push_back({image({0, 0, 0, 1}), 1});  // mean 0.25 -> 1, correct
  d.push_back({image({0, 0, 1, 1}), 1});  // mean 0.5 -> tie -> 0, wrong
  d.push_back({image({0, 1, 1, 1}), 0});  // mean 0.75 -> 0, correct
  d.push_back({image({1, 1, 1, 1}), 1});  // mean 1 -> 0, wrong
  EXPECT_DOUBLE_EQ(an::evaluate_accuracy(net, d), 0.5);
  EXPECT_DOUBLE_EQ(an::evaluate_accuracy(net, d, 3), 0.5);
  d[0].label = 1;
  d[1].label = 0;
  d[2].label = 0;
  d[3].label = 0;
  EXPECT_DOUBLE_EQ(an::evaluate_accuracy(net, d), 1.0);
  EXPECT_THROW(an::evaluate_accuracy(net, {}), an::RangeError);
}

TEST(EvaluateAccuracy, UntrainedZeroNetIsHalfOnBalancedSet) {
  an::SeededRng rng(2);
  const an::Network net = an::Network::build(an::mini_spec(), rng);
  an::Dataset d;
  for (int label : {0, 1})
    for (int i = 0; i < 4; ++i) d.push_back({an::ImageGray{64, 64, std::vector<double>(64 * 64, 0.0)}, label});
  EXPECT_DOUBLE_EQ(an::evaluate_accuracy(net, d), 0.5);
}

TEST(Threads, EnvironmentCapsParallelism) {
  {
    ScopedEnv env("ABSTRACTNET_THREADS", "2");
    EXPECT_EQ(an::resolve_threads(8), 2);
    EXPECT_EQ(an::resolve_threads(1), 1);
    EXPECT_LE(an::resolve_threads(0), 2);
  }
  {
    ScopedEnv env("ABSTRACTNET_THREADS", "zero");
    EXPECT_THROW(an::resolve_threads(0), an::ParamError);
  }
  {
    ScopedEnv env("ABSTRACTNET_THREADS", "0");
    EXPECT_THROW(an::resolve_threads(0), an::ParamError);
  }
}

TEST(Config, Validation) {
  an::ExperimentConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.repeats = 0;
  EXPECT_THROW(c.validate(), an::ParamError);
  c = tiny_config();
  c.train_sizes.clear();
  EXPECT_THROW(c.validate(), an::ParamError);
  c = tiny_config();
  c.train_families.clear();
  EXPECT_THROW(c.validate(), an::ParamError);
}

TEST(Sweep, CountsArtifactsAndDeterminism) {
  testing_support::TempDir a("sweep_a"), b("sweep_b");
  const an::ExperimentConfig cfg = tiny_config();
  an::SweepOptions opts;
  opts.threads = 1;
  opts.write_checkpoints = true;
  opts.write_loss_traces = true;
  int callbacks = 0;
  opts.on_run = [&](const an::RunResult&) { ++callbacks; };
  opts.out_dir = a.path();
  const an::SweepResult s1 = an::run_sweep(cfg, opts);
  opts.out_dir = b.path();
  opts.threads = 2;  // completion order must not matter
  const an::SweepResult s2 = an::run_sweep(cfg, opts);

  EXPECT_EQ(callbacks, 8);
  ASSERT_EQ(s1.sizes.size(), 2u);
  EXPECT_EQ(s1.sizes[0].train_size, 2);
  EXPECT_EQ(s1.sizes[1].train_size, 3);
  for (const an::SizeSummary& s : s1.sizes) {
    EXPECT_EQ(s.runs.size(), 2u);
    for (const an::RunResult& r : s.runs) {
      EXPECT_GE(r.accuracy, 0.0);
      EXPECT_LE(r.accuracy, 1.0);
      EXPECT_EQ(r.trace.size(), 2u);
      EXPECT_EQ(r.seed, an::run_seed(cfg, r.train_size, r.repeat));
    }
  }
  const std::string csv = testing_support::slurp(a / "results.csv");
  EXPECT_EQ(count_of(csv, "\n"), 5u);
  EXPECT_EQ(csv, testing_support::slurp(b / "results.csv"));
  EXPECT_EQ(testing_support::slurp(a / "plot.svg"), testing_support::slurp(b / "plot.svg"));
  EXPECT_TRUE(std::filesystem::exists(a / "timing.csv"));
  EXPECT_TRUE(std::filesystem::exists(a / "checkpoints/tiny_n3_r1.ckpt"));
  EXPECT_EQ(testing_support::slurp(a / "loss/tiny_n2_r0.csv"), testing_support::slurp(b / "loss/tiny_n2_r0.csv"));

  // A checkpoint reproduces its run's accuracy on the shared test set.
  const an::Network net = an::load_checkpoint(a / "checkpoints/tiny_n3_r1.ckpt");
  EXPECT_DOUBLE_EQ(an::evaluate_accuracy(net, an::make_test_set(cfg)), s1.sizes[1].runs[1].accuracy);
}

TEST(Sweep, RunSingleMatchesSweepEntry) {
  const an::ExperimentConfig cfg = tiny_config();
  const an::SweepResult sw = an::run_sweep(cfg);
  const an::RunResult r = an::run_single(cfg, 3, 0, an::make_test_set(cfg));
  EXPECT_EQ(r.accuracy, sw.sizes[1].runs[0].accuracy);
  EXPECT_EQ(r.final_loss, sw.sizes[1].runs[0].final_loss);
}

TEST(Sweep, FailureNamesSizeRepeatAndSeed) {
  an::ExperimentConfig cfg = tiny_config();
  cfg.optim.method = an::OptimMethod::sgd_momentum;
  cfg.optim.base_lr = 1e300;  // diverges on the first update
  try {
    an::run_sweep(cfg);
    FAIL() << "expected failure";
  } catch (const an::Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("train_size 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("repeat 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("seed " + std::to_string(an::run_seed(cfg, 2, 0))), std::string::npos) << msg;
  }
}
