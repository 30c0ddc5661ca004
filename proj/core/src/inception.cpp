#include "abstractnet/inception.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "abstractnet/error.hpp"
#include "abstractnet/optim.hpp"

namespace abstractnet {

// Resolved layer graph -------------------------------------------------------

namespace {

constexpr PoolSpec kBranchPool{PoolKind::max, 3, 3, 1, 1, 1, 1};

struct ConvNode {
  ConvSpec spec;
  std::size_t state = 0;
};

struct PoolNode {
  PoolSpec spec;
};

struct InceptionNode {
  int index = 0;  // 1-based
  InceptionSpec spec;
  ConvNode b1, b3r, b3, b5r, b5, pp;
};

using TrunkNode = std::variant<ConvNode, PoolNode, InceptionNode>;

struct AuxNode {
  int after_module = 0;
  std::size_t tap = 0;  // trunk node whose output feeds the head
  PoolSpec pool;
  ConvNode conv;
  std::size_t hidden = 0;
  std::size_t out = 0;
  double dropout = 0.0;
};

struct HeadNode {
  PoolSpec pool;
  std::size_t dense = 0;
  double dropout = 0.0;
};

std::atomic<std::uint64_t> g_next_network_id{1};

}  // namespace

struct Network::Graph {
  std::vector<TrunkNode> trunk;
  std::vector<AuxNode> aux;
  HeadNode head;
};

// Caches ----------------------------------------------------------------------

namespace {

struct InceptionCache {
  Tensor b1, b3r, b3, b5r, b5;  // post-ReLU outputs
  PoolResult pool;
  Tensor pp;
};

struct PoolCache {
  PoolResult result;
};

struct AuxCache {
  PoolResult pool;
  Tensor conv;  // post-ReLU
  Tensor hidden;  // post-ReLU
  DropoutResult drop;
};

struct HeadCache {
  PoolResult pool;
  DropoutResult drop;
};

using TrunkCache = std::variant<std::monostate, InceptionCache, PoolCache>;

}  // namespace

struct ForwardPass::Cache {
  /// acts[0] is the input; acts[i + 1] is the output of trunk node i.
  std::vector<Tensor> acts;
  std::vector<TrunkCache> trunk;
  std::vector<AuxCache> aux;
  HeadCache head;
  std::vector<std::size_t> module_nodes;
};

const Tensor& ForwardPass::module_output(int k) const {
  if (!cache || k < 1 || k > static_cast<int>(cache->module_nodes.size())) {
    throw RangeError("module_output: no inception module " + std::to_string(k));
  }
  return cache->acts[cache->module_nodes[static_cast<std::size_t>(k - 1)] + 1];
}

// Specs ---------------------------------------------------------------------

void InceptionSpec::validate() const {
  if (b1 < 1 || b3r < 1 || b3 < 1 || b5r < 1 || b5 < 1 || pp < 1) {
    throw SpecError("inception: every branch width must be >= 1");
  }
}

int NetworkSpec::module_count() const noexcept {
  return static_cast<int>(
      std::count_if(body.begin(), body.end(), [](const BodyLayer& l) { return std::holds_alternative<InceptionSpec>(l); }));
}

namespace {

PoolSpec max_pool2() { return PoolSpec{PoolKind::max, 2, 2, 2, 2, 0, 0}; }
PoolSpec avg_pool2() { return PoolSpec{PoolKind::average, 2, 2, 2, 2, 0, 0}; }

}  // namespace

NetworkSpec mini_spec() {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_h = 64;
  s.in_w = 64;
  s.stem = {avg_pool2(), same_conv(1, 8, 5), max_pool2()};
  s.body = {InceptionSpec{4, 4, 4, 2, 4, 4}, InceptionSpec{8, 6, 8, 2, 4, 4}, max_pool2(),
            InceptionSpec{8, 8, 12, 4, 6, 6}};
  s.aux_after = {};
  s.aux_weight = 0.3;
  s.aux_head = AuxHeadSpec{std::nullopt, 8, 32, 0.4};
  s.head_dropout = 0.4;
  s.classes = 2;
  return s;
}

NetworkSpec faithful_spec() {
  NetworkSpec s;
  s.in_channels = 1;
  s.in_h = 224;
  s.in_w = 224;
  s.stem = {avg_pool2(), same_conv(1, 8, 7), max_pool2(), same_conv(8, 8, 1), same_conv(8, 24, 3), max_pool2()};
  s.body = {
      InceptionSpec{8, 12, 16, 2, 4, 4},     // 3a
      InceptionSpec{16, 16, 24, 4, 12, 8},   // 3b
      max_pool2(),
      InceptionSpec{24, 12, 26, 2, 6, 8},    // 4a
      InceptionSpec{20, 14, 28, 3, 8, 8},    // 4b
      InceptionSpec{16, 16, 32, 3, 8, 8},    // 4c
      InceptionSpec{14, 18, 36, 4, 8, 8},    // 4d
      InceptionSpec{32, 20, 40, 4, 16, 16},  // 4e
      max_pool2(),
      InceptionSpec{32, 20, 40, 4, 16, 16},  // 5a
      InceptionSpec{48, 24, 48, 6, 16, 16},  // 5b
  };
  s.aux_after = {3, 6};
  s.aux_weight = 0.3;
  s.aux_head = AuxHeadSpec{PoolSpec{PoolKind::average, 5, 5, 3, 3, 0, 0}, 16, 128, 0.4};
  s.head_dropout = 0.4;
  s.classes = 2;
  return s;
}

NetworkSpec preset_spec(NetPreset preset) { return preset == NetPreset::mini ? mini_spec() : faithful_spec(); }

NetPreset parse_net_preset(const std::string& name) {
  if (name == "mini") return NetPreset::mini;
  if (name == "faithful") return NetPreset::faithful;
  throw ParamError("unknown network preset '" + name + "' (expected mini or faithful)");
}

std::string to_string(NetPreset preset) { return preset == NetPreset::mini ? "mini" : "faithful"; }

// Spec text -------------------------------------------------------------------

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string pool_text(const PoolSpec& p) {
  std::ostringstream os;
  os << (p.kind == PoolKind::max ? "max" : "avg") << ' ' << p.kh << ' ' << p.kw << ' ' << p.sh << ' ' << p.sw << ' '
     << p.ph << ' ' << p.pw;
  return os.str();
}

std::string conv_text(const ConvSpec& c) {
  std::ostringstream os;
  os << c.in_channels << ' ' << c.out_channels << ' ' << c.kh << ' ' << c.kw << ' ' << c.sh << ' ' << c.sw << ' '
     << c.ph << ' ' << c.pw;
  return os.str();
}

PoolSpec parse_pool(std::istringstream& is, const std::string& line) {
  std::string kind;
  PoolSpec p;
  is >> kind >> p.kh >> p.kw >> p.sh >> p.sw >> p.ph >> p.pw;
  if (!is || (kind != "max" && kind != "avg")) {
    throw SpecError("spec text: bad pool entry '" + line + "'");
  }
  p.kind = kind == "max" ? PoolKind::max : PoolKind::average;
  return p;
}

ConvSpec parse_conv(std::istringstream& is, const std::string& line) {
  ConvSpec c;
  is >> c.in_channels >> c.out_channels >> c.kh >> c.kw >> c.sh >> c.sw >> c.ph >> c.pw;
  if (!is) {
    throw SpecError("spec text: bad conv entry '" + line + "'");
  }
  return c;
}

}  // namespace

std::string serialize_spec(const NetworkSpec& spec) {
  std::ostringstream os;
  os << "input=" << spec.in_channels << ' ' << spec.in_h << ' ' << spec.in_w << '\n';
  os << "classes=" << spec.classes << '\n';
  for (const StemLayer& l : spec.stem) {
    if (const auto* c = std::get_if<ConvSpec>(&l)) {
      os << "stem=conv " << conv_text(*c) << '\n';
    } else {
      os << "stem=pool " << pool_text(std::get<PoolSpec>(l)) << '\n';
    }
  }
  for (const BodyLayer& l : spec.body) {
    if (const auto* m = std::get_if<InceptionSpec>(&l)) {
      os << "body=inception " << m->b1 << ' ' << m->b3r << ' ' << m->b3 << ' ' << m->b5r << ' ' << m->b5 << ' '
         << m->pp << '\n';
    } else {
      os << "body=pool " << pool_text(std::get<PoolSpec>(l)) << '\n';
    }
  }
  os << "aux_after=";
  for (std::size_t i = 0; i < spec.aux_after.size(); ++i) {
    os << (i ? " " : "") << spec.aux_after[i];
  }
  os << '\n';
  os << "aux_weight=" << fmt_double(spec.aux_weight) << '\n';
  os << "aux_head.pool=" << (spec.aux_head.pool ? pool_text(*spec.aux_head.pool) : std::string("global")) << '\n';
  os << "aux_head.conv_channels=" << spec.aux_head.conv_channels << '\n';
  os << "aux_head.hidden=" << spec.aux_head.hidden << '\n';
  os << "aux_head.dropout=" << fmt_double(spec.aux_head.dropout) << '\n';
  os << "head_dropout=" << fmt_double(spec.head_dropout) << '\n';
  return os.str();
}

NetworkSpec parse_spec(const std::string& text) {
  NetworkSpec spec;
  spec.stem.clear();
  spec.body.clear();
  spec.aux_after.clear();
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty() || line[0] == '#') {
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw SpecError("spec text: missing '=' in '" + line + "'");
    }
    const std::string key = line.substr(0, eq);
    std::istringstream is(line.substr(eq + 1));
    if (key == "input") {
      is >> spec.in_channels >> spec.in_h >> spec.in_w;
    } else if (key == "classes") {
      is >> spec.classes;
    } else if (key == "stem" || key == "body") {
      std::string kind;
      is >> kind;
      if (kind == "pool") {
        const PoolSpec p = parse_pool(is, line);
        if (key == "stem") spec.stem.emplace_back(p);
        else spec.body.emplace_back(p);
      } else if (kind == "conv" && key == "stem") {
        spec.stem.emplace_back(parse_conv(is, line));
      } else if (kind == "inception" && key == "body") {
        InceptionSpec m;
        is >> m.b1 >> m.b3r >> m.b3 >> m.b5r >> m.b5 >> m.pp;
        spec.body.emplace_back(m);
      } else {
        throw SpecError("spec text: unknown layer '" + line + "'");
      }
    } else if (key == "aux_after") {
      int k = 0;
      while (is >> k) spec.aux_after.push_back(k);
      is.clear();
    } else if (key == "aux_weight") {
      is >> spec.aux_weight;
    } else if (key == "aux_head.pool") {
      std::string first;
      is >> first;
      if (first == "global") {
        spec.aux_head.pool.reset();
      } else {
        std::istringstream rest(line.substr(eq + 1));
        spec.aux_head.pool = parse_pool(rest, line);
      }
    } else if (key == "aux_head.conv_channels") {
      is >> spec.aux_head.conv_channels;
    } else if (key == "aux_head.hidden") {
      is >> spec.aux_head.hidden;
    } else if (key == "aux_head.dropout") {
      is >> spec.aux_head.dropout;
    } else if (key == "head_dropout") {
      is >> spec.head_dropout;
    } else {
      throw SpecError("spec text: unknown key '" + key + "'");
    }
    if (is.fail()) {
      throw SpecError("spec text: bad value in '" + line + "'");
    }
  }
  return spec;
}

// Building ------------------------------------------------------------------

namespace {

class GraphBuilder {
 public:
  GraphBuilder(const NetworkSpec& spec, Network::Graph& graph, std::vector<LayerState>& states)
      : spec_(spec), graph_(graph), states_(states), shape_{1, spec.in_channels, spec.in_h, spec.in_w} {}

  void run() {
    if (spec_.in_channels < 1 || spec_.in_h < 1 || spec_.in_w < 1) {
      throw SpecError("network: input dimensions must be >= 1");
    }
    if (spec_.classes < 2) {
      throw SpecError("network: at least two classes required");
    }
    check_rate("head", spec_.head_dropout);
    check_aux();

    int stem_conv = 0;
    int stem_pool = 0;
    for (const StemLayer& l : spec_.stem) {
      if (const auto* c = std::get_if<ConvSpec>(&l)) {
        const std::string name = "stem.conv" + std::to_string(++stem_conv);
        graph_.trunk.emplace_back(add_conv(name, *c, shape_));
      } else {
        const PoolSpec& p = std::get<PoolSpec>(l);
        shape_ = guarded("stem.pool" + std::to_string(++stem_pool), [&] { return p.output_shape(shape_); });
        graph_.trunk.emplace_back(PoolNode{p});
      }
    }

    int module = 0;
    int body_pool = 0;
    for (const BodyLayer& l : spec_.body) {
      if (const auto* m = std::get_if<InceptionSpec>(&l)) {
        ++module;
        graph_.trunk.emplace_back(add_inception(module, *m));
        if (std::find(spec_.aux_after.begin(), spec_.aux_after.end(), module) != spec_.aux_after.end()) {
          add_aux(module);
        }
      } else {
        const PoolSpec& p = std::get<PoolSpec>(l);
        shape_ = guarded("body.pool" + std::to_string(++body_pool), [&] { return p.output_shape(shape_); });
        graph_.trunk.emplace_back(PoolNode{p});
      }
    }

    graph_.head.pool = PoolSpec{PoolKind::average, shape_.h, shape_.w, 1, 1, 0, 0};
    graph_.head.dropout = spec_.head_dropout;
    graph_.head.dense = states_.size();
    states_.push_back(LayerState::for_dense("head.fc", shape_.c, spec_.classes));
  }

 private:
  template <typename F>
  static auto guarded(const std::string& layer, F&& f) -> decltype(f()) {
    try {
      return f();
    } catch (const Error& e) {
      throw SpecError("layer " + layer + ": " + e.what());
    }
  }

  static void check_rate(const std::string& where, double rate) {
    if (!(rate >= 0.0 && rate < 1.0)) {
      throw SpecError(where + " dropout must lie in [0, 1)");
    }
  }

  void check_aux() const {
    const int modules = spec_.module_count();
    int prev = 0;
    for (int k : spec_.aux_after) {
      if (k <= prev) {
        throw SpecError("aux_after indices must be strictly increasing and >= 1");
      }
      if (k >= modules) {
        throw SpecError("aux_after index " + std::to_string(k) + " must be below the module count " +
                        std::to_string(modules));
      }
      prev = k;
    }
    if (!spec_.aux_after.empty()) {
      check_rate("aux head", spec_.aux_head.dropout);
      if (spec_.aux_head.conv_channels < 1 || spec_.aux_head.hidden < 1) {
        throw SpecError("aux head widths must be >= 1");
      }
      if (spec_.aux_weight < 0.0) {
        throw SpecError("aux_weight must be >= 0");
      }
    }
  }

  ConvNode add_conv(const std::string& name, const ConvSpec& c, Shape& shape) {
    auto allowed = [](int k) { return k == 1 || k == 3 || k == 5 || k == 7; };
    if (!allowed(c.kh) || !allowed(c.kw)) {
      throw SpecError("layer " + name + ": kernel " + std::to_string(c.kh) + "x" + std::to_string(c.kw) +
                      " is not one of 1, 3, 5, 7");
    }
    shape = guarded(name, [&] { return c.output_shape(shape); });
    ConvNode node{c, states_.size()};
    states_.push_back(LayerState::for_conv(name, c));
    return node;
  }

  InceptionNode add_inception(int index, const InceptionSpec& m) {
    const std::string prefix = "inception" + std::to_string(index);
    guarded(prefix, [&] {
      m.validate();
      return 0;
    });
    const int in = shape_.c;
    InceptionNode node;
    node.index = index;
    node.spec = m;
    Shape s = shape_;
    node.b1 = add_conv(prefix + ".b1", same_conv(in, m.b1, 1), s = shape_);
    node.b3r = add_conv(prefix + ".b3r", same_conv(in, m.b3r, 1), s = shape_);
    node.b3 = add_conv(prefix + ".b3", same_conv(m.b3r, m.b3, 3), s);
    node.b5r = add_conv(prefix + ".b5r", same_conv(in, m.b5r, 1), s = shape_);
    node.b5 = add_conv(prefix + ".b5", same_conv(m.b5r, m.b5, 5), s);
    s = guarded(prefix + ".pool", [&] { return kBranchPool.output_shape(shape_); });
    node.pp = add_conv(prefix + ".pp", same_conv(in, m.pp, 1), s);
    shape_.c = m.output_channels();
    return node;
  }

  void add_aux(int module) {
    const std::string prefix = "aux" + std::to_string(module);
    const AuxHeadSpec& a = spec_.aux_head;
    AuxNode node;
    node.after_module = module;
    node.tap = graph_.trunk.size() - 1;
    node.pool = a.pool ? *a.pool : PoolSpec{PoolKind::average, shape_.h, shape_.w, 1, 1, 0, 0};
    Shape s = guarded(prefix + ".pool", [&] { return node.pool.output_shape(shape_); });
    node.conv = add_conv(prefix + ".conv", same_conv(shape_.c, a.conv_channels, 1), s);
    node.hidden = states_.size();
    states_.push_back(LayerState::for_dense(prefix + ".fc", static_cast<int>(s.item()), a.hidden));
    node.out = states_.size();
    states_.push_back(LayerState::for_dense(prefix + ".out", a.hidden, spec_.classes));
    node.dropout = a.dropout;
    graph_.aux.push_back(node);
  }

  const NetworkSpec& spec_;
  Network::Graph& graph_;
  std::vector<LayerState>& states_;
  Shape shape_;
};

}  // namespace

Network Network::build(const NetworkSpec& spec, SeededRng& rng) {
  Network net;
  net.spec_ = spec;
  auto graph = std::make_shared<Graph>();
  GraphBuilder(spec, *graph, net.states_).run();
  net.graph_ = std::move(graph);
  for (LayerState& s : net.states_) {
    s.weights = xavier_init(s.weights.shape(), s.fan_in, rng);
  }
  net.id_ = g_next_network_id.fetch_add(1);
  return net;
}

Network build_network(const NetworkSpec& spec, SeededRng& rng) { return Network::build(spec, rng); }

LayerState& Network::state(const std::string& name) {
  return const_cast<LayerState&>(static_cast<const Network&>(*this).state(name));
}

const LayerState& Network::state(const std::string& name) const {
  for (const LayerState& s : states_) {
    if (s.name == name) {
      return s;
    }
  }
  throw RangeError("network has no layer named '" + name + "'");
}

std::size_t Network::parameter_count() const noexcept {
  std::size_t total = 0;
  for (const LayerState& s : states_) {
    total += s.parameter_count();
  }
  return total;
}

std::vector<int> Network::aux_positions() const {
  std::vector<int> out;
  for (const AuxNode& a : graph_->aux) {
    out.push_back(a.after_module);
  }
  return out;
}

void Network::zero_grad() noexcept {
  for (LayerState& s : states_) {
    s.zero_grad();
  }
}

// Forward -------------------------------------------------------------------

namespace {

Tensor conv_relu(const Tensor& x, const ConvNode& node, const std::vector<LayerState>& states) {
  return relu(conv_forward(x, node.spec, states[node.state]));
}

Tensor conv_relu_backward(const Tensor& x, const Tensor& y, const Tensor& dy, const ConvNode& node,
                          std::vector<LayerState>& states, bool need_input_grad = true) {
  return conv_backward(x, relu_backward(y, dy), node.spec, states[node.state], need_input_grad);
}

}  // namespace

ForwardPass Network::forward(const Tensor& x, Mode mode, SeededRng* rng) const {
  const Shape expected = spec_.input_shape(x.shape().n);
  if (!x.shape().valid() || !(x.shape() == expected)) {
    throw ShapeError("network input " + to_string(x.shape()) + " does not match " + to_string(expected));
  }
  const bool train = mode == Mode::train;
  std::uint64_t pass_seed = 0;
  if (train) {
    if (rng == nullptr) {
      throw StateError("train-mode forward needs a random generator for dropout");
    }
    pass_seed = rng->next_u64();
  }

  auto cache = std::make_shared<ForwardPass::Cache>();
  const Graph& g = *graph_;
  cache->acts.reserve(g.trunk.size() + 1);
  cache->trunk.resize(g.trunk.size());
  cache->acts.push_back(x);

  ForwardPass pass;
  pass.mode = mode;
  pass.network_id = id_;

  for (std::size_t i = 0; i < g.trunk.size(); ++i) {
    const Tensor& in = cache->acts.back();
    Tensor out;
    if (const auto* c = std::get_if<ConvNode>(&g.trunk[i])) {
      out = conv_relu(in, *c, states_);
    } else if (const auto* p = std::get_if<PoolNode>(&g.trunk[i])) {
      PoolCache pc{pool_forward(in, p->spec)};
      out = pc.result.y;
      cache->trunk[i] = std::move(pc);
    } else {
      const auto& m = std::get<InceptionNode>(g.trunk[i]);
      InceptionCache ic;
      ic.b1 = conv_relu(in, m.b1, states_);
      ic.b3r = conv_relu(in, m.b3r, states_);
      ic.b3 = conv_relu(ic.b3r, m.b3, states_);
      ic.b5r = conv_relu(in, m.b5r, states_);
      ic.b5 = conv_relu(ic.b5r, m.b5, states_);
      ic.pool = pool_forward(in, kBranchPool);
      ic.pp = conv_relu(ic.pool.y, m.pp, states_);
      const Tensor parts[] = {ic.b1, ic.b3, ic.b5, ic.pp};
      out = concat_channels(parts);
      pass.module_outputs.push_back(out.shape());
      cache->module_nodes.push_back(i);
      cache->trunk[i] = std::move(ic);
    }
    cache->acts.push_back(std::move(out));
  }

  if (train) {
    cache->aux.reserve(g.aux.size());
    for (const AuxNode& a : g.aux) {
      AuxCache ac;
      const Tensor& tap = cache->acts[a.tap + 1];
      ac.pool = pool_forward(tap, a.pool);
      ac.conv = conv_relu(ac.pool.y, a.conv, states_);
      ac.hidden = relu(dense_forward(ac.conv, states_[a.hidden]));
      SeededRng drop_rng(derive_seed(pass_seed, {static_cast<std::uint64_t>(a.after_module)}));
      ac.drop = dropout(ac.hidden, a.dropout, drop_rng, mode);
      pass.aux_logits.push_back(dense_forward(ac.drop.y, states_[a.out]));
      require_finite(pass.aux_logits.back(), "aux logits");
      cache->aux.push_back(std::move(ac));
    }
  }

  HeadCache& hc = cache->head;
  hc.pool = pool_forward(cache->acts.back(), g.head.pool);
  SeededRng drop_rng(derive_seed(pass_seed, {0}));
  hc.drop = dropout(hc.pool.y, g.head.dropout, drop_rng, mode);
  pass.logits = dense_forward(hc.drop.y, states_[g.head.dense]);
  require_finite(pass.logits, "main logits");

  pass.cache = std::move(cache);
  return pass;
}

// Backward ------------------------------------------------------------------

double Network::backward(const ForwardPass& pass, std::span<const int> labels) {
  if (pass.network_id != id_ || !pass.cache) {
    throw StateError("backward: forward pass does not belong to this network");
  }
  if (pass.mode != Mode::train) {
    throw StateError("backward: requires a train-mode forward pass");
  }
  const Graph& g = *graph_;
  const ForwardPass::Cache& cache = *pass.cache;
  if (cache.aux.size() != g.aux.size() || pass.aux_logits.size() != g.aux.size()) {
    throw StateError("backward: forward pass is missing auxiliary outputs");
  }

  const LossResult main = softmax_xent(pass.logits, labels);
  double total = main.loss;

  const HeadCache& hc = cache.head;
  Tensor d = dense_backward(hc.drop.y, main.dlogits, states_[g.head.dense]);
  d = dropout_backward(d, hc.drop);
  d = pool_backward(d, g.head.pool, hc.pool);

  // Aux-head gradients, keyed by the trunk node they tap.
  std::vector<Tensor> aux_grad(g.aux.size());
  for (std::size_t k = 0; k < g.aux.size(); ++k) {
    const AuxNode& a = g.aux[k];
    const AuxCache& ac = cache.aux[k];
    LossResult aux = softmax_xent(pass.aux_logits[k], labels);
    total += spec_.aux_weight * aux.loss;
    for (double& v : aux.dlogits.data()) {
      v *= spec_.aux_weight;
    }
    Tensor da = dense_backward(ac.drop.y, aux.dlogits, states_[a.out]);
    da = dropout_backward(da, ac.drop);
    da = relu_backward(ac.hidden, da);
    da = dense_backward(ac.conv, da, states_[a.hidden]);
    da = conv_relu_backward(ac.pool.y, ac.conv, da, a.conv, states_);
    aux_grad[k] = pool_backward(da, a.pool, ac.pool);
  }

  for (std::size_t i = g.trunk.size(); i-- > 0;) {
    for (std::size_t k = 0; k < g.aux.size(); ++k) {
      if (g.aux[k].tap == i) {
        d.add_inplace(aux_grad[k]);
      }
    }
    const Tensor& in = cache.acts[i];
    const Tensor& out = cache.acts[i + 1];
    const bool need_dx = i > 0;
    if (const auto* c = std::get_if<ConvNode>(&g.trunk[i])) {
      d = conv_relu_backward(in, out, d, *c, states_, need_dx);
    } else if (const auto* p = std::get_if<PoolNode>(&g.trunk[i])) {
      if (need_dx) {
        d = pool_backward(d, p->spec, std::get<PoolCache>(cache.trunk[i]).result);
      }
    } else {
      const auto& m = std::get<InceptionNode>(g.trunk[i]);
      const auto& ic = std::get<InceptionCache>(cache.trunk[i]);
      const int widths[] = {m.spec.b1, m.spec.b3, m.spec.b5, m.spec.pp};
      const std::vector<Tensor> parts = split_channels(d, widths);
      Tensor dx = conv_relu_backward(in, ic.b1, parts[0], m.b1, states_);
      Tensor t = conv_relu_backward(ic.b3r, ic.b3, parts[1], m.b3, states_);
      dx.add_inplace(conv_relu_backward(in, ic.b3r, t, m.b3r, states_));
      t = conv_relu_backward(ic.b5r, ic.b5, parts[2], m.b5, states_);
      dx.add_inplace(conv_relu_backward(in, ic.b5r, t, m.b5r, states_));
      t = conv_relu_backward(ic.pool.y, ic.pp, parts[3], m.pp, states_);
      dx.add_inplace(pool_backward(t, kBranchPool, ic.pool));
      d = std::move(dx);
    }
  }
  if (!std::isfinite(total)) {
    throw NumericError("backward: non-finite loss");
  }
  return total;
}

std::vector<int> predict(const Network& net, const Tensor& x) {
  const ForwardPass pass = net.forward(x, Mode::eval);
  const Shape& s = pass.logits.shape();
  std::vector<int> out(static_cast<std::size_t>(s.n));
  for (int n = 0; n < s.n; ++n) {
    int best = 0;
    for (int k = 1; k < s.c; ++k) {
      if (pass.logits.at(n, k, 0, 0) > pass.logits.at(n, best, 0, 0)) {
        best = k;
      }
    }
    out[static_cast<std::size_t>(n)] = best;
  }
  return out;
}

// Checkpoints ---------------------------------------------------------------

namespace {

constexpr const char* kCheckpointMagic = "abstractnet-ckpt 1";

void put_doubles(std::ostream& os, const Tensor& t) {
  for (double v : t.data()) {
    unsigned char bytes[8];
    std::memcpy(bytes, &v, 8);
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes, bytes + 8);
    }
    os.write(reinterpret_cast<const char*>(bytes), 8);
  }
}

void get_doubles(std::istream& is, Tensor& t) {
  for (double& v : t.data()) {
    unsigned char bytes[8];
    is.read(reinterpret_cast<char*>(bytes), 8);
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes, bytes + 8);
    }
    std::memcpy(&v, bytes, 8);
  }
}

}  // namespace

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot open checkpoint for writing: " + path.string());
  }
  const std::string text = serialize_spec(net.spec());
  os << kCheckpointMagic << '\n' << "spec-bytes " << text.size() << '\n' << text;
  for (const LayerState& s : net.states()) {
    put_doubles(os, s.weights);
    put_doubles(os, s.bias);
  }
  if (!os) {
    throw IoError("checkpoint write failed: " + path.string());
  }
}

Network load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open checkpoint: " + path.string());
  }
  std::string magic;
  std::getline(is, magic);
  if (magic != kCheckpointMagic) {
    throw IoError("not an abstractnet checkpoint (bad header): " + path.string());
  }
  std::string tag;
  std::size_t bytes = 0;
  is >> tag >> bytes;
  if (!is || tag != "spec-bytes" || is.get() != '\n') {
    throw IoError("checkpoint header corrupt: " + path.string());
  }
  std::string text(bytes, '\0');
  is.read(text.data(), static_cast<std::streamsize>(bytes));
  if (!is) {
    throw IoError("checkpoint spec truncated: " + path.string());
  }
  SeededRng rng(0);
  Network net = Network::build(parse_spec(text), rng);
  for (LayerState& s : net.states()) {
    get_doubles(is, s.weights);
    get_doubles(is, s.bias);
  }
  if (!is) {
    throw IoError("checkpoint parameters truncated: " + path.string());
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw IoError("checkpoint has trailing bytes: " + path.string());
  }
  return net;
}

}  // namespace abstractnet
