#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "navgen/instructions.hpp"

namespace navgen::testing {

namespace nd = ndgrad;

// ---------------------------------------------------------------- finite differences

GradCheck grad_check(const std::string& op, const std::vector<nd::Shape>& shapes, const OpFn& f, Rng& rng,
                     int points, double lo, double hi) {
  nd::ParameterStore store;
  std::vector<nd::Parameter*> params;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    auto& p = store.add("x" + std::to_string(i), shapes[i]);
    for (auto& v : p.value()) v = rng.uniform(lo, hi);
    params.push_back(&p);
  }

  auto forward = [&](nd::Tape& tape) {
    std::vector<nd::Tensor> xs;
    for (auto* p : params) xs.push_back(tape.param(*p));
    return f(xs);
  };

  std::vector<double> w;
  {
    nd::Tape probe(false);
    const auto y = forward(probe);
    for (std::size_t i = 0; i < y.shape().numel(); ++i) w.push_back(rng.uniform(-1.0, 1.0));
  }
  auto loss_of = [&](nd::Tape& tape) {
    const auto y = forward(tape);
    return nd::sum(nd::mul(y, tape.constant(y.shape(), w)));
  };

  store.zero_grad();
  {
    nd::Tape tape;
    tape.backward(loss_of(tape));
  }

  GradCheck out;
  out.op = op;
  const double h = 1e-6;
  for (int k = 0; k < points; ++k) {
    auto* p = params[rng.below(params.size())];
    const std::size_t i = rng.below(p->value().size());
    const double saved = p->value()[i];
    p->value()[i] = saved + h;
    double up, down;
    {
      nd::Tape t(false);
      up = loss_of(t).item();
    }
    p->value()[i] = saved - h;
    {
      nd::Tape t(false);
      down = loss_of(t).item();
    }
    p->value()[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p->grad()[i];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3});
    out.max_rel_err = std::max(out.max_rel_err, rel);
    ++out.points;
  }
  return out;
}

std::vector<GradCheck> grad_check_all_ops(std::uint64_t seed, int points) {
  using nd::Shape;
  using T = nd::Tensor;
  Rng rng(seed);
  std::vector<GradCheck> out;
  auto run = [&](const std::string& op, std::vector<Shape> shapes, OpFn f, double lo = -1.0, double hi = 1.0) {
    out.push_back(grad_check(op, shapes, f, rng, points, lo, hi));
  };
  const std::vector<int> ids = {2, 0, 2, 4, 1};
  const std::vector<int> cols = {1, 0, 3, 2};

  run("add", {Shape{3, 4}, Shape{3, 4}}, [](const std::vector<T>& x) { return nd::add(x[0], x[1]); });
  run("add_row_broadcast", {Shape{3, 4}, Shape{1, 4}}, [](const std::vector<T>& x) { return nd::add(x[0], x[1]); });
  run("add_vector_broadcast", {Shape{3, 4}, Shape{4}}, [](const std::vector<T>& x) { return nd::add(x[0], x[1]); });
  run("add_scalar", {Shape{3, 4}, Shape{1}}, [](const std::vector<T>& x) { return nd::add(x[0], x[1]); });
  run("sub", {Shape{3, 4}, Shape{3, 4}}, [](const std::vector<T>& x) { return nd::sub(x[0], x[1]); });
  run("sub_row_broadcast", {Shape{3, 4}, Shape{1, 4}}, [](const std::vector<T>& x) { return nd::sub(x[0], x[1]); });
  run("mul", {Shape{3, 4}, Shape{3, 4}}, [](const std::vector<T>& x) { return nd::mul(x[0], x[1]); });
  run("mul_row_broadcast", {Shape{3, 4}, Shape{1, 4}}, [](const std::vector<T>& x) { return nd::mul(x[0], x[1]); });
  run("scale", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::scale(x[0], -1.7); });
  run("matmul", {Shape{3, 5}, Shape{5, 4}}, [](const std::vector<T>& x) { return nd::matmul(x[0], x[1]); });
  run("matmul_tiled", {Shape{9, 7}, Shape{7, 33}}, [](const std::vector<T>& x) { return nd::matmul(x[0], x[1]); });
  run("transpose", {Shape{3, 5}}, [](const std::vector<T>& x) { return nd::transpose(x[0]); });
  run("reshape", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::reshape(x[0], Shape{2, 6}); });
  run("reshape_rank3", {Shape{2, 6}},
      [](const std::vector<T>& x) { return nd::sum(nd::reshape(x[0], Shape{2, 3, 2}), 1); });
  run("concat_axis0", {Shape{2, 4}, Shape{3, 4}},
      [](const std::vector<T>& x) { return nd::concat({x[0], x[1]}, 0); });
  run("concat_axis1", {Shape{3, 2}, Shape{3, 5}},
      [](const std::vector<T>& x) { return nd::concat({x[0], x[1]}, 1); });
  run("slice_axis0", {Shape{5, 3}}, [](const std::vector<T>& x) { return nd::slice(x[0], 0, 1, 4); });
  run("slice_axis1", {Shape{3, 6}}, [](const std::vector<T>& x) { return nd::slice(x[0], 1, 2, 5); });
  run("embedding_lookup", {Shape{5, 3}}, [ids](const std::vector<T>& x) { return nd::embedding_lookup(x[0], ids); });
  run("gather", {Shape{4, 5}}, [cols](const std::vector<T>& x) { return nd::gather(x[0], cols); });
  run("tanh", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::tanh(x[0]); }, -2.0, 2.0);
  run("sigmoid", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::sigmoid(x[0]); }, -3.0, 3.0);
  run("relu", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::relu(x[0]); });
  run("softmax_axis0", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::softmax(x[0], 0); }, -2.0, 2.0);
  run("softmax_axis1", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::softmax(x[0], 1); }, -2.0, 2.0);
  run("log_softmax_axis0", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::log_softmax(x[0], 0); }, -2.0, 2.0);
  run("log_softmax_axis1", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::log_softmax(x[0], 1); }, -2.0, 2.0);
  run("logsumexp_axis0", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::logsumexp(x[0], 0); }, -2.0, 2.0);
  run("logsumexp_axis1", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::logsumexp(x[0], 1); }, -2.0, 2.0);
  run("nll", {Shape{1, 5}}, [](const std::vector<T>& x) { return nd::nll(x[0], 3); }, -2.0, 2.0);
  run("sum", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::sum(x[0]); });
  run("sum_axis0", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::sum(x[0], 0); });
  run("sum_axis1", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::sum(x[0], 1); });
  run("mean", {Shape{3, 4}}, [](const std::vector<T>& x) { return nd::mean(x[0]); });
  run("gru_cell", {Shape{3, 12}, Shape{3, 4}, Shape{4, 12}, Shape{12}},
      [](const std::vector<T>& x) { return nd::gru_cell(x[0], x[1], x[2], x[3]); });
  run("gru_cell_shared_input", {Shape{1, 12}, Shape{3, 4}, Shape{4, 12}, Shape{12}},
      [](const std::vector<T>& x) { return nd::gru_cell(x[0], x[1], x[2], x[3]); });
  run("gru_cell_tiled", {Shape{5, 48}, Shape{5, 16}, Shape{16, 48}, Shape{48}},
      [](const std::vector<T>& x) { return nd::gru_cell(x[0], x[1], x[2], x[3]); });
  return out;
}

// ---------------------------------------------------------------- graphs

EnvGraph make_graph(const std::vector<Vec3>& positions, const std::vector<std::pair<NodeId, NodeId>>& edges,
                    const std::string& env_id, std::size_t feature_dim) {
  std::vector<Node> nodes;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    Node n;
    n.id = static_cast<NodeId>(i);
    n.position = positions[i];
    n.room_label = "kitchen";
    n.landmarks = {"sofa"};
    n.visual_feature.assign(feature_dim, 0.0);
    n.visual_feature[i % feature_dim] = 1.0;
    nodes.push_back(std::move(n));
  }
  return EnvGraph(env_id, std::move(nodes), edges);
}

EnvGraph random_graph(Rng& rng, int n, double extra_edge_prob, const std::string& env_id) {
  std::vector<Vec3> pos;
  for (int i = 0; i < n; ++i) pos.push_back({rng.uniform(0.0, 6.0), rng.uniform(0.0, 6.0), rng.uniform(-0.2, 0.2)});
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (int i = 1; i < n; ++i) edges.emplace_back(static_cast<NodeId>(rng.below(static_cast<std::uint64_t>(i))), i);
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      const bool exists = std::any_of(edges.begin(), edges.end(), [&](const auto& e) {
        return (e.first == a && e.second == b) || (e.first == b && e.second == a);
      });
      if (!exists && rng.bernoulli(extra_edge_prob)) edges.emplace_back(a, b);
    }
  }
  return make_graph(pos, edges, env_id);
}

std::vector<NodeId> random_walk(const EnvGraph& g, Rng& rng, int len) {
  std::vector<NodeId> w{static_cast<NodeId>(rng.below(g.size()))};
  while (static_cast<int>(w.size()) < len) {
    const auto nb = g.neighbors(w.back());
    w.push_back(nb[rng.below(nb.size())]);
  }
  return w;
}

// ---------------------------------------------------------------- oracles

std::vector<std::vector<double>> floyd(const EnvGraph& g) {
  const auto n = g.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<std::vector<double>> d(n, std::vector<double>(n, inf));
  for (std::size_t i = 0; i < n; ++i) d[i][i] = 0.0;
  for (const auto& e : g.edges()) {
    const auto& a = g.node(e.a).position;
    const auto& b = g.node(e.b).position;
    const double len = std::sqrt((a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z));
    d[e.a][e.b] = d[e.b][e.a] = std::min(d[e.a][e.b], len);
  }
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) d[i][j] = std::min(d[i][j], d[i][k] + d[k][j]);
  return d;
}

namespace {

double warp(const std::vector<std::vector<double>>& d, const std::vector<NodeId>& p, const std::vector<NodeId>& r,
            std::size_t i, std::size_t j) {
  const double here = d[p[i]][r[j]];
  if (i + 1 == p.size() && j + 1 == r.size()) return here;
  double best = std::numeric_limits<double>::infinity();
  if (i + 1 < p.size()) best = std::min(best, warp(d, p, r, i + 1, j));
  if (j + 1 < r.size()) best = std::min(best, warp(d, p, r, i, j + 1));
  if (i + 1 < p.size() && j + 1 < r.size()) best = std::min(best, warp(d, p, r, i + 1, j + 1));
  return here + best;
}

double walk_length(const std::vector<std::vector<double>>& d, const std::vector<NodeId>& w) {
  double total = 0.0;
  for (std::size_t i = 1; i < w.size(); ++i) total += d[w[i - 1]][w[i]];
  return total;
}

// Index of the m'-th occurrence of P[s] in R, m' = min(n, m).
int footnote_index(const std::vector<NodeId>& r, const std::vector<NodeId>& p, std::size_t s) {
  const auto m = std::count(r.begin(), r.end(), p[s]);
  if (m == 0) return -1;
  const auto n = std::count(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(s) + 1, p[s]);
  const auto want = n < m ? n : m;
  long seen = 0;
  for (std::size_t i = 0; i < r.size(); ++i)
    if (r[i] == p[s] && ++seen == want) return static_cast<int>(i);
  return -1;
}

}  // namespace

double brute_dtw(const EnvGraph& g, const std::vector<NodeId>& p, const std::vector<NodeId>& r) {
  return warp(floyd(g), p, r, 0, 0);
}

double brute_cls(const EnvGraph& g, const std::vector<NodeId>& p, const std::vector<NodeId>& r, double d_th) {
  const auto d = floyd(g);
  double pc = 0.0;
  for (NodeId x : r) {
    double nearest = std::numeric_limits<double>::infinity();
    for (NodeId y : p) nearest = std::min(nearest, d[x][y]);
    pc += std::exp(-nearest / d_th);
  }
  pc /= static_cast<double>(r.size());
  const double epl = pc * walk_length(d, r);
  const double pl = walk_length(d, p);
  if (epl + std::abs(epl - pl) == 0.0) return pc;
  return pc * epl / (epl + std::abs(epl - pl));
}

Action brute_fidelity(const EnvGraph& g, const std::vector<NodeId>& r, const std::vector<NodeId>& p) {
  const auto d = floyd(g);
  const std::size_t t = p.size() - 1;
  const int j = footnote_index(r, p, t);
  if (j >= 0) return static_cast<std::size_t>(j) + 1 == r.size() ? Action::stop() : Action::move_to(r[j + 1]);

  std::size_t i = 0, t_prime = t;
  for (std::size_t s = 0; s < t; ++s) {
    const int k = footnote_index(r, p, s);
    if (k >= 0) {
      i = static_cast<std::size_t>(k);
      t_prime = s;
    }
  }
  std::vector<NodeId> r_prime;
  for (std::size_t k = i; k <= i + (t - t_prime) && k < r.size(); ++k) r_prime.push_back(r[k]);
  NodeId goal = r_prime.front();
  for (NodeId x : r_prime)
    if (d[p[t]][x] < d[p[t]][goal]) goal = x;

  for (NodeId v : g.neighbors(p[t])) {
    const double via = d[p[t]][v] + d[v][goal];
    if (std::abs(via - d[p[t]][goal]) <= 1e-9 * std::max(1.0, d[p[t]][goal])) return Action::move_to(v);
  }
  return Action::stop();
}

// ---------------------------------------------------------------- policies

namespace {

class ScriptedSession : public SelectorSession {
 public:
  explicit ScriptedSession(const ScriptedSelector::Probs* probs) : probs_(probs) {}
  StepScores scores(const AgentState& state, const std::vector<Action>& actions) override {
    StepScores s;
    for (double q : (*probs_)(state.current, state.t, actions)) s.scores.push_back(std::log(q));
    s.log_probs = s.scores;
    return s;
  }
  void advance(const AgentState&, const Action&) override {}
  std::unique_ptr<SelectorSession> clone() const override { return std::make_unique<ScriptedSession>(*this); }

 private:
  const ScriptedSelector::Probs* probs_;
};

}  // namespace

std::unique_ptr<SelectorSession> ScriptedSelector::start(const EnvGraph&, const Episode&) const {
  return std::make_unique<ScriptedSession>(&probs_);
}

LoopInstance loop_instance() {
  auto g = make_graph({{0, 0, 0}, {2, 0, 0}, {2, 2, 0}, {0, 2, 0}, {4, 2, 0}}, {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {2, 4}},
                      "loop");
  Episode e;
  e.episode_id = "loop-0";
  e.trajectory_id = "loop";
  e.env_id = "loop";
  e.start = 0;
  e.goal = 4;
  e.reference_path = {0, 1, 2, 4};
  e.instruction.ids = {kBos, kEos};

  // Preferred next node per node; everything else shares what is left.
  ScriptedSelector::Probs probs = [](NodeId node, int t, const std::vector<Action>& actions) {
    std::map<NodeId, std::map<std::int64_t, double>> table = {
        {0, {{1, 0.9}, {3, 0.05}, {-1, 0.05}}},
        {1, {{0, 0.05}, {2, 0.9}, {-1, 0.05}}},
        {2, {{1, 0.04}, {3, 0.6}, {4, 0.35}, {-1, 0.01}}},
        {3, {{0, 0.9}, {2, 0.05}, {-1, 0.05}}},
        {4, {{2, 0.1}, {-1, 0.9}}},
    };
    if (node == 0 && t > 0) table[0] = {{1, 0.05}, {3, 0.05}, {-1, 0.9}};
    std::vector<double> q;
    for (const auto& a : actions) q.push_back(table.at(node).at(a.code()));
    return q;
  };
  return {std::move(g), std::move(e), ScriptedSelector(std::move(probs))};
}

DatasetManifest tiny_manifest(int worlds, int unseen, int train_per_world, std::uint64_t seed) {
  WorldParams wp;
  wp.num_nodes = 16;
  const auto gs = generate_worlds(worlds, seed, wp);
  const auto vocab = Vocab::for_grammar(wp.room_palette, wp.landmark_palette);
  R2RCounts c;
  c.unseen_worlds = unseen;
  c.train_per_world = train_per_world;
  c.val_seen_per_world = 1;
  c.val_unseen_per_world = 2;
  c.min_hops = 3;
  c.max_hops = 4;
  return build_r2r_like(gs, vocab, c, seed + 1);
}

}  // namespace navgen::testing
