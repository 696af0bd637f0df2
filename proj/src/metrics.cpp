#include "navgen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include "navgen/error.hpp"
#include "navgen/learn.hpp"

namespace navgen {

double path_length(const EnvGraph& g, const std::vector<NodeId>& path) {
  double total = 0.0;
  for (std::size_t i = 1; i < path.size(); ++i) total += g.edge_length(path[i - 1], path[i]);
  return total;
}

double nav_error(const EnvGraph& g, const std::vector<NodeId>& path, NodeId goal) {
  if (path.empty()) throw PreconditionError("navigation error of an empty path");
  return g.distance(path.back(), goal);
}

int success(double nav_error, double threshold) { return nav_error <= threshold ? 1 : 0; }

double spl(int success, double shortest_length, double path_length) {
  if (shortest_length <= 0.0) return success;
  return success * shortest_length / std::max(path_length, shortest_length);
}

double cls(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference,
           double threshold) {
  if (path.empty() || reference.empty()) throw PreconditionError("coverage of an empty path");
  if (!(threshold > 0.0)) throw ConfigError("success distance must be positive");
  double pc = 0.0;
  for (NodeId r : reference) {
    double d = std::numeric_limits<double>::infinity();
    for (NodeId p : path) d = std::min(d, g.distance(r, p));
    pc += std::exp(-d / threshold);
  }
  pc /= static_cast<double>(reference.size());
  const double epl = pc * path_length(g, reference);
  const double denom = epl + std::abs(epl - path_length(g, path));
  const double ls = denom > 0.0 ? epl / denom : 1.0;
  return pc * ls;
}

double dtw(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference) {
  if (path.empty() || reference.empty()) throw PreconditionError("warping distance of an empty path");
  const auto n = path.size(), m = reference.size();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = inf;
    for (std::size_t j = 1; j <= m; ++j) {
      const double best = std::min({prev[j], cur[j - 1], prev[j - 1]});
      cur[j] = g.distance(path[i - 1], reference[j - 1]) + best;
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double ndtw(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference,
            double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("success distance must be positive");
  return std::exp(-dtw(g, path, reference) / (static_cast<double>(reference.size()) * threshold));
}

double sdtw(int success, double ndtw) { return success ? ndtw : 0.0; }

EpisodeMetrics score_episode(const EnvGraph& g, const Episode& e, const std::vector<NodeId>& path, double threshold) {
  EpisodeMetrics m;
  m.episode_id = e.episode_id;
  m.pl = path_length(g, path);
  m.ne = nav_error(g, path, e.goal);
  const int s = success(m.ne, threshold);
  m.sr = s;
  m.spl = spl(s, g.distance(e.start, e.goal), m.pl);
  m.cls = cls(g, path, e.reference_path, threshold);
  m.ndtw = ndtw(g, path, e.reference_path, threshold);
  m.sdtw = sdtw(s, m.ndtw);
  return m;
}

MetricsReport score_trajectories(const DatasetManifest& m, const std::vector<Trajectory>& trajectories,
                                 double threshold) {
  std::map<std::string, const Episode*> by_id;
  for (const auto& e : m.episodes) by_id.emplace(e.episode_id, &e);
  MetricsReport r;
  r.threshold = threshold;
  for (const auto& t : trajectories) {
    auto it = by_id.find(t.episode_id);
    if (it == by_id.end()) throw DataError("trajectory for unknown episode '" + t.episode_id + "'");
    const auto& g = m.world(it->second->env_id);
    validate_trajectory(g, t);
    r.episodes.push_back(score_episode(g, *it->second, t.nodes, threshold));
  }
  if (!r.episodes.empty()) {
    const double n = static_cast<double>(r.episodes.size());
    for (const auto& e : r.episodes) {
      r.mean.pl += e.pl;
      r.mean.ne += e.ne;
      r.mean.sr += e.sr;
      r.mean.spl += e.spl;
      r.mean.cls += e.cls;
      r.mean.ndtw += e.ndtw;
      r.mean.sdtw += e.sdtw;
    }
    for (double* v : {&r.mean.pl, &r.mean.ne, &r.mean.sr, &r.mean.spl, &r.mean.cls, &r.mean.ndtw, &r.mean.sdtw})
      *v /= n;
  }
  r.mean.episode_id = "mean";
  return r;
}

const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols = {"PL", "NE", "SR", "SPL", "CLS", "nDTW", "SDTW"};
  return cols;
}

std::vector<double> metric_values(const EpisodeMetrics& m) { return {m.pl, m.ne, m.sr, m.spl, m.cls, m.ndtw, m.sdtw}; }

namespace {

nlohmann::json row_json(const EpisodeMetrics& m) {
  nlohmann::json j = nlohmann::json::object();
  const auto vals = metric_values(m);
  for (std::size_t i = 0; i < vals.size(); ++i) j[metric_columns()[i]] = vals[i];
  return j;
}

}  // namespace

nlohmann::json to_json(const MetricsReport& r, bool per_episode) {
  nlohmann::json j = {{"schema", kMetricsSchema},
                      {"success_distance", r.threshold},
                      {"episodes", r.episodes.size()},
                      {"columns", metric_columns()},
                      {"mean", row_json(r.mean)}};
  if (per_episode) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& e : r.episodes) {
      auto row = row_json(e);
      row["episode_id"] = e.episode_id;
      rows.push_back(row);
    }
    j["per_episode"] = rows;
  }
  return j;
}

std::string metrics_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "episode_id";
  for (const auto& c : metric_columns()) out << ',' << c;
  out << '\n';
  auto line = [&](const EpisodeMetrics& m) {
    out << m.episode_id;
    for (double v : metric_values(m)) out << ',' << v;
    out << '\n';
  };
  for (const auto& e : r.episodes) line(e);
  line(r.mean);
  return out.str();
}

std::string to_string(CurveMode m) { return m == CurveMode::kOnReference ? "on_reference" : "own_rollout"; }

Action episode_teacher(const EnvGraph& g, const Episode& e, const AgentState& state) {
  if (e.flavor == Flavor::kR4R) return fidelity_reference_action(TeacherContext{&g, e.reference_path, state.path()});
  return teacher_action_shortest(g, state.current, e.goal);
}

namespace {

struct CurveAccumulator {
  std::vector<double> sum;
  std::vector<int> count;
  void add(std::size_t t, bool hit) {
    if (sum.size() <= t) {
      sum.resize(t + 1, 0.0);
      count.resize(t + 1, 0);
    }
    sum[t] += hit;
    ++count[t];
  }
  Curve finish() const {
    Curve c;
    c.count = count;
    for (std::size_t t = 0; t < sum.size(); ++t) c.value.push_back(count[t] ? sum[t] / count[t] : 0.0);
    return c;
  }
};

// Walks states of an episode and hands each one to `visit`, which returns the
// action that was chosen there. In on-reference mode the walk follows R.
template <typename Visit>
void walk_states(const EnvGraph& g, const Episode& e, CurveMode mode, int max_steps, Visit visit) {
  AgentState state = AgentState::begin(g, e.start);
  const auto& r = e.reference_path;
  while (true) {
    const auto actions = available_actions(g, state.current);
    const Action chosen = visit(state, actions);
    Action next;
    if (mode == CurveMode::kOnReference) {
      const auto t = static_cast<std::size_t>(state.t);
      if (t + 1 >= r.size()) break;
      next = Action::move_to(r[t + 1]);
    } else {
      if (chosen.is_stop()) break;
      next = chosen;
    }
    state = step(g, state, next);
    if (mode == CurveMode::kOwnRollout && state.t >= max_steps) break;
    visit.advance(state, next);
  }
}

}  // namespace

Curve precision_curve(const Selector& selector, const DatasetManifest& m, const std::vector<const Episode*>& episodes,
                      CurveMode mode, int max_steps) {
  CurveAccumulator acc;
  for (const Episode* e : episodes) {
    const auto& g = m.world(e->env_id);
    auto session = selector.start(g, *e);
    struct Visit {
      CurveAccumulator* acc;
      SelectorSession* session;
      const EnvGraph* g;
      const Episode* e;
      CurveMode mode;
      Action operator()(const AgentState& s, const std::vector<Action>& actions) {
        const auto sc = session->scores(s, actions);
        const Action chosen = actions[argmax_first(sc.scores)];
        const Action teacher =
            mode == CurveMode::kOnReference ? reference_teacher(*g, *e, s) : episode_teacher(*g, *e, s);
        acc->add(static_cast<std::size_t>(s.t), chosen == teacher);
        return chosen;
      }
      void advance(const AgentState& s, const Action& a) { session->advance(s, a); }
    };
    walk_states(g, *e, mode, max_steps > 0 ? max_steps : default_max_steps(e->flavor),
                Visit{&acc, session.get(), &g, e, mode});
  }
  return acc.finish();
}

Curve agreement_curve(const Selector& a, const Selector& b, const DatasetManifest& m,
                      const std::vector<const Episode*>& episodes, CurveMode mode, int max_steps) {
  CurveAccumulator acc;
  for (const Episode* e : episodes) {
    const auto& g = m.world(e->env_id);
    auto sa = a.start(g, *e);
    auto sb = b.start(g, *e);
    struct Visit {
      CurveAccumulator* acc;
      SelectorSession* a;
      SelectorSession* b;
      Action operator()(const AgentState& s, const std::vector<Action>& actions) {
        const Action ca = actions[argmax_first(a->scores(s, actions).scores)];
        const Action cb = actions[argmax_first(b->scores(s, actions).scores)];
        acc->add(static_cast<std::size_t>(s.t), ca == cb);
        return ca;
      }
      void advance(const AgentState& s, const Action& x) {
        a->advance(s, x);
        b->advance(s, x);
      }
    };
    walk_states(g, *e, mode, max_steps > 0 ? max_steps : default_max_steps(e->flavor), Visit{&acc, sa.get(), sb.get()});
  }
  return acc.finish();
}

}  // namespace navgen
