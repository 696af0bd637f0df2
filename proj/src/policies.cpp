#include "navgen/policies.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <thread>

#include "navgen/error.hpp"

namespace navgen {

using ndgrad::Shape;
using ndgrad::Tape;
using ndgrad::Tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double logsumexp_plain(std::span<const double> x) {
  double mx = -kInf;
  for (double v : x) mx = std::max(mx, v);
  if (!std::isfinite(mx)) return mx;
  double acc = 0.0;
  for (double v : x) acc += std::exp(v - mx);
  return mx + std::log(acc);
}

void check_beta(double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1], got " + std::to_string(beta));
}

}  // namespace

std::size_t ActionPosterior::argmax() const { return argmax_first(probs); }

std::vector<double> log_normalize(std::span<const double> scores) {
  if (scores.empty()) throw PreconditionError("cannot normalize an empty score vector");
  const double lse = logsumexp_plain(scores);
  std::vector<double> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] - lse;
  return out;
}

ActionPosterior posterior_from_scores(const std::vector<Action>& actions, std::span<const double> scores) {
  if (actions.size() != scores.size()) throw PreconditionError("actions and scores differ in count");
  ActionPosterior p;
  p.actions = actions;
  p.log_scores.assign(scores.begin(), scores.end());
  if (scores.empty()) throw PreconditionError("cannot normalize an empty score vector");
  // Shifted exponentials over their sum: the logsumexp form, but equal
  // scores divide 1 by |A| and so come out exactly uniform.
  const double top = *std::max_element(scores.begin(), scores.end());
  p.probs.resize(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) total += p.probs[i] = std::exp(scores[i] - top);
  for (auto& q : p.probs) q /= total;
  return p;
}

std::size_t argmax_first(std::span<const double> scores, const std::vector<bool>* excluded) {
  std::size_t best = scores.size();
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (excluded && (*excluded)[i]) continue;
    if (best == scores.size() || scores[i] > scores[best]) best = i;
  }
  if (best == scores.size()) throw PreconditionError("no selectable action");
  return best;
}

std::size_t gen_select_index(std::span<const double> lm_scores) { return argmax_first(lm_scores); }

std::vector<double> combined_scores(std::span<const double> lm_scores, std::span<const double> follower_logits,
                                    double beta) {
  check_beta(beta);
  if (lm_scores.size() != follower_logits.size()) throw PreconditionError("score vectors differ in length");
  const auto lf = log_normalize(follower_logits);
  std::vector<double> out(lm_scores.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = beta * lm_scores[i] + (1.0 - beta) * lf[i];
  return out;
}

std::size_t combined_select_index(std::span<const double> lm_scores, std::span<const double> follower_logits,
                                  double beta) {
  return argmax_first(combined_scores(lm_scores, follower_logits, beta));
}

namespace {

std::vector<double> speaker_scores_at(const SpeakerPolicyModel& speaker, const HistoryState& state,
                                      const std::vector<int>& instruction, const EnvGraph& g, NodeId node,
                                      const std::vector<Action>& actions) {
  Tape& tape = state.memory.tape();
  const auto c = single_step_candidates(speaker.embed_actions(g, node, actions), actions, state.t());
  const Tensor s = speaker.lm_scores(tape, state.memory, c, instruction);
  return {s.values().begin(), s.values().end()};
}

}  // namespace

ActionPosterior disc_action_dist(const FollowerModel& follower, const HistoryState& state,
                                 const std::vector<int>& instruction, const EnvGraph& g, NodeId node) {
  const auto actions = available_actions(g, node);
  const auto logits = follower_logits(follower, state, instruction, follower.embed_actions(g, node, actions), actions);
  return posterior_from_scores(actions, logits);
}

ActionPosterior gen_action_posterior(const SpeakerPolicyModel& speaker, const HistoryState& state,
                                     const std::vector<int>& instruction, const EnvGraph& g, NodeId node) {
  const auto actions = available_actions(g, node);
  return posterior_from_scores(actions, speaker_scores_at(speaker, state, instruction, g, node, actions));
}

Action gen_select(const SpeakerPolicyModel& speaker, const HistoryState& state, const std::vector<int>& instruction,
                  const EnvGraph& g, NodeId node) {
  const auto actions = available_actions(g, node);
  return actions[gen_select_index(speaker_scores_at(speaker, state, instruction, g, node, actions))];
}

Action combined_select(const SpeakerPolicyModel& speaker, const FollowerModel& follower,
                       const HistoryState& speaker_state, const HistoryState& follower_state,
                       const std::vector<int>& instruction, const EnvGraph& g, NodeId node, double beta) {
  check_beta(beta);
  const auto actions = available_actions(g, node);
  const auto lm = speaker_scores_at(speaker, speaker_state, instruction, g, node, actions);
  const auto f = follower_logits(follower, follower_state, instruction, follower.embed_actions(g, node, actions), actions);
  return actions[combined_select_index(lm, f, beta)];
}

std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::kDisc:
      return "disc";
    case PolicyKind::kGen:
      return "gen";
    case PolicyKind::kCombined:
      return "combined";
  }
  return "disc";
}

PolicyKind policy_kind_from_string(const std::string& s) {
  if (s == "disc") return PolicyKind::kDisc;
  if (s == "gen") return PolicyKind::kGen;
  if (s == "combined") return PolicyKind::kCombined;
  throw ConfigError("unknown policy '" + s + "' (expected disc, gen or combined)");
}

// ---------------------------------------------------------------- model sessions

ModelSelector::ModelSelector(PolicyKind kind, const FollowerModel* follower, const SpeakerPolicyModel* speaker,
                             double beta)
    : kind_(kind), follower_(follower), speaker_(speaker), beta_(beta) {
  check_beta(beta);
  if ((kind == PolicyKind::kDisc || kind == PolicyKind::kCombined) && !follower)
    throw ConfigError("policy '" + to_string(kind) + "' needs a follower checkpoint");
  if ((kind == PolicyKind::kGen || kind == PolicyKind::kCombined) && !speaker)
    throw ConfigError("policy '" + to_string(kind) + "' needs a speaker checkpoint");
}

std::unique_ptr<SelectorSession> ModelSelector::start(const EnvGraph& g, const Episode& episode) const {
  return std::make_unique<ModelSession>(g, episode, follower_, speaker_, kind_, beta_);
}

ModelSession::ModelSession(const EnvGraph& g, const Episode& episode, const FollowerModel* follower,
                           const SpeakerPolicyModel* speaker, PolicyKind kind, double beta)
    : graph_(&g),
      instruction_(&episode.instruction.ids),
      follower_(follower),
      speaker_(speaker),
      kind_(kind),
      beta_(beta) {
  if (follower_) {
    fold(*follower_, follower_memory_, episode.start, nullptr);
    Tape tape(false);
    const Tensor enc = follower_->encode_instruction(tape, *instruction_);
    encoded_.assign(enc.values().begin(), enc.values().end());
  }
  if (speaker_) fold(*speaker_, speaker_memory_, episode.start, nullptr);
}

void ModelSession::fold(const NavModel& m, Memory& mem, NodeId node, const ActionEmbedding* prev) {
  const auto H = static_cast<std::size_t>(m.config().hidden);
  Tape tape(false);
  Tensor h_prev = mem.count == 0 ? m.history().zero_state(tape)
                                 : tape.constant(Shape{1, H}, std::vector<double>(mem.rows.end() - static_cast<std::ptrdiff_t>(H),
                                                                                 mem.rows.end()));
  const auto prev_flat = prev ? prev->flatten() : std::vector<double>(static_cast<std::size_t>(m.config().action_dim()), 0.0);
  const Tensor h = m.history().step(tape, h_prev, graph_->node(node).visual_feature, prev_flat);
  mem.rows.insert(mem.rows.end(), h.values().begin(), h.values().end());
  ++mem.count;
}

void ModelSession::advance(const AgentState& state, const Action& taken) {
  if (taken.is_stop()) return;
  const auto path = state.path();
  if (path.size() < 2) throw PreconditionError("advance called before any move");
  const NodeId from = path[path.size() - 2];
  if (follower_) {
    const auto e = action_embedding(*graph_, from, taken, follower_->stop_feature());
    fold(*follower_, follower_memory_, state.current, &e);
  }
  if (speaker_) {
    const auto e = action_embedding(*graph_, from, taken, speaker_->stop_feature());
    fold(*speaker_, speaker_memory_, state.current, &e);
  }
}

std::vector<double> ModelSession::follower_logits(const AgentState& state, const std::vector<Action>& actions) {
  if (!follower_) throw ConfigError("session has no follower");
  const auto H = static_cast<std::size_t>(follower_->config().hidden);
  Tape tape(false);
  const Tensor enc = tape.constant(Shape{encoded_.size() / H, H}, encoded_);
  const Tensor h = tape.constant(Shape{1, H}, std::vector<double>(follower_memory_.rows.end() - static_cast<std::ptrdiff_t>(H),
                                                                  follower_memory_.rows.end()));
  const auto c = single_step_candidates(follower_->embed_actions(*graph_, state.current, actions), actions, 0);
  const Tensor out = follower_->score(tape, enc, h, c);
  return {out.values().begin(), out.values().end()};
}

std::vector<double> ModelSession::token_logprobs(const AgentState& state, const std::vector<Action>& actions) {
  if (!speaker_) throw ConfigError("session has no speaker");
  const auto H = static_cast<std::size_t>(speaker_->config().hidden);
  Tape tape(false);
  const Tensor mem = tape.constant(Shape{speaker_memory_.count, H}, speaker_memory_.rows);
  const auto c = single_step_candidates(speaker_->embed_actions(*graph_, state.current, actions), actions,
                                        static_cast<int>(speaker_memory_.count) - 1);
  const Tensor out = speaker_->token_logprobs(tape, mem, c, *instruction_);
  return {out.values().begin(), out.values().end()};
}

std::vector<double> ModelSession::lm_scores(const AgentState& state, const std::vector<Action>& actions) {
  const auto tok = token_logprobs(state, actions);
  const auto A = actions.size();
  std::vector<double> out(A, 0.0);
  for (std::size_t i = 0; i < tok.size(); ++i) out[i % A] += tok[i];
  return out;
}

StepScores ModelSession::scores(const AgentState& state, const std::vector<Action>& actions) {
  StepScores s;
  switch (kind_) {
    case PolicyKind::kDisc:
      s.scores = follower_logits(state, actions);
      break;
    case PolicyKind::kGen:
      s.scores = lm_scores(state, actions);
      break;
    case PolicyKind::kCombined:
      s.scores = combined_scores(lm_scores(state, actions), follower_logits(state, actions), beta_);
      break;
  }
  s.log_probs = log_normalize(s.scores);
  return s;
}

// ---------------------------------------------------------------- oracle

namespace {

class OracleSession : public SelectorSession {
 public:
  OracleSession(const EnvGraph& g, const Episode& e, const OracleSelector::Teacher& teacher)
      : graph_(&g), episode_(&e), teacher_(&teacher) {}

  StepScores scores(const AgentState& state, const std::vector<Action>& actions) override {
    const Action want = (*teacher_)(*graph_, *episode_, state);
    StepScores s;
    s.scores.assign(actions.size(), -kInf);
    for (std::size_t i = 0; i < actions.size(); ++i) {
      if (actions[i] == want) s.scores[i] = 0.0;
    }
    s.log_probs = s.scores;
    return s;
  }
  void advance(const AgentState&, const Action&) override {}
  std::unique_ptr<SelectorSession> clone() const override { return std::make_unique<OracleSession>(*this); }

 private:
  const EnvGraph* graph_;
  const Episode* episode_;
  const OracleSelector::Teacher* teacher_;
};

}  // namespace

std::unique_ptr<SelectorSession> OracleSelector::start(const EnvGraph& g, const Episode& episode) const {
  return std::make_unique<OracleSession>(g, episode, teacher_);
}

Action reference_teacher(const EnvGraph&, const Episode& episode, const AgentState& state) {
  const auto& r = episode.reference_path;
  const auto t = static_cast<std::size_t>(state.t);
  if (t + 1 < r.size() && r[t] == state.current) return Action::move_to(r[t + 1]);
  return Action::stop();
}

// ---------------------------------------------------------------- trajectories

nlohmann::json to_json(const Trajectory& t) {
  std::vector<std::int64_t> codes;
  for (const auto& a : t.actions) codes.push_back(a.code());
  return {{"episode_id", t.episode_id}, {"nodes", t.nodes},           {"actions", codes},
          {"stopped", t.stopped},       {"steps", t.steps},           {"backtracks", t.backtracks},
          {"trigger_step", t.trigger_step}};
}

Trajectory trajectory_from_json(const nlohmann::json& j) {
  Trajectory t;
  t.episode_id = j.at("episode_id").get<std::string>();
  t.nodes = j.at("nodes").get<std::vector<NodeId>>();
  for (auto c : j.at("actions").get<std::vector<std::int64_t>>()) t.actions.push_back(Action::from_code(c));
  t.stopped = j.at("stopped").get<bool>();
  t.steps = j.at("steps").get<int>();
  t.backtracks = j.value("backtracks", 0);
  t.trigger_step = j.value("trigger_step", -1);
  return t;
}

void save_trajectories(const std::string& path, const std::vector<Trajectory>& ts, const nlohmann::json& header) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  nlohmann::json h = header.is_object() ? header : nlohmann::json::object();
  h["schema"] = kTrajectorySchema;
  h["count"] = ts.size();
  out << h.dump() << '\n';
  for (const auto& t : ts) out << to_json(t).dump() << '\n';
}

std::vector<Trajectory> load_trajectories(const std::string& path, nlohmann::json* header) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::vector<Trajectory> out;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_header) {
        if (j.value("schema", std::string()) != kTrajectorySchema)
          throw DataError(path + ":" + std::to_string(lineno) + ": expected schema '" + kTrajectorySchema + "'");
        if (header) *header = j;
        have_header = true;
        continue;
      }
      out.push_back(trajectory_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_header) throw DataError(path + ": missing trajectory header");
  return out;
}

void validate_trajectory(const EnvGraph& g, const Trajectory& t) {
  if (t.nodes.empty()) throw DataError("trajectory '" + t.episode_id + "' has no nodes");
  for (NodeId n : t.nodes) {
    if (!g.contains(n)) throw DataError("trajectory '" + t.episode_id + "' visits unknown node " + std::to_string(n));
  }
  for (std::size_t i = 1; i < t.nodes.size(); ++i) {
    if (!g.adjacent(t.nodes[i - 1], t.nodes[i]))
      throw DataError("trajectory '" + t.episode_id + "' jumps from " + std::to_string(t.nodes[i - 1]) + " to " +
                      std::to_string(t.nodes[i]));
  }
  if (t.steps != static_cast<int>(t.nodes.size()) - 1)
    throw DataError("trajectory '" + t.episode_id + "' step count disagrees with its nodes");
}

int default_max_steps(Flavor f) { return f == Flavor::kR4R ? 40 : 20; }

// ---------------------------------------------------------------- rollouts

namespace {

struct Snapshot {
  NodeId node;
  std::unique_ptr<SelectorSession> session;
  double cumulative;  // summed log-probabilities of chosen actions before this decision
  std::vector<double> log_probs;
  std::vector<Action> actions;
  std::vector<bool> tried;
};

double resume_score(double ell) {
  if (ell == 0.0) return kInf;
  if (!std::isfinite(ell)) return 0.0;
  return -1.0 / ell;
}

Trajectory run(const Selector& selector, const EnvGraph& g, const Episode& episode, int max_steps, bool backtrack) {
  if (max_steps < 1) throw ConfigError("max_steps must be at least 1");
  if (episode.env_id != g.env_id()) throw PreconditionError("episode and graph environments differ");
  AgentState state = AgentState::begin(g, episode.start);
  auto session = selector.start(g, episode);
  Trajectory traj;
  traj.episode_id = episode.episode_id;
  std::map<NodeId, int> visits{{episode.start, 1}};
  std::vector<Snapshot> snapshots;
  double cumulative = 0.0;
  bool done = false;

  auto move = [&](const Action& a) {
    state = step(g, state, a);
    traj.actions.push_back(a);
    session->advance(state, a);
    return ++visits[a.target];
  };

  while (!done) {
    if (state.t >= max_steps) break;
    const auto actions = available_actions(g, state.current);
    const auto sc = session->scores(state, actions);
    const std::size_t idx = argmax_first(sc.scores);
    if (backtrack) {
      Snapshot snap{state.current, session->clone(), cumulative, sc.log_probs, actions,
                    std::vector<bool>(actions.size(), false)};
      snap.tried[idx] = true;
      snapshots.push_back(std::move(snap));
    }
    if (actions[idx].is_stop()) {
      traj.actions.push_back(actions[idx]);
      traj.stopped = true;
      break;
    }
    cumulative += sc.log_probs[idx];
    int count = move(actions[idx]);

    while (backtrack && count == 2 && !done) {
      // pick the resume decision and alternative
      std::size_t best_s = 0, best_a = 0;
      double best = -kInf;
      bool found = false;
      for (std::size_t s = 0; s < snapshots.size(); ++s) {
        for (std::size_t a = 0; a < snapshots[s].actions.size(); ++a) {
          if (snapshots[s].tried[a]) continue;
          const double score = resume_score(snapshots[s].cumulative + snapshots[s].log_probs[a]);
          if (!found || score > best) {
            best = score;
            best_s = s;
            best_a = a;
            found = true;
          }
        }
      }
      if (!found) break;
      Snapshot& snap = snapshots[best_s];
      snap.tried[best_a] = true;
      if (traj.trigger_step < 0) traj.trigger_step = state.t;
      ++traj.backtracks;

      const auto walk = shortest_path(g, state.current, snap.node).path;
      for (std::size_t i = 1; i < walk.size(); ++i) {
        if (state.t >= max_steps) {
          done = true;
          break;
        }
        state = step(g, state, Action::move_to(walk[i]));
        traj.actions.push_back(Action::move_to(walk[i]));
      }
      if (done) break;
      session = snap.session->clone();
      cumulative = snap.cumulative + snap.log_probs[best_a];
      const Action alt = snap.actions[best_a];
      if (alt.is_stop()) {
        traj.actions.push_back(alt);
        traj.stopped = true;
        done = true;
        break;
      }
      if (state.t >= max_steps) {
        done = true;
        break;
      }
      count = move(alt);
    }
  }
  traj.nodes = state.path();
  traj.steps = state.t;
  return traj;
}

}  // namespace

Trajectory rollout(const Selector& selector, const EnvGraph& g, const Episode& episode, int max_steps) {
  return run(selector, g, episode, max_steps, false);
}

Trajectory backtracking_rollout(const Selector& selector, const EnvGraph& g, const Episode& episode, int max_steps) {
  return run(selector, g, episode, max_steps, true);
}

std::vector<Trajectory> run_policy(const Selector& selector, const DatasetManifest& m,
                                   const std::vector<const Episode*>& episodes, int max_steps, bool backtrack,
                                   int jobs) {
  std::vector<Trajectory> out(episodes.size());
  auto work = [&](std::size_t i) {
    const Episode& e = *episodes[i];
    const int budget = max_steps > 0 ? max_steps : default_max_steps(e.flavor);
    out[i] = run(selector, m.world(e.env_id), e, budget, backtrack);
  };
  const auto n = static_cast<std::size_t>(std::max(1, jobs));
  if (n == 1 || episodes.size() < 2) {
    for (std::size_t i = 0; i < episodes.size(); ++i) work(i);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(n);
  for (std::size_t w = 0; w < n; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < episodes.size(); i += n) work(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

}  // namespace navgen
