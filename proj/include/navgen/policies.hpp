#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/dataset.hpp"
#include "navgen/models.hpp"
#include "navgen/world.hpp"

namespace navgen {

inline constexpr const char* kTrajectorySchema = "navgen-traj/1";
inline constexpr double kDefaultBeta = 0.5;

struct ActionPosterior {
  std::vector<Action> actions;
  std::vector<double> probs;
  std::vector<double> log_scores;  // unnormalized scores the probabilities came from

  // First index of the largest probability.
  std::size_t argmax() const;
};

// softmax(scores) computed through logsumexp.
ActionPosterior posterior_from_scores(const std::vector<Action>& actions, std::span<const double> scores);
std::vector<double> log_normalize(std::span<const double> scores);
// First index of the maximum; indices flagged in `excluded` are skipped.
std::size_t argmax_first(std::span<const double> scores, const std::vector<bool>* excluded = nullptr);

// Score-level selection rules shared by the model-backed policies.
std::size_t gen_select_index(std::span<const double> lm_scores);
// argmax of beta * lm + (1 - beta) * log_softmax(follower_logits).
std::size_t combined_select_index(std::span<const double> lm_scores, std::span<const double> follower_logits,
                                  double beta);
std::vector<double> combined_scores(std::span<const double> lm_scores, std::span<const double> follower_logits,
                                    double beta);

// Model-level operations at one decision: state is a history on some tape.
ActionPosterior disc_action_dist(const FollowerModel& follower, const HistoryState& state,
                                 const std::vector<int>& instruction, const EnvGraph& g, NodeId node);
ActionPosterior gen_action_posterior(const SpeakerPolicyModel& speaker, const HistoryState& state,
                                     const std::vector<int>& instruction, const EnvGraph& g, NodeId node);
Action gen_select(const SpeakerPolicyModel& speaker, const HistoryState& state, const std::vector<int>& instruction,
                  const EnvGraph& g, NodeId node);
Action combined_select(const SpeakerPolicyModel& speaker, const FollowerModel& follower, const HistoryState& speaker_state,
                       const HistoryState& follower_state, const std::vector<int>& instruction, const EnvGraph& g,
                       NodeId node, double beta);

// What a selector reports at one decision.
struct StepScores {
  std::vector<double> scores;     // selection criterion; argmax wins, ties to the lowest index
  std::vector<double> log_probs;  // normalized, used by the backtracking resume heuristic
};

// Per-episode decision state. Implementations own any recurrent history.
class SelectorSession {
 public:
  virtual ~SelectorSession() = default;
  virtual StepScores scores(const AgentState& state, const std::vector<Action>& actions) = 0;
  // Called after a move was taken; `state` is already advanced.
  virtual void advance(const AgentState& state, const Action& taken) = 0;
  virtual std::unique_ptr<SelectorSession> clone() const = 0;
};

class Selector {
 public:
  virtual ~Selector() = default;
  virtual std::unique_ptr<SelectorSession> start(const EnvGraph& g, const Episode& episode) const = 0;
  virtual std::string name() const = 0;
};

enum class PolicyKind { kDisc, kGen, kCombined };
std::string to_string(PolicyKind k);
PolicyKind policy_kind_from_string(const std::string& s);

// Greedy policy over trained models. Disc needs a follower, gen a speaker,
// combined both.
class ModelSelector : public Selector {
 public:
  ModelSelector(PolicyKind kind, const FollowerModel* follower, const SpeakerPolicyModel* speaker,
                double beta = kDefaultBeta);
  std::unique_ptr<SelectorSession> start(const EnvGraph& g, const Episode& episode) const override;
  std::string name() const override { return to_string(kind_); }
  PolicyKind kind() const { return kind_; }
  double beta() const { return beta_; }

 private:
  PolicyKind kind_;
  const FollowerModel* follower_;
  const SpeakerPolicyModel* speaker_;
  double beta_;
};

// Raw per-decision model outputs for one agent state, reused by analysis code.
class ModelSession : public SelectorSession {
 public:
  ModelSession(const EnvGraph& g, const Episode& episode, const FollowerModel* follower,
               const SpeakerPolicyModel* speaker, PolicyKind kind, double beta);

  StepScores scores(const AgentState& state, const std::vector<Action>& actions) override;
  void advance(const AgentState& state, const Action& taken) override;
  std::unique_ptr<SelectorSession> clone() const override { return std::make_unique<ModelSession>(*this); }

  std::vector<double> follower_logits(const AgentState& state, const std::vector<Action>& actions);
  std::vector<double> lm_scores(const AgentState& state, const std::vector<Action>& actions);
  // log p(w_k | a, h_t, w_<k), row-major [K x |A|].
  std::vector<double> token_logprobs(const AgentState& state, const std::vector<Action>& actions);

 private:
  struct Memory {
    std::vector<double> rows;  // h_0 .. h_t flattened
    std::size_t count = 0;
  };
  void fold(const NavModel& m, Memory& mem, NodeId node, const ActionEmbedding* prev);

  const EnvGraph* graph_;
  const std::vector<int>* instruction_;
  const FollowerModel* follower_;
  const SpeakerPolicyModel* speaker_;
  PolicyKind kind_;
  double beta_;
  Memory follower_memory_;
  Memory speaker_memory_;
  std::vector<double> encoded_;  // follower instruction encoding, [T x H]
};

// Scores 0 for the action a teacher callback picks and -inf for the rest.
class OracleSelector : public Selector {
 public:
  using Teacher = std::function<Action(const EnvGraph&, const Episode&, const AgentState&)>;
  explicit OracleSelector(Teacher teacher, std::string name = "oracle") : teacher_(teacher), name_(std::move(name)) {}
  std::unique_ptr<SelectorSession> start(const EnvGraph& g, const Episode& episode) const override;
  std::string name() const override { return name_; }

 private:
  Teacher teacher_;
  std::string name_;
};

// Follows the episode's reference path, then stops.
Action reference_teacher(const EnvGraph& g, const Episode& episode, const AgentState& state);

struct Trajectory {
  std::string episode_id;
  std::vector<NodeId> nodes;
  std::vector<Action> actions;  // includes the final Stop when the policy chose it
  bool stopped = false;         // false when the step budget forced the stop
  int steps = 0;                // edges traversed, including return walks
  int backtracks = 0;
  int trigger_step = -1;        // step at which backtracking first fired
  bool operator==(const Trajectory&) const = default;
};

nlohmann::json to_json(const Trajectory& t);
Trajectory trajectory_from_json(const nlohmann::json& j);
// One header record carrying schema and config hash, then one record per trajectory.
void save_trajectories(const std::string& path, const std::vector<Trajectory>& ts, const nlohmann::json& header);
std::vector<Trajectory> load_trajectories(const std::string& path, nlohmann::json* header = nullptr);
void validate_trajectory(const EnvGraph& g, const Trajectory& t);

int default_max_steps(Flavor f);

Trajectory rollout(const Selector& selector, const EnvGraph& g, const Episode& episode, int max_steps);

// On the second visit of any node, resumes from the earlier decision whose
// untried alternative maximizes -1/l, l being the summed log-probabilities of
// the chosen actions to that decision plus the alternative's log-probability.
// The agent walks the shortest path back; that motion is part of the trajectory.
Trajectory backtracking_rollout(const Selector& selector, const EnvGraph& g, const Episode& episode, int max_steps);

// Parallel evaluation in episode order; `jobs` <= 1 runs inline.
std::vector<Trajectory> run_policy(const Selector& selector, const DatasetManifest& m,
                                   const std::vector<const Episode*>& episodes, int max_steps, bool backtrack, int jobs);

}  // namespace navgen
