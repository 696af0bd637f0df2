#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/dataset.hpp"
#include "navgen/models.hpp"
#include "navgen/ndgrad.hpp"
#include "navgen/policies.hpp"
#include "navgen/rng.hpp"

namespace navgen {

inline constexpr const char* kConfigSchema = "navgen-config/1";
inline constexpr double kDefaultEta = 1.0 / 3.0;

// Negative log-softmax of the reference logit. logits: any shape holding |A| values.
ndgrad::Tensor disc_loss(const ndgrad::Tensor& logits, std::size_t ref_index);
// -(lm[ref] - logsumexp(lm)); gradient reaches every candidate's score.
ndgrad::Tensor gen_loss(const ndgrad::Tensor& lm_scores, std::size_t ref_index);
double gen_loss_value(std::span<const double> lm_scores, std::size_t ref_index);

// Model-level losses at one decision; state lives on the tape used for backward.
ndgrad::Tensor disc_loss(const FollowerModel& follower, const HistoryState& state, const std::vector<int>& instruction,
                         const EnvGraph& g, NodeId node, std::size_t ref_index);
ndgrad::Tensor gen_loss(const SpeakerPolicyModel& speaker, const HistoryState& state,
                        const std::vector<int>& instruction, const EnvGraph& g, NodeId node, std::size_t ref_index);

// Stop within radius of the goal, else the first step of the shortest path.
Action teacher_action_shortest(const EnvGraph& g, NodeId current, NodeId goal, double at_goal_radius = 0.0);

struct TeacherContext {
  const EnvGraph* graph = nullptr;
  std::vector<NodeId> reference;   // R
  std::vector<NodeId> trajectory;  // P_0 .. P_t, the current node last
};

// Index into R matched by P_s, following the multi-visit rule, or -1 when P_s is not on R.
int matched_reference_index(const TeacherContext& ctx, std::size_t s);
// Fidelity-oriented teacher: follow R while on it; otherwise head for the
// closest node of R among the next t - t' entries after the last match.
Action fidelity_reference_action(const TeacherContext& ctx);

struct MixDecision {
  Action action;
  bool student = false;
};

// delta ~ Bernoulli(eta); delta = 1 samples the student, else the teacher action.
MixDecision mix_next_action(const Action& teacher, const ActionPosterior& student, double eta, Rng& rng);

enum class Supervision { kSupervised, kFidelity };
std::string to_string(Supervision s);
Supervision supervision_from_string(const std::string& s);

struct TrainConfig {
  ModelKind model = ModelKind::kFollower;
  double eta = kDefaultEta;
  double lr = 3e-3;
  std::string optimizer = "adam";
  int epochs = 12;
  int augmented_epochs = 6;  // leading epochs that also use augmented episodes
  int batch_size = 16;
  std::uint64_t seed = 1;
  Flavor flavor = Flavor::kR2R;
  Supervision supervision = Supervision::kFidelity;
  int max_steps = 0;  // 0 picks the flavor default
  double clip_norm = 5.0;
  int val_limit = 0;  // 0 validates on the whole val_seen split
  bool keep_best = true;  // return the weights of the epoch with the best val_seen SR
  double success_distance = 3.0;
  int hidden = 64;
  int token_embed = 32;
  double beta = kDefaultBeta;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct EpochLog {
  int epoch = 0;
  std::string phase;
  double loss = 0.0;  // mean per supervised decision
  int decisions = 0;
  int episodes = 0;
  double val_seen_sr = 0.0;
  double seconds = 0.0;
};

nlohmann::json to_json(const EpochLog& e);

struct TrainResult {
  std::unique_ptr<NavModel> model;
  std::vector<EpochLog> log;
};

// Runs every epoch; on_epoch (optional) sees each log record as it completes.
TrainResult train(const TrainConfig& config, const DatasetManifest& manifest,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Mean loss of one episode under teacher-student mixing, accumulated into the
// model's parameter gradients scaled by `weight`. Returns (summed loss, decisions).
std::pair<double, int> episode_gradient(NavModel& model, const TrainConfig& config, const EnvGraph& g,
                                        const Episode& episode, Rng& rng, double weight);

}  // namespace navgen
