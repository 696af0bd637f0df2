#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/ndgrad.hpp"
#include "navgen/world.hpp"

namespace navgen {

enum class ModelKind { kFollower, kSpeaker };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
  int hidden = 64;
  int token_embed = 32;
  int feature_dim = 32;
  int vocab_size = 0;
  std::string vocab_hash;

  int action_dim() const { return 4 + feature_dim; }
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Gated recurrent fold of [visual feature; previous action embedding].
// Shared implementation for both heads; each model owns its own weights.
class HistoryEncoder {
 public:
  HistoryEncoder(ndgrad::ParameterStore& store, const std::string& prefix, const ModelConfig& config);

  std::size_t input_dim() const { return input_dim_; }
  // Rows of [feature; previous action] -> hidden state after each row, [S x H].
  // Row 0 is folded into the zero state.
  ndgrad::Tensor fold(ndgrad::Tape& tape, const ndgrad::Tensor& inputs) const;
  // One step from an explicit previous state [1 x H].
  ndgrad::Tensor step(ndgrad::Tape& tape, const ndgrad::Tensor& h_prev, std::span<const double> feature,
                      std::span<const double> prev_action) const;
  ndgrad::Tensor zero_state(ndgrad::Tape& tape) const;

 private:
  ndgrad::Parameter* w_x_;
  ndgrad::Parameter* b_x_;
  ndgrad::Parameter* w_h_;
  ndgrad::Parameter* b_h_;
  std::size_t hidden_;
  std::size_t input_dim_;
};

// h_t plus the memory of every earlier state, h_0 .. h_t as rows.
struct HistoryState {
  ndgrad::Tensor memory;  // [(t+1) x H]
  ndgrad::Tensor h() const;  // last row, [1 x H]
  int t() const { return static_cast<int>(memory.shape()[0]) - 1; }
};

// observations: t+1 visual features; actions: the t embeddings of moves taken.
HistoryState encode_history(ndgrad::Tape& tape, const HistoryEncoder& encoder,
                            const std::vector<std::vector<double>>& observations,
                            const std::vector<ActionEmbedding>& actions);

// Input row for one history step; prev_action is empty at t=0.
std::vector<double> history_input(std::span<const double> feature, const ActionEmbedding* prev_action,
                                  std::size_t action_dim);

// Candidates for a set of decisions, flattened into one row block. Rows that
// stand for Stop get their target feature from the model's stop vector.
struct CandidateSet {
  std::vector<std::vector<double>> rows;  // action embeddings; Stop rows carry zeros in the feature slot
  std::vector<bool> stop;
  std::vector<int> step;  // history row each candidate is conditioned on
};

class NavModel {
 public:
  NavModel(ModelKind kind, const ModelConfig& config, std::uint64_t seed);
  virtual ~NavModel() = default;
  NavModel(const NavModel&) = delete;
  NavModel& operator=(const NavModel&) = delete;

  ModelKind kind() const { return kind_; }
  const ModelConfig& config() const { return config_; }
  ndgrad::ParameterStore& params() { return store_; }
  const ndgrad::ParameterStore& params() const { return store_; }
  const HistoryEncoder& history() const { return *history_; }
  std::span<const double> stop_feature() const { return stop_->value(); }

  // Embeddings of the actions available at a node with this model's stop vector.
  std::vector<ActionEmbedding> embed_actions(const EnvGraph& g, NodeId node, const std::vector<Action>& actions) const;
  // [R x action_dim] with gradient into the stop vector.
  ndgrad::Tensor candidate_matrix(ndgrad::Tape& tape, const CandidateSet& c) const;

 protected:
  void init_uniform(ndgrad::Parameter& p, double bound);
  void init_normal(ndgrad::Parameter& p, double sd);
  ModelKind kind_;
  ModelConfig config_;
  ndgrad::ParameterStore store_;
  std::unique_ptr<HistoryEncoder> history_;
  ndgrad::Parameter* stop_;
  std::uint64_t seed_;
  std::uint64_t init_counter_ = 0;
};

// Bidirectional recurrent instruction encoder, attention with the history
// state as query and a bilinear candidate scorer.
class FollowerModel : public NavModel {
 public:
  FollowerModel(const ModelConfig& config, std::uint64_t seed);

  // Token encodings [T x H].
  ndgrad::Tensor encode_instruction(ndgrad::Tape& tape, const std::vector<int>& ids) const;
  // Logits for every candidate row, [R x 1]. states: [S x H].
  ndgrad::Tensor score(ndgrad::Tape& tape, const ndgrad::Tensor& encoded, const ndgrad::Tensor& states,
                       const CandidateSet& c) const;

 private:
  ndgrad::Parameter *embed_, *fw_x_, *fb_x_, *fw_h_, *fb_h_, *bw_x_, *bb_x_, *bw_h_, *bb_h_;
  ndgrad::Parameter *w_q_, *w_u_, *b_u_, *w_b_;
};

// Conditional language model p(X | a, h): the initial state comes from
// (h_t, action embedding), and every position attends over history memory.
class SpeakerPolicyModel : public NavModel {
 public:
  SpeakerPolicyModel(const ModelConfig& config, std::uint64_t seed);

  // Teacher-forced log-probabilities of ids[1..], one column per candidate
  // row, [K x R] with K = |ids| - 1. memory: [S x H]; each candidate attends
  // to memory rows 0..c.step[r].
  ndgrad::Tensor token_logprobs(ndgrad::Tape& tape, const ndgrad::Tensor& memory, const CandidateSet& c,
                                const std::vector<int>& ids) const;
  // Column sums of token_logprobs, [1 x R].
  ndgrad::Tensor lm_scores(ndgrad::Tape& tape, const ndgrad::Tensor& memory, const CandidateSet& c,
                           const std::vector<int>& ids) const;

  ndgrad::Parameter& output_weights() { return *w_o_; }
  ndgrad::Parameter& output_bias() { return *b_o_; }

 private:
  ndgrad::Parameter *embed_, *w_c_, *b_c_, *w_x_, *b_x_, *w_h_, *b_h_, *w_q_, *w_o_, *b_o_;
};

// Candidate block for a single decision at history row `step`.
CandidateSet single_step_candidates(const std::vector<ActionEmbedding>& embeddings, const std::vector<Action>& actions,
                                    int step);

// Follower logits aligned with `actions`, as a plain vector.
std::vector<double> follower_logits(const FollowerModel& model, const HistoryState& state,
                                    const std::vector<int>& instruction, const std::vector<ActionEmbedding>& candidates,
                                    const std::vector<Action>& actions);

// Per-position log p(w_k | a, h_t, w_<k) for k = 1..|X|-1.
std::vector<double> lm_token_logprobs(const SpeakerPolicyModel& model, const HistoryState& state,
                                      const ActionEmbedding& a, bool is_stop, const std::vector<int>& instruction);

std::unique_ptr<NavModel> make_model(ModelKind kind, const ModelConfig& config, std::uint64_t seed);

// Checkpoint metadata carries the model kind and config; `extra` is merged in.
void save_model(const NavModel& m, const std::string& path, const nlohmann::json& extra = nlohmann::json::object());
std::unique_ptr<NavModel> load_model(const std::string& path, nlohmann::json* meta = nullptr);

}  // namespace navgen
