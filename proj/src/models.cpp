#include "navgen/models.hpp"

#include <cmath>
#include <fstream>

#include "navgen/error.hpp"
#include "navgen/rng.hpp"

namespace navgen {

using ndgrad::Parameter;
using ndgrad::Shape;
using ndgrad::Tape;
using ndgrad::Tensor;

namespace nd = ndgrad;

std::string to_string(ModelKind k) { return k == ModelKind::kFollower ? "follower" : "speaker"; }

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "follower" || s == "disc") return ModelKind::kFollower;
  if (s == "speaker" || s == "gen") return ModelKind::kSpeaker;
  throw ConfigError("unknown model kind '" + s + "' (expected follower or speaker)");
}

void ModelConfig::validate() const {
  if (hidden < 2 || hidden % 2 != 0) throw ConfigError("hidden size must be an even number >= 2");
  if (token_embed < 1) throw ConfigError("token embedding size must be positive");
  if (feature_dim < 1) throw ConfigError("feature dimension must be positive");
  if (vocab_size < 5) throw ConfigError("vocabulary size must cover the reserved tokens");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"hidden", c.hidden},
          {"token_embed", c.token_embed},
          {"feature_dim", c.feature_dim},
          {"vocab_size", c.vocab_size},
          {"vocab_hash", c.vocab_hash}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.hidden = j.at("hidden").get<int>();
    c.token_embed = j.at("token_embed").get<int>();
    c.feature_dim = j.at("feature_dim").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.vocab_hash = j.value("vocab_hash", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------- history

HistoryEncoder::HistoryEncoder(nd::ParameterStore& store, const std::string& prefix, const ModelConfig& config)
    : hidden_(static_cast<std::size_t>(config.hidden)),
      input_dim_(static_cast<std::size_t>(config.feature_dim + config.action_dim())) {
  const auto H = hidden_;
  w_x_ = &store.add(prefix + ".w_x", Shape{input_dim_, 3 * H});
  b_x_ = &store.add(prefix + ".b_x", Shape{3 * H});
  w_h_ = &store.add(prefix + ".w_h", Shape{H, 3 * H});
  b_h_ = &store.add(prefix + ".b_h", Shape{3 * H});
}

Tensor HistoryEncoder::zero_state(Tape& tape) const {
  return tape.constant(Shape{1, hidden_}, std::vector<double>(hidden_, 0.0));
}

Tensor HistoryEncoder::fold(Tape& tape, const Tensor& inputs) const {
  if (inputs.shape().rank() != 2 || inputs.shape()[1] != input_dim_)
    throw ShapeError("history inputs must be [S x " + std::to_string(input_dim_) + "], got " + inputs.shape().str());
  const Tensor xp = nd::add(nd::matmul(inputs, tape.param(*w_x_)), tape.param(*b_x_));
  const Tensor wh = tape.param(*w_h_);
  const Tensor bh = tape.param(*b_h_);
  Tensor h = zero_state(tape);
  std::vector<Tensor> rows;
  const auto S = inputs.shape()[0];
  for (std::size_t s = 0; s < S; ++s) {
    h = nd::gru_cell(nd::slice(xp, 0, s, s + 1), h, wh, bh);
    rows.push_back(h);
  }
  return rows.size() == 1 ? rows[0] : nd::concat(rows, 0);
}

Tensor HistoryEncoder::step(Tape& tape, const Tensor& h_prev, std::span<const double> feature,
                            std::span<const double> prev_action) const {
  std::vector<double> row(feature.begin(), feature.end());
  row.insert(row.end(), prev_action.begin(), prev_action.end());
  if (row.size() != input_dim_) throw ShapeError("history step input has wrong width");
  const Tensor x = tape.constant(Shape{1, input_dim_}, std::move(row));
  const Tensor xp = nd::add(nd::matmul(x, tape.param(*w_x_)), tape.param(*b_x_));
  return nd::gru_cell(xp, h_prev, tape.param(*w_h_), tape.param(*b_h_));
}

Tensor HistoryState::h() const {
  const auto n = memory.shape()[0];
  return nd::slice(memory, 0, n - 1, n);
}

std::vector<double> history_input(std::span<const double> feature, const ActionEmbedding* prev_action,
                                  std::size_t action_dim) {
  std::vector<double> row(feature.begin(), feature.end());
  if (prev_action) {
    const auto a = prev_action->flatten();
    if (a.size() != action_dim) throw ShapeError("action embedding has wrong width");
    row.insert(row.end(), a.begin(), a.end());
  } else {
    row.resize(row.size() + action_dim, 0.0);
  }
  return row;
}

HistoryState encode_history(Tape& tape, const HistoryEncoder& encoder,
                            const std::vector<std::vector<double>>& observations,
                            const std::vector<ActionEmbedding>& actions) {
  if (observations.size() != actions.size() + 1)
    throw PreconditionError("history needs one more observation than actions, got " +
                            std::to_string(observations.size()) + " and " + std::to_string(actions.size()));
  const std::size_t width = encoder.input_dim();
  const std::size_t feature_dim = observations[0].size();
  if (feature_dim >= width) throw ShapeError("observation wider than the history input");
  const std::size_t action_dim = width - feature_dim;
  std::vector<double> flat;
  for (std::size_t s = 0; s < observations.size(); ++s) {
    if (observations[s].size() != feature_dim) throw ShapeError("observations differ in width");
    const auto row = history_input(observations[s], s == 0 ? nullptr : &actions[s - 1], action_dim);
    flat.insert(flat.end(), row.begin(), row.end());
  }
  const Tensor inputs = tape.constant(Shape{observations.size(), width}, std::move(flat));
  return HistoryState{encoder.fold(tape, inputs)};
}

// ---------------------------------------------------------------- base

NavModel::NavModel(ModelKind kind, const ModelConfig& config, std::uint64_t seed)
    : kind_(kind), config_(config), seed_(seed) {
  config_.validate();
  history_ = std::make_unique<HistoryEncoder>(store_, "history", config_);
  stop_ = &store_.add("stop_feature", Shape{static_cast<std::size_t>(config_.feature_dim)});
  const double hb = 1.0 / std::sqrt(static_cast<double>(config_.hidden));
  for (const char* n : {"history.w_x", "history.w_h", "history.b_x", "history.b_h"}) init_uniform(store_.get(n), hb);
  init_normal(*stop_, 0.1);
}

void NavModel::init_uniform(Parameter& p, double bound) {
  Rng rng(seed_, mix64(hash_string(p.name()), ++init_counter_));
  for (auto& v : p.value()) v = rng.uniform(-bound, bound);
}

void NavModel::init_normal(Parameter& p, double sd) {
  Rng rng(seed_, mix64(hash_string(p.name()), ++init_counter_));
  for (auto& v : p.value()) v = sd * rng.normal();
}

std::vector<ActionEmbedding> NavModel::embed_actions(const EnvGraph& g, NodeId node,
                                                     const std::vector<Action>& actions) const {
  std::vector<ActionEmbedding> out;
  out.reserve(actions.size());
  for (const auto& a : actions) out.push_back(action_embedding(g, node, a, stop_feature()));
  return out;
}

Tensor NavModel::candidate_matrix(Tape& tape, const CandidateSet& c) const {
  const auto R = c.rows.size();
  const auto D = static_cast<std::size_t>(config_.action_dim());
  if (R == 0) throw PreconditionError("empty candidate set");
  if (c.stop.size() != R || c.step.size() != R) throw ShapeError("candidate set fields differ in length");
  std::vector<double> flat;
  flat.reserve(R * D);
  std::vector<double> stop_mask(R, 0.0);
  bool any_stop = false;
  for (std::size_t r = 0; r < R; ++r) {
    if (c.rows[r].size() != D) throw ShapeError("candidate embedding has wrong width");
    if (c.stop[r]) {
      flat.insert(flat.end(), c.rows[r].begin(), c.rows[r].begin() + 4);
      flat.resize(flat.size() + D - 4, 0.0);
      stop_mask[r] = 1.0;
      any_stop = true;
    } else {
      flat.insert(flat.end(), c.rows[r].begin(), c.rows[r].end());
    }
  }
  Tensor m = tape.constant(Shape{R, D}, std::move(flat));
  if (!any_stop) return m;
  const Tensor stop_row = nd::concat(
      {tape.constant(Shape{1, 4}, std::vector<double>(4, 0.0)),
       nd::reshape(tape.param(*stop_), Shape{1, static_cast<std::size_t>(config_.feature_dim)})},
      1);
  return nd::add(m, nd::matmul(tape.constant(Shape{R, 1}, std::move(stop_mask)), stop_row));
}

CandidateSet single_step_candidates(const std::vector<ActionEmbedding>& embeddings, const std::vector<Action>& actions,
                                    int step) {
  if (embeddings.size() != actions.size()) throw PreconditionError("candidate embeddings and actions differ in count");
  CandidateSet c;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    c.rows.push_back(embeddings[i].flatten());
    c.stop.push_back(actions[i].is_stop());
    c.step.push_back(step);
  }
  return c;
}

// ---------------------------------------------------------------- follower

FollowerModel::FollowerModel(const ModelConfig& config, std::uint64_t seed)
    : NavModel(ModelKind::kFollower, config, seed) {
  const auto H = static_cast<std::size_t>(config_.hidden);
  const auto h2 = H / 2;
  const auto E = static_cast<std::size_t>(config_.token_embed);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto D = static_cast<std::size_t>(config_.action_dim());
  embed_ = &store_.add("follower.embed", Shape{V, E});
  fw_x_ = &store_.add("follower.fwd.w_x", Shape{E, 3 * h2});
  fb_x_ = &store_.add("follower.fwd.b_x", Shape{3 * h2});
  fw_h_ = &store_.add("follower.fwd.w_h", Shape{h2, 3 * h2});
  fb_h_ = &store_.add("follower.fwd.b_h", Shape{3 * h2});
  bw_x_ = &store_.add("follower.bwd.w_x", Shape{E, 3 * h2});
  bb_x_ = &store_.add("follower.bwd.b_x", Shape{3 * h2});
  bw_h_ = &store_.add("follower.bwd.w_h", Shape{h2, 3 * h2});
  bb_h_ = &store_.add("follower.bwd.b_h", Shape{3 * h2});
  w_q_ = &store_.add("follower.w_q", Shape{H, H});
  w_u_ = &store_.add("follower.w_u", Shape{2 * H, H});
  b_u_ = &store_.add("follower.b_u", Shape{H});
  w_b_ = &store_.add("follower.w_b", Shape{H, D});

  const double eh = 1.0 / std::sqrt(static_cast<double>(h2));
  init_normal(*embed_, 0.1);
  for (Parameter* p : {fw_x_, fb_x_, fw_h_, fb_h_, bw_x_, bb_x_, bw_h_, bb_h_}) init_uniform(*p, eh);
  const double hb = 1.0 / std::sqrt(static_cast<double>(H));
  init_uniform(*w_q_, hb);
  init_uniform(*w_u_, 1.0 / std::sqrt(2.0 * static_cast<double>(H)));
  init_uniform(*b_u_, hb);
  init_uniform(*w_b_, hb);
}

Tensor FollowerModel::encode_instruction(Tape& tape, const std::vector<int>& ids) const {
  if (ids.size() < 2) throw PreconditionError("instruction must hold at least BOS and EOS");
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw PreconditionError("token id " + std::to_string(id) + " outside vocabulary");
  }
  const auto T = ids.size();
  const auto h2 = static_cast<std::size_t>(config_.hidden / 2);
  const Tensor emb = nd::embedding_lookup(tape.param(*embed_), ids);
  auto run = [&](Parameter* wx, Parameter* bx, Parameter* wh, Parameter* bh, bool reverse) {
    const Tensor xp = nd::add(nd::matmul(emb, tape.param(*wx)), tape.param(*bx));
    const Tensor w = tape.param(*wh);
    const Tensor b = tape.param(*bh);
    Tensor h = tape.constant(Shape{1, h2}, std::vector<double>(h2, 0.0));
    std::vector<Tensor> out(T);
    for (std::size_t i = 0; i < T; ++i) {
      const std::size_t k = reverse ? T - 1 - i : i;
      h = nd::gru_cell(nd::slice(xp, 0, k, k + 1), h, w, b);
      out[k] = h;
    }
    return nd::concat(out, 0);
  };
  const Tensor f = run(fw_x_, fb_x_, fw_h_, fb_h_, false);
  const Tensor b = run(bw_x_, bb_x_, bw_h_, bb_h_, true);
  return nd::concat({f, b}, 1);
}

Tensor FollowerModel::score(Tape& tape, const Tensor& encoded, const Tensor& states, const CandidateSet& c) const {
  const Tensor q = nd::matmul(states, tape.param(*w_q_));
  const Tensor att = nd::softmax(nd::matmul(q, nd::transpose(encoded)), 1);
  const Tensor ctx = nd::matmul(att, encoded);
  const Tensor u = nd::tanh(nd::add(nd::matmul(nd::concat({states, ctx}, 1), tape.param(*w_u_)), tape.param(*b_u_)));
  const Tensor proj = nd::matmul(u, tape.param(*w_b_));
  for (int s : c.step) {
    if (s < 0 || static_cast<std::size_t>(s) >= states.shape()[0])
      throw PreconditionError("candidate refers to history row " + std::to_string(s) + " that does not exist");
  }
  const Tensor per_row = nd::embedding_lookup(proj, c.step);
  return nd::sum(nd::mul(per_row, candidate_matrix(tape, c)), 1);
}

// ---------------------------------------------------------------- speaker

SpeakerPolicyModel::SpeakerPolicyModel(const ModelConfig& config, std::uint64_t seed)
    : NavModel(ModelKind::kSpeaker, config, seed) {
  const auto H = static_cast<std::size_t>(config_.hidden);
  const auto E = static_cast<std::size_t>(config_.token_embed);
  const auto V = static_cast<std::size_t>(config_.vocab_size);
  const auto D = static_cast<std::size_t>(config_.action_dim());
  embed_ = &store_.add("speaker.embed", Shape{V, E});
  w_c_ = &store_.add("speaker.w_c", Shape{H + D, H});
  b_c_ = &store_.add("speaker.b_c", Shape{H});
  w_x_ = &store_.add("speaker.lm.w_x", Shape{E, 3 * H});
  b_x_ = &store_.add("speaker.lm.b_x", Shape{3 * H});
  w_h_ = &store_.add("speaker.lm.w_h", Shape{H, 3 * H});
  b_h_ = &store_.add("speaker.lm.b_h", Shape{3 * H});
  w_q_ = &store_.add("speaker.w_q", Shape{H, H});
  w_o_ = &store_.add("speaker.w_o", Shape{2 * H, V});
  b_o_ = &store_.add("speaker.b_o", Shape{V});

  const double hb = 1.0 / std::sqrt(static_cast<double>(H));
  init_normal(*embed_, 0.1);
  init_uniform(*w_c_, 1.0 / std::sqrt(static_cast<double>(H + D)));
  init_uniform(*b_c_, hb);
  for (Parameter* p : {w_x_, b_x_, w_h_, b_h_, w_q_}) init_uniform(*p, hb);
  init_uniform(*w_o_, 1.0 / std::sqrt(2.0 * static_cast<double>(H)));
}

Tensor SpeakerPolicyModel::token_logprobs(Tape& tape, const Tensor& memory, const CandidateSet& c,
                                          const std::vector<int>& ids) const {
  if (ids.size() < 2) throw PreconditionError("instruction must hold at least BOS and EOS");
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) throw PreconditionError("token id " + std::to_string(id) + " outside vocabulary");
  }
  const auto S = memory.shape()[0];
  const auto R = c.rows.size();
  const auto K = ids.size() - 1;
  for (int s : c.step) {
    if (s < 0 || static_cast<std::size_t>(s) >= S)
      throw PreconditionError("candidate refers to history row " + std::to_string(s) + " that does not exist");
  }

  const Tensor h_rows = nd::embedding_lookup(memory, c.step);
  const Tensor cond = nd::tanh(
      nd::add(nd::matmul(nd::concat({h_rows, candidate_matrix(tape, c)}, 1), tape.param(*w_c_)), tape.param(*b_c_)));

  const std::vector<int> inputs(ids.begin(), ids.end() - 1);
  const Tensor xp =
      nd::add(nd::matmul(nd::embedding_lookup(tape.param(*embed_), inputs), tape.param(*w_x_)), tape.param(*b_x_));
  const Tensor wh = tape.param(*w_h_);
  const Tensor bh = tape.param(*b_h_);
  Tensor g = cond;
  std::vector<Tensor> states;
  states.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    g = nd::gru_cell(nd::slice(xp, 0, k, k + 1), g, wh, bh);
    states.push_back(g);
  }
  const Tensor all = K == 1 ? states[0] : nd::concat(states, 0);  // row k*R + r

  Tensor scores = nd::matmul(nd::matmul(all, tape.param(*w_q_)), nd::transpose(memory));
  bool masked = false;
  for (int s : c.step) masked = masked || static_cast<std::size_t>(s) + 1 != S;
  if (masked) {
    std::vector<double> mask(K * R * S, 0.0);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = static_cast<std::size_t>(c.step[r]) + 1; j < S; ++j) mask[(k * R + r) * S + j] = -1e9;
    scores = nd::add(scores, tape.constant(Shape{K * R, S}, std::move(mask)));
  }
  const Tensor ctx = nd::matmul(nd::softmax(scores, 1), memory);
  const Tensor logits = nd::add(nd::matmul(nd::concat({all, ctx}, 1), tape.param(*w_o_)), tape.param(*b_o_));
  const Tensor lp = nd::log_softmax(logits, 1);
  std::vector<int> targets(K * R);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t r = 0; r < R; ++r) targets[k * R + r] = ids[k + 1];
  return nd::reshape(nd::gather(lp, targets), Shape{K, R});
}

Tensor SpeakerPolicyModel::lm_scores(Tape& tape, const Tensor& memory, const CandidateSet& c,
                                     const std::vector<int>& ids) const {
  return nd::sum(token_logprobs(tape, memory, c, ids), 0);
}

// ---------------------------------------------------------------- conveniences

std::vector<double> follower_logits(const FollowerModel& model, const HistoryState& state,
                                    const std::vector<int>& instruction, const std::vector<ActionEmbedding>& candidates,
                                    const std::vector<Action>& actions) {
  if (candidates.empty()) throw PreconditionError("empty action set");
  Tape& tape = state.memory.tape();
  const Tensor enc = model.encode_instruction(tape, instruction);
  const auto c = single_step_candidates(candidates, actions, 0);
  const Tensor out = model.score(tape, enc, state.h(), c);
  return {out.values().begin(), out.values().end()};
}

std::vector<double> lm_token_logprobs(const SpeakerPolicyModel& model, const HistoryState& state,
                                      const ActionEmbedding& a, bool is_stop, const std::vector<int>& instruction) {
  Tape& tape = state.memory.tape();
  CandidateSet c;
  c.rows.push_back(a.flatten());
  c.stop.push_back(is_stop);
  c.step.push_back(state.t());
  const Tensor out = model.token_logprobs(tape, state.memory, c, instruction);
  return {out.values().begin(), out.values().end()};
}

std::unique_ptr<NavModel> make_model(ModelKind kind, const ModelConfig& config, std::uint64_t seed) {
  if (kind == ModelKind::kFollower) return std::make_unique<FollowerModel>(config, seed);
  return std::make_unique<SpeakerPolicyModel>(config, seed);
}

void save_model(const NavModel& m, const std::string& path, const nlohmann::json& extra) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["kind"] = to_string(m.kind());
  meta["model"] = to_json(m.config());
  meta["vocab_hash"] = m.config().vocab_hash;
  nd::save_checkpoint(path, m.params(), meta);
}

std::unique_ptr<NavModel> load_model(const std::string& path, nlohmann::json* meta) {
  std::ifstream probe(path);
  if (!probe) throw DataError("cannot read checkpoint " + path);
  nlohmann::json doc;
  try {
    probe >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  if (doc.value("schema", std::string()) != nd::kCheckpointSchema)
    throw DataError(path + ": checkpoint schema mismatch, expected '" + std::string(nd::kCheckpointSchema) + "'");
  const auto& m = doc.at("meta");
  std::unique_ptr<NavModel> model;
  try {
    model = make_model(model_kind_from_string(m.at("kind").get<std::string>()), model_config_from_json(m.at("model")), 0);
  } catch (const ConfigError& e) {
    throw DataError(path + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  model->params().load_json(doc.at("params"));
  if (meta) *meta = m;
  return model;
}

}  // namespace navgen
