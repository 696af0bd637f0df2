#include "navgen/learn.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "navgen/error.hpp"

namespace navgen {

using ndgrad::Shape;
using ndgrad::Tape;
using ndgrad::Tensor;

namespace nd = ndgrad;

Tensor disc_loss(const Tensor& logits, std::size_t ref_index) {
  if (ref_index >= logits.shape().numel())
    throw PreconditionError("reference index " + std::to_string(ref_index) + " outside " + logits.shape().str());
  return nd::nll(logits, ref_index);
}

Tensor gen_loss(const Tensor& lm_scores, std::size_t ref_index) {
  const auto n = lm_scores.shape().numel();
  if (ref_index >= n)
    throw PreconditionError("reference index " + std::to_string(ref_index) + " outside " + lm_scores.shape().str());
  const Tensor flat = lm_scores.shape().rank() == 1 ? lm_scores : nd::reshape(lm_scores, Shape{n});
  return nd::sub(nd::logsumexp(flat, 0), nd::slice(flat, 0, ref_index, ref_index + 1));
}

double gen_loss_value(std::span<const double> lm_scores, std::size_t ref_index) {
  if (ref_index >= lm_scores.size()) throw PreconditionError("reference index outside the action set");
  return -log_normalize(lm_scores)[ref_index];
}

Tensor disc_loss(const FollowerModel& follower, const HistoryState& state, const std::vector<int>& instruction,
                 const EnvGraph& g, NodeId node, std::size_t ref_index) {
  Tape& tape = state.memory.tape();
  const auto actions = available_actions(g, node);
  const auto c = single_step_candidates(follower.embed_actions(g, node, actions), actions, 0);
  const Tensor logits = follower.score(tape, follower.encode_instruction(tape, instruction), state.h(), c);
  return disc_loss(logits, ref_index);
}

Tensor gen_loss(const SpeakerPolicyModel& speaker, const HistoryState& state, const std::vector<int>& instruction,
                const EnvGraph& g, NodeId node, std::size_t ref_index) {
  Tape& tape = state.memory.tape();
  const auto actions = available_actions(g, node);
  const auto c = single_step_candidates(speaker.embed_actions(g, node, actions), actions, state.t());
  return gen_loss(speaker.lm_scores(tape, state.memory, c, instruction), ref_index);
}

// ---------------------------------------------------------------- teachers

Action teacher_action_shortest(const EnvGraph& g, NodeId current, NodeId goal, double at_goal_radius) {
  const double d = g.distance(current, goal);
  if (!std::isfinite(d)) throw UnreachableError("goal " + std::to_string(goal) + " is unreachable");
  if (d <= at_goal_radius) return Action::stop();
  return Action::move_to(shortest_path(g, current, goal).path[1]);
}

int matched_reference_index(const TeacherContext& ctx, std::size_t s) {
  const auto& r = ctx.reference;
  const NodeId p = ctx.trajectory.at(s);
  int m = 0;
  for (NodeId x : r) m += x == p;
  if (m == 0) return -1;
  int n = 0;
  for (std::size_t i = 0; i <= s; ++i) n += ctx.trajectory[i] == p;
  const int want = n < m ? n : m;
  int seen = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] == p && ++seen == want) return static_cast<int>(i);
  }
  return -1;
}

Action fidelity_reference_action(const TeacherContext& ctx) {
  if (!ctx.graph) throw PreconditionError("teacher context has no graph");
  if (ctx.reference.empty()) throw PreconditionError("reference path is empty");
  if (ctx.trajectory.empty()) throw PreconditionError("agent trajectory is empty");
  const auto& g = *ctx.graph;
  const auto& r = ctx.reference;
  const std::size_t t = ctx.trajectory.size() - 1;
  const NodeId p = ctx.trajectory[t];

  const int j = matched_reference_index(ctx, t);
  if (j >= 0) {
    if (static_cast<std::size_t>(j) + 1 == r.size()) return Action::stop();
    return Action::move_to(r[static_cast<std::size_t>(j) + 1]);
  }

  // last time the agent stood on R, and the index it matched then
  int i = -1;
  std::size_t t_prime = 0;
  for (std::size_t s = t; s-- > 0;) {
    i = matched_reference_index(ctx, s);
    if (i >= 0) {
      t_prime = s;
      break;
    }
  }
  if (i < 0) {
    // never on R: aim at its first node
    i = 0;
    t_prime = t;
  }
  const std::size_t last = std::min(r.size() - 1, static_cast<std::size_t>(i) + (t - t_prime));
  std::size_t goal = static_cast<std::size_t>(i);
  double best = g.distance(p, r[goal]);
  for (std::size_t k = goal + 1; k <= last; ++k) {
    const double d = g.distance(p, r[k]);
    if (d < best) {
      best = d;
      goal = k;
    }
  }
  return teacher_action_shortest(g, p, r[goal]);
}

namespace {

MixDecision mix_lazy(const Action& teacher, const std::function<ActionPosterior()>& student, double eta, Rng& rng) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1], got " + std::to_string(eta));
  if (!rng.bernoulli(eta)) return {teacher, false};
  const auto post = student();
  return {post.actions[rng.categorical(post.probs)], true};
}

}  // namespace

MixDecision mix_next_action(const Action& teacher, const ActionPosterior& student, double eta, Rng& rng) {
  return mix_lazy(teacher, [&] { return student; }, eta, rng);
}

// ---------------------------------------------------------------- config

std::string to_string(Supervision s) { return s == Supervision::kSupervised ? "supervised" : "fidelity"; }

Supervision supervision_from_string(const std::string& s) {
  if (s == "supervised") return Supervision::kSupervised;
  if (s == "fidelity") return Supervision::kFidelity;
  throw ConfigError("unknown supervision '" + s + "' (expected supervised or fidelity)");
}

void TrainConfig::validate() const {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (optimizer != "adam" && optimizer != "sgd") throw ConfigError("optimizer must be adam or sgd");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (augmented_epochs < 0 || augmented_epochs > epochs) throw ConfigError("augmented_epochs must lie in [0, epochs]");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (flavor == Flavor::kAugmented) throw ConfigError("train flavor must be r2r or r4r");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (val_limit < 0) throw ConfigError("val_limit must be non-negative");
  if (!(success_distance >= 0.0)) throw ConfigError("success distance must be non-negative");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"schema", kConfigSchema},
          {"model", to_string(c.model)},
          {"eta", c.eta},
          {"lr", c.lr},
          {"optimizer", c.optimizer},
          {"epochs", c.epochs},
          {"augmented_epochs", c.augmented_epochs},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"flavor", to_string(c.flavor)},
          {"supervision", to_string(c.supervision)},
          {"max_steps", c.max_steps},
          {"clip_norm", c.clip_norm},
          {"val_limit", c.val_limit},
          {"keep_best", c.keep_best},
          {"success_distance", c.success_distance},
          {"hidden", c.hidden},
          {"token_embed", c.token_embed},
          {"beta", c.beta}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    if (j.contains("schema") && j.at("schema").get<std::string>() != kConfigSchema)
      throw ConfigError("config schema must be '" + std::string(kConfigSchema) + "'");
    static const std::vector<std::string> known = {
        "schema",      "model",     "eta",        "lr",         "optimizer",        "epochs",
        "augmented_epochs", "batch_size", "seed", "flavor",     "supervision",      "max_steps",
        "clip_norm",   "val_limit", "keep_best", "success_distance", "hidden", "token_embed",    "beta"};
    for (const auto& [k, v] : j.items()) {
      if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown config key '" + k + "'");
    }
    if (j.contains("model")) c.model = model_kind_from_string(j.at("model").get<std::string>());
    c.eta = j.value("eta", c.eta);
    c.lr = j.value("lr", c.lr);
    c.optimizer = j.value("optimizer", c.optimizer);
    c.epochs = j.value("epochs", c.epochs);
    c.augmented_epochs = j.value("augmented_epochs", c.augmented_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    if (j.contains("flavor")) {
      try {
        c.flavor = flavor_from_string(j.at("flavor").get<std::string>());
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
    }
    if (j.contains("supervision")) c.supervision = supervision_from_string(j.at("supervision").get<std::string>());
    c.max_steps = j.value("max_steps", c.max_steps);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.val_limit = j.value("val_limit", c.val_limit);
    c.keep_best = j.value("keep_best", c.keep_best);
    c.success_distance = j.value("success_distance", c.success_distance);
    c.hidden = j.value("hidden", c.hidden);
    c.token_embed = j.value("token_embed", c.token_embed);
    c.beta = j.value("beta", c.beta);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},       {"phase", e.phase},           {"loss", e.loss},
          {"decisions", e.decisions}, {"episodes", e.episodes},   {"val_seen_sr", e.val_seen_sr},
          {"seconds", e.seconds}};
}

// ---------------------------------------------------------------- training

namespace {

struct DecisionRecord {
  NodeId node;
  std::vector<Action> actions;
  std::size_t teacher;
};

std::size_t index_of(const std::vector<Action>& actions, const Action& a) {
  for (std::size_t i = 0; i < actions.size(); ++i) {
    if (actions[i] == a) return i;
  }
  throw PreconditionError("teacher action " + to_string(a) + " is not available");
}

}  // namespace

std::pair<double, int> episode_gradient(NavModel& model, const TrainConfig& config, const EnvGraph& g,
                                        const Episode& episode, Rng& rng, double weight) {
  const bool teacher_forced = episode.flavor == Flavor::kR4R && config.supervision == Supervision::kSupervised;
  const bool fidelity = episode.flavor == Flavor::kR4R && config.supervision == Supervision::kFidelity;
  const double eta = teacher_forced ? 0.0 : config.eta;
  const int max_steps = config.max_steps > 0 ? config.max_steps : default_max_steps(episode.flavor);

  auto* follower = dynamic_cast<FollowerModel*>(&model);
  auto* speaker = dynamic_cast<SpeakerPolicyModel*>(&model);
  const PolicyKind kind = follower ? PolicyKind::kDisc : PolicyKind::kGen;
  ModelSession session(g, episode, follower, speaker, kind, kDefaultBeta);

  AgentState state = AgentState::begin(g, episode.start);
  std::vector<DecisionRecord> decisions;
  while (true) {
    const auto actions = available_actions(g, state.current);
    Action teacher;
    if (teacher_forced) {
      teacher = reference_teacher(g, episode, state);
    } else if (fidelity) {
      teacher = fidelity_reference_action(TeacherContext{&g, episode.reference_path, state.path()});
    } else {
      teacher = teacher_action_shortest(g, state.current, episode.goal);
    }
    const auto mix = mix_lazy(
        teacher, [&] { return posterior_from_scores(actions, session.scores(state, actions).scores); }, eta, rng);
    decisions.push_back({state.current, actions, index_of(actions, teacher)});
    if (mix.action.is_stop()) break;
    state = step(g, state, mix.action);
    if (state.t >= max_steps) break;
    session.advance(state, mix.action);
  }

  const auto D = decisions.size();
  const auto path = state.path();
  Tape tape;
  const auto action_dim = static_cast<std::size_t>(model.config().action_dim());
  std::vector<double> flat;
  CandidateSet c;
  for (std::size_t d = 0; d < D; ++d) {
    const ActionEmbedding prev =
        d == 0 ? ActionEmbedding{} : action_embedding(g, path[d - 1], Action::move_to(path[d]), model.stop_feature());
    const auto row = history_input(g.node(path[d]).visual_feature, d == 0 ? nullptr : &prev, action_dim);
    flat.insert(flat.end(), row.begin(), row.end());
    const auto emb = model.embed_actions(g, decisions[d].node, decisions[d].actions);
    for (std::size_t a = 0; a < emb.size(); ++a) {
      c.rows.push_back(emb[a].flatten());
      c.stop.push_back(decisions[d].actions[a].is_stop());
      c.step.push_back(static_cast<int>(d));
    }
  }
  const Tensor inputs = tape.constant(Shape{D, model.history().input_dim()}, std::move(flat));
  const Tensor memory = model.history().fold(tape, inputs);
  const auto& ids = episode.instruction.ids;

  Tensor scores;
  if (follower) {
    scores = nd::reshape(follower->score(tape, follower->encode_instruction(tape, ids), memory, c), Shape{c.rows.size()});
  } else {
    scores = nd::reshape(speaker->lm_scores(tape, memory, c, ids), Shape{c.rows.size()});
  }
  std::vector<Tensor> losses;
  std::size_t offset = 0;
  for (const auto& d : decisions) {
    const auto A = d.actions.size();
    const Tensor block = nd::slice(scores, 0, offset, offset + A);
    losses.push_back(follower ? disc_loss(block, d.teacher) : gen_loss(block, d.teacher));
    offset += A;
  }
  const Tensor total = nd::sum(nd::concat(losses, 0));
  const double value = total.item();
  tape.backward(nd::scale(total, weight / static_cast<double>(D)));
  return {value, static_cast<int>(D)};
}

namespace {

std::vector<const Episode*> training_episodes(const DatasetManifest& m, Flavor flavor, bool with_augmented) {
  auto eps = m.split(Split::kTrain, flavor);
  if (with_augmented) {
    const auto aug = m.split(Split::kTrain, Flavor::kAugmented);
    eps.insert(eps.end(), aug.begin(), aug.end());
  }
  return eps;
}

double success_rate(const NavModel& model, const DatasetManifest& m, const std::vector<const Episode*>& eps,
                    double threshold) {
  if (eps.empty()) return 0.0;
  const auto* follower = dynamic_cast<const FollowerModel*>(&model);
  const auto* speaker = dynamic_cast<const SpeakerPolicyModel*>(&model);
  const ModelSelector selector(follower ? PolicyKind::kDisc : PolicyKind::kGen, follower, speaker);
  const auto trajs = run_policy(selector, m, eps, 0, false, 1);
  int ok = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const auto& g = m.world(eps[i]->env_id);
    ok += g.distance(trajs[i].nodes.back(), eps[i]->goal) <= threshold;
  }
  return static_cast<double>(ok) / static_cast<double>(eps.size());
}

}  // namespace

TrainResult train(const TrainConfig& config, const DatasetManifest& manifest,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (manifest.worlds.empty()) throw DataError("manifest has no worlds");
  const auto original = training_episodes(manifest, config.flavor, false);
  if (original.empty()) throw DataError("train split has no " + to_string(config.flavor) + " episodes");

  ModelConfig mc;
  mc.hidden = config.hidden;
  mc.token_embed = config.token_embed;
  mc.feature_dim = static_cast<int>(manifest.worlds.front().feature_dim());
  mc.vocab_size = static_cast<int>(manifest.vocab.size());
  mc.vocab_hash = manifest.vocab.hash();
  TrainResult result;
  result.model = make_model(config.model, mc, config.seed);
  NavModel& model = *result.model;
  auto params = model.params().all();
  nd::Adam adam(config.lr);

  auto val = manifest.split(Split::kValSeen, config.flavor);
  if (config.val_limit > 0 && val.size() > static_cast<std::size_t>(config.val_limit))
    val.resize(static_cast<std::size_t>(config.val_limit));

  std::vector<std::vector<double>> best;
  double best_sr = -1.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool augmented = epoch < config.augmented_epochs;
    auto eps = augmented ? training_episodes(manifest, config.flavor, true) : original;
    Rng order(config.seed, mix64(hash_string("shuffle"), static_cast<std::uint64_t>(epoch)));
    order.shuffle(eps.begin(), eps.end());

    double loss_sum = 0.0;
    int decisions = 0;
    for (std::size_t b = 0; b < eps.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const auto e = std::min(eps.size(), b + static_cast<std::size_t>(config.batch_size));
      model.params().zero_grad();
      for (std::size_t i = b; i < e; ++i) {
        const Episode& ep = *eps[i];
        Rng rng(config.seed, mix64(hash_string(ep.episode_id), static_cast<std::uint64_t>(epoch)));
        const auto [l, n] =
            episode_gradient(model, config, manifest.world(ep.env_id), ep, rng, 1.0 / static_cast<double>(e - b));
        loss_sum += l;
        decisions += n;
      }
      nd::clip_grad_norm(params, config.clip_norm);
      if (config.optimizer == "adam") {
        adam.step(params);
      } else {
        nd::sgd_step(params, config.lr);
      }
    }

    EpochLog log;
    log.epoch = epoch + 1;
    log.phase = augmented ? "augmented+original" : "original";
    log.loss = decisions > 0 ? loss_sum / decisions : 0.0;
    log.decisions = decisions;
    log.episodes = static_cast<int>(eps.size());
    log.val_seen_sr = success_rate(model, manifest, val, config.success_distance);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
    if (config.keep_best && log.val_seen_sr > best_sr) {
      best_sr = log.val_seen_sr;
      best.clear();
      for (const auto* p : params) best.push_back(p->value());
    }
  }
  if (config.keep_best && !best.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value() = best[i];
  }
  return result;
}

}  // namespace navgen
