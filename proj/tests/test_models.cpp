#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "navgen/error.hpp"
#include "navgen/models.hpp"
#include "navgen/policies.hpp"
#include "support.hpp"

using namespace navgen;
namespace nd = navgen::ndgrad;

namespace {

ModelConfig small_config(int vocab = 20) {
  ModelConfig c;
  c.hidden = 12;
  c.token_embed = 6;
  c.feature_dim = 8;
  c.vocab_size = vocab;
  c.vocab_hash = "test";
  return c;
}

std::vector<double> feature(Rng& rng) {
  std::vector<double> f(8);
  for (auto& v : f) v = rng.uniform(-1.0, 1.0);
  return f;
}

ActionEmbedding embedding(Rng& rng) {
  ActionEmbedding a;
  const double h = rng.uniform(-3.0, 3.0);
  a.orientation = {std::sin(h), std::cos(h), 0.0, 1.0};
  a.target_feature = feature(rng);
  return a;
}

// A star around node 0 with `leaves` neighbors.
EnvGraph star(int leaves) {
  std::vector<Vec3> pos{{0, 0, 0}};
  std::vector<std::pair<NodeId, NodeId>> edges;
  for (int i = 0; i < leaves; ++i) {
    pos.push_back({std::cos(i), std::sin(i), 0});
    edges.emplace_back(0, i + 1);
  }
  return testing::make_graph(pos, edges);
}

}  // namespace

TEST_CASE("history at t=0 folds one observation with a zero action") {
  FollowerModel m(small_config(), 3);
  Rng rng(1);
  const auto f = feature(rng);
  nd::Tape tape(false);
  const auto s = encode_history(tape, m.history(), {f}, {});
  CHECK(s.t() == 0);
  const auto row = history_input(f, nullptr, static_cast<std::size_t>(small_config().action_dim()));
  const auto h = m.history().step(tape, m.history().zero_state(tape), f,
                                  std::vector<double>(static_cast<std::size_t>(small_config().action_dim()), 0.0));
  for (std::size_t i = 0; i < 12; ++i) CHECK(s.h().at(i) == doctest::Approx(h.at(i)).epsilon(1e-14));
  for (std::size_t i = 8; i < row.size(); ++i) CHECK(row[i] == 0.0);
  CHECK_THROWS_AS(encode_history(tape, m.history(), {f, f}, {}), PreconditionError);
}

TEST_CASE("history is order sensitive and deterministic") {
  FollowerModel m(small_config(), 3);
  Rng rng(2);
  std::vector<std::vector<double>> obs{feature(rng), feature(rng), feature(rng), feature(rng)};
  std::vector<ActionEmbedding> acts{embedding(rng), embedding(rng), embedding(rng)};
  nd::Tape tape(false);
  const auto a = encode_history(tape, m.history(), obs, acts);
  const auto b = encode_history(tape, m.history(), obs, acts);
  auto obs_p = obs;
  auto acts_p = acts;
  std::swap(obs_p[1], obs_p[2]);
  std::swap(acts_p[0], acts_p[1]);
  const auto c = encode_history(tape, m.history(), obs_p, acts_p);
  CHECK(a.t() == 3);
  double diff = 0.0;
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(a.h().at(i) == b.h().at(i));
    diff += std::abs(a.h().at(i) - c.h().at(i));
  }
  CHECK(diff > 1e-6);
}

TEST_CASE("follower action distribution") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    FollowerModel m(small_config(), seed);
    Rng rng(seed);
    const auto g = star(1 + static_cast<int>(seed % 4));
    nd::Tape tape(false);
    const auto s = encode_history(tape, m.history(), {g.node(0).visual_feature}, {});
    const auto post = disc_action_dist(m, s, {kBos, 5, 7, 9, kEos}, g, 0);
    double total = 0.0;
    for (double p : post.probs) total += p;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    for (double l : post.log_scores) CHECK(std::isfinite(l));
    CHECK(post.actions.size() == g.neighbors(0).size() + 1);
  }
}

TEST_CASE("a single action gets probability one") {
  FollowerModel m(small_config(), 1);
  const auto g = star(1);
  nd::Tape tape(false);
  const auto s = encode_history(tape, m.history(), {g.node(1).visual_feature}, {});
  const std::vector<Action> only{Action::stop()};
  const auto emb = m.embed_actions(g, 1, only);
  const auto logits = follower_logits(m, s, {kBos, 4, kEos}, emb, only);
  const auto post = posterior_from_scores(only, logits);
  CHECK(post.probs == std::vector<double>{1.0});
}

TEST_CASE("speaker token distributions are normalized") {
  const int vocab = 20;
  SpeakerPolicyModel m(small_config(vocab), 4);
  Rng rng(4);
  nd::Tape tape(false);
  const auto s = encode_history(tape, m.history(), {feature(rng), feature(rng)}, {embedding(rng)});
  const auto a = embedding(rng);
  // Position 1 only depends on BOS, so sweeping its token covers the vocabulary.
  double total = 0.0;
  for (int w = 0; w < vocab; ++w) total += std::exp(lm_token_logprobs(m, s, a, false, {kBos, w})[0]);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  const auto lp = lm_token_logprobs(m, s, a, false, {kBos, 5, 6, 7, kEos});
  CHECK(lp.size() == 4);
  double score = 0.0;
  for (double v : lp) {
    CHECK(v <= 0.0);
    score += v;
  }
  CHECK(score <= 0.0);
  CHECK_THROWS_AS(lm_token_logprobs(m, s, a, false, {kBos, vocab, kEos}), Error);
}

TEST_CASE("zero output layer gives the uniform token distribution") {
  const int vocab = 20;
  SpeakerPolicyModel m(small_config(vocab), 5);
  std::fill(m.output_weights().value().begin(), m.output_weights().value().end(), 0.0);
  std::fill(m.output_bias().value().begin(), m.output_bias().value().end(), 0.0);
  Rng rng(5);
  nd::Tape tape(false);
  const auto s = encode_history(tape, m.history(), {feature(rng)}, {});
  for (double v : lm_token_logprobs(m, s, embedding(rng), true, {kBos, 8, 9, 10, kEos}))
    CHECK(v == doctest::Approx(-std::log(static_cast<double>(vocab))).epsilon(1e-14));
}

TEST_CASE("models save and load exactly") {
  const auto path = (std::filesystem::temp_directory_path() / "navgen_model_test.json").string();
  for (auto kind : {ModelKind::kFollower, ModelKind::kSpeaker}) {
    const auto m = make_model(kind, small_config(), 8);
    save_model(*m, path, {{"tag", 1}});
    nlohmann::json meta;
    const auto back = load_model(path, &meta);
    CHECK(back->kind() == kind);
    CHECK(meta["tag"] == 1);
    CHECK(back->params().to_json() == m->params().to_json());
  }
  std::filesystem::remove(path);
}

TEST_CASE("model config validation") {
  auto c = small_config();
  c.vocab_size = 0;
  CHECK_THROWS_AS(FollowerModel(c, 1), ConfigError);
}
