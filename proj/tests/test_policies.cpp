#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "navgen/error.hpp"
#include "navgen/metrics.hpp"
#include "navgen/policies.hpp"
#include "support.hpp"

using namespace navgen;

namespace {

std::vector<Action> moves(int n) {
  std::vector<Action> a;
  for (int i = 0; i < n; ++i) a.push_back(Action::move_to(i));
  return a;
}

// Always the first available action, which is a move whenever one exists.
testing::ScriptedSelector first_move() {
  return testing::ScriptedSelector([](NodeId, int, const std::vector<Action>& actions) {
    std::vector<double> q(actions.size(), 0.1 / static_cast<double>(actions.size()));
    q[0] += 0.9;
    return q;
  });
}

}  // namespace

TEST_CASE("posterior small cases") {
  const auto two = posterior_from_scores(moves(2), std::vector<double>{0.3, 0.3});
  CHECK(two.probs == std::vector<double>{0.5, 0.5});
  CHECK(posterior_from_scores(moves(1), std::vector<double>{-7.0}).probs == std::vector<double>{1.0});
  const auto lm = posterior_from_scores(moves(2), std::vector<double>{std::log(0.2), std::log(0.1)});
  CHECK(lm.probs[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(lm.probs[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  const auto eq = posterior_from_scores(moves(5), std::vector<double>(5, -12.5));
  for (double p : eq.probs) CHECK(p == 0.2);
}

TEST_CASE("posterior matches direct exponentiation") {
  Rng rng(3);
  for (int k = 0; k < 500; ++k) {
    std::vector<double> s{rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-5, 5)};
    const auto post = posterior_from_scores(moves(3), s);
    const double z = std::exp(s[0]) + std::exp(s[1]) + std::exp(s[2]);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(post.probs[i] - std::exp(s[i]) / z) <= 1e-12);
  }
}

TEST_CASE("argmax rules") {
  Rng rng(4);
  for (int k = 0; k < 300; ++k) {
    std::vector<double> s;
    for (int i = 0; i < 4; ++i) s.push_back(rng.uniform(-3, 3));
    const auto post = posterior_from_scores(moves(4), s);
    CHECK(post.argmax() == gen_select_index(s));
    auto shifted = s;
    for (auto& v : shifted) v += 17.0;
    CHECK(gen_select_index(shifted) == gen_select_index(s));
  }
  CHECK(gen_select_index(std::vector<double>{-1.0, -0.5, -0.5}) == 1);
  CHECK(gen_select_index(std::vector<double>{-2.0, -1.0}) == 1);
  std::vector<bool> excluded{false, true, false};
  CHECK(argmax_first(std::vector<double>{0.0, 5.0, 1.0}, &excluded) == 2);
}

TEST_CASE("combined rule arithmetic and limits") {
  // log_softmax only shifts both follower terms by the same constant.
  const std::vector<double> lm{-1.0, -2.0};
  const std::vector<double> logits{-2.0, -0.2};
  const auto scores = combined_scores(lm, logits, 0.5);
  const double shift = 0.5 * std::log(std::exp(-2.0) + std::exp(-0.2));
  CHECK(scores[0] == doctest::Approx(-1.5 - shift).epsilon(1e-14));
  CHECK(scores[1] == doctest::Approx(-1.1 - shift).epsilon(1e-14));
  CHECK(combined_select_index(lm, logits, 0.5) == 1);
  Rng rng(5);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> a, b;
    for (int i = 0; i < 3; ++i) {
      a.push_back(rng.uniform(-4, 0));
      b.push_back(rng.uniform(-4, 4));
    }
    CHECK(combined_select_index(a, b, 1.0) == gen_select_index(a));
    CHECK(combined_select_index(a, b, 0.0) == argmax_first(b));
  }
}

TEST_CASE("oracle rollout reproduces the reference path") {
  const auto m = testing::tiny_manifest();
  const OracleSelector oracle(reference_teacher);
  for (const auto& e : m.episodes) {
    const auto t = rollout(oracle, m.world(e.env_id), e, 40);
    CHECK(t.nodes == e.reference_path);
    CHECK(t.stopped);
    CHECK(t.actions.back() == Action::stop());
    CHECK(t.steps == static_cast<int>(e.reference_path.size()) - 1);
    CHECK_NOTHROW(validate_trajectory(m.world(e.env_id), t));
  }
}

TEST_CASE("the step budget forces a stop") {
  const auto inst = testing::loop_instance();
  const auto t = rollout(first_move(), inst.graph, inst.episode, 1);
  CHECK(t.nodes.size() == 2);
  CHECK_FALSE(t.stopped);
  CHECK(rollout(first_move(), inst.graph, inst.episode, 1) == t);
}

TEST_CASE("backtracking on the looping instance") {
  const auto inst = testing::loop_instance();
  const auto plain = rollout(inst.selector, inst.graph, inst.episode, 20);
  CHECK(plain.nodes == std::vector<NodeId>{0, 1, 2, 3, 0});
  CHECK(plain.stopped);
  const auto bt = backtracking_rollout(inst.selector, inst.graph, inst.episode, 20);
  CHECK(bt.trigger_step == 4);
  CHECK(bt.backtracks == 1);
  // Return walk 0-1-2 then the spur.
  CHECK(bt.nodes == std::vector<NodeId>{0, 1, 2, 3, 0, 1, 2, 4});
  CHECK(bt.steps == 7);
  CHECK(bt.stopped);
  CHECK(path_length(inst.graph, bt.nodes) > path_length(inst.graph, plain.nodes));
  CHECK_NOTHROW(validate_trajectory(inst.graph, bt));
}

TEST_CASE("backtracking without revisits equals the plain rollout") {
  const auto m = testing::tiny_manifest();
  const OracleSelector oracle(reference_teacher);
  for (const auto& e : m.episodes) {
    const auto& g = m.world(e.env_id);
    CHECK(backtracking_rollout(oracle, g, e, 40) == rollout(oracle, g, e, 40));
  }
}

TEST_CASE("parallel evaluation matches serial") {
  const auto m = testing::tiny_manifest();
  const auto inst = testing::loop_instance();
  const auto eps = m.split(Split::kTrain);
  const auto serial = run_policy(first_move(), m, eps, 12, true, 1);
  const auto parallel = run_policy(first_move(), m, eps, 12, true, 4);
  CHECK(serial == parallel);
}

TEST_CASE("trajectory files round trip") {
  const auto inst = testing::loop_instance();
  const std::vector<Trajectory> ts{rollout(inst.selector, inst.graph, inst.episode, 20),
                                   backtracking_rollout(inst.selector, inst.graph, inst.episode, 20)};
  const auto path = (std::filesystem::temp_directory_path() / "navgen_traj_test.jsonl").string();
  save_trajectories(path, ts, {{"config_hash", "abc"}});
  nlohmann::json header;
  CHECK(load_trajectories(path, &header) == ts);
  CHECK(header["config_hash"] == "abc");
  std::filesystem::remove(path);
}

TEST_CASE("invalid trajectories are rejected") {
  const auto inst = testing::loop_instance();
  Trajectory t;
  t.nodes = {0, 2};
  t.actions = {Action::move_to(2)};
  t.steps = 1;
  CHECK_THROWS(validate_trajectory(inst.graph, t));
}
