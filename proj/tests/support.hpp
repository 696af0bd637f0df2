#pragma once

#include <functional>
#include <string>
#include <vector>

#include "navgen/dataset.hpp"
#include "navgen/ndgrad.hpp"
#include "navgen/policies.hpp"
#include "navgen/rng.hpp"
#include "navgen/world.hpp"

namespace navgen::testing {

// ---- finite differences

using OpFn = std::function<ndgrad::Tensor(const std::vector<ndgrad::Tensor>&)>;

struct GradCheck {
  std::string op;
  int points = 0;
  double max_rel_err = 0.0;
};

// Central differences on `points` random coordinates of the inputs of f,
// against the reverse pass of sum(f(x) * w) for a fixed random w. Relative
// error is |a - n| / max(|a|, |n|, 1e-3).
GradCheck grad_check(const std::string& op, const std::vector<ndgrad::Shape>& shapes, const OpFn& f, Rng& rng,
                     int points = 20, double lo = -1.0, double hi = 1.0);
// One check per differentiable op, including broadcast and axis variants.
std::vector<GradCheck> grad_check_all_ops(std::uint64_t seed, int points = 20);

// ---- graphs

EnvGraph make_graph(const std::vector<Vec3>& positions, const std::vector<std::pair<NodeId, NodeId>>& edges,
                    const std::string& env_id = "t", std::size_t feature_dim = 8);
// Connected graph with n nodes: a random spanning tree plus extra edges.
EnvGraph random_graph(Rng& rng, int n, double extra_edge_prob = 0.3, const std::string& env_id = "t");
// Random walk of `len` nodes starting anywhere (revisits allowed).
std::vector<NodeId> random_walk(const EnvGraph& g, Rng& rng, int len);

// ---- independent oracles

// All-pairs distances by Floyd-Warshall.
std::vector<std::vector<double>> floyd(const EnvGraph& g);
// Minimum over every monotone warping path, enumerated recursively.
double brute_dtw(const EnvGraph& g, const std::vector<NodeId>& p, const std::vector<NodeId>& r);
double brute_cls(const EnvGraph& g, const std::vector<NodeId>& p, const std::vector<NodeId>& r, double d_th);
// Reference-action rules written out directly from their statement.
Action brute_fidelity(const EnvGraph& g, const std::vector<NodeId>& r, const std::vector<NodeId>& p);

// ---- policies

// Fixed per-node action probabilities; the session sees (node, t).
class ScriptedSelector : public Selector {
 public:
  using Probs = std::function<std::vector<double>(NodeId node, int t, const std::vector<Action>& actions)>;
  explicit ScriptedSelector(Probs probs) : probs_(std::move(probs)) {}
  std::unique_ptr<SelectorSession> start(const EnvGraph& g, const Episode& episode) const override;
  std::string name() const override { return "scripted"; }

 private:
  Probs probs_;
};

// Square 0-1-2-3 with a spur 2-4. The scripted
// policy circles the square and stops on coming back to 0; the best untried
// alternative is the spur at node 2.
struct LoopInstance {
  EnvGraph graph;
  Episode episode;
  ScriptedSelector selector;
};
LoopInstance loop_instance();

// Small generated dataset for fast tests.
DatasetManifest tiny_manifest(int worlds = 4, int unseen = 1, int train_per_world = 4, std::uint64_t seed = 5);

}  // namespace navgen::testing
