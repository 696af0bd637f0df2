#pragma once

#include <span>
#include <string>
#include <vector>

#include "navgen/dataset.hpp"
#include "navgen/models.hpp"
#include "navgen/policies.hpp"

namespace navgen {

// Offset unit of the rendered curves: one vertical tick per 0.05 of 1 - S.
inline constexpr double kTentDelta = 0.05;

// Token-wise prediction entropy from per-action token log-probabilities laid
// out row-major [K x |A|]. Base |A| keeps S in [0, 1]; |A| = 1 gives all ones.
std::vector<double> tent_entropy(std::span<const double> token_logprobs, std::size_t num_actions);

// S for every scored position of X at the given history and node.
std::vector<double> tent_step(const SpeakerPolicyModel& speaker, const HistoryState& state, const EnvGraph& g,
                              NodeId node, const std::vector<int>& instruction);

struct TentProfile {
  std::string episode_id;
  int t = 0;
  std::vector<std::string> tokens;  // X[1..], aligned with s
  std::vector<double> s;
  Action chosen;
  int num_actions = 0;
};

// Rolls the episode with `selector` and records S before every decision.
std::vector<TentProfile> tent_trace(const SpeakerPolicyModel& speaker, const Vocab& vocab, const EnvGraph& g,
                                    const Episode& episode, const Selector& selector, int max_steps = 0);

// A non-empty stamp becomes a leading comment line (CSV "# ...", SVG <!-- -->).
std::string tent_csv(const std::vector<TentProfile>& profiles, const std::string& stamp = "");
// One chart per episode; curve for step t is drawn at t + (1 - S) / delta.
std::string tent_svg(const std::vector<TentProfile>& profiles, double delta = kTentDelta, const std::string& stamp = "");
// Writes tent.csv and tent.svg into dir. Returns false (and writes nothing)
// for an empty profile list.
bool render_tent(const std::vector<TentProfile>& profiles, const std::string& dir, const std::string& stamp = "");

}  // namespace navgen
