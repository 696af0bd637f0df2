#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/dataset.hpp"
#include "navgen/policies.hpp"
#include "navgen/world.hpp"

namespace navgen {

inline constexpr double kSuccessDistance = 3.0;
inline constexpr const char* kMetricsSchema = "navgen-metrics/1";

double path_length(const EnvGraph& g, const std::vector<NodeId>& path);
double nav_error(const EnvGraph& g, const std::vector<NodeId>& path, NodeId goal);
// 1 when nav_error <= threshold.
int success(double nav_error, double threshold = kSuccessDistance);
// success * l / max(p, l); l = 0 gives success.
double spl(int success, double shortest_length, double path_length);
// Coverage weighted by length score, with graph distances.
double cls(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference,
           double threshold = kSuccessDistance);
double dtw(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference);
double ndtw(const EnvGraph& g, const std::vector<NodeId>& path, const std::vector<NodeId>& reference,
            double threshold = kSuccessDistance);
double sdtw(int success, double ndtw);

struct EpisodeMetrics {
  std::string episode_id;
  double pl = 0.0;
  double ne = 0.0;
  double sr = 0.0;
  double spl = 0.0;
  double cls = 0.0;
  double ndtw = 0.0;
  double sdtw = 0.0;
};

struct MetricsReport {
  double threshold = kSuccessDistance;
  std::vector<EpisodeMetrics> episodes;
  EpisodeMetrics mean;  // aggregate: arithmetic mean per column
};

EpisodeMetrics score_episode(const EnvGraph& g, const Episode& e, const std::vector<NodeId>& path,
                             double threshold = kSuccessDistance);
// Trajectories are matched to manifest episodes by id.
MetricsReport score_trajectories(const DatasetManifest& m, const std::vector<Trajectory>& trajectories,
                                 double threshold = kSuccessDistance);

// Column order PL, NE, SR, SPL, CLS, nDTW, SDTW.
const std::vector<std::string>& metric_columns();
std::vector<double> metric_values(const EpisodeMetrics& m);
nlohmann::json to_json(const MetricsReport& r, bool per_episode = false);
std::string metrics_csv(const MetricsReport& r);

enum class CurveMode { kOnReference, kOwnRollout };
std::string to_string(CurveMode m);

// Teacher for an episode at a state: shortest path to the goal for r2r-style
// data, the fidelity teacher for r4r.
Action episode_teacher(const EnvGraph& g, const Episode& e, const AgentState& state);

struct Curve {
  std::vector<double> value;  // per timestep mean
  std::vector<int> count;     // states contributing at each timestep
};

// Per-timestep fraction of states where the selector picks the teacher action.
Curve precision_curve(const Selector& selector, const DatasetManifest& m, const std::vector<const Episode*>& episodes,
                      CurveMode mode, int max_steps = 0);
// Per-timestep fraction of states where both selectors agree. In own-rollout
// mode the states come from selector a's rollout.
Curve agreement_curve(const Selector& a, const Selector& b, const DatasetManifest& m,
                      const std::vector<const Episode*>& episodes, CurveMode mode, int max_steps = 0);

}  // namespace navgen
