#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/dataset.hpp"
#include "navgen/learn.hpp"
#include "navgen/metrics.hpp"
#include "navgen/policies.hpp"
#include "navgen/tent.hpp"
#include "navgen/world.hpp"

namespace navgen {

inline constexpr const char* kWorldsIndexSchema = "navgen-worlds/1";
inline constexpr const char* kTableSchema = "navgen-table/1";
inline constexpr const char* kCurvesSchema = "navgen-curves/1";
inline constexpr const char* kRunSchema = "navgen-run/1";

// Content hash of a resolved configuration (git blob hash of its compact dump).
std::string config_hash(const nlohmann::json& config);
// Returns NAVGEN_SEED when set, otherwise `seed`. A malformed value is a ConfigError.
std::uint64_t seed_from_env(std::uint64_t seed);
// 2 for configuration errors, 3 for data errors, 1 for anything else.
int exit_code_for(const std::exception& e);
std::string file_hash(const std::string& path);

struct PolicyVariant {
  std::string name;
  PolicyKind kind = PolicyKind::kDisc;
  bool backtrack = false;
};
PolicyVariant policy_variant_from_string(const std::string& s);
// disc, gen, combined, combined+backtrack
const std::vector<PolicyVariant>& table_variants();

struct TableRow {
  std::string split;
  std::string policy;
  MetricsReport report;
};
std::string table_markdown(const std::vector<TableRow>& rows);
std::string table_csv(const std::vector<TableRow>& rows);
nlohmann::json table_json(const std::vector<TableRow>& rows);

struct GenWorldsOptions {
  int count = 26;
  std::uint64_t seed = 11;
  WorldParams params;
  std::string out;
};
void gen_worlds(const GenWorldsOptions& o);
std::vector<EnvGraph> load_worlds(const std::string& dir);

struct GenDataOptions {
  std::string worlds;
  std::string out;
  std::uint64_t seed = 12;
  R2RCounts counts;
  R4RParams r4r;
  int augmented = 4000;
};
// Writes <out>/r2r (original plus augmented episodes) and <out>/r4r.
void gen_data(const GenDataOptions& o);

struct TrainOptions {
  std::string data;
  std::string out;  // checkpoint path
  std::string log;  // epoch log, defaults to <out>.log.jsonl
  TrainConfig config;
  bool quiet = false;
};
TrainResult run_train(const TrainOptions& o);

struct ModelPair {
  std::unique_ptr<NavModel> follower_holder;
  std::unique_ptr<NavModel> speaker_holder;
  const FollowerModel* follower = nullptr;
  const SpeakerPolicyModel* speaker = nullptr;
};
// Loads whichever checkpoints are named and checks them against the vocabulary.
ModelPair load_models(const std::string& follower, const std::string& speaker, const DatasetManifest& m);

struct EvalOptions {
  std::string data;
  std::string split = "val_unseen";
  std::string flavor;  // empty: every flavor in the split
  std::string policy = "disc";
  std::string follower;
  std::string speaker;
  double beta = kDefaultBeta;
  double d_th = kSuccessDistance;
  int max_steps = 0;
  int jobs = 1;
  std::string out;
};
std::vector<const Episode*> select_episodes(const DatasetManifest& m, const std::string& split, const std::string& flavor);
MetricsReport run_eval(const EvalOptions& o);

struct CompareOptions {
  std::string data;
  std::vector<std::string> splits = {"val_seen", "val_unseen"};
  std::string flavor;
  std::string follower;
  std::string speaker;
  double beta = kDefaultBeta;
  double d_th = kSuccessDistance;
  int max_steps = 0;
  int jobs = 1;
  std::string out;
};
std::vector<TableRow> run_compare(const CompareOptions& o);
// Table rows for every variant on one split; the building block of compare.
std::vector<TableRow> evaluate_variants(const DatasetManifest& m, const std::vector<const Episode*>& episodes,
                                        const std::string& split, const FollowerModel& follower,
                                        const SpeakerPolicyModel& speaker, double beta, double d_th, int max_steps,
                                        int jobs);

struct TentOptions {
  std::string data;
  std::string speaker;
  std::string follower;
  std::string policy = "gen";
  double beta = kDefaultBeta;
  std::vector<std::string> episodes;
  std::string split = "val_seen";
  int count = 3;
  int max_steps = 0;
  std::string out;
};
std::vector<TentProfile> run_tent(const TentOptions& o);

struct ScoreOptions {
  std::string data;
  std::string trajectories;
  bool reference = false;  // score the reference paths of `split` instead
  std::string split = "val_unseen";
  double d_th = kSuccessDistance;
  std::string out;
};
MetricsReport run_score(const ScoreOptions& o);

}  // namespace navgen
