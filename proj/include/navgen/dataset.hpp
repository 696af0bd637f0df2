#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "navgen/instructions.hpp"
#include "navgen/world.hpp"

namespace navgen {

inline constexpr const char* kDataSchema = "navgen-data/1";

enum class Split { kTrain, kValSeen, kValUnseen };
enum class Flavor { kR2R, kR4R, kAugmented };

std::string to_string(Split s);
std::string to_string(Flavor f);
Split split_from_string(const std::string& s);
Flavor flavor_from_string(const std::string& s);

struct Episode {
  std::string episode_id;
  std::string trajectory_id;  // shared by the instructions of one path
  std::string env_id;
  NodeId start = 0;
  NodeId goal = 0;
  std::vector<NodeId> reference_path;
  Instruction instruction;
  Split split = Split::kTrain;
  Flavor flavor = Flavor::kR2R;
  bool operator==(const Episode&) const = default;
};

struct R2RCounts {
  int unseen_worlds = 6;            // taken from the end of the world list
  int train_per_world = 34;         // trajectories per seen world
  int val_seen_per_world = 5;       // held-out trajectories per seen world
  int val_unseen_per_world = 17;    // trajectories per unseen world
  int min_hops = 4;
  int max_hops = 7;
  int max_instruction_length = kDefaultMaxInstructionLength;
};

nlohmann::json to_json(const R2RCounts& c);
R2RCounts r2r_counts_from_json(const nlohmann::json& j);

struct DatasetManifest {
  std::string schema = kDataSchema;
  std::string grammar = kGrammarVersion;
  std::vector<EnvGraph> worlds;
  std::vector<Episode> episodes;
  Vocab vocab;
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json params = nlohmann::json::object();

  const EnvGraph& world(const std::string& env_id) const;
  std::vector<const Episode*> split(Split s) const;
  std::vector<const Episode*> split(Split s, Flavor f) const;
  std::set<std::string> env_ids(Split s) const;
  bool operator==(const DatasetManifest& other) const;
};

// Checks every episode and split invariant; throws DataError.
void validate_manifest(const DatasetManifest& m);

DatasetManifest build_r2r_like(const std::vector<EnvGraph>& worlds, const Vocab& vocab, const R2RCounts& counts,
                               std::uint64_t seed);

struct R4RParams {
  int max_per_env = 40;  // joined trajectories per environment and split
  int max_instruction_length = 2 * kDefaultMaxInstructionLength;
};

DatasetManifest build_r4r_like(const DatasetManifest& r2r, std::uint64_t seed, const R4RParams& params = {});

// Extra r2r-flavor episodes on the train worlds of `base`, one instruction
// each. Start/goal pairs already used by val_seen are excluded.
std::vector<Episode> build_augmented(const DatasetManifest& base, int count, std::uint64_t seed);

// Writes manifest.json, worlds/<env>.world.json and data.episodes.jsonl into dir.
void save_manifest(const DatasetManifest& m, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);

nlohmann::json to_json(const Episode& e);
Episode episode_from_json(const nlohmann::json& j);

std::vector<EnvGraph> generate_worlds(int count, std::uint64_t seed, const WorldParams& params);

}  // namespace navgen
