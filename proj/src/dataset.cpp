#include "navgen/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "navgen/error.hpp"
#include "navgen/rng.hpp"

namespace navgen {
namespace fs = std::filesystem;

namespace {

const char* split_tag(Split s) {
  switch (s) {
    case Split::kTrain:
      return "tr";
    case Split::kValSeen:
      return "vs";
    case Split::kValUnseen:
      return "vu";
  }
  return "tr";
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  if (static_cast<int>(s.size()) < width) s.insert(0, static_cast<std::size_t>(width) - s.size(), '0');
  return s;
}

std::vector<std::pair<NodeId, NodeId>> pairs_in_hop_range(const EnvGraph& g, int min_hops, int max_hops) {
  std::vector<std::pair<NodeId, NodeId>> out;
  const auto n = static_cast<NodeId>(g.size());
  for (NodeId s = 0; s < n; ++s) {
    for (NodeId t = 0; t < n; ++t) {
      if (s == t) continue;
      const auto hops = static_cast<int>(shortest_path(g, s, t).path.size()) - 1;
      if (hops >= min_hops && hops <= max_hops) out.emplace_back(s, t);
    }
  }
  return out;
}

void add_trajectory(DatasetManifest& m, const EnvGraph& g, const std::vector<NodeId>& path, Split split,
                    const std::string& trajectory_id, std::uint64_t seed, int max_len) {
  const auto instr_seed = mix64(seed, hash_string(trajectory_id));
  for (Style style : kAllStyles) {
    Episode e;
    e.trajectory_id = trajectory_id;
    e.episode_id = trajectory_id + "-" + to_string(style);
    e.env_id = g.env_id();
    e.start = path.front();
    e.goal = path.back();
    e.reference_path = path;
    e.instruction = generate_instruction(g, m.vocab, path, style, instr_seed, max_len);
    e.split = split;
    e.flavor = Flavor::kR2R;
    m.episodes.push_back(std::move(e));
  }
}

}  // namespace

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain:
      return "train";
    case Split::kValSeen:
      return "val_seen";
    case Split::kValUnseen:
      return "val_unseen";
  }
  return "train";
}

std::string to_string(Flavor f) {
  switch (f) {
    case Flavor::kR2R:
      return "r2r";
    case Flavor::kR4R:
      return "r4r";
    case Flavor::kAugmented:
      return "augmented";
  }
  return "r2r";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val_seen") return Split::kValSeen;
  if (s == "val_unseen") return Split::kValUnseen;
  throw DataError("unknown split '" + s + "'");
}

Flavor flavor_from_string(const std::string& s) {
  if (s == "r2r") return Flavor::kR2R;
  if (s == "r4r") return Flavor::kR4R;
  if (s == "augmented") return Flavor::kAugmented;
  throw DataError("unknown flavor '" + s + "'");
}

nlohmann::json to_json(const R2RCounts& c) {
  return {{"unseen_worlds", c.unseen_worlds},       {"train_per_world", c.train_per_world},
          {"val_seen_per_world", c.val_seen_per_world}, {"val_unseen_per_world", c.val_unseen_per_world},
          {"min_hops", c.min_hops},                 {"max_hops", c.max_hops},
          {"max_instruction_length", c.max_instruction_length}};
}

R2RCounts r2r_counts_from_json(const nlohmann::json& j) {
  R2RCounts c;
  try {
    c.unseen_worlds = j.value("unseen_worlds", c.unseen_worlds);
    c.train_per_world = j.value("train_per_world", c.train_per_world);
    c.val_seen_per_world = j.value("val_seen_per_world", c.val_seen_per_world);
    c.val_unseen_per_world = j.value("val_unseen_per_world", c.val_unseen_per_world);
    c.min_hops = j.value("min_hops", c.min_hops);
    c.max_hops = j.value("max_hops", c.max_hops);
    c.max_instruction_length = j.value("max_instruction_length", c.max_instruction_length);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid r2r counts: ") + e.what());
  }
  return c;
}

const EnvGraph& DatasetManifest::world(const std::string& env_id) const {
  for (const auto& w : worlds) {
    if (w.env_id() == env_id) return w;
  }
  throw LookupError("unknown environment '" + env_id + "'");
}

std::vector<const Episode*> DatasetManifest::split(Split s) const {
  std::vector<const Episode*> out;
  for (const auto& e : episodes) {
    if (e.split == s) out.push_back(&e);
  }
  return out;
}

std::vector<const Episode*> DatasetManifest::split(Split s, Flavor f) const {
  std::vector<const Episode*> out;
  for (const auto& e : episodes) {
    if (e.split == s && e.flavor == f) out.push_back(&e);
  }
  return out;
}

std::set<std::string> DatasetManifest::env_ids(Split s) const {
  std::set<std::string> out;
  for (const auto& e : episodes) {
    if (e.split == s) out.insert(e.env_id);
  }
  return out;
}

bool DatasetManifest::operator==(const DatasetManifest& o) const {
  return schema == o.schema && grammar == o.grammar && worlds == o.worlds && episodes == o.episodes &&
         vocab == o.vocab && seeds == o.seeds && params == o.params;
}

void validate_manifest(const DatasetManifest& m) {
  if (m.schema != kDataSchema) throw DataError("dataset schema mismatch: expected '" + std::string(kDataSchema) + "'");
  if (m.grammar != kGrammarVersion)
    throw DataError("grammar version mismatch: expected '" + std::string(kGrammarVersion) + "'");
  int r2r_max = kDefaultMaxInstructionLength;
  int r4r_max = 2 * kDefaultMaxInstructionLength;
  if (m.params.contains("r2r")) r2r_max = r2r_counts_from_json(m.params.at("r2r")).max_instruction_length;
  if (m.params.contains("r4r")) r4r_max = m.params.at("r4r").value("max_instruction_length", r4r_max);
  std::set<std::string> ids;
  for (const auto& e : m.episodes) {
    if (!ids.insert(e.episode_id).second) throw DataError("duplicate episode id '" + e.episode_id + "'");
    const auto& g = m.world(e.env_id);
    const auto& r = e.reference_path;
    if (r.empty() || r.front() != e.start || r.back() != e.goal)
      throw DataError("episode '" + e.episode_id + "': reference path must run from start to goal");
    for (std::size_t i = 1; i < r.size(); ++i) {
      if (!g.adjacent(r[i - 1], r[i])) throw DataError("episode '" + e.episode_id + "': reference path not a walk");
    }
    if (e.flavor != Flavor::kR4R && shortest_path(g, e.start, e.goal).path != r)
      throw DataError("episode '" + e.episode_id + "': r2r reference path is not the shortest path");
    validate_instruction(e.instruction, m.vocab, e.flavor == Flavor::kR4R ? r4r_max : r2r_max);
    for (int id : e.instruction.ids) {
      if (id == kUnk) throw DataError("episode '" + e.episode_id + "': instruction contains UNK");
    }
  }
  const auto unseen = m.env_ids(Split::kValUnseen);
  for (Split s : {Split::kTrain, Split::kValSeen}) {
    for (const auto& env : m.env_ids(s)) {
      if (unseen.count(env)) throw DataError("environment '" + env + "' appears in both val_unseen and " + to_string(s));
    }
  }
}

std::vector<EnvGraph> generate_worlds(int count, std::uint64_t seed, const WorldParams& params) {
  if (count < 1) throw ConfigError("world count must be positive");
  std::vector<EnvGraph> worlds;
  worlds.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    worlds.push_back(generate_world(mix64(seed, static_cast<std::uint64_t>(i)), params, "w" + zero_pad(i, 3)));
  }
  return worlds;
}

DatasetManifest build_r2r_like(const std::vector<EnvGraph>& worlds, const Vocab& vocab, const R2RCounts& counts,
                               std::uint64_t seed) {
  if (worlds.size() < 3) throw ConfigError("at least 3 worlds are required, got " + std::to_string(worlds.size()));
  if (counts.unseen_worlds < 1 || static_cast<std::size_t>(counts.unseen_worlds) >= worlds.size())
    throw ConfigError("unseen_worlds must be in [1, number of worlds)");
  if (counts.min_hops < 1 || counts.max_hops < counts.min_hops) throw ConfigError("invalid hop range");
  if (counts.train_per_world < 0 || counts.val_seen_per_world < 0 || counts.val_unseen_per_world < 0)
    throw ConfigError("per-world counts must be non-negative");

  DatasetManifest m;
  m.worlds = worlds;
  m.vocab = vocab;
  m.seeds = {{"r2r", seed}};
  m.params = {{"r2r", to_json(counts)}};

  const auto seen_count = worlds.size() - static_cast<std::size_t>(counts.unseen_worlds);
  for (std::size_t wi = 0; wi < worlds.size(); ++wi) {
    const auto& g = worlds[wi];
    auto pairs = pairs_in_hop_range(g, counts.min_hops, counts.max_hops);
    if (pairs.empty())
      throw GenerationError("world '" + g.env_id() + "' has no start/goal pair with " +
                            std::to_string(counts.min_hops) + "-" + std::to_string(counts.max_hops) + " hops");
    Rng rng(seed, hash_string(g.env_id()));
    rng.shuffle(pairs.begin(), pairs.end());

    std::vector<std::pair<Split, int>> plan;
    if (wi < seen_count) {
      plan = {{Split::kTrain, counts.train_per_world}, {Split::kValSeen, counts.val_seen_per_world}};
    } else {
      plan = {{Split::kValUnseen, counts.val_unseen_per_world}};
    }
    std::size_t cursor = 0;
    for (auto [split, want] : plan) {
      for (int k = 0; k < want && cursor < pairs.size(); ++k, ++cursor) {
        const auto path = shortest_path(g, pairs[cursor].first, pairs[cursor].second).path;
        const auto tid = g.env_id() + "-" + split_tag(split) + zero_pad(k, 3);
        add_trajectory(m, g, path, split, tid, seed, counts.max_instruction_length);
      }
    }
  }
  return m;
}

DatasetManifest build_r4r_like(const DatasetManifest& r2r, std::uint64_t seed, const R4RParams& params) {
  struct Traj {
    std::string id;
    std::string env_id;
    Split split;
    std::vector<NodeId> path;
    std::map<Style, Instruction> instructions;
  };
  std::vector<Traj> trajs;
  std::map<std::string, std::size_t> index;
  for (const auto& e : r2r.episodes) {
    if (e.flavor != Flavor::kR2R) continue;
    auto [it, inserted] = index.emplace(e.trajectory_id, trajs.size());
    if (inserted) trajs.push_back(Traj{e.trajectory_id, e.env_id, e.split, e.reference_path, {}});
    trajs[it->second].instructions[e.instruction.style] = e.instruction;
  }

  DatasetManifest m;
  m.worlds = r2r.worlds;
  m.vocab = r2r.vocab;
  m.seeds = r2r.seeds;
  m.seeds["r4r"] = seed;
  m.params = r2r.params;
  m.params["r4r"] = {{"max_per_env", params.max_per_env}, {"max_instruction_length", params.max_instruction_length}};

  // Group by (split, env) in first-appearance order.
  std::vector<std::pair<Split, std::string>> groups;
  for (const auto& t : trajs) {
    std::pair<Split, std::string> key{t.split, t.env_id};
    if (std::find(groups.begin(), groups.end(), key) == groups.end()) groups.push_back(key);
  }
  for (const auto& [split, env] : groups) {
    std::vector<std::pair<std::size_t, std::size_t>> joinable;
    for (std::size_t i = 0; i < trajs.size(); ++i) {
      if (trajs[i].split != split || trajs[i].env_id != env) continue;
      for (std::size_t j = 0; j < trajs.size(); ++j) {
        if (i == j || trajs[j].split != split || trajs[j].env_id != env) continue;
        if (trajs[i].path.back() == trajs[j].path.front()) joinable.emplace_back(i, j);
      }
    }
    Rng rng(seed, mix64(hash_string(env), static_cast<std::uint64_t>(split)));
    rng.shuffle(joinable.begin(), joinable.end());
    if (joinable.size() > static_cast<std::size_t>(params.max_per_env))
      joinable.resize(static_cast<std::size_t>(params.max_per_env));
    std::sort(joinable.begin(), joinable.end());
    for (auto [i, j] : joinable) {
      const auto& a = trajs[i];
      const auto& b = trajs[j];
      std::vector<NodeId> path = a.path;
      path.insert(path.end(), b.path.begin() + 1, b.path.end());
      const auto tid = "r4r-" + a.id + "+" + b.id;
      for (Style style : kAllStyles) {
        auto ia = a.instructions.find(style);
        auto ib = b.instructions.find(style);
        if (ia == a.instructions.end() || ib == b.instructions.end()) continue;
        Episode e;
        e.trajectory_id = tid;
        e.episode_id = tid + "-" + to_string(style);
        e.env_id = env;
        e.start = path.front();
        e.goal = path.back();
        e.reference_path = path;
        e.instruction = concatenate(ia->second, ib->second);
        if (e.instruction.ids.size() > static_cast<std::size_t>(params.max_instruction_length)) continue;
        e.split = split;
        e.flavor = Flavor::kR4R;
        m.episodes.push_back(std::move(e));
      }
    }
  }
  if (m.episodes.empty()) throw GenerationError("no joinable r2r trajectory pairs");
  return m;
}

std::vector<Episode> build_augmented(const DatasetManifest& base, int count, std::uint64_t seed) {
  if (count < 0) throw ConfigError("augmented count must be non-negative");
  R2RCounts counts;
  if (base.params.contains("r2r")) counts = r2r_counts_from_json(base.params.at("r2r"));

  std::set<std::tuple<std::string, NodeId, NodeId>> excluded;
  for (const auto* e : base.split(Split::kValSeen)) excluded.emplace(e->env_id, e->start, e->goal);
  std::set<std::string> existing_ids;
  for (const auto& e : base.episodes) existing_ids.insert(e.episode_id);

  struct Pool {
    const EnvGraph* graph;
    std::vector<std::pair<NodeId, NodeId>> pairs;
  };
  std::vector<Pool> pools;
  for (const auto& env : base.env_ids(Split::kTrain)) {
    const auto& g = base.world(env);
    Pool p{&g, {}};
    for (auto pr : pairs_in_hop_range(g, counts.min_hops, counts.max_hops)) {
      if (!excluded.count({env, pr.first, pr.second})) p.pairs.push_back(pr);
    }
    if (!p.pairs.empty()) pools.push_back(std::move(p));
  }
  if (count > 0 && pools.empty()) throw GenerationError("no train world can host augmented episodes");

  Rng rng(seed, hash_string("augmented"));
  std::vector<Episode> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int k = 0; k < count; ++k) {
    const auto& pool = pools[rng.below(pools.size())];
    const auto pr = pool.pairs[rng.below(pool.pairs.size())];
    const auto style = kAllStyles[rng.below(3)];
    const auto& g = *pool.graph;
    Episode e;
    e.trajectory_id = "aug-" + zero_pad(k, 5);
    e.episode_id = e.trajectory_id;
    while (existing_ids.count(e.episode_id)) e.episode_id += "x";
    e.env_id = g.env_id();
    e.reference_path = shortest_path(g, pr.first, pr.second).path;
    e.start = pr.first;
    e.goal = pr.second;
    e.instruction = generate_instruction(g, base.vocab, e.reference_path, style, mix64(seed, k),
                                         counts.max_instruction_length);
    e.split = Split::kTrain;
    e.flavor = Flavor::kAugmented;
    out.push_back(std::move(e));
  }
  return out;
}

nlohmann::json to_json(const Episode& e) {
  return {{"episode_id", e.episode_id},
          {"trajectory_id", e.trajectory_id},
          {"env_id", e.env_id},
          {"start", e.start},
          {"goal", e.goal},
          {"reference_path", e.reference_path},
          {"instruction", {{"ids", e.instruction.ids}, {"text", e.instruction.text}, {"style", to_string(e.instruction.style)}}},
          {"split", to_string(e.split)},
          {"flavor", to_string(e.flavor)}};
}

Episode episode_from_json(const nlohmann::json& j) {
  Episode e;
  e.episode_id = j.at("episode_id").get<std::string>();
  e.trajectory_id = j.at("trajectory_id").get<std::string>();
  e.env_id = j.at("env_id").get<std::string>();
  e.start = j.at("start").get<NodeId>();
  e.goal = j.at("goal").get<NodeId>();
  e.reference_path = j.at("reference_path").get<std::vector<NodeId>>();
  const auto& ji = j.at("instruction");
  e.instruction.ids = ji.at("ids").get<std::vector<int>>();
  e.instruction.text = ji.at("text").get<std::string>();
  e.instruction.style = style_from_string(ji.at("style").get<std::string>());
  e.split = split_from_string(j.at("split").get<std::string>());
  e.flavor = flavor_from_string(j.at("flavor").get<std::string>());
  return e;
}

void save_manifest(const DatasetManifest& m, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "worlds");
  nlohmann::json worlds = nlohmann::json::array();
  for (const auto& g : m.worlds) {
    const auto rel = "worlds/" + g.env_id() + ".world.json";
    save_world(g, (fs::path(dir) / rel).string());
    worlds.push_back({{"env_id", g.env_id()}, {"file", rel}});
  }
  nlohmann::json splits = nlohmann::json::object();
  for (Split s : {Split::kTrain, Split::kValSeen, Split::kValUnseen}) {
    const auto ids = m.env_ids(s);
    splits[to_string(s)] = std::vector<std::string>(ids.begin(), ids.end());
  }
  const std::string episodes_file = "data.episodes.jsonl";
  nlohmann::json manifest = {{"schema", m.schema},     {"grammar", m.grammar},
                             {"vocab", to_json(m.vocab)}, {"seeds", m.seeds},
                             {"params", m.params},     {"worlds", worlds},
                             {"splits", splits},       {"episodes_file", episodes_file},
                             {"episode_count", m.episodes.size()}};
  {
    std::ofstream out(fs::path(dir) / "manifest.json");
    if (!out) throw DataError("cannot write manifest in " + dir);
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(fs::path(dir) / episodes_file);
  if (!out) throw DataError("cannot write episodes in " + dir);
  for (const auto& e : m.episodes) out << to_json(e).dump() << '\n';
}

DatasetManifest load_manifest(const std::string& dir) {
  const auto manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot read " + manifest_path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }
  DatasetManifest m;
  std::string episodes_file;
  std::size_t expected = 0;
  try {
    m.schema = j.at("schema").get<std::string>();
    if (m.schema != kDataSchema)
      throw DataError(manifest_path + ": schema mismatch, expected '" + std::string(kDataSchema) + "', got '" +
                      m.schema + "'");
    m.grammar = j.at("grammar").get<std::string>();
    if (m.grammar != kGrammarVersion)
      throw DataError(manifest_path + ": grammar mismatch, expected '" + std::string(kGrammarVersion) + "'");
    m.vocab = vocab_from_json(j.at("vocab"));
    m.seeds = j.at("seeds");
    m.params = j.at("params");
    for (const auto& w : j.at("worlds")) {
      m.worlds.push_back(load_world((fs::path(dir) / w.at("file").get<std::string>()).string()));
    }
    episodes_file = j.at("episodes_file").get<std::string>();
    expected = j.at("episode_count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(manifest_path + ": " + e.what());
  }

  const auto ep_path = (fs::path(dir) / episodes_file).string();
  std::ifstream ein(ep_path);
  if (!ein) throw DataError("cannot read " + ep_path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ein, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      m.episodes.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DataError(ep_path + ":" + std::to_string(line_no) + ": malformed episode record: " + e.what());
    }
  }
  if (m.episodes.size() != expected)
    throw DataError(ep_path + ": expected " + std::to_string(expected) + " episodes, found " +
                    std::to_string(m.episodes.size()));
  validate_manifest(m);
  return m;
}

}  // namespace navgen
