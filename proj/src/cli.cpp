#include "navgen/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

#include "navgen/error.hpp"
#include "navgen/hash.hpp"
#include "navgen/rng.hpp"

namespace navgen {

namespace fs = std::filesystem;

std::string config_hash(const nlohmann::json& config) { return git_blob_hash(config.dump()); }

std::uint64_t seed_from_env(std::uint64_t seed) {
  const char* v = std::getenv("NAVGEN_SEED");
  if (!v || !*v) return seed;
  const std::string s(v);
  if (s.find_first_not_of("0123456789") != std::string::npos || s.size() > 19)
    throw ConfigError("NAVGEN_SEED must be a non-negative integer, got '" + s + "'");
  return std::stoull(s);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const LookupError*>(&e)) return 3;
  return 1;
}

namespace {

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

nlohmann::json stamp(const nlohmann::json& config) {
  return {{"schema", kRunSchema}, {"config", config}, {"config_hash", config_hash(config)}};
}

std::string stamp_line(const std::string& schema, const nlohmann::json& config) {
  return schema + " config_hash=" + config_hash(config);
}

std::string manifest_hash(const std::string& dir) { return file_hash((fs::path(dir) / "manifest.json").string()); }

std::string fixed(double v, int digits = 3) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(digits);
  s << v;
  return s.str();
}

}  // namespace

std::string file_hash(const std::string& path) { return git_blob_hash(read_text(path)); }

// ---------------------------------------------------------------- tables

PolicyVariant policy_variant_from_string(const std::string& s) {
  if (s == "combined+backtrack") return {s, PolicyKind::kCombined, true};
  try {
    return {s, policy_kind_from_string(s), false};
  } catch (const ConfigError&) {
    throw ConfigError("unknown policy '" + s + "', expected disc, gen, combined or combined+backtrack");
  }
}

const std::vector<PolicyVariant>& table_variants() {
  static const std::vector<PolicyVariant> v = {policy_variant_from_string("disc"), policy_variant_from_string("gen"),
                                               policy_variant_from_string("combined"),
                                               policy_variant_from_string("combined+backtrack")};
  return v;
}

std::string table_markdown(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "| split | policy |";
  for (const auto& c : metric_columns()) out << ' ' << c << " |";
  out << "\n|---|---|";
  for (std::size_t i = 0; i < metric_columns().size(); ++i) out << "---:|";
  out << '\n';
  for (const auto& r : rows) {
    out << "| " << r.split << " | " << r.policy << " |";
    for (double v : metric_values(r.report.mean)) out << ' ' << fixed(v) << " |";
    out << '\n';
  }
  return out.str();
}

std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << "split,policy";
  for (const auto& c : metric_columns()) out << ',' << c;
  out << '\n';
  for (const auto& r : rows) {
    out << r.split << ',' << r.policy;
    for (double v : metric_values(r.report.mean)) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

nlohmann::json table_json(const std::vector<TableRow>& rows) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : rows) {
    auto m = to_json(r.report);
    j.push_back({{"split", r.split}, {"policy", r.policy}, {"episodes", m["episodes"]}, {"mean", m["mean"]}});
  }
  return j;
}

// ---------------------------------------------------------------- data

void gen_worlds(const GenWorldsOptions& o) {
  if (o.out.empty()) throw ConfigError("gen-worlds needs --out");
  if (o.count <= 0) throw ConfigError("world count must be positive");
  o.params.validate();
  const auto seed = seed_from_env(o.seed);
  const auto worlds = generate_worlds(o.count, seed, o.params);
  const nlohmann::json config = {{"command", "gen-worlds"}, {"count", o.count}, {"seed", seed},
                                 {"params", to_json(o.params)}};
  nlohmann::json ids = nlohmann::json::array();
  fs::create_directories(o.out);
  for (const auto& g : worlds) {
    save_world(g, (fs::path(o.out) / (g.env_id() + ".world.json")).string());
    ids.push_back(g.env_id());
  }
  auto index = stamp(config);
  index["schema"] = kWorldsIndexSchema;
  index["env_ids"] = ids;
  write_text(fs::path(o.out) / "worlds.json", index.dump(2) + "\n");
}

std::vector<EnvGraph> load_worlds(const std::string& dir) {
  const auto path = (fs::path(dir) / "worlds.json").string();
  const auto index = read_json(path);
  if (index.value("schema", std::string()) != kWorldsIndexSchema)
    throw DataError(path + ": schema mismatch, expected '" + std::string(kWorldsIndexSchema) + "'");
  std::vector<EnvGraph> worlds;
  try {
    for (const auto& id : index.at("env_ids"))
      worlds.push_back(load_world((fs::path(dir) / (id.get<std::string>() + ".world.json")).string()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
  return worlds;
}

void gen_data(const GenDataOptions& o) {
  if (o.worlds.empty() || o.out.empty()) throw ConfigError("gen-data needs --worlds and --out");
  if (o.augmented < 0) throw ConfigError("augmented count must be non-negative");
  const auto seed = seed_from_env(o.seed);
  const auto worlds = load_worlds(o.worlds);
  if (worlds.empty()) throw DataError("no worlds in " + o.worlds);
  const auto index = read_json((fs::path(o.worlds) / "worlds.json").string());
  WorldParams params;
  try {
    params = world_params_from_json(index.at("config").at("params"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(o.worlds + "/worlds.json: " + e.what());
  }
  const auto vocab = Vocab::for_grammar(params.room_palette, params.landmark_palette);

  const nlohmann::json config = {{"command", "gen-data"},
                                 {"seed", seed},
                                 {"worlds_hash", file_hash((fs::path(o.worlds) / "worlds.json").string())},
                                 {"counts", to_json(o.counts)},
                                 {"r4r_max_per_env", o.r4r.max_per_env},
                                 {"r4r_max_instruction_length", o.r4r.max_instruction_length},
                                 {"augmented", o.augmented}};
  const auto hash = config_hash(config);

  auto r2r = build_r2r_like(worlds, vocab, o.counts, seed);
  auto r4r = build_r4r_like(r2r, mix64(seed, hash_string("r4r")), o.r4r);
  if (o.augmented > 0) {
    auto aug = build_augmented(r2r, o.augmented, mix64(seed, hash_string("augmented")));
    r2r.episodes.insert(r2r.episodes.end(), aug.begin(), aug.end());
    r2r.seeds["augmented"] = mix64(seed, hash_string("augmented"));
  }
  validate_manifest(r2r);
  validate_manifest(r4r);
  for (auto* m : {&r2r, &r4r}) {
    m->params["config_hash"] = hash;
    m->params["config"] = config;
  }
  save_manifest(r2r, (fs::path(o.out) / "r2r").string());
  save_manifest(r4r, (fs::path(o.out) / "r4r").string());
}

// ---------------------------------------------------------------- train

TrainResult run_train(const TrainOptions& o) {
  if (o.data.empty() || o.out.empty()) throw ConfigError("train needs --data and --out");
  TrainConfig c = o.config;
  c.seed = seed_from_env(c.seed);
  c.validate();
  const auto m = load_manifest(o.data);
  nlohmann::json config = {{"command", "train"}, {"train", to_json(c)}, {"data_hash", manifest_hash(o.data)}};
  const auto hash = config_hash(config);

  const auto log_path = o.log.empty() ? o.out + ".log.jsonl" : o.log;
  if (fs::path(log_path).has_parent_path()) fs::create_directories(fs::path(log_path).parent_path());
  std::ofstream log(log_path);
  if (!log) throw DataError("cannot write " + log_path);
  log << nlohmann::json{{"schema", "navgen-trainlog/1"}, {"config", config}, {"config_hash", hash}}.dump() << '\n';
  auto result = train(c, m, [&](const EpochLog& e) {
    log << to_json(e).dump() << '\n' << std::flush;
    if (!o.quiet) std::cerr << to_json(e).dump() << '\n';
  });
  if (fs::path(o.out).has_parent_path()) fs::create_directories(fs::path(o.out).parent_path());
  save_model(*result.model, o.out, {{"config", config}, {"config_hash", hash}});
  return result;
}

// ---------------------------------------------------------------- eval

ModelPair load_models(const std::string& follower, const std::string& speaker, const DatasetManifest& m) {
  ModelPair p;
  auto load = [&](const std::string& path, ModelKind want) {
    auto model = load_model(path);
    if (model->kind() != want)
      throw DataError(path + ": expected a " + to_string(want) + " checkpoint, got " + to_string(model->kind()));
    if (model->config().vocab_hash != m.vocab.hash())
      throw DataError(path + ": vocabulary hash does not match the dataset");
    return model;
  };
  if (!follower.empty()) {
    p.follower_holder = load(follower, ModelKind::kFollower);
    p.follower = dynamic_cast<const FollowerModel*>(p.follower_holder.get());
  }
  if (!speaker.empty()) {
    p.speaker_holder = load(speaker, ModelKind::kSpeaker);
    p.speaker = dynamic_cast<const SpeakerPolicyModel*>(p.speaker_holder.get());
  }
  return p;
}

std::vector<const Episode*> select_episodes(const DatasetManifest& m, const std::string& split,
                                            const std::string& flavor) {
  const Split s = split_from_string(split);
  return flavor.empty() ? m.split(s) : m.split(s, flavor_from_string(flavor));
}

namespace {

void require_models(const PolicyVariant& v, const ModelPair& p) {
  if (v.kind != PolicyKind::kGen && !p.follower) throw ConfigError(v.name + " policy needs --follower");
  if (v.kind != PolicyKind::kDisc && !p.speaker) throw ConfigError(v.name + " policy needs --speaker");
}

void check_common(double beta, double d_th, int max_steps, int jobs) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in [0, 1]");
  if (!(d_th > 0.0)) throw ConfigError("success distance must be positive");
  if (max_steps < 0) throw ConfigError("max steps must be non-negative");
  if (jobs < 1) throw ConfigError("jobs must be at least 1");
}

nlohmann::json model_hashes(const std::string& follower, const std::string& speaker) {
  nlohmann::json j = nlohmann::json::object();
  if (!follower.empty()) j["follower_hash"] = file_hash(follower);
  if (!speaker.empty()) j["speaker_hash"] = file_hash(speaker);
  return j;
}

void write_metrics(const fs::path& dir, const std::string& stem, const MetricsReport& r, const nlohmann::json& config) {
  auto j = to_json(r, true);
  j["config"] = config;
  j["config_hash"] = config_hash(config);
  write_text(dir / (stem + ".json"), j.dump(2) + "\n");
  write_text(dir / (stem + ".csv"), "# " + stamp_line(kMetricsSchema, config) + "\n" + metrics_csv(r));
}

}  // namespace

MetricsReport run_eval(const EvalOptions& o) {
  if (o.data.empty()) throw ConfigError("eval needs --data");
  check_common(o.beta, o.d_th, o.max_steps, o.jobs);
  const auto variant = policy_variant_from_string(o.policy);
  const auto m = load_manifest(o.data);
  const auto models = load_models(o.follower, o.speaker, m);
  require_models(variant, models);
  const auto episodes = select_episodes(m, o.split, o.flavor);
  if (episodes.empty()) throw DataError("split " + o.split + " has no episodes");

  nlohmann::json config = {{"command", "eval"},       {"policy", variant.name}, {"split", o.split},
                           {"flavor", o.flavor},      {"beta", o.beta},         {"success_distance", o.d_th},
                           {"max_steps", o.max_steps}, {"data_hash", manifest_hash(o.data)}};
  config.update(model_hashes(o.follower, o.speaker));

  const ModelSelector selector(variant.kind, models.follower, models.speaker, o.beta);
  const auto trajs = run_policy(selector, m, episodes, o.max_steps, variant.backtrack, o.jobs);
  const auto report = score_trajectories(m, trajs, o.d_th);
  if (!o.out.empty()) {
    const fs::path dir(o.out);
    fs::create_directories(dir);
    save_trajectories((dir / "trajectories.jsonl").string(), trajs,
                      {{"config", config}, {"config_hash", config_hash(config)}});
    write_metrics(dir, "metrics", report, config);
  }
  return report;
}

std::vector<TableRow> evaluate_variants(const DatasetManifest& m, const std::vector<const Episode*>& episodes,
                                        const std::string& split, const FollowerModel& follower,
                                        const SpeakerPolicyModel& speaker, double beta, double d_th, int max_steps,
                                        int jobs) {
  std::vector<TableRow> rows;
  for (const auto& v : table_variants()) {
    const ModelSelector selector(v.kind, &follower, &speaker, beta);
    const auto trajs = run_policy(selector, m, episodes, max_steps, v.backtrack, jobs);
    rows.push_back({split, v.name, score_trajectories(m, trajs, d_th)});
  }
  return rows;
}

namespace {

void append_curve(std::ostringstream& out, const std::string& split, const std::string& curve, CurveMode mode,
                  const std::string& policy, const Curve& c) {
  for (std::size_t t = 0; t < c.value.size(); ++t)
    out << split << ',' << curve << ',' << to_string(mode) << ',' << policy << ',' << t << ',' << c.value[t] << ','
        << c.count[t] << '\n';
}

}  // namespace

std::vector<TableRow> run_compare(const CompareOptions& o) {
  if (o.data.empty() || o.follower.empty() || o.speaker.empty())
    throw ConfigError("compare needs --data, --follower and --speaker");
  if (o.splits.empty()) throw ConfigError("compare needs at least one split");
  check_common(o.beta, o.d_th, o.max_steps, o.jobs);
  const auto m = load_manifest(o.data);
  const auto models = load_models(o.follower, o.speaker, m);

  nlohmann::json config = {{"command", "compare"},    {"splits", o.splits},
                           {"flavor", o.flavor},      {"beta", o.beta},
                           {"success_distance", o.d_th}, {"max_steps", o.max_steps},
                           {"data_hash", manifest_hash(o.data)}};
  config.update(model_hashes(o.follower, o.speaker));

  std::vector<TableRow> rows;
  std::ostringstream curves;
  curves.precision(17);
  curves << "# " << stamp_line(kCurvesSchema, config) << '\n';
  curves << "split,curve,mode,policy,t,value,count\n";
  const ModelSelector disc(PolicyKind::kDisc, models.follower, models.speaker, o.beta);
  const ModelSelector gen(PolicyKind::kGen, models.follower, models.speaker, o.beta);
  const ModelSelector combined(PolicyKind::kCombined, models.follower, models.speaker, o.beta);
  for (const auto& split : o.splits) {
    const auto episodes = select_episodes(m, split, o.flavor);
    if (episodes.empty()) throw DataError("split " + split + " has no episodes");
    auto part = evaluate_variants(m, episodes, split, *models.follower, *models.speaker, o.beta, o.d_th, o.max_steps,
                                  o.jobs);
    rows.insert(rows.end(), part.begin(), part.end());
    for (CurveMode mode : {CurveMode::kOnReference, CurveMode::kOwnRollout}) {
      for (const ModelSelector* s : {&disc, &gen, &combined})
        append_curve(curves, split, "precision", mode, s->name(),
                     precision_curve(*s, m, episodes, mode, o.max_steps));
      append_curve(curves, split, "agreement", mode, "disc|gen",
                   agreement_curve(disc, gen, m, episodes, mode, o.max_steps));
    }
  }
  if (!o.out.empty()) {
    const fs::path dir(o.out);
    auto j = stamp(config);
    j["schema"] = kTableSchema;
    j["rows"] = table_json(rows);
    write_text(dir / "table.json", j.dump(2) + "\n");
    write_text(dir / "table.md", "<!-- " + stamp_line(kTableSchema, config) + " -->\n" + table_markdown(rows));
    write_text(dir / "table.csv", "# " + stamp_line(kTableSchema, config) + "\n" + table_csv(rows));
    write_text(dir / "curves.csv", curves.str());
  }
  return rows;
}

// ---------------------------------------------------------------- tent

std::vector<TentProfile> run_tent(const TentOptions& o) {
  if (o.data.empty() || o.speaker.empty()) throw ConfigError("tent needs --data and --speaker");
  if (o.count < 0) throw ConfigError("count must be non-negative");
  check_common(o.beta, kSuccessDistance, o.max_steps, 1);
  const auto variant = policy_variant_from_string(o.policy);
  if (variant.backtrack) throw ConfigError("tent traces greedy rollouts; backtracking is not supported");
  const auto m = load_manifest(o.data);
  const auto models = load_models(o.follower, o.speaker, m);
  require_models(variant, models);

  std::vector<const Episode*> episodes;
  if (!o.episodes.empty()) {
    for (const auto& id : o.episodes) {
      const Episode* found = nullptr;
      for (const auto& e : m.episodes)
        if (e.episode_id == id) found = &e;
      if (!found) throw DataError("unknown episode '" + id + "'");
      episodes.push_back(found);
    }
  } else {
    episodes = select_episodes(m, o.split, "");
    if (episodes.size() > static_cast<std::size_t>(o.count)) episodes.resize(static_cast<std::size_t>(o.count));
  }

  nlohmann::json ids = nlohmann::json::array();
  for (const auto* e : episodes) ids.push_back(e->episode_id);
  nlohmann::json config = {{"command", "tent"}, {"policy", variant.name}, {"beta", o.beta},
                           {"episodes", ids},   {"max_steps", o.max_steps}, {"data_hash", manifest_hash(o.data)}};
  config.update(model_hashes(o.follower, o.speaker));

  const ModelSelector selector(variant.kind, models.follower, models.speaker, o.beta);
  std::vector<TentProfile> profiles;
  for (const auto* e : episodes) {
    auto p = tent_trace(*models.speaker, m.vocab, m.world(e->env_id), *e, selector, o.max_steps);
    profiles.insert(profiles.end(), p.begin(), p.end());
  }
  if (!o.out.empty()) render_tent(profiles, o.out, stamp_line("navgen-tent/1", config));
  return profiles;
}

// ---------------------------------------------------------------- score

MetricsReport run_score(const ScoreOptions& o) {
  if (o.data.empty()) throw ConfigError("score needs --data");
  if (o.reference == !o.trajectories.empty()) throw ConfigError("score needs exactly one of --traj or --reference");
  if (!(o.d_th > 0.0)) throw ConfigError("success distance must be positive");
  const auto m = load_manifest(o.data);
  nlohmann::json config = {{"command", "score"}, {"success_distance", o.d_th}, {"data_hash", manifest_hash(o.data)}};
  std::vector<Trajectory> trajs;
  if (o.reference) {
    config["reference_split"] = o.split;
    for (const auto* e : select_episodes(m, o.split, "")) {
      Trajectory t;
      t.episode_id = e->episode_id;
      t.nodes = e->reference_path;
      for (std::size_t i = 1; i < t.nodes.size(); ++i) t.actions.push_back(Action::move_to(t.nodes[i]));
      t.actions.push_back(Action::stop());
      t.stopped = true;
      t.steps = static_cast<int>(t.nodes.size()) - 1;
      trajs.push_back(std::move(t));
    }
  } else {
    config["trajectories_hash"] = file_hash(o.trajectories);
    trajs = load_trajectories(o.trajectories);
  }
  const auto report = score_trajectories(m, trajs, o.d_th);
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_metrics(fs::path(o.out), "metrics", report, config);
  }
  return report;
}

}  // namespace navgen
