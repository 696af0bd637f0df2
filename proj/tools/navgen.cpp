#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "navgen/cli.hpp"
#include "navgen/error.hpp"

using namespace navgen;

namespace {

nlohmann::json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void print_report(const MetricsReport& r) { std::cout << to_json(r).dump(2) << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"navgen: instruction-following navigation with discriminative and generative policies"};
  app.require_subcommand(1);

  GenWorldsOptions gw;
  auto* c_worlds = app.add_subcommand("gen-worlds", "Generate navigation graphs");
  c_worlds->add_option("--count", gw.count, "Number of worlds")->capture_default_str();
  c_worlds->add_option("--seed", gw.seed, "World seed (NAVGEN_SEED overrides)")->capture_default_str();
  c_worlds->add_option("--nodes", gw.params.num_nodes, "Nodes per world")->capture_default_str();
  c_worlds->add_option("--out", gw.out, "Output directory")->required();

  GenDataOptions gd;
  auto* c_data = app.add_subcommand("gen-data", "Build r2r, r4r and augmented episodes");
  c_data->add_option("--worlds", gd.worlds, "Directory written by gen-worlds")->required();
  c_data->add_option("--out", gd.out, "Output directory")->required();
  c_data->add_option("--seed", gd.seed, "Data seed (NAVGEN_SEED overrides)")->capture_default_str();
  c_data->add_option("--unseen-worlds", gd.counts.unseen_worlds)->capture_default_str();
  c_data->add_option("--train-per-world", gd.counts.train_per_world)->capture_default_str();
  c_data->add_option("--val-seen-per-world", gd.counts.val_seen_per_world)->capture_default_str();
  c_data->add_option("--val-unseen-per-world", gd.counts.val_unseen_per_world)->capture_default_str();
  c_data->add_option("--augmented", gd.augmented, "Augmented train episodes")->capture_default_str();
  c_data->add_option("--r4r-per-env", gd.r4r.max_per_env)->capture_default_str();

  TrainOptions tr;
  std::string train_config, model_kind, flavor, supervision;
  auto* c_train = app.add_subcommand("train", "Train a follower or speaker");
  c_train->add_option("--data", tr.data, "Manifest directory")->required();
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--log", tr.log, "Epoch log path");
  c_train->add_option("--config", train_config, "Training config JSON; flags override it");
  c_train->add_option("--model", model_kind, "follower|speaker");
  c_train->add_option("--epochs", tr.config.epochs);
  c_train->add_option("--augmented-epochs", tr.config.augmented_epochs);
  c_train->add_option("--lr", tr.config.lr);
  c_train->add_option("--batch", tr.config.batch_size);
  c_train->add_option("--eta", tr.config.eta);
  c_train->add_option("--seed", tr.config.seed);
  c_train->add_option("--flavor", flavor, "r2r|r4r");
  c_train->add_option("--supervision", supervision, "supervised|fidelity");
  c_train->add_option("--max-steps", tr.config.max_steps);
  c_train->add_option("--val-limit", tr.config.val_limit);
  c_train->add_flag("--quiet", tr.quiet);

  EvalOptions ev;
  auto* c_eval = app.add_subcommand("eval", "Roll a policy on a split and score it");
  c_eval->add_option("--data", ev.data)->required();
  c_eval->add_option("--split", ev.split)->capture_default_str();
  c_eval->add_option("--flavor", ev.flavor);
  c_eval->add_option("--policy", ev.policy, "disc|gen|combined|combined+backtrack")->capture_default_str();
  c_eval->add_option("--follower", ev.follower, "Follower checkpoint");
  c_eval->add_option("--speaker", ev.speaker, "Speaker checkpoint");
  c_eval->add_option("--beta", ev.beta)->capture_default_str();
  c_eval->add_option("--d-th", ev.d_th, "Success distance")->capture_default_str();
  c_eval->add_option("--max-steps", ev.max_steps, "0 picks the flavor default")->capture_default_str();
  c_eval->add_option("--jobs", ev.jobs)->capture_default_str();
  c_eval->add_option("--out", ev.out, "Output directory");

  CompareOptions cmp;
  auto* c_cmp = app.add_subcommand("compare", "Table and curves for disc, gen and combined policies");
  c_cmp->add_option("--data", cmp.data)->required();
  c_cmp->add_option("--split", cmp.splits, "Splits to evaluate")->capture_default_str();
  c_cmp->add_option("--flavor", cmp.flavor);
  c_cmp->add_option("--follower", cmp.follower)->required();
  c_cmp->add_option("--speaker", cmp.speaker)->required();
  c_cmp->add_option("--beta", cmp.beta)->capture_default_str();
  c_cmp->add_option("--d-th", cmp.d_th)->capture_default_str();
  c_cmp->add_option("--max-steps", cmp.max_steps)->capture_default_str();
  c_cmp->add_option("--jobs", cmp.jobs)->capture_default_str();
  c_cmp->add_option("--out", cmp.out);

  TentOptions tn;
  auto* c_tent = app.add_subcommand("tent", "Token-wise prediction entropy traces");
  c_tent->add_option("--data", tn.data)->required();
  c_tent->add_option("--speaker", tn.speaker)->required();
  c_tent->add_option("--follower", tn.follower);
  c_tent->add_option("--policy", tn.policy, "Policy that drives the rollout")->capture_default_str();
  c_tent->add_option("--beta", tn.beta)->capture_default_str();
  c_tent->add_option("--episode", tn.episodes, "Episode id (repeatable)");
  c_tent->add_option("--split", tn.split, "Split used when no episode is named")->capture_default_str();
  c_tent->add_option("--count", tn.count, "Episodes taken from the split")->capture_default_str();
  c_tent->add_option("--max-steps", tn.max_steps)->capture_default_str();
  c_tent->add_option("--out", tn.out)->required();

  ScoreOptions sc;
  auto* c_score = app.add_subcommand("score", "Score saved trajectories");
  c_score->add_option("--data", sc.data)->required();
  c_score->add_option("--traj", sc.trajectories, "Trajectory file");
  c_score->add_flag("--reference", sc.reference, "Score the reference paths of --split");
  c_score->add_option("--split", sc.split)->capture_default_str();
  c_score->add_option("--d-th", sc.d_th)->capture_default_str();
  c_score->add_option("--out", sc.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*c_worlds) {
      gen_worlds(gw);
    } else if (*c_data) {
      gen_data(gd);
    } else if (*c_train) {
      // Precedence: defaults < config file < flags.
      TrainConfig flags = tr.config;
      if (!train_config.empty()) tr.config = train_config_from_json(read_config(train_config));
      auto given = [&](const char* name) { return c_train->count(name) > 0; };
      if (given("--epochs")) tr.config.epochs = flags.epochs;
      if (given("--augmented-epochs")) tr.config.augmented_epochs = flags.augmented_epochs;
      if (given("--lr")) tr.config.lr = flags.lr;
      if (given("--batch")) tr.config.batch_size = flags.batch_size;
      if (given("--eta")) tr.config.eta = flags.eta;
      if (given("--seed")) tr.config.seed = flags.seed;
      if (given("--max-steps")) tr.config.max_steps = flags.max_steps;
      if (given("--val-limit")) tr.config.val_limit = flags.val_limit;
      if (!model_kind.empty()) tr.config.model = model_kind_from_string(model_kind);
      if (!flavor.empty()) tr.config.flavor = flavor_from_string(flavor);
      if (!supervision.empty()) tr.config.supervision = supervision_from_string(supervision);
      run_train(tr);
    } else if (*c_eval) {
      print_report(run_eval(ev));
    } else if (*c_cmp) {
      std::cout << table_markdown(run_compare(cmp));
    } else if (*c_tent) {
      const auto profiles = run_tent(tn);
      std::cout << profiles.size() << " TENT records\n";
    } else if (*c_score) {
      print_report(run_score(sc));
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return 0;
}
