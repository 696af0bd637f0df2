#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "navgen/tent.hpp"
#include "support.hpp"

using namespace navgen;
namespace fs = std::filesystem;

namespace {

const double kNegInf = -std::numeric_limits<double>::infinity();

std::vector<TentProfile> fixed_profiles() {
  std::vector<TentProfile> out;
  const std::vector<std::string> tokens{"walk", "past", "the", "sofa", "and", "stop", "."};
  for (int t = 0; t < 3; ++t) {
    TentProfile p;
    p.episode_id = "ep-a";
    p.t = t;
    p.tokens = tokens;
    for (std::size_t k = 0; k < tokens.size(); ++k) p.s.push_back(std::fmod(0.13 * (k + 1) + 0.29 * t, 1.0));
    p.chosen = t == 2 ? Action::stop() : Action::move_to(t + 1);
    p.num_actions = 3;
    out.push_back(p);
  }
  TentProfile q;
  q.episode_id = "ep-b";
  q.tokens = {"stop", "in", "the", "kitchen", "."};
  q.s = {1.0, 0.0, 0.5, 0.25, 1.0};
  q.chosen = Action::stop();
  q.num_actions = 2;
  out.push_back(q);
  return out;
}

// Start and end tags must nest; self-closing tags, comments and the
// declaration are skipped.
bool tags_balanced(const std::string& xml) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  while ((i = xml.find('<', i)) != std::string::npos) {
    const auto end = xml.find('>', i);
    if (end == std::string::npos) return false;
    const std::string tag = xml.substr(i + 1, end - i - 1);
    i = end + 1;
    if (tag.empty() || tag[0] == '?' || tag[0] == '!' || tag.back() == '/') continue;
    const std::string name = tag.substr(tag[0] == '/' ? 1 : 0, tag.find_first_of(" \n") - (tag[0] == '/' ? 1 : 0));
    if (tag[0] == '/') {
      if (stack.empty() || stack.back() != name) return false;
      stack.pop_back();
    } else {
      stack.push_back(name);
    }
  }
  return stack.empty();
}

}  // namespace

TEST_CASE("entropy small cases") {
  const double h = std::log(0.5);
  CHECK(tent_entropy(std::vector<double>{h, h}, 2) == std::vector<double>{1.0});
  CHECK(tent_entropy(std::vector<double>{std::log(0.7), kNegInf}, 2) == std::vector<double>{0.0});
  const auto s = tent_entropy(std::vector<double>{h, h, kNegInf, kNegInf}, 4);
  CHECK(std::abs(s[0] - 0.5) <= 1e-12);
  CHECK(tent_entropy(std::vector<double>{-2.0, -3.0}, 1) == std::vector<double>{1.0, 1.0});
  CHECK_THROWS(tent_entropy(std::vector<double>{1.0, 2.0, 3.0}, 2));
}

TEST_CASE("identical conditionals give exactly one") {
  Rng rng(1);
  for (int k = 0; k < 500; ++k) {
    const std::size_t n = 2 + rng.below(6);
    const double v = rng.uniform(-20, 0);
    for (double s : tent_entropy(std::vector<double>(n, v), n)) CHECK(s == 1.0);
  }
}

TEST_CASE("entropy is bounded and invariant to a shared scale") {
  Rng rng(2);
  for (int k = 0; k < 500; ++k) {
    const std::size_t n = 2 + rng.below(5);
    const std::size_t rows = 1 + rng.below(4);
    std::vector<double> lp(n * rows);
    for (auto& v : lp) v = rng.uniform(-8, 0);
    const auto s = tent_entropy(lp, n);
    for (double x : s) {
      CHECK(x >= 0.0);
      CHECK(x <= 1.0);
    }
    // Multiplying every p(w_k | a) of a row by c adds log c to its logs.
    auto shifted = lp;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t a = 0; a < n; ++a) shifted[r * n + a] += std::log(0.37 + static_cast<double>(r));
    const auto t = tent_entropy(shifted, n);
    for (std::size_t r = 0; r < rows; ++r) CHECK(std::abs(s[r] - t[r]) <= 1e-12);
  }
}

TEST_CASE("traces follow the rollout") {
  const auto m = testing::tiny_manifest();
  ModelConfig mc;
  mc.hidden = 8;
  mc.token_embed = 4;
  mc.feature_dim = static_cast<int>(m.worlds[0].feature_dim());
  mc.vocab_size = static_cast<int>(m.vocab.size());
  mc.vocab_hash = m.vocab.hash();
  const SpeakerPolicyModel speaker(mc, 3);
  const ModelSelector gen(PolicyKind::kGen, nullptr, &speaker);
  for (const auto* e : m.split(Split::kValSeen)) {
    const auto& g = m.world(e->env_id);
    const auto trace = tent_trace(speaker, m.vocab, g, *e, gen, 10);
    const auto plain = rollout(gen, g, *e, 10);
    CHECK(trace.size() == plain.actions.size());
    for (std::size_t t = 0; t < trace.size(); ++t) {
      CHECK(trace[t].t == static_cast<int>(t));
      CHECK(trace[t].chosen == plain.actions[t]);
      CHECK(trace[t].s.size() == e->instruction.ids.size() - 1);
      CHECK(trace[t].tokens.size() == trace[t].s.size());
      for (double s : trace[t].s) {
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
      }
    }
    const auto again = tent_trace(speaker, m.vocab, g, *e, gen, 10);
    REQUIRE(again.size() == trace.size());
    for (std::size_t t = 0; t < trace.size(); ++t) CHECK(again[t].s == trace[t].s);
  }
}

TEST_CASE("csv has one row per token") {
  const auto p = fixed_profiles();
  const auto csv = tent_csv(p, "run 1");
  std::istringstream in(csv);
  std::string line;
  int rows = 0;
  std::getline(in, line);
  CHECK(line == "# run 1");
  std::getline(in, line);
  CHECK(line == "episode_id,t,k,token,S,one_minus_S");
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3 * 7 + 5);
}

TEST_CASE("svg is well formed and matches the golden file") {
  const auto svg = tent_svg(fixed_profiles());
  CHECK(svg.rfind("<?xml", 0) == 0);
  CHECK(tags_balanced(svg));
  CHECK(svg.find("<svg") != std::string::npos);
  const fs::path golden = fs::path(NAVGEN_TEST_DATA) / "golden" / "tent.svg";
  if (std::getenv("NAVGEN_UPDATE_GOLDEN")) {
    std::ofstream(golden) << svg;
  }
  std::ifstream in(golden);
  REQUIRE(in.good());
  std::stringstream want;
  want << in.rdbuf();
  CHECK(svg == want.str());
}

TEST_CASE("render writes both files and skips empty input") {
  const auto dir = fs::temp_directory_path() / "navgen_tent_test";
  fs::remove_all(dir);
  CHECK_FALSE(render_tent({}, dir.string()));
  CHECK_FALSE(fs::exists(dir / "tent.csv"));
  CHECK(render_tent(fixed_profiles(), dir.string(), "stamp"));
  CHECK(fs::exists(dir / "tent.csv"));
  CHECK(fs::exists(dir / "tent.svg"));
  fs::remove_all(dir);
}
