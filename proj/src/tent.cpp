#include "navgen/tent.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>

#include "navgen/error.hpp"

namespace navgen {

std::vector<double> tent_entropy(std::span<const double> token_logprobs, std::size_t num_actions) {
  if (num_actions == 0) throw PreconditionError("entropy over an empty action set");
  if (token_logprobs.size() % num_actions != 0) throw ShapeError("token log-probabilities are not [K x |A|]");
  const std::size_t K = token_logprobs.size() / num_actions;
  std::vector<double> s(K, 1.0);
  if (num_actions == 1) return s;
  const double log_base = std::log(static_cast<double>(num_actions));
  for (std::size_t k = 0; k < K; ++k) {
    const double* row = token_logprobs.data() + k * num_actions;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < num_actions; ++a) mx = std::max(mx, row[a]);
    // Identical conditionals are exactly uniform; skip the rounding of the sum.
    if (std::all_of(row, row + num_actions, [&](double v) { return v == row[0]; })) continue;
    double z = 0.0;
    for (std::size_t a = 0; a < num_actions; ++a) z += std::exp(row[a] - mx);
    double h = 0.0;
    for (std::size_t a = 0; a < num_actions; ++a) {
      const double q = std::exp(row[a] - mx) / z;
      if (q > 0.0) h -= q * std::log(q);
    }
    s[k] = std::clamp(h / log_base, 0.0, 1.0);
  }
  return s;
}

std::vector<double> tent_step(const SpeakerPolicyModel& speaker, const HistoryState& state, const EnvGraph& g,
                              NodeId node, const std::vector<int>& instruction) {
  const auto actions = available_actions(g, node);
  const auto c = single_step_candidates(speaker.embed_actions(g, node, actions), actions, state.t());
  const auto lp = speaker.token_logprobs(state.memory.tape(), state.memory, c, instruction);
  return tent_entropy(lp.values(), actions.size());
}

std::vector<TentProfile> tent_trace(const SpeakerPolicyModel& speaker, const Vocab& vocab, const EnvGraph& g,
                                    const Episode& episode, const Selector& selector, int max_steps) {
  if (max_steps <= 0) max_steps = default_max_steps(episode.flavor);
  std::vector<std::string> tokens;
  for (std::size_t k = 1; k < episode.instruction.ids.size(); ++k) tokens.push_back(vocab.token(episode.instruction.ids[k]));

  ModelSession lm(g, episode, nullptr, &speaker, PolicyKind::kGen, kDefaultBeta);
  auto session = selector.start(g, episode);
  AgentState state = AgentState::begin(g, episode.start);
  std::vector<TentProfile> out;
  while (state.t < max_steps) {
    const auto actions = available_actions(g, state.current);
    TentProfile p;
    p.episode_id = episode.episode_id;
    p.t = state.t;
    p.tokens = tokens;
    p.s = tent_entropy(lm.token_logprobs(state, actions), actions.size());
    p.num_actions = static_cast<int>(actions.size());
    p.chosen = actions[argmax_first(session->scores(state, actions).scores)];
    out.push_back(p);
    if (p.chosen.is_stop()) break;
    state = step(g, state, p.chosen);
    session->advance(state, p.chosen);
    lm.advance(state, p.chosen);
  }
  return out;
}

namespace {

std::string num(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

// Blue for the first step through red for the last.
std::string step_color(int t, int last) {
  const double f = last > 0 ? static_cast<double>(t) / last : 0.0;
  const int r = static_cast<int>(std::lround(40 + 200 * f));
  const int b = static_cast<int>(std::lround(240 - 200 * f));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, 60, b);
  return buf;
}

}  // namespace

std::string tent_csv(const std::vector<TentProfile>& profiles, const std::string& stamp) {
  std::ostringstream out;
  if (!stamp.empty()) out << "# " << stamp << '\n';
  out << "episode_id,t,k,token,S,one_minus_S\n";
  for (const auto& p : profiles) {
    for (std::size_t k = 0; k < p.s.size(); ++k) {
      out << csv_field(p.episode_id) << ',' << p.t << ',' << k + 1 << ',' << csv_field(p.tokens[k]) << ','
          << num(p.s[k], 9) << ',' << num(1.0 - p.s[k], 9) << '\n';
    }
  }
  return out.str();
}

std::string tent_svg(const std::vector<TentProfile>& profiles, double delta, const std::string& stamp) {
  if (!(delta > 0.0)) throw ConfigError("tick size must be positive");
  std::vector<std::string> order;
  std::map<std::string, std::vector<const TentProfile*>> by_episode;
  for (const auto& p : profiles) {
    if (!by_episode.count(p.episode_id)) order.push_back(p.episode_id);
    by_episode[p.episode_id].push_back(&p);
  }

  constexpr double kLeft = 60, kTop = 40, kStepX = 26, kUnitY = 6, kGap = 80;
  double width = 0.0;
  std::vector<double> heights;
  for (const auto& id : order) {
    const auto& ps = by_episode[id];
    std::size_t K = 0;
    int last_t = 0;
    for (const auto* p : ps) {
      K = std::max(K, p->s.size());
      last_t = std::max(last_t, p->t);
    }
    width = std::max(width, kLeft + kStepX * static_cast<double>(K + 1));
    heights.push_back(kUnitY * (last_t + 1.0 / delta + 1.0) + kGap);
  }
  double height = kTop;
  for (double h : heights) height += h;

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  if (!stamp.empty()) svg << "<!-- " << xml_escape(stamp) << " -->\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width, 0) << "\" height=\"" << num(height, 0)
      << "\" viewBox=\"0 0 " << num(width, 0) << ' ' << num(height, 0) << "\">\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << num(width, 0) << "\" height=\"" << num(height, 0)
      << "\" fill=\"white\"/>\n";

  double y0 = kTop;
  for (std::size_t e = 0; e < order.size(); ++e) {
    const auto& ps = by_episode[order[e]];
    int last_t = 0;
    std::size_t K = 0;
    for (const auto* p : ps) {
      last_t = std::max(last_t, p->t);
      K = std::max(K, p->s.size());
    }
    const double top_value = last_t + 1.0 / delta;
    const double base = y0 + kUnitY * top_value;  // pixel row of value 0
    auto ypix = [&](double v) { return base - kUnitY * v; };
    svg << "<g>\n<text x=\"" << num(kLeft, 0) << "\" y=\"" << num(y0 - 12, 1) << "\" font-family=\"monospace\" "
        << "font-size=\"12\">" << xml_escape(order[e]) << " (1-TENT, tick = " << num(delta, 2) << ")</text>\n";
    svg << "<line x1=\"" << num(kLeft - 10, 1) << "\" y1=\"" << num(base, 1) << "\" x2=\""
        << num(kLeft + kStepX * static_cast<double>(K), 1) << "\" y2=\"" << num(base, 1)
        << "\" stroke=\"#999\" stroke-width=\"1\"/>\n";
    for (const auto* p : ps) {
      svg << "<polyline fill=\"none\" stroke=\"" << step_color(p->t, last_t) << "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t k = 0; k < p->s.size(); ++k) {
        if (k) svg << ' ';
        svg << num(kLeft + kStepX * static_cast<double>(k), 1) << ','
            << num(ypix(p->t + (1.0 - p->s[k]) / delta), 2);
      }
      svg << "\"/>\n";
      svg << "<text x=\"" << num(kLeft - 40, 1) << "\" y=\"" << num(ypix(p->t) + 3, 1)
          << "\" font-family=\"monospace\" font-size=\"9\" fill=\"" << step_color(p->t, last_t) << "\">t="
          << p->t << "</text>\n";
    }
    if (!ps.empty()) {
      const auto& tokens = ps.front()->tokens;
      for (std::size_t k = 0; k < tokens.size(); ++k) {
        const double x = kLeft + kStepX * static_cast<double>(k);
        svg << "<text x=\"" << num(x, 1) << "\" y=\"" << num(base + 14, 1)
            << "\" font-family=\"monospace\" font-size=\"9\" transform=\"rotate(45 " << num(x, 1) << ' '
            << num(base + 14, 1) << ")\">" << xml_escape(tokens[k]) << "</text>\n";
      }
    }
    svg << "</g>\n";
    y0 += heights[e];
  }
  svg << "</svg>\n";
  return svg.str();
}

bool render_tent(const std::vector<TentProfile>& profiles, const std::string& dir, const std::string& stamp) {
  if (profiles.empty()) {
    std::cerr << "warning: empty TENT profile, nothing rendered\n";
    return false;
  }
  std::filesystem::create_directories(dir);
  const auto base = std::filesystem::path(dir);
  std::ofstream csv(base / "tent.csv");
  std::ofstream svg(base / "tent.svg");
  if (!csv || !svg) throw DataError("cannot write TENT output into " + dir);
  csv << tent_csv(profiles, stamp);
  svg << tent_svg(profiles, kTentDelta, stamp);
  return true;
}

}  // namespace navgen
