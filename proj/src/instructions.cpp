#include "navgen/instructions.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "navgen/error.hpp"
#include "navgen/hash.hpp"
#include "navgen/rng.hpp"

namespace navgen {
namespace {

const std::vector<std::string> kReserved = {"<pad>", "<bos>", "<eos>", "<unk>"};

const std::vector<std::string> kFunctionWords = {
    "go",  "walk", "head", "left", "right", "straight", "to",    "the",    "past",   "near",    "by",
    "in",  "into", "stop", "then", ",",     ".",        "first", "second", "third",  "fourth",  "fifth",
    "sixth", "seventh", "eighth"};

const std::vector<std::string> kOrdinals = {"first", "second", "third",   "fourth",
                                            "fifth", "sixth",  "seventh", "eighth"};
const std::vector<std::string> kVerbs = {"go", "walk", "head"};

using Words = std::vector<std::string>;

struct Hop {
  std::string dir;
  std::string room;
  std::string landmark;
  std::string verb;
  std::string ordinal;  // empty past the ordinal list
};

struct Ending {
  std::string room;
  std::string landmark;
};

// One rung of a style's template ladder.
struct Template {
  Words (*hop)(const Hop&);
  Words (*end)(const Ending&);
  bool needs_ordinals;
};

Words join(std::initializer_list<std::string> w) { return Words(w); }

const std::vector<Template>& ladder(Style style) {
  static const std::vector<Template> terse = {
      {[](const Hop& h) { return join({h.verb, h.dir, "to", "the", h.room, ","}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "."}); }, false},
      {[](const Hop& h) { return join({h.dir, "to", "the", h.room, ","}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "."}); }, false},
      {[](const Hop& h) { return join({h.dir, h.room, ","}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "."}); }, false},
  };
  static const std::vector<Template> landmark = {
      {[](const Hop& h) { return join({h.verb, h.dir, "past", "the", h.landmark, ","}); },
       [](const Ending& e) { return join({"stop", "near", "the", e.landmark, "."}); }, false},
      {[](const Hop& h) { return join({h.dir, "past", "the", h.landmark, ","}); },
       [](const Ending& e) { return join({"stop", "near", "the", e.landmark, "."}); }, false},
      {[](const Hop& h) { return join({h.dir, h.landmark, ","}); },
       [](const Ending& e) { return join({"stop", "near", "the", e.landmark, "."}); }, false},
  };
  static const std::vector<Template> verbose = {
      {[](const Hop& h) { return join({h.ordinal, h.verb, h.dir, "into", "the", h.room, "by", "the", h.landmark, ","}); },
       [](const Ending& e) { return join({"then", "stop", "in", "the", e.room, "by", "the", e.landmark, "."}); }, true},
      {[](const Hop& h) { return join({h.ordinal, h.dir, "into", "the", h.room, "by", h.landmark, ","}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "by", "the", e.landmark, "."}); }, true},
      {[](const Hop& h) { return join({h.ordinal, h.dir, h.room, h.landmark, ","}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "by", "the", e.landmark, "."}); }, true},
      {[](const Hop& h) { return join({h.dir, h.room, h.landmark}); },
       [](const Ending& e) { return join({"stop", "in", "the", e.room, "by", "the", e.landmark, "."}); }, false},
  };
  switch (style) {
    case Style::kTerse:
      return terse;
    case Style::kLandmark:
      return landmark;
    case Style::kVerbose:
      return verbose;
  }
  return terse;
}

}  // namespace

Vocab::Vocab() {
  for (const auto& t : kReserved) add(t);
}

Vocab::Vocab(const std::vector<std::string>& tokens) {
  if (tokens.size() < kReserved.size()) throw DataError("vocabulary is missing reserved tokens");
  for (std::size_t i = 0; i < kReserved.size(); ++i) {
    if (tokens[i] != kReserved[i]) throw DataError("vocabulary reserved token " + std::to_string(i) + " must be '" +
                                                   kReserved[i] + "', got '" + tokens[i] + "'");
  }
  for (const auto& t : tokens) {
    if (contains(t)) throw DataError("duplicate vocabulary token '" + t + "'");
    add(t);
  }
}

Vocab Vocab::for_grammar(const std::vector<std::string>& rooms, const std::vector<std::string>& landmarks) {
  Vocab v;
  for (const auto& w : kFunctionWords) v.add(w);
  for (const auto& w : rooms) v.add(w);
  for (const auto& w : landmarks) v.add(w);
  return v;
}

int Vocab::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  if (token.empty() || token.find_first_of(" \t\n\r") != std::string::npos)
    throw ConfigError("vocabulary token must be a non-empty word: '" + token + "'");
  if (tokens_.size() >= kMaxVocabSize) throw ConfigError("vocabulary exceeds " + std::to_string(kMaxVocabSize));
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw LookupError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::string Vocab::hash() const {
  std::string joined;
  for (const auto& t : tokens_) {
    joined += t;
    joined += '\n';
  }
  return git_blob_hash(joined);
}

nlohmann::json to_json(const Vocab& v) { return {{"tokens", v.tokens()}, {"hash", v.hash()}}; }

Vocab vocab_from_json(const nlohmann::json& j) {
  try {
    Vocab v(j.at("tokens").get<std::vector<std::string>>());
    if (j.contains("hash") && j.at("hash").get<std::string>() != v.hash())
      throw DataError("vocabulary hash mismatch");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed vocabulary: ") + e.what());
  }
}

std::string to_string(Style s) {
  switch (s) {
    case Style::kTerse:
      return "terse";
    case Style::kLandmark:
      return "landmark";
    case Style::kVerbose:
      return "verbose";
  }
  return "terse";
}

Style style_from_string(const std::string& s) {
  if (s == "terse") return Style::kTerse;
  if (s == "landmark") return Style::kLandmark;
  if (s == "verbose") return Style::kVerbose;
  throw DataError("unknown instruction style '" + s + "'");
}

std::vector<int> tokenize(const Vocab& vocab, const std::string& text) {
  std::vector<int> ids{kBos};
  std::istringstream in(text);
  std::string word;
  while (in >> word) ids.push_back(vocab.id(word));
  ids.push_back(kEos);
  return ids;
}

std::string detokenize(const Vocab& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id == kBos || id == kEos || id == kPad) continue;
    if (!out.empty()) out += ' ';
    out += vocab.token(id);
  }
  return out;
}

std::string turn_word(double previous_heading, double next_heading) {
  double delta = next_heading - previous_heading;
  while (delta > std::numbers::pi) delta -= 2.0 * std::numbers::pi;
  while (delta <= -std::numbers::pi) delta += 2.0 * std::numbers::pi;
  if (std::abs(delta) <= std::numbers::pi / 6.0) return "straight";
  return delta > 0.0 ? "left" : "right";
}

Instruction generate_instruction(const EnvGraph& g, const Vocab& vocab, const std::vector<NodeId>& path, Style style,
                                 std::uint64_t seed, int max_length) {
  if (path.empty()) throw PreconditionError("instruction path is empty");
  for (NodeId id : path) g.node(id);
  for (std::size_t i = 1; i < path.size(); ++i) {
    if (!g.adjacent(path[i - 1], path[i]))
      throw PreconditionError("instruction path is not a walk: " + std::to_string(path[i - 1]) + " -> " +
                              std::to_string(path[i]));
  }

  Rng rng(seed, mix64(hash_string("instruction"), static_cast<std::uint64_t>(style)));
  auto pick_landmark = [&](NodeId id) -> const std::string& {
    const auto& lms = g.node(id).landmarks;
    if (lms.empty()) return g.node(id).room_label;
    return lms[rng.below(lms.size())];
  };

  std::vector<Hop> hops;
  double prev_heading = 0.0;  // the agent starts facing +y
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    const auto& from = g.node(path[i]).position;
    const auto& to = g.node(path[i + 1]).position;
    const double h = heading(from, to);
    Hop hop;
    hop.dir = turn_word(prev_heading, h);
    hop.room = g.node(path[i + 1]).room_label;
    hop.landmark = pick_landmark(path[i + 1]);
    hop.verb = kVerbs[rng.below(kVerbs.size())];
    hop.ordinal = i < kOrdinals.size() ? kOrdinals[i] : std::string();
    hops.push_back(std::move(hop));
    prev_heading = h;
  }
  const Ending ending{g.node(path.back()).room_label, pick_landmark(path.back())};

  const auto budget = static_cast<std::size_t>(std::max(0, max_length - 2));
  for (const auto& tpl : ladder(style)) {
    if (tpl.needs_ordinals && hops.size() > kOrdinals.size()) continue;
    Words words;
    for (const auto& hop : hops) {
      auto w = tpl.hop(hop);
      words.insert(words.end(), w.begin(), w.end());
    }
    auto w = tpl.end(ending);
    words.insert(words.end(), w.begin(), w.end());
    if (words.size() > budget) continue;

    Instruction x;
    x.style = style;
    x.ids.push_back(kBos);
    for (const auto& word : words) {
      const int id = vocab.id(word);
      if (id == kUnk) throw DataError("grammar word '" + word + "' missing from vocabulary");
      x.ids.push_back(id);
      if (!x.text.empty()) x.text += ' ';
      x.text += word;
    }
    x.ids.push_back(kEos);
    return x;
  }
  throw DataError("path with " + std::to_string(hops.size()) + " hops does not fit an instruction of length " +
                  std::to_string(max_length));
}

Instruction concatenate(const Instruction& first, const Instruction& second) {
  Instruction x;
  x.style = first.style;
  x.ids.assign(first.ids.begin(), first.ids.end() - 1);
  x.ids.insert(x.ids.end(), second.ids.begin() + 1, second.ids.end());
  x.text = first.text + " " + second.text;
  return x;
}

void validate_instruction(const Instruction& x, const Vocab& vocab, int max_length) {
  if (x.ids.size() < 2 || x.ids.front() != kBos || x.ids.back() != kEos)
    throw DataError("instruction must be framed by BOS ... EOS");
  if (x.ids.size() > static_cast<std::size_t>(max_length))
    throw DataError("instruction length " + std::to_string(x.ids.size()) + " exceeds " + std::to_string(max_length));
  for (std::size_t i = 1; i + 1 < x.ids.size(); ++i) {
    const int id = x.ids[i];
    if (id == kBos || id == kEos || id == kPad) throw DataError("instruction has interior reserved token");
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw DataError("instruction token id out of range");
  }
}

}  // namespace navgen
