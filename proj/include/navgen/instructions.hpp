#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "navgen/world.hpp"

namespace navgen {

inline constexpr const char* kGrammarVersion = "navgen-instr/1";
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kDefaultMaxInstructionLength = 32;
inline constexpr std::size_t kMaxVocabSize = 512;

class Vocab {
 public:
  Vocab();  // reserved tokens only
  explicit Vocab(const std::vector<std::string>& tokens);

  // Reserved tokens plus the grammar's function words, rooms and landmarks.
  static Vocab for_grammar(const std::vector<std::string>& rooms, const std::vector<std::string>& landmarks);

  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::string hash() const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

nlohmann::json to_json(const Vocab& v);
Vocab vocab_from_json(const nlohmann::json& j);

enum class Style { kTerse, kLandmark, kVerbose };
inline constexpr Style kAllStyles[] = {Style::kTerse, Style::kLandmark, Style::kVerbose};

std::string to_string(Style s);
Style style_from_string(const std::string& s);

struct Instruction {
  std::vector<int> ids;  // BOS ... EOS
  std::string text;
  Style style = Style::kTerse;
  bool operator==(const Instruction&) const = default;
};

// Whitespace tokenization with BOS/EOS framing; unknown words map to UNK.
std::vector<int> tokenize(const Vocab& vocab, const std::string& text);
// Inverse of tokenize over the closed vocabulary; BOS/EOS/PAD are dropped.
std::string detokenize(const Vocab& vocab, const std::vector<int>& ids);

// Turn word for a hop, given the heading before and after it.
// Positive (counter-clockwise) change is "left"; |change| <= 30 degrees is
// "straight".
std::string turn_word(double previous_heading, double next_heading);

// Composes motion clauses along the path and a terminal stop clause. Each
// style has a ladder of templates from wordy to compact; the first one that
// fits max_length (including BOS/EOS) is used.
Instruction generate_instruction(const EnvGraph& g, const Vocab& vocab, const std::vector<NodeId>& path, Style style,
                                 std::uint64_t seed, int max_length = kDefaultMaxInstructionLength);

// Joins two instructions into one: first without EOS, second without BOS.
Instruction concatenate(const Instruction& first, const Instruction& second);

// Checks BOS/EOS framing and length.
void validate_instruction(const Instruction& x, const Vocab& vocab, int max_length);

}  // namespace navgen
