#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include <json.hpp>

#include "cfrewrite/error.hpp"

namespace cfrewrite {

// ---------------------------------------------------------------------------
// Text normalization and tokenization
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_ascii_punct(unsigned char c) {
  return c < 0x80 && ((c >= 0x21 && c <= 0x2f) || (c >= 0x3a && c <= 0x40) ||
                      (c >= 0x5b && c <= 0x60) || (c >= 0x7b && c <= 0x7e));
}

inline bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline bool is_digit(unsigned char c) { return c >= '0' && c <= '9'; }

// Anything that is neither ASCII whitespace nor ASCII punctuation, including
// every byte of a multi-byte UTF-8 sequence.
inline bool is_word_byte(unsigned char c) { return !is_ascii_space(c) && !is_ascii_punct(c); }

inline bool is_sentence_final_char(char c) { return c == '.' || c == '!' || c == '?'; }

}  // namespace detail

// Unicode NFC. ASCII input is returned unchanged.
inline std::string nfc(std::string_view text) {
  bool ascii = true;
  for (unsigned char c : text) {
    if (c >= 0x80) {
      ascii = false;
      break;
    }
  }
  if (ascii) return std::string(text);

  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* normalizer = icu::Normalizer2::getNFCInstance(status);
  if (U_FAILURE(status)) throw Error("ICU NFC normalizer unavailable");
  const auto source =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  const icu::UnicodeString normalized = normalizer->normalize(source, status);
  if (U_FAILURE(status)) throw Error("NFC normalization failed");
  std::string out;
  normalized.toUTF8String(out);
  return out;
}

// NFC, then every run of ASCII whitespace becomes one space; leading and
// trailing whitespace is dropped. Case is preserved.
inline std::string normalize_text(std::string_view text) {
  const std::string composed = nfc(text);
  std::string out;
  out.reserve(composed.size());
  bool pending_space = false;
  for (unsigned char c : composed) {
    if (detail::is_ascii_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(c));
  }
  return out;
}

// True for tokens made only of `.`, `!` and `?`; these close a sentence.
inline bool is_sentence_boundary(std::string_view token) {
  if (token.empty()) return false;
  for (char c : token)
    if (!detail::is_sentence_final_char(c)) return false;
  return true;
}

// Punctuation that is written flush against the preceding word when a token
// is synthesized by an edit (no source spacing to copy).
inline bool attaches_left(std::string_view token) {
  if (token.empty()) return false;
  for (char c : token) {
    switch (c) {
      case '.': case '!': case '?': case ',': case ';': case ':': case ')': case ']': case '}': case '%':
        break;
      default:
        return false;
    }
  }
  return true;
}

// Word-level tokens with derived sentence boundaries.
//
// `joins[i]` records that no whitespace separated token i from token i-1 in
// the source text, which is what makes detokenize() an exact inverse of
// tokenize() on normalized text. Boundaries are always recomputed from the
// tokens, so they cannot drift out of sync with edits.
class TokenSequence {
 public:
  TokenSequence() = default;

  explicit TokenSequence(std::vector<std::string> tokens, std::vector<bool> joins = {})
      : tokens_(std::move(tokens)), joins_(std::move(joins)) {
    if (joins_.empty()) {
      joins_.reserve(tokens_.size());
      for (std::size_t i = 0; i < tokens_.size(); ++i) joins_.push_back(i > 0 && attaches_left(tokens_[i]));
    }
    if (joins_.size() != tokens_.size()) throw ValidationError("TokenSequence: joins/tokens size mismatch");
    if (!joins_.empty()) joins_[0] = false;
    rebuild_boundaries();
  }

  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::vector<bool>& joins() const { return joins_; }
  const std::vector<std::size_t>& boundaries() const { return boundaries_; }

  std::size_t size() const { return tokens_.size(); }
  bool empty() const { return tokens_.empty(); }
  const std::string& operator[](std::size_t i) const { return tokens_[i]; }
  bool is_boundary(std::size_t i) const { return is_sentence_boundary(tokens_.at(i)); }

  // Sentence segments: one per boundary, plus a trailing unterminated one.
  std::size_t segment_count() const {
    if (tokens_.empty()) return 0;
    const bool trailing = boundaries_.empty() || boundaries_.back() + 1 < tokens_.size();
    return boundaries_.size() + (trailing ? 1 : 0);
  }

  TokenSequence with_replaced(std::size_t pos, std::string token) const {
    auto tokens = tokens_;
    auto joins = joins_;
    joins.at(pos) = pos > 0 && attaches_left(token);
    tokens.at(pos) = std::move(token);
    return TokenSequence(std::move(tokens), std::move(joins));
  }

  TokenSequence with_erased(std::size_t pos) const {
    auto tokens = tokens_;
    auto joins = joins_;
    tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(pos));
    joins.erase(joins.begin() + static_cast<std::ptrdiff_t>(pos));
    return TokenSequence(std::move(tokens), std::move(joins));
  }

  // Inserts before the token currently at `pos` (pos == size() appends).
  TokenSequence with_inserted(std::size_t pos, std::string token) const {
    auto tokens = tokens_;
    auto joins = joins_;
    const bool join = pos > 0 && attaches_left(token);
    tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(pos), std::move(token));
    joins.insert(joins.begin() + static_cast<std::ptrdiff_t>(pos), join);
    // The displaced token keeps its own spacing unless it was glued to the
    // start of the sequence.
    if (pos + 1 < tokens.size() && pos == 0) joins[1] = attaches_left(tokens[1]);
    return TokenSequence(std::move(tokens), std::move(joins));
  }

  friend bool operator==(const TokenSequence& a, const TokenSequence& b) {
    return a.tokens_ == b.tokens_ && a.joins_ == b.joins_;
  }

 private:
  void rebuild_boundaries() {
    boundaries_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i)
      if (is_sentence_boundary(tokens_[i])) boundaries_.push_back(i);
  }

  std::vector<std::string> tokens_;
  std::vector<bool> joins_;
  std::vector<std::size_t> boundaries_;
};

// Splits normalized text into words and punctuation.
//
// Rules: whitespace separates tokens; each ASCII punctuation character is
// its own token, except an apostrophe or hyphen between two word
// characters, a `.` or `,` between two digits, and runs of `.!?` which stay
// together ("...", "?!").
inline TokenSequence tokenize(std::string_view text) {
  const std::string norm = normalize_text(text);
  std::vector<std::string> tokens;
  std::vector<bool> joins;
  const auto n = norm.size();
  const auto at = [&](std::size_t i) -> unsigned char { return static_cast<unsigned char>(norm[i]); };

  std::size_t i = 0;
  bool after_space = true;
  while (i < n) {
    const unsigned char c = at(i);
    if (c == ' ') {
      after_space = true;
      ++i;
      continue;
    }
    std::size_t end = i + 1;
    if (detail::is_ascii_punct(c)) {
      if (detail::is_sentence_final_char(static_cast<char>(c))) {
        while (end < n && detail::is_sentence_final_char(norm[end])) ++end;
      }
    } else {
      while (end < n) {
        const unsigned char d = at(end);
        if (detail::is_word_byte(d)) {
          ++end;
          continue;
        }
        const bool has_next = end + 1 < n;
        if ((d == '\'' || d == '-') && has_next && detail::is_word_byte(at(end + 1))) {
          end += 2;
          continue;
        }
        if ((d == '.' || d == ',') && has_next && detail::is_digit(at(end - 1)) && detail::is_digit(at(end + 1))) {
          end += 2;
          continue;
        }
        break;
      }
    }
    tokens.emplace_back(norm.substr(i, end - i));
    joins.push_back(!after_space);
    after_space = false;
    i = end;
  }
  return TokenSequence(std::move(tokens), std::move(joins));
}

inline std::string detokenize(const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i > 0 && !seq.joins()[i]) out.push_back(' ');
    out += seq[i];
  }
  return out;
}

// Tokens joined by single spaces: one whitespace-separated word per token.
// This is the form exchanged with remote scorers.
inline std::string wire_text(const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i > 0) out.push_back(' ');
    out += seq[i];
  }
  return out;
}

inline TokenSequence concat(const TokenSequence& a, const TokenSequence& b) {
  auto tokens = a.tokens();
  auto joins = a.joins();
  tokens.insert(tokens.end(), b.tokens().begin(), b.tokens().end());
  joins.insert(joins.end(), b.joins().begin(), b.joins().end());
  if (!a.empty() && !b.empty()) joins[a.size()] = false;
  return TokenSequence(std::move(tokens), std::move(joins));
}

// ---------------------------------------------------------------------------
// Dataset model
// ---------------------------------------------------------------------------

struct StoryInstance {
  std::string story_id;
  TokenSequence premise;                      // z, first sentence
  TokenSequence initial_context;              // x, second sentence
  TokenSequence counterfactual_context;       // x', edited second sentence
  TokenSequence original_ending;              // y, sentences 3-5
  std::vector<TokenSequence> reference_endings;

  bool degenerate() const { return initial_context == counterfactual_context; }
};

struct SamplerConfig {
  std::size_t n_steps = 100;
  double temp_base = 0.95;
  std::size_t temp_interval = 5;
  std::size_t top_k_candidates = 100;
  std::uint64_t rng_seed = 0;
  std::size_t min_ending_length = 3;
  std::array<double, 3> op_weights{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};  // replacement, deletion, insertion
  // Also put the conflict-position probabilities into the proposal ratio.
  // Off by default.
  bool position_correction = false;

  void validate() const {
    if (!(temp_base > 0.0 && temp_base <= 1.0)) throw ValidationError("temp_base must be in (0, 1]");
    if (temp_interval < 1) throw ValidationError("temp_interval must be >= 1");
    if (top_k_candidates < 1) throw ValidationError("top_k_candidates must be >= 1");
    if (min_ending_length < 1) throw ValidationError("min_ending_length must be >= 1");
    double sum = 0.0;
    for (double w : op_weights) {
      if (!(w >= 0.0) || !std::isfinite(w)) throw ValidationError("op_weights must be nonnegative");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("op_weights must sum to 1");
  }
};

struct LineIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct DatasetLoad {
  std::vector<StoryInstance> instances;
  std::vector<LineIssue> errors;    // rejected lines
  std::vector<LineIssue> warnings;  // accepted but suspicious (x == x')
};

namespace detail {

inline const nlohmann::json& require(const nlohmann::json& obj, const char* key) {
  const auto it = obj.find(key);
  if (it == obj.end()) throw ValidationError(std::string("missing required key \"") + key + "\"");
  return *it;
}

inline std::string require_string(const nlohmann::json& obj, const char* key) {
  const auto& v = require(obj, key);
  if (!v.is_string()) throw ValidationError(std::string("key \"") + key + "\" must be a string");
  return v.get<std::string>();
}

inline TokenSequence require_text(const nlohmann::json& obj, const char* key) {
  auto seq = tokenize(require_string(obj, key));
  if (seq.empty()) throw ValidationError(std::string("key \"") + key + "\" is empty");
  return seq;
}

}  // namespace detail

// Parses one dataset line. Throws ValidationError on schema violations.
inline StoryInstance parse_story(std::string_view line) {
  const auto doc = nlohmann::json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (doc.is_discarded()) throw ValidationError("malformed JSON");
  if (!doc.is_object()) throw ValidationError("line is not a JSON object");

  StoryInstance s;
  s.story_id = detail::require_string(doc, "story_id");
  s.premise = detail::require_text(doc, "premise");
  s.initial_context = detail::require_text(doc, "initial");
  s.counterfactual_context = detail::require_text(doc, "counterfactual");
  s.original_ending = detail::require_text(doc, "original_ending");
  if (s.original_ending.segment_count() != 3)
    throw ValidationError("original_ending must contain exactly 3 sentences, found " +
                          std::to_string(s.original_ending.segment_count()));

  const auto& edited = detail::require(doc, "edited_endings");
  if (!edited.is_array()) throw ValidationError("\"edited_endings\" must be an array");
  for (const auto& ending : edited) {
    if (!ending.is_array() || ending.size() != 3)
      throw ValidationError("each edited ending must be an array of 3 strings");
    std::string joined;
    for (const auto& sentence : ending) {
      if (!sentence.is_string()) throw ValidationError("each edited ending must be an array of 3 strings");
      if (!joined.empty()) joined.push_back(' ');
      joined += sentence.get<std::string>();
    }
    s.reference_endings.push_back(tokenize(joined));
  }
  return s;
}

// Reads newline-delimited JSON. Bad lines land in `errors` with their line
// number; the rest of the file is still read. Blank lines are skipped.
inline DatasetLoad load_dataset_stream(std::istream& in) {
  DatasetLoad out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      auto story = parse_story(line);
      if (story.degenerate())
        out.warnings.push_back({lineno, "story " + story.story_id + ": initial and counterfactual contexts are identical"});
      out.instances.push_back(std::move(story));
    } catch (const Error& e) {
      out.errors.push_back({lineno, e.what()});
    }
  }
  return out;
}

inline DatasetLoad load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset " + path);
  auto out = load_dataset_stream(in);
  if (in.bad()) throw IoError("read failure on " + path);
  return out;
}

}  // namespace cfrewrite
