#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"
#include "cfrewrite/scorer.hpp"

namespace cfrewrite {

inline constexpr const char* kUnk = "<unk>";
inline constexpr const char* kBos = "<s>";
inline constexpr const char* kEos = "</s>";

using WordId = std::uint32_t;
using NgramKey = std::vector<WordId>;

struct NgramKeyHash {
  std::size_t operator()(const NgramKey& key) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (WordId w : key) {
      h ^= w;
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};

struct NgramEntry {
  double logprob = 0.0;
  std::optional<double> backoff;  // log weight, present when this n-gram is a context
};

using NgramTable = std::unordered_map<NgramKey, NgramEntry, NgramKeyHash>;

// Backoff n-gram model with natural-log probabilities.
//
// Stored probabilities are the full interpolated Kneser-Ney values, so
// lookup is the usual ARPA walk: use the longest stored n-gram, adding the
// backoff weight of every context skipped on the way down. The start symbol
// is never predicted; the predictable vocabulary is everything else.
class NgramModel {
 public:
  // Unigram log-probability recorded for `<s>`.
  static constexpr double kNeverLogProb = -99.0;

  static constexpr WordId kUnkId = 0;
  static constexpr WordId kBosId = 1;
  static constexpr WordId kEosId = 2;

  std::size_t order() const { return tables_.size(); }
  double discount() const { return discount_; }
  const std::vector<std::string>& words() const { return words_; }
  std::size_t vocabulary_size() const { return words_.size(); }

  // Table of k-grams, k in [1, order].
  const NgramTable& table(std::size_t k) const { return tables_.at(k - 1); }

  WordId id_of(std::string_view word) const {
    const auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& word(WordId id) const { return words_.at(id); }

  // Every id that can be predicted, i.e. all but `<s>`.
  std::vector<WordId> predictable_ids() const {
    std::vector<WordId> out;
    for (WordId id = 0; id < words_.size(); ++id)
      if (id != kBosId) out.push_back(id);
    return out;
  }

  // Ordinary words (no reserved symbols) sorted by spelling.
  const std::vector<WordId>& content_ids() const { return content_ids_; }

  double logprob(std::span<const WordId> history, WordId w) const {
    if (w == kBosId) return kNeverLogProb;
    const std::size_t max_len = std::min(history.size(), order() - 1);
    NgramKey key;
    key.reserve(max_len + 1);
    double acc = 0.0;
    for (std::size_t len = max_len;; --len) {
      key.assign(history.end() - static_cast<std::ptrdiff_t>(len), history.end());
      key.push_back(w);
      const auto& table = tables_[len];
      if (const auto it = table.find(key); it != table.end()) return acc + it->second.logprob;
      if (len == 0) break;
      key.pop_back();
      const auto& ctx_table = tables_[len - 1];
      if (const auto it = ctx_table.find(key); it != ctx_table.end() && it->second.backoff) acc += *it->second.backoff;
    }
    throw CorruptModel("word id " + std::to_string(w) + " missing from unigram table");
  }

  // log P(token | context); only the last order-1 context tokens matter and
  // unknown words map to `<unk>`.
  double conditional_logprob(std::span<const std::string> context, std::string_view token) const {
    const std::size_t keep = std::min(context.size(), order() - 1);
    std::vector<WordId> history;
    history.reserve(keep);
    for (std::size_t i = context.size() - keep; i < context.size(); ++i) history.push_back(id_of(context[i]));
    return logprob(history, id_of(token));
  }

 private:
  friend class NgramModelBuilder;

  void index_words() {
    index_.clear();
    content_ids_.clear();
    for (WordId id = 0; id < words_.size(); ++id) {
      index_.emplace(words_[id], id);
      if (id > kEosId) content_ids_.push_back(id);
    }
    std::sort(content_ids_.begin(), content_ids_.end(),
              [&](WordId a, WordId b) { return words_[a] < words_[b]; });
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, WordId> index_;
  std::vector<WordId> content_ids_;
  std::vector<NgramTable> tables_;
  double discount_ = 0.75;
};

// Assembles models for train_ngram() and read_arpa().
class NgramModelBuilder {
 public:
  NgramModelBuilder(std::vector<std::string> words, std::size_t order, double discount) {
    model_.words_ = std::move(words);
    model_.index_words();
    model_.tables_.resize(order);
    model_.discount_ = discount;
  }

  NgramTable& table(std::size_t k) { return model_.tables_.at(k - 1); }
  const NgramModel& peek() const { return model_; }
  NgramModel build() && { return std::move(model_); }

 private:
  NgramModel model_;
};

namespace detail {

using CountTable = std::unordered_map<NgramKey, std::uint64_t, NgramKeyHash>;

// Raw k-gram counts (k = 1..order) over `<s> tokens </s>` padded sentences.
inline std::vector<CountTable> count_ids(const std::vector<std::vector<WordId>>& sentences, std::size_t order) {
  std::vector<CountTable> counts(order);
  std::vector<WordId> padded;
  for (const auto& sentence : sentences) {
    padded.clear();
    padded.push_back(NgramModel::kBosId);
    padded.insert(padded.end(), sentence.begin(), sentence.end());
    padded.push_back(NgramModel::kEosId);
    for (std::size_t k = 1; k <= order; ++k) {
      for (std::size_t start = 0; start + k <= padded.size(); ++start) {
        NgramKey key(padded.begin() + static_cast<std::ptrdiff_t>(start),
                     padded.begin() + static_cast<std::ptrdiff_t>(start + k));
        ++counts[k - 1][key];
      }
    }
  }
  return counts;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw CorruptModel("bad number '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

// Raw n-gram counts keyed by spelling, for inspection and tests.
inline std::vector<std::map<std::vector<std::string>, std::uint64_t>> count_ngrams(
    const std::vector<TokenSequence>& corpus, std::size_t order) {
  std::vector<std::string> words{kUnk, kBos, kEos};
  std::unordered_map<std::string, WordId> index{{kUnk, 0}, {kBos, 1}, {kEos, 2}};
  std::vector<std::vector<WordId>> sentences;
  for (const auto& seq : corpus) {
    auto& ids = sentences.emplace_back();
    for (const auto& tok : seq.tokens()) {
      auto [it, fresh] = index.emplace(tok, static_cast<WordId>(words.size()));
      if (fresh) words.push_back(tok);
      ids.push_back(it->second);
    }
  }
  std::vector<std::map<std::vector<std::string>, std::uint64_t>> out(order);
  const auto counts = detail::count_ids(sentences, order);
  for (std::size_t k = 0; k < order; ++k) {
    for (const auto& [key, c] : counts[k]) {
      std::vector<std::string> spelled;
      for (WordId w : key) spelled.push_back(words[w]);
      out[k][spelled] = c;
    }
  }
  return out;
}

// Interpolated Kneser-Ney with one absolute discount for every order.
//
// The highest order and n-grams that start with `<s>` use raw counts; the
// rest use continuation counts N1+(. g). Unigrams interpolate with the
// uniform distribution over the predictable vocabulary, which is where
// `<unk>` gets its mass.
inline NgramModel train_ngram(const std::vector<TokenSequence>& corpus, std::size_t order, double discount = 0.75) {
  if (corpus.empty()) throw ValidationError("train_ngram: empty corpus");
  if (order < 2) throw ValidationError("train_ngram: order must be >= 2");
  if (!(discount > 0.0 && discount < 1.0)) throw ValidationError("train_ngram: discount must be in (0, 1)");

  std::vector<std::string> words{kUnk, kBos, kEos};
  {
    std::vector<std::string> seen;
    for (const auto& seq : corpus) seen.insert(seen.end(), seq.tokens().begin(), seq.tokens().end());
    std::sort(seen.begin(), seen.end());
    seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
    for (auto& w : seen)
      if (w != kUnk && w != kBos && w != kEos) words.push_back(std::move(w));
  }
  NgramModelBuilder builder(words, order, discount);
  const NgramModel& model = builder.peek();

  std::vector<std::vector<WordId>> sentences;
  sentences.reserve(corpus.size());
  for (const auto& seq : corpus) {
    auto& ids = sentences.emplace_back();
    for (const auto& tok : seq.tokens()) ids.push_back(model.id_of(tok));
  }
  const auto raw = detail::count_ids(sentences, order);

  std::vector<detail::CountTable> adjusted(order);
  adjusted[order - 1] = raw[order - 1];
  for (std::size_t k = 1; k < order; ++k) {
    auto& adj = adjusted[k - 1];
    for (const auto& [key, c] : raw[k - 1])
      if (key.front() == NgramModel::kBosId) adj[key] = c;
    for (const auto& [key, c] : raw[k]) {
      NgramKey suffix(key.begin() + 1, key.end());
      if (suffix.front() != NgramModel::kBosId) ++adj[suffix];
    }
  }

  // Per order: probability of each seen k-gram, and (denominator, types)
  // of each context.
  std::vector<std::unordered_map<NgramKey, double, NgramKeyHash>> prob(order);
  const auto predictable = model.predictable_ids();
  const double uniform = 1.0 / static_cast<double>(predictable.size());

  {
    double den = 0.0;
    double types = 0.0;
    for (WordId w : predictable) {
      const auto it = adjusted[0].find(NgramKey{w});
      if (it != adjusted[0].end() && it->second > 0) {
        den += static_cast<double>(it->second);
        types += 1.0;
      }
    }
    const double gamma = den > 0.0 ? discount * types / den : 1.0;
    for (WordId w : predictable) {
      const auto it = adjusted[0].find(NgramKey{w});
      const double a = it == adjusted[0].end() ? 0.0 : static_cast<double>(it->second);
      const double p = (den > 0.0 ? std::max(a - discount, 0.0) / den : 0.0) + gamma * uniform;
      prob[0][NgramKey{w}] = p;
    }
  }

  std::vector<std::unordered_map<NgramKey, double, NgramKeyHash>> gamma(order);  // indexed by context length
  for (std::size_t k = 2; k <= order; ++k) {
    std::unordered_map<NgramKey, std::pair<double, double>, NgramKeyHash> ctx_stats;
    for (const auto& [key, a] : adjusted[k - 1]) {
      auto& st = ctx_stats[NgramKey(key.begin(), key.end() - 1)];
      st.first += static_cast<double>(a);
      st.second += 1.0;
    }
    for (const auto& [ctx, st] : ctx_stats) gamma[k - 1][ctx] = discount * st.second / st.first;
    for (const auto& [key, a] : adjusted[k - 1]) {
      const NgramKey ctx(key.begin(), key.end() - 1);
      const NgramKey lower(key.begin() + 1, key.end());
      const auto& st = ctx_stats.at(ctx);
      const double p = std::max(static_cast<double>(a) - discount, 0.0) / st.first + gamma[k - 1].at(ctx) * prob[k - 2].at(lower);
      prob[k - 1][key] = p;
    }
  }

  for (std::size_t k = 1; k <= order; ++k) {
    auto& table = builder.table(k);
    for (const auto& [key, p] : prob[k - 1]) table[key].logprob = std::log(p);
  }
  builder.table(1)[NgramKey{NgramModel::kBosId}].logprob = NgramModel::kNeverLogProb;
  for (std::size_t len = 1; len < order; ++len) {
    auto& table = builder.table(len);
    for (const auto& [ctx, g] : gamma[len]) table.at(ctx).backoff = std::log(g);
  }
  return std::move(builder).build();
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline constexpr const char* kModelMagic = "# cfrewrite-ngram";
inline constexpr int kModelVersion = 1;

// ARPA-style text, natural-log values. Numbers are written in shortest
// round-trip form so a reload scores identically.
inline void write_arpa(const NgramModel& model, std::ostream& out) {
  out << kModelMagic << " v" << kModelVersion << " logbase=e\n";
  out << "# interpolated Kneser-Ney, discount=" << detail::format_double(model.discount()) << "\n";
  out << "\\data\\\n";
  for (std::size_t k = 1; k <= model.order(); ++k) out << "ngram " << k << "=" << model.table(k).size() << "\n";
  for (std::size_t k = 1; k <= model.order(); ++k) {
    out << "\n\\" << k << "-grams:\n";
    std::vector<std::pair<std::string, const NgramEntry*>> lines;
    lines.reserve(model.table(k).size());
    for (const auto& [key, entry] : model.table(k)) {
      std::string words;
      for (std::size_t i = 0; i < key.size(); ++i) {
        if (i > 0) words.push_back(' ');
        words += model.word(key[i]);
      }
      lines.emplace_back(std::move(words), &entry);
    }
    std::sort(lines.begin(), lines.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [words, entry] : lines) {
      out << detail::format_double(entry->logprob) << '\t' << words;
      if (entry->backoff) out << '\t' << detail::format_double(*entry->backoff);
      out << '\n';
    }
  }
  out << "\n\\end\\\n";
}

inline void save_ngram(const NgramModel& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write model " + path);
  write_arpa(model, out);
  out.flush();
  if (!out) throw IoError("write failure on " + path);
}

inline NgramModel read_arpa(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw CorruptModel("empty model file");
  const std::string_view magic(kModelMagic);
  if (line.rfind(magic, 0) != 0) throw VersionMismatch("not a cfrewrite n-gram model (bad header)");
  {
    std::istringstream hdr(line.substr(magic.size()));
    std::string version;
    hdr >> version;
    if (version != "v" + std::to_string(kModelVersion))
      throw VersionMismatch("unsupported model version '" + version + "'");
  }

  double discount = 0.75;
  std::vector<std::size_t> declared;
  bool in_data = false;
  while (std::getline(in, line)) {
    if (line.empty()) {
      if (in_data) break;
      continue;
    }
    if (line[0] == '#') {
      if (const auto pos = line.find("discount="); pos != std::string::npos)
        discount = detail::parse_double(std::string_view(line).substr(pos + 9));
      continue;
    }
    if (line == "\\data\\") {
      in_data = true;
      continue;
    }
    if (!in_data) throw CorruptModel("unexpected line before \\data\\: " + line);
    if (line.rfind("ngram ", 0) != 0) throw CorruptModel("bad count line: " + line);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptModel("bad count line: " + line);
    const auto k = static_cast<std::size_t>(detail::parse_double(std::string_view(line).substr(6, eq - 6)));
    if (k != declared.size() + 1) throw CorruptModel("n-gram orders out of sequence");
    declared.push_back(static_cast<std::size_t>(detail::parse_double(std::string_view(line).substr(eq + 1))));
  }
  if (declared.size() < 2) throw CorruptModel("model must declare at least orders 1 and 2");

  struct RawLine {
    std::vector<std::string> words;
    double logprob;
    std::optional<double> backoff;
  };
  std::vector<std::vector<RawLine>> sections(declared.size());
  std::size_t current = 0;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line == "\\end\\") {
      ended = true;
      break;
    }
    if (line.front() == '\\') {
      const auto dash = line.find("-grams:");
      if (dash == std::string::npos) throw CorruptModel("bad section header: " + line);
      current = static_cast<std::size_t>(detail::parse_double(std::string_view(line).substr(1, dash - 1)));
      if (current < 1 || current > declared.size()) throw CorruptModel("section for undeclared order: " + line);
      continue;
    }
    if (current == 0) throw CorruptModel("n-gram line outside a section");
    const auto tab1 = line.find('\t');
    if (tab1 == std::string::npos) throw CorruptModel("bad n-gram line: " + line);
    const auto tab2 = line.find('\t', tab1 + 1);
    RawLine raw;
    raw.logprob = detail::parse_double(std::string_view(line).substr(0, tab1));
    std::istringstream ws(line.substr(tab1 + 1, tab2 == std::string::npos ? std::string::npos : tab2 - tab1 - 1));
    for (std::string w; ws >> w;) raw.words.push_back(w);
    if (raw.words.size() != current) throw CorruptModel("wrong arity in " + std::to_string(current) + "-gram line");
    if (tab2 != std::string::npos) raw.backoff = detail::parse_double(std::string_view(line).substr(tab2 + 1));
    if (!std::isfinite(raw.logprob) || raw.logprob > 0.0) throw CorruptModel("log-prob not finite and <= 0");
    sections[current - 1].push_back(std::move(raw));
  }
  if (!ended) throw CorruptModel("truncated model: missing \\end\\");
  for (std::size_t k = 0; k < declared.size(); ++k)
    if (sections[k].size() != declared[k])
      throw CorruptModel("order " + std::to_string(k + 1) + ": declared " + std::to_string(declared[k]) + " n-grams, found " +
                         std::to_string(sections[k].size()));

  std::vector<std::string> words{kUnk, kBos, kEos};
  bool has_unk = false, has_bos = false, has_eos = false;
  for (const auto& raw : sections[0]) {
    const auto& w = raw.words[0];
    if (w == kUnk) has_unk = true;
    else if (w == kBos) has_bos = true;
    else if (w == kEos) has_eos = true;
    else words.push_back(w);
  }
  if (!has_unk || !has_bos || !has_eos) throw CorruptModel("unigram section lacks a reserved symbol");
  std::sort(words.begin() + 3, words.end());

  NgramModelBuilder builder(std::move(words), declared.size(), discount);
  const NgramModel& model = builder.peek();
  for (std::size_t k = 1; k <= declared.size(); ++k) {
    auto& table = builder.table(k);
    for (const auto& raw : sections[k - 1]) {
      NgramKey key;
      for (const auto& w : raw.words) {
        const WordId id = model.id_of(w);
        if (id == NgramModel::kUnkId && w != kUnk) throw CorruptModel("n-gram uses word not in unigrams: " + w);
        key.push_back(id);
      }
      table[key] = NgramEntry{raw.logprob, raw.backoff};
    }
  }
  return std::move(builder).build();
}

inline NgramModel load_ngram(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model " + path);
  return read_arpa(in);
}

// ---------------------------------------------------------------------------
// Pseudo masked-LM and the Scorer adapter
// ---------------------------------------------------------------------------

// Fill-in candidates for `position` from a left-to-right model.
//
// Each content word w is scored by the log-probability of the window it
// touches: w given its left context, plus the next order-1 tokens given w.
// Scores are softmaxed over the whole content vocabulary, then the top k
// (ties broken by spelling) are returned.
inline std::vector<Candidate> pseudo_mlm_candidates(const NgramModel& model, const TokenSequence& sequence,
                                                    std::size_t position, std::size_t k) {
  if (position >= sequence.size()) throw ValidationError("pseudo_mlm_candidates: position out of range");
  const auto& vocab = model.content_ids();
  if (vocab.empty() || k == 0) return {};

  std::vector<WordId> ids;
  ids.reserve(sequence.size() + 1);
  ids.push_back(NgramModel::kBosId);
  for (const auto& tok : sequence.tokens()) ids.push_back(model.id_of(tok));
  const std::size_t slot = position + 1;
  const std::size_t window_end = std::min(slot + model.order() - 1, ids.size() - 1);

  std::vector<double> scores;
  scores.reserve(vocab.size());
  for (WordId w : vocab) {
    ids[slot] = w;
    double s = 0.0;
    for (std::size_t j = slot; j <= window_end; ++j)
      s += model.logprob(std::span<const WordId>(ids.data(), j), ids[j]);
    scores.push_back(s);
  }

  const double max_s = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - max_s);
  const double log_z = max_s + std::log(z);

  std::vector<std::size_t> order(vocab.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  // content_ids() is sorted by spelling, so a stable sort breaks ties by it.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  if (order.size() > k) order.resize(k);

  std::vector<Candidate> out;
  out.reserve(order.size());
  for (std::size_t i : order) out.push_back({model.word(vocab[i]), std::min(0.0, scores[i] - log_z)});
  return out;
}

// Scorer over an n-gram model. Every context is read as one token stream
// that starts with `<s>`.
class NgramScorer final : public Scorer {
 public:
  explicit NgramScorer(std::shared_ptr<const NgramModel> model) : model_(std::move(model)) {
    if (!model_) throw ValidationError("NgramScorer: null model");
  }

  std::vector<double> clm_logprobs(const TokenSequence& context, const TokenSequence& continuation) const override {
    std::vector<WordId> ids;
    ids.reserve(context.size() + continuation.size() + 1);
    ids.push_back(NgramModel::kBosId);
    for (const auto& tok : context.tokens()) ids.push_back(model_->id_of(tok));
    const std::size_t start = ids.size();
    for (const auto& tok : continuation.tokens()) ids.push_back(model_->id_of(tok));
    std::vector<double> out;
    out.reserve(continuation.size());
    for (std::size_t j = start; j < ids.size(); ++j)
      out.push_back(model_->logprob(std::span<const WordId>(ids.data(), j), ids[j]));
    return out;
  }

  std::vector<Candidate> mlm_candidates(const TokenSequence& sequence, std::size_t position,
                                        std::size_t k) const override {
    return pseudo_mlm_candidates(*model_, sequence, position, k);
  }

  const NgramModel& model() const { return *model_; }

 private:
  std::shared_ptr<const NgramModel> model_;
};

}  // namespace cfrewrite
