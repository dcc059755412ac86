#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"

namespace cfrewrite {

// log(1e-8): stands in for any log-probability a backend cannot supply,
// e.g. a reverse-proposal word that fell outside the returned top-k.
inline const double kLogProbFloor = std::log(1e-8);

// Placeholder written at the position a masked model is asked to fill.
inline constexpr const char* kMaskToken = "<mask>";

struct Candidate {
  std::string token;
  double logprob = 0.0;
};

// Scoring boundary. Every probability the sampler uses comes through here.
//
// Implementations work on whole words; any subword mapping is private to
// the backend. All methods may be called concurrently from independent
// chains.
class Scorer {
 public:
  virtual ~Scorer() = default;

  // One natural-log probability per continuation token, each conditioned on
  // `context` followed by the continuation tokens before it.
  virtual std::vector<double> clm_logprobs(const TokenSequence& context, const TokenSequence& continuation) const = 0;

  // Up to k fill-ins for `position`, sorted by descending log-probability.
  // The token at `position` is ignored (callers pass kMaskToken there).
  virtual std::vector<Candidate> mlm_candidates(const TokenSequence& sequence, std::size_t position,
                                                std::size_t k) const = 0;

  // log P(ending | context). Defaults to the summed causal-LM probability.
  virtual double coherence_logprob(const TokenSequence& context, const TokenSequence& ending) const {
    return sum_logprobs(clm_logprobs(context, ending));
  }

  // Whether coherence_logprob is something other than the causal-LM sum.
  virtual bool has_native_coherence() const { return false; }

  static double sum_logprobs(std::span<const double> lps) { return std::accumulate(lps.begin(), lps.end(), 0.0); }
};

// log P(ending_i | premise, context, ending_<i) for every ending token.
inline std::vector<double> clm_score_ending(const Scorer& scorer, const TokenSequence& premise,
                                            const TokenSequence& context, const TokenSequence& ending) {
  if (ending.empty()) throw ValidationError("clm_score_ending: empty ending");
  auto lps = scorer.clm_logprobs(concat(premise, context), ending);
  if (lps.size() != ending.size())
    throw ProtocolError("scorer returned " + std::to_string(lps.size()) + " log-probs for " +
                        std::to_string(ending.size()) + " tokens");
  for (double lp : lps)
    if (!std::isfinite(lp) || lp > 0.0) throw ProtocolError("scorer returned a log-prob that is not finite and <= 0");
  return lps;
}

// A candidate list renormalized to a proper distribution.
class CandidateSet {
 public:
  struct Entry {
    std::string token;
    double logprob;  // renormalized over the set
  };

  CandidateSet() = default;

  explicit CandidateSet(const std::vector<Candidate>& raw) {
    if (raw.empty()) return;
    double max_lp = -std::numeric_limits<double>::infinity();
    for (const auto& c : raw) max_lp = std::max(max_lp, c.logprob);
    double z = 0.0;
    for (const auto& c : raw) z += std::exp(c.logprob - max_lp);
    const double log_z = max_lp + std::log(z);
    entries_.reserve(raw.size());
    for (const auto& c : raw) entries_.push_back({c.token, c.logprob - log_z});
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  // Renormalized log-probability of `token`, or kLogProbFloor when absent.
  double logprob_of(std::string_view token) const {
    for (const auto& e : entries_)
      if (e.token == token) return e.logprob;
    return kLogProbFloor;
  }

  bool contains(std::string_view token) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.token == token; });
  }

 private:
  std::vector<Entry> entries_;
};

using CandidateFilter = std::function<bool(std::string_view)>;

// Top-k fill-ins for `position`, optionally filtered, renormalized over
// what is kept. Throws DegenerateProposal if nothing survives.
inline CandidateSet propose_candidates(const Scorer& scorer, const TokenSequence& sequence, std::size_t position,
                                       std::size_t k, const CandidateFilter& keep = {}) {
  if (position >= sequence.size())
    throw ValidationError("propose_candidates: position " + std::to_string(position) + " out of range");
  if (k < 1) throw ValidationError("propose_candidates: k must be >= 1");
  auto raw = scorer.mlm_candidates(sequence, position, k);
  if (raw.size() > k) raw.resize(k);
  for (const auto& c : raw)
    if (!std::isfinite(c.logprob) || c.logprob > 0.0) throw ProtocolError("candidate log-prob not finite and <= 0");
  if (keep) std::erase_if(raw, [&](const Candidate& c) { return !keep(c.token); });
  if (raw.empty()) throw DegenerateProposal("no candidates for position " + std::to_string(position));
  return CandidateSet(raw);
}

}  // namespace cfrewrite
