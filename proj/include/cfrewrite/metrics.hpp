#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"

namespace cfrewrite {

struct EvalRecord {
  std::string story_id;
  TokenSequence hypothesis;
  std::vector<TokenSequence> references;
  std::optional<double> coherence_score;  // percent, [0, 100]
};

// ---------------------------------------------------------------------------
// BLEU-4
// ---------------------------------------------------------------------------

inline constexpr double kBleuEpsilon = 1e-9;

struct BleuStats {
  std::array<double, 4> matches{};
  std::array<double, 4> totals{};
  double hypothesis_length = 0.0;
  double reference_length = 0.0;
};

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& tokens, std::size_t n) {
  std::map<std::vector<std::string>, int> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace detail

// Clipped n-gram matches for one record. The effective reference length is
// the one closest to the hypothesis length, the shorter on ties.
inline BleuStats bleu_stats(const EvalRecord& record) {
  if (record.references.empty()) throw ValidationError("record " + record.story_id + " has no reference");
  BleuStats st;
  const auto& hyp = record.hypothesis.tokens();
  st.hypothesis_length = static_cast<double>(hyp.size());

  std::size_t best_len = record.references.front().size();
  for (const auto& ref : record.references) {
    const auto d = [&](std::size_t len) { return len > hyp.size() ? len - hyp.size() : hyp.size() - len; };
    if (d(ref.size()) < d(best_len) || (d(ref.size()) == d(best_len) && ref.size() < best_len)) best_len = ref.size();
  }
  st.reference_length = static_cast<double>(best_len);

  for (std::size_t n = 1; n <= 4; ++n) {
    const auto hyp_counts = detail::ngram_counts(hyp, n);
    std::map<std::vector<std::string>, int> max_ref;
    for (const auto& ref : record.references)
      for (const auto& [gram, c] : detail::ngram_counts(ref.tokens(), n)) max_ref[gram] = std::max(max_ref[gram], c);
    for (const auto& [gram, c] : hyp_counts) {
      const auto it = max_ref.find(gram);
      st.matches[n - 1] += std::min(c, it == max_ref.end() ? 0 : it->second);
      st.totals[n - 1] += c;
    }
  }
  return st;
}

// BLEU on a 0-100 scale from aggregated statistics. A zero match count is
// replaced by epsilon; an order with no hypothesis n-grams at all has
// epsilon/epsilon and so contributes a factor of 1.
inline double bleu_from_stats(const BleuStats& st) {
  double log_precision = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    const double m = st.matches[n] > 0.0 ? st.matches[n] : kBleuEpsilon;
    const double t = st.totals[n] > 0.0 ? st.totals[n] : kBleuEpsilon;
    log_precision += std::log(m / t) / 4.0;
  }
  double log_bp = 0.0;
  if (st.hypothesis_length <= 0.0) return 0.0;
  if (st.hypothesis_length < st.reference_length) log_bp = 1.0 - st.reference_length / st.hypothesis_length;
  return 100.0 * std::exp(log_precision + log_bp);
}

// Corpus BLEU-4 with multi-reference clipping.
inline double bleu4(std::span<const EvalRecord> records) {
  if (records.empty()) throw ValidationError("bleu4: no records");
  BleuStats total;
  for (const auto& r : records) {
    const auto st = bleu_stats(r);
    for (std::size_t n = 0; n < 4; ++n) {
      total.matches[n] += st.matches[n];
      total.totals[n] += st.totals[n];
    }
    total.hypothesis_length += st.hypothesis_length;
    total.reference_length += st.reference_length;
  }
  return bleu_from_stats(total);
}

// ---------------------------------------------------------------------------
// Harmonic mean
// ---------------------------------------------------------------------------

// 2 b e / (b + e), both in percent; 0 when both are 0.
inline double hmean(double bleu, double ents) {
  const auto in_range = [](double v) { return v >= 0.0 && v <= 100.0; };
  if (!in_range(bleu) || !in_range(ents)) throw ValidationError("hmean: inputs must be in [0, 100]");
  if (bleu + ents == 0.0) return 0.0;
  return 2.0 * bleu * ents / (bleu + ents);
}

// ---------------------------------------------------------------------------
// Correlations
// ---------------------------------------------------------------------------

namespace detail {

inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("correlation inputs differ in length");
  if (a.size() < 3) throw ValidationError("correlation needs at least 3 points");
}

// 1-based ranks, ties get the average of the ranks they span.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

}  // namespace detail

inline double pearson(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw UndefinedCorrelation("pearson: constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  const auto ra = detail::average_ranks(a);
  const auto rb = detail::average_ranks(b);
  try {
    return pearson(ra, rb);
  } catch (const UndefinedCorrelation&) {
    throw UndefinedCorrelation("spearman: constant input");
  }
}

// Kendall's tau-b; pairs tied in both inputs count in neither tie total.
inline double kendall_tau_b(std::span<const double> a, std::span<const double> b) {
  detail::check_pair(a, b);
  double concordant = 0.0, discordant = 0.0, ties_a = 0.0, ties_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      const double da = a[i] - a[j];
      const double db = b[i] - b[j];
      if (da == 0.0 && db == 0.0) continue;
      if (da == 0.0) {
        ties_a += 1.0;
      } else if (db == 0.0) {
        ties_b += 1.0;
      } else if ((da > 0.0) == (db > 0.0)) {
        concordant += 1.0;
      } else {
        discordant += 1.0;
      }
    }
  }
  const double denom = std::sqrt((concordant + discordant + ties_a) * (concordant + discordant + ties_b));
  if (denom == 0.0) throw UndefinedCorrelation("kendall: constant input");
  return (concordant - discordant) / denom;
}

struct Correlations {
  double pearson_r = 0.0;
  double spearman_rho = 0.0;
  double kendall_tau = 0.0;
};

inline Correlations correlations(std::span<const double> a, std::span<const double> b) {
  return {pearson(a, b), spearman(a, b), kendall_tau_b(a, b)};
}

}  // namespace cfrewrite
