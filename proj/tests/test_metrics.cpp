#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "cfrewrite/metrics.hpp"

using namespace cfrewrite;

namespace {

EvalRecord record(const std::string& id, const std::string& hyp, std::vector<std::string> refs) {
  EvalRecord r{id, tokenize(hyp), {}, std::nullopt};
  for (const auto& ref : refs) r.references.push_back(tokenize(ref));
  return r;
}

// Brute-force versions for inputs without ties.
double brute_kendall(const std::vector<double>& a, const std::vector<double>& b) {
  int s = 0, n0 = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      s += ((a[i] < a[j]) == (b[i] < b[j])) ? 1 : -1;
      ++n0;
    }
  return static_cast<double>(s) / n0;
}

double brute_spearman_distinct(const std::vector<double>& a, const std::vector<double>& b) {
  const auto rank = [](const std::vector<double>& v, std::size_t i) {
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double x) { return x < v[i]; }) + 1);
  };
  const double n = static_cast<double>(a.size());
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += std::pow(rank(a, i) - rank(b, i), 2);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

}  // namespace

TEST(Bleu, IdenticalIsHundred) {
  const std::vector<EvalRecord> recs{record("a", "She was sad. She frowned. Then she slept.", {"She was sad. She frowned. Then she slept."}),
                                     record("b", "Tom went home to rest.", {"x y z.", "Tom went home to rest."})};
  EXPECT_EQ(bleu4(recs), 100.0);
}

TEST(Bleu, NoOverlapIsNearZero) {
  const std::vector<EvalRecord> recs{record("a", "alpha beta gamma delta epsilon", {"one two three four five"})};
  EXPECT_LT(bleu4(recs), 1e-6);
  EXPECT_GE(bleu4(recs), 0.0);
}

TEST(Bleu, ShortHypothesisWorkedExample) {
  const std::vector<EvalRecord> recs{record("a", "the cat sat", {"the cat sat down"})};
  EXPECT_NEAR(bleu4(recs), 100.0 * std::exp(1.0 - 4.0 / 3.0), 1e-6);
  EXPECT_NEAR(bleu4(recs), 71.6531, 1e-4);
}

TEST(Bleu, ClipsRepeatedWords) {
  const auto st = bleu_stats(record("a", "the the the the", {"the cat", "the the"}));
  EXPECT_EQ(st.matches[0], 2.0);
  EXPECT_EQ(st.totals[0], 4.0);
  EXPECT_EQ(st.matches[1], 1.0);
}

TEST(Bleu, ClosestReferenceLengthShorterOnTies) {
  EXPECT_EQ(bleu_stats(record("a", "a b c d", {"a b c", "a b c d e", "x"})).reference_length, 3.0);
  EXPECT_EQ(bleu_stats(record("a", "a b c d", {"a b c d e f", "a b"})).reference_length, 2.0);
}

TEST(Bleu, OrderInvariance) {
  std::vector<EvalRecord> recs{record("a", "the dog ran far away", {"the dog ran away", "a dog ran far"}),
                               record("b", "she smiled at him", {"she smiled", "he smiled at her"}),
                               record("c", "then they all went to sleep", {"then they slept", "they all went to bed"})};
  const double base = bleu4(recs);
  EXPECT_GT(base, 0.0);
  std::mt19937_64 rng(8);
  for (int i = 0; i < 20; ++i) {
    std::shuffle(recs.begin(), recs.end(), rng);
    for (auto& r : recs) std::shuffle(r.references.begin(), r.references.end(), rng);
    ASSERT_EQ(bleu4(recs), base);
  }
}

TEST(Bleu, EmptyInputRejected) {
  EXPECT_THROW(bleu4(std::vector<EvalRecord>{}), ValidationError);
  EXPECT_THROW(bleu4(std::vector<EvalRecord>{record("a", "x", {})}), ValidationError);
}

TEST(HMean, Examples) {
  EXPECT_NEAR(hmean(44.05, 32.28), 37.26, 0.01);
  EXPECT_EQ(hmean(50.0, 50.0), 50.0);
  EXPECT_EQ(hmean(0.0, 0.0), 0.0);
  EXPECT_EQ(hmean(0.0, 80.0), 0.0);
  EXPECT_NEAR(hmean(100.0, 25.0), 40.0, 1e-12);
}

TEST(HMean, Properties) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 100.0);
  for (int i = 0; i < 1000; ++i) {
    const double b = u(rng), e = u(rng);
    const double h = hmean(b, e);
    ASSERT_EQ(h, hmean(e, b));
    ASSERT_LE(h, std::max(b, e) + 1e-12);
    ASSERT_GE(h, std::min(b, e) - 1e-12);
  }
  EXPECT_THROW(hmean(-1.0, 3.0), ValidationError);
  EXPECT_THROW(hmean(3.0, 100.5), ValidationError);
}

TEST(Correlation, PerfectLinear) {
  const std::vector<double> a{1, 2, 3, 4, 5, 6};
  std::vector<double> up, down;
  for (double x : a) {
    up.push_back(2 * x + 3);
    down.push_back(-x);
  }
  const auto c = correlations(a, up);
  EXPECT_NEAR(c.pearson_r, 1.0, 1e-12);
  EXPECT_NEAR(c.spearman_rho, 1.0, 1e-12);
  EXPECT_NEAR(c.kendall_tau, 1.0, 1e-12);
  const auto d = correlations(a, down);
  EXPECT_NEAR(d.pearson_r, -1.0, 1e-12);
  EXPECT_NEAR(d.spearman_rho, -1.0, 1e-12);
  EXPECT_NEAR(d.kendall_tau, -1.0, 1e-12);
}

TEST(Correlation, SmallWorkedExample) {
  const std::vector<double> a{1, 2, 3, 4}, b{1, 3, 2, 4};
  const auto c = correlations(a, b);
  EXPECT_NEAR(c.pearson_r, 0.8, 1e-12);
  EXPECT_NEAR(c.spearman_rho, 0.8, 1e-12);
  EXPECT_NEAR(c.kendall_tau, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(c.kendall_tau, brute_kendall(a, b), 1e-12);
  EXPECT_NEAR(c.spearman_rho, brute_spearman_distinct(a, b), 1e-12);
}

TEST(Correlation, RankFormulasOnRandomPermutations) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> a(3 + i % 9), b;
    std::iota(a.begin(), a.end(), 0.0);
    b = a;
    std::shuffle(b.begin(), b.end(), rng);
    if (a == b) continue;
    ASSERT_NEAR(kendall_tau_b(a, b), brute_kendall(a, b), 1e-12);
    ASSERT_NEAR(spearman(a, b), brute_spearman_distinct(a, b), 1e-12);
  }
}

TEST(Correlation, TiesUseAverageRanks) {
  const std::vector<double> v{10, 20, 20, 30};
  EXPECT_EQ(detail::average_ranks(v), (std::vector<double>{1, 2.5, 2.5, 4}));
  const std::vector<double> a{1, 2, 2, 3}, b{1, 2, 3, 4};
  // 5 concordant, 0 discordant, 1 pair tied in a only.
  EXPECT_NEAR(kendall_tau_b(a, b), 5.0 / std::sqrt(5.0 * 6.0), 1e-12);
}

TEST(Correlation, AffineInvariance) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<double> a(40), b(40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = g(rng);
    b[i] = a[i] + g(rng);
  }
  const auto base = correlations(a, b);
  std::vector<double> a2;
  for (double x : a) a2.push_back(3.5 * x - 7.0);
  const auto moved = correlations(a2, b);
  EXPECT_NEAR(moved.pearson_r, base.pearson_r, 1e-12);
  EXPECT_EQ(moved.spearman_rho, base.spearman_rho);
  EXPECT_EQ(moved.kendall_tau, base.kendall_tau);
}

TEST(Correlation, Errors) {
  const std::vector<double> flat{2, 2, 2, 2}, ramp{1, 2, 3, 4};
  EXPECT_THROW(pearson(flat, ramp), UndefinedCorrelation);
  EXPECT_THROW(spearman(ramp, flat), UndefinedCorrelation);
  EXPECT_THROW(kendall_tau_b(flat, ramp), UndefinedCorrelation);
  EXPECT_THROW(correlations(std::vector<double>{1, 2}, std::vector<double>{1, 2}), ValidationError);
  EXPECT_THROW(correlations(ramp, std::vector<double>{1, 2, 3}), ValidationError);
}
