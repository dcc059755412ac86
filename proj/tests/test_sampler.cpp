#include <algorithm>
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cfrewrite/ngram.hpp"
#include "cfrewrite/sampler.hpp"
#include "support/oracles.hpp"
#include "support/toy.hpp"

using namespace cfrewrite;

namespace {

NgramScorer sentiment_scorer() { return NgramScorer(toy::sentiment_model()); }

std::vector<std::string> joined(std::initializer_list<const TokenSequence*> parts) {
  std::vector<std::string> out;
  for (const auto* p : parts) out.insert(out.end(), p->tokens().begin(), p->tokens().end());
  return out;
}

// Fails with a transport error once `budget` CLM calls have been served.
class FlakyScorer final : public Scorer {
 public:
  FlakyScorer(const Scorer& inner, int budget) : inner_(inner), budget_(budget) {}
  std::vector<double> clm_logprobs(const TokenSequence& c, const TokenSequence& e) const override {
    if (budget_-- <= 0) throw TransportError("connection reset");
    return inner_.clm_logprobs(c, e);
  }
  std::vector<Candidate> mlm_candidates(const TokenSequence& s, std::size_t p, std::size_t k) const override {
    return inner_.mlm_candidates(s, p, k);
  }

 private:
  const Scorer& inner_;
  mutable int budget_;
};

std::vector<std::string> boundary_tokens(const TokenSequence& s) {
  std::vector<std::string> out;
  for (auto b : s.boundaries()) out.push_back(s[b]);
  return out;
}

}  // namespace

TEST(ScorePi, IdenticalContextsGiveZeroCoherence) {
  const auto scorer = sentiment_scorer();
  auto story = toy::sentiment_story();
  story.counterfactual_context = story.initial_context;
  const auto s = score_pi(scorer, story, story.original_ending);
  EXPECT_EQ(s.log_coherence, 0.0);
  EXPECT_EQ(s.log_pi, s.log_fluency);
}

TEST(ScorePi, MatchesOracleAndFavoursConsistentEnding) {
  const auto scorer = sentiment_scorer();
  const auto lm = toy::sentiment_oracle();
  const auto story = toy::sentiment_story("Sad , she cried quietly . She frowned . Then she slept .");
  const auto s = score_pi(scorer, story, story.original_ending);
  const auto& y = story.original_ending.tokens();
  const double cf = oracle::stream_logprob(lm, joined({&story.premise, &story.counterfactual_context}), y);
  const double init = oracle::stream_logprob(lm, joined({&story.premise, &story.initial_context}), y);
  EXPECT_NEAR(s.log_fluency, cf, 1e-9);
  EXPECT_NEAR(s.log_coherence, cf - init, 1e-9);
  EXPECT_GT(s.log_coherence, 0.0);

  const auto happy = toy::sentiment_story();
  EXPECT_LT(score_pi(scorer, happy, happy.original_ending).log_coherence, 0.0);
}

TEST(ScorePi, LogPiIsSumOfParts) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  const auto vocab = toy::sentiment_words();
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const TokenSequence ending(toy::random_words(vocab, 1 + i % 12, rng));
    const auto s = score_pi(scorer, story, ending);
    ASSERT_EQ(s.log_pi, s.log_fluency + s.log_coherence);
    ASSERT_LE(s.log_fluency, 0.0);
  }
}

TEST(Conflict, PeaksOnSentimentWord) {
  const auto scorer = sentiment_scorer();
  const auto lm = toy::sentiment_oracle();
  const auto story = toy::sentiment_story();
  const auto d = conflict_distribution(scorer, story, story.original_ending);
  const auto argmax = std::max_element(d.probs.begin(), d.probs.end()) - d.probs.begin();
  EXPECT_EQ(argmax, 0);
  EXPECT_EQ(story.original_ending[0], "Happy");

  std::vector<double> cf, init;
  oracle::stream_logprob(lm, joined({&story.premise, &story.counterfactual_context}), story.original_ending.tokens(), &cf);
  oracle::stream_logprob(lm, joined({&story.premise, &story.initial_context}), story.original_ending.tokens(), &init);
  for (std::size_t i = 0; i < d.logits.size(); ++i) {
    if (story.original_ending.is_boundary(i)) {
      EXPECT_EQ(d.probs[i], 0.0);
    } else {
      EXPECT_NEAR(d.logits[i], init[i] - cf[i], 1e-9) << i;
    }
  }
  double total = 0.0;
  for (double p : d.probs) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Conflict, UniformAndSingletonCases) {
  const auto scorer = sentiment_scorer();
  auto story = toy::sentiment_story();
  story.counterfactual_context = story.initial_context;
  const auto d = conflict_distribution(scorer, story, story.original_ending);
  const std::size_t editable = story.original_ending.size() - story.original_ending.boundaries().size();
  for (std::size_t i = 0; i < d.probs.size(); ++i)
    if (!story.original_ending.is_boundary(i)) {
      EXPECT_NEAR(d.probs[i], 1.0 / editable, 1e-15);
    }

  const auto one = conflict_distribution(scorer, toy::sentiment_story(), tokenize("Sad ."));
  EXPECT_EQ(one.probs[0], 1.0);
  EXPECT_THROW(conflict_distribution(scorer, toy::sentiment_story(), tokenize(". ! ?")), DegenerateProposal);
}

TEST(Conflict, NegatedLogitSumEqualsCoherence) {
  const auto scorer = sentiment_scorer();
  const auto vocab = toy::sentiment_words();
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    StoryInstance story;
    story.premise = TokenSequence(toy::random_words(vocab, 4, rng));
    story.initial_context = TokenSequence(toy::random_words(vocab, 3, rng));
    story.counterfactual_context = TokenSequence(toy::random_words(vocab, 3, rng));
    story.original_ending = TokenSequence(toy::random_words(vocab, 2 + i % 10, rng));
    const auto score = score_ending(scorer, story, story.original_ending);
    const auto d = conflict_from_scores(story.original_ending, score);
    ASSERT_NEAR(detail::negated_logit_sum(d), score.bundle.log_coherence, 1e-9);
  }
}

TEST(Proposal, DeletionHasUnitForwardProbability) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.op_weights = {0.0, 1.0, 0.0};
  ChainState st{story.original_ending, 0, {}, std::mt19937_64(1)};
  for (int i = 0; i < 20; ++i) {
    const auto e = propose_edit(scorer, cfg, st, story);
    ASSERT_TRUE(e);
    EXPECT_EQ(e->proposal.op, EditOp::deletion);
    EXPECT_EQ(e->proposal.log_g_forward, 0.0);
    EXPECT_LE(e->proposal.log_g_reverse, 0.0);
    EXPECT_GE(e->proposal.log_g_reverse, kLogProbFloor);
    EXPECT_EQ(e->ending.size() + 1, story.original_ending.size());
    EXPECT_FALSE(story.original_ending.is_boundary(e->proposal.position));
  }
}

TEST(Proposal, DeletionBlockedAtMinimumLength) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.op_weights = {0.0, 1.0, 0.0};
  ChainState st{tokenize("Sad she ."), 0, {}, std::mt19937_64(1)};
  EXPECT_FALSE(propose_edit(scorer, cfg, st, story));
}

TEST(Proposal, SingletonReplacementIsCertain) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.op_weights = {1.0, 0.0, 0.0};
  cfg.top_k_candidates = 1;
  ChainState st{story.original_ending, 0, {}, std::mt19937_64(2)};
  for (int i = 0; i < 20; ++i) {
    const auto e = propose_edit(scorer, cfg, st, story);
    ASSERT_TRUE(e);
    EXPECT_EQ(e->proposal.log_g_forward, 0.0);
    const double rev = e->proposal.log_g_reverse;
    EXPECT_TRUE(rev == 0.0 || rev == kLogProbFloor);
    EXPECT_EQ(rev == 0.0, e->proposal.old_token == e->proposal.new_token);
  }
}

TEST(Proposal, InsertionHasUnitReverseProbability) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.op_weights = {0.0, 0.0, 1.0};
  ChainState st{story.original_ending, 0, {}, std::mt19937_64(9)};
  const auto e = propose_edit(scorer, cfg, st, story);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->proposal.log_g_reverse, 0.0);
  EXPECT_LE(e->proposal.log_g_forward, 0.0);
  EXPECT_EQ(e->ending.size(), story.original_ending.size() + 1);
  EXPECT_FALSE(is_sentence_boundary(*e->proposal.new_token));
}

TEST(Proposal, SameSeedSameProposal) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  ChainState a{story.original_ending, 0, {}, std::mt19937_64(77)};
  ChainState b{story.original_ending, 0, {}, std::mt19937_64(77)};
  for (int i = 0; i < 30; ++i) {
    const auto ea = propose_edit(scorer, cfg, a, story);
    const auto eb = propose_edit(scorer, cfg, b, story);
    ASSERT_EQ(ea.has_value(), eb.has_value());
    if (!ea) continue;
    EXPECT_EQ(ea->ending, eb->ending);
    EXPECT_EQ(ea->proposal.log_g_forward, eb->proposal.log_g_forward);
  }
}

TEST(Acceptance, WorkedValues) {
  EXPECT_EQ(acceptance_rate(-10.0, -9.0, -1.0, -1.0, 1.0), 1.0);
  EXPECT_NEAR(acceptance_rate(-10.0, -10.0 + std::log(0.5), -1.0, -1.0, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(acceptance_rate(-10.0, -10.0, std::log(0.5), std::log(0.125), 1.0), 0.25, 1e-15);
  EXPECT_NEAR(acceptance_rate(-10.0, -10.0 + 2.0 * std::log(0.5), 0.0, 0.0, 2.0), 0.5, 1e-15);
}

TEST(Acceptance, RejectsBadInputs) {
  EXPECT_THROW(acceptance_rate(0.0, 0.0, 0.0, 0.0, 0.0), ValidationError);
  EXPECT_THROW(acceptance_rate(0.0, 0.0, 0.0, 0.0, -1.0), ValidationError);
  EXPECT_THROW(acceptance_rate(NAN, 0.0, 0.0, 0.0, 1.0), ValidationError);
  EXPECT_THROW(acceptance_rate(0.0, -INFINITY, 0.0, 0.0, 1.0), ValidationError);
}

TEST(Acceptance, InvariantToCommonShift) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const auto dy = [&] { return static_cast<double>(static_cast<int>(rng() % 20481) - 10240) / 1024.0; };
    const double lpo = dy(), lpn = dy(), gf = -std::abs(dy()), gr = -std::abs(dy()), c = dy();
    for (double T : {1.0, 0.5, 0.25}) ASSERT_EQ(acceptance_rate(lpo, lpn, gf, gr, T), acceptance_rate(lpo + c, lpn + c, gf, gr, T));
  }
}

TEST(Cooling, Schedule) {
  SamplerConfig cfg;
  EXPECT_EQ(temperature(cfg, 0), 1.0);
  EXPECT_EQ(temperature(cfg, 4), 1.0);
  EXPECT_EQ(temperature(cfg, 5), 0.95);
  EXPECT_NEAR(temperature(cfg, 12), 0.9025, 1e-15);
  for (std::size_t t = 1; t <= 100; ++t) ASSERT_LE(temperature(cfg, t), temperature(cfg, t - 1));
}

TEST(Cooling, DownhillMovesGetHarderOverTime) {
  SamplerConfig cfg;
  double prev = 1.0;
  for (std::size_t t = 0; t <= 100; ++t) {
    const double a = acceptance_rate(-5.0, -5.5, -1.0, -1.0, temperature(cfg, t));
    ASSERT_LE(a, prev);
    prev = a;
  }
  EXPECT_LT(prev, acceptance_rate(-5.0, -5.5, -1.0, -1.0, 1.0));
}

TEST(Rewrite, ZeroStepsReturnsOriginal) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.n_steps = 0;
  const auto r = rewrite(scorer, cfg, story);
  EXPECT_EQ(r.best_ending, story.original_ending);
  EXPECT_TRUE(r.trace.empty());
  EXPECT_EQ(r.best_scores.log_pi, score_pi(scorer, story, story.original_ending).log_pi);
}

TEST(Rewrite, DeterministicForSeed) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.rng_seed = 42;
  const auto a = rewrite(scorer, cfg, story);
  const auto b = rewrite(scorer, cfg, story);
  EXPECT_EQ(a.best_ending, b.best_ending);
  ASSERT_EQ(a.trace.size(), b.trace.size());
  for (std::size_t i = 0; i < a.trace.size(); ++i) EXPECT_EQ(to_json(a.trace[i]), to_json(b.trace[i]));
}

TEST(Rewrite, ImprovesSentimentStory) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.rng_seed = 1;
  const auto r = rewrite(scorer, cfg, story);
  EXPECT_GE(r.best_scores.log_pi, score_pi(scorer, story, story.original_ending).log_pi);
  EXPECT_EQ(r.steps_run, cfg.n_steps);
}

TEST(Rewrite, InvariantsOverSeeds) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SamplerConfig cfg;
    cfg.rng_seed = seed;
    cfg.n_steps = 60;
    const auto r = rewrite(scorer, cfg, story);
    EXPECT_EQ(r.accepted.size(), r.trace.size());
    EXPECT_LE(oracle::edit_distance(r.best_ending.tokens(), story.original_ending.tokens()), r.accepted.size());
    EXPECT_EQ(boundary_tokens(r.best_ending), boundary_tokens(story.original_ending));
    for (const auto& acc : r.accepted) {
      EXPECT_GE(acc.ending.size(), cfg.min_ending_length);
      EXPECT_EQ(acc.ending.segment_count(), 3u);
      EXPECT_LE(acc.scores.log_pi, r.best_scores.log_pi);
    }
    for (std::size_t i = 1; i < r.trace.size(); ++i) EXPECT_LT(r.trace[i - 1].step, r.trace[i].step);
  }
}

TEST(Rewrite, ScorerFailureCarriesPartialTrace) {
  const auto inner = sentiment_scorer();
  const auto story = toy::sentiment_story();
  FlakyScorer flaky(inner, 40);
  SamplerConfig cfg;
  cfg.rng_seed = 3;
  try {
    rewrite(flaky, cfg, story);
    FAIL() << "expected RewriteError";
  } catch (const RewriteError& e) {
    EXPECT_LT(e.completed_steps(), cfg.n_steps);
    EXPECT_LE(e.trace().size(), e.completed_steps());
    EXPECT_THROW(std::rethrow_exception(e.cause()), TransportError);
  }
  FlakyScorer dead(inner, 0);
  EXPECT_THROW(rewrite(dead, cfg, story), RewriteError);
}

TEST(Rewrite, RejectsInvalidConfig) {
  const auto scorer = sentiment_scorer();
  SamplerConfig cfg;
  cfg.temp_base = 1.5;
  EXPECT_THROW(rewrite(scorer, cfg, toy::sentiment_story()), ValidationError);
}

TEST(Proposal, DeletionNeverEmptiesASentence) {
  const auto scorer = sentiment_scorer();
  const auto story = toy::sentiment_story();
  SamplerConfig cfg;
  cfg.op_weights = {0.0, 1.0, 0.0};
  cfg.min_ending_length = 1;
  ChainState st{tokenize("Sad . She frowned . slept ."), 0, {}, std::mt19937_64(4)};
  for (int i = 0; i < 50; ++i) {
    const auto e = propose_edit(scorer, cfg, st, story);
    if (!e) continue;
    EXPECT_TRUE(e->proposal.old_token == "She" || e->proposal.old_token == "frowned");
    EXPECT_EQ(e->ending.segment_count(), 3u);
    EXPECT_EQ(e->ending.size(), 6u);
  }
}
