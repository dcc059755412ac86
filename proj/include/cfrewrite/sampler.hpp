#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"
#include "cfrewrite/scorer.hpp"

namespace cfrewrite {

// ---------------------------------------------------------------------------
// Scores
// ---------------------------------------------------------------------------

// log pi = log fluency + log coherence. The coherence term is the log of a
// ratio (counterfactual over initial context) and may be positive.
struct ScoreBundle {
  double log_fluency = 0.0;
  double log_coherence = 0.0;
  double log_pi = 0.0;
};

// A ScoreBundle together with the per-token terms it was built from.
struct EndingScore {
  ScoreBundle bundle;
  std::vector<double> lp_counterfactual;  // log P(y_i | z, x', y_<i)
  std::vector<double> lp_initial;         // log P(y_i | z, x, y_<i)
};

inline EndingScore score_ending(const Scorer& scorer, const StoryInstance& story, const TokenSequence& ending) {
  EndingScore s;
  s.lp_counterfactual = clm_score_ending(scorer, story.premise, story.counterfactual_context, ending);
  s.lp_initial = clm_score_ending(scorer, story.premise, story.initial_context, ending);
  s.bundle.log_fluency = Scorer::sum_logprobs(s.lp_counterfactual);
  if (scorer.has_native_coherence()) {
    const double with_cf = scorer.coherence_logprob(concat(story.premise, story.counterfactual_context), ending);
    const double with_init = scorer.coherence_logprob(concat(story.premise, story.initial_context), ending);
    if (!std::isfinite(with_cf) || !std::isfinite(with_init) || with_cf > 0.0 || with_init > 0.0)
      throw ProtocolError("coherence log-prob not finite and <= 0");
    s.bundle.log_coherence = with_cf - with_init;
  } else {
    // Same sum the default coherence_logprob computes, taken from the terms
    // already in hand.
    s.bundle.log_coherence = s.bundle.log_fluency - Scorer::sum_logprobs(s.lp_initial);
  }
  s.bundle.log_pi = s.bundle.log_fluency + s.bundle.log_coherence;
  return s;
}

inline ScoreBundle score_pi(const Scorer& scorer, const StoryInstance& story, const TokenSequence& ending) {
  return score_ending(scorer, story, ending).bundle;
}

// ---------------------------------------------------------------------------
// Conflict detection
// ---------------------------------------------------------------------------

// Where to edit: a softmax over editable ending positions of
// log P(y_i | z, x, .) - log P(y_i | z, x', .). Tokens that the initial
// context explains better than the counterfactual one rank higher.
struct ConflictDistribution {
  std::vector<double> probs;   // 0 at sentence boundaries
  std::vector<double> logits;  // 0 at sentence boundaries
};

inline ConflictDistribution conflict_from_scores(const TokenSequence& ending, const EndingScore& scores) {
  ConflictDistribution d;
  d.probs.assign(ending.size(), 0.0);
  d.logits.assign(ending.size(), 0.0);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ending.size(); ++i) {
    if (ending.is_boundary(i)) continue;
    d.logits[i] = scores.lp_initial[i] - scores.lp_counterfactual[i];
    max_logit = std::max(max_logit, d.logits[i]);
  }
  if (!std::isfinite(max_logit)) throw DegenerateProposal("ending has no editable position");
  double z = 0.0;
  for (std::size_t i = 0; i < ending.size(); ++i) {
    if (ending.is_boundary(i)) continue;
    d.probs[i] = std::exp(d.logits[i] - max_logit);
    z += d.probs[i];
  }
  for (double& p : d.probs) p /= z;
  return d;
}

inline ConflictDistribution conflict_distribution(const Scorer& scorer, const StoryInstance& story,
                                                  const TokenSequence& ending) {
  return conflict_from_scores(ending, score_ending(scorer, story, ending));
}

namespace detail {

// -sum(logits). Under the default coherence scorer this equals
// log_coherence when every position is editable.
inline double negated_logit_sum(const ConflictDistribution& d) {
  double s = 0.0;
  for (double l : d.logits) s += l;
  return -s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Proposals
// ---------------------------------------------------------------------------

enum class EditOp { replacement = 0, deletion = 1, insertion = 2 };

inline std::string_view to_string(EditOp op) {
  switch (op) {
    case EditOp::replacement: return "replacement";
    case EditOp::deletion: return "deletion";
    case EditOp::insertion: return "insertion";
  }
  return "unknown";
}

struct EditProposal {
  EditOp op = EditOp::replacement;
  std::size_t position = 0;
  std::optional<std::string> old_token;
  std::optional<std::string> new_token;
  double log_g_forward = 0.0;
  double log_g_reverse = 0.0;
};

struct ProposedEdit {
  TokenSequence ending;
  EditProposal proposal;
};

struct AcceptedState {
  TokenSequence ending;
  ScoreBundle scores;
};

struct ChainState {
  TokenSequence ending;
  std::size_t step = 0;
  std::vector<AcceptedState> accepted;
  std::mt19937_64 rng;
};

namespace detail {

inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Index drawn in proportion to `weights` (not necessarily normalized).
inline std::size_t sample_index(std::span<const double> weights, std::mt19937_64& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double target = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] <= 0.0) continue;
    acc += weights[i];
    last_positive = i;
    if (target < acc) return i;
  }
  return last_positive;
}

inline bool usable_candidate(std::string_view token) {
  if (token.empty() || token == kMaskToken || is_sentence_boundary(token)) return false;
  return token.find_first_of(" \t\r\n") == std::string_view::npos;
}

inline const CandidateSet::Entry& draw_candidate(const CandidateSet& cands, std::mt19937_64& rng) {
  std::vector<double> p;
  p.reserve(cands.size());
  for (const auto& e : cands.entries()) p.push_back(std::exp(e.logprob));
  return cands.entries()[sample_index(p, rng)];
}

inline constexpr int kMaxPositionRetries = 8;

}  // namespace detail

// Draws one edit: position from `conflict`, operation from the op weights,
// word from the renormalized candidate set. Returns nullopt when no edit
// can be made (no allowed op, or every retry hit an empty candidate set).
//
// Only word-choice probabilities enter log_g_*; the position draw is left
// to the caller (see SamplerConfig::position_correction).
inline std::optional<ProposedEdit> propose_edit(const Scorer& scorer, const SamplerConfig& config, ChainState& state,
                                                const StoryInstance& story, const ConflictDistribution& conflict) {
  const TokenSequence& ending = state.ending;
  const TokenSequence prefix = concat(story.premise, story.counterfactual_context);
  const std::size_t offset = prefix.size();
  const auto candidates_at = [&](const TokenSequence& masked, std::size_t pos) {
    return propose_candidates(scorer, concat(prefix, masked), offset + pos, config.top_k_candidates,
                              detail::usable_candidate);
  };

  for (int attempt = 0; attempt < detail::kMaxPositionRetries; ++attempt) {
    const std::size_t m = detail::sample_index(conflict.probs, state.rng);
    std::array<double, 3> weights = config.op_weights;
    // No deletion that would leave a sentence with no words.
    const bool alone = (m == 0 || ending.is_boundary(m - 1)) && (m + 1 == ending.size() || ending.is_boundary(m + 1));
    if (ending.size() <= config.min_ending_length || ending.is_boundary(m) || alone) weights[1] = 0.0;
    if (weights[0] + weights[1] + weights[2] <= 0.0) return std::nullopt;
    const auto op = static_cast<EditOp>(detail::sample_index(weights, state.rng));

    ProposedEdit edit;
    edit.proposal.op = op;
    edit.proposal.position = m;
    try {
      switch (op) {
        case EditOp::replacement: {
          // Forward and reverse share the masked context, hence one query.
          const auto cands = candidates_at(ending.with_replaced(m, kMaskToken), m);
          const auto& pick = detail::draw_candidate(cands, state.rng);
          edit.proposal.old_token = ending[m];
          edit.proposal.new_token = pick.token;
          edit.proposal.log_g_forward = pick.logprob;
          edit.proposal.log_g_reverse = cands.logprob_of(ending[m]);
          edit.ending = ending.with_replaced(m, pick.token);
          break;
        }
        case EditOp::deletion: {
          edit.proposal.old_token = ending[m];
          edit.proposal.log_g_forward = 0.0;
          edit.ending = ending.with_erased(m);
          // Reverse move: insert a mask at m in the new ending and draw the
          // deleted word, i.e. the same masked context as above.
          try {
            edit.proposal.log_g_reverse = candidates_at(ending.with_replaced(m, kMaskToken), m).logprob_of(ending[m]);
          } catch (const DegenerateProposal&) {
            edit.proposal.log_g_reverse = kLogProbFloor;
          }
          break;
        }
        case EditOp::insertion: {
          const auto cands = candidates_at(ending.with_inserted(m, kMaskToken), m);
          const auto& pick = detail::draw_candidate(cands, state.rng);
          edit.proposal.new_token = pick.token;
          edit.proposal.log_g_forward = pick.logprob;
          edit.proposal.log_g_reverse = 0.0;
          edit.ending = ending.with_inserted(m, pick.token);
          break;
        }
      }
    } catch (const DegenerateProposal&) {
      continue;
    }
    edit.proposal.log_g_forward = std::max(edit.proposal.log_g_forward, kLogProbFloor);
    edit.proposal.log_g_reverse = std::max(edit.proposal.log_g_reverse, kLogProbFloor);
    return edit;
  }
  return std::nullopt;
}

inline std::optional<ProposedEdit> propose_edit(const Scorer& scorer, const SamplerConfig& config, ChainState& state,
                                                const StoryInstance& story) {
  return propose_edit(scorer, config, state, story, conflict_distribution(scorer, story, state.ending));
}

// ---------------------------------------------------------------------------
// Acceptance and cooling
// ---------------------------------------------------------------------------

// min{1, exp[(log_pi_new - log_pi_old) / T + log_g_reverse - log_g_forward]}
inline double acceptance_rate(double log_pi_old, double log_pi_new, double log_g_forward, double log_g_reverse,
                              double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ValidationError("temperature must be finite and > 0");
  if (!std::isfinite(log_pi_old) || !std::isfinite(log_pi_new) || !std::isfinite(log_g_forward) ||
      !std::isfinite(log_g_reverse))
    throw ValidationError("acceptance_rate: non-finite input");
  const double exponent = (log_pi_new - log_pi_old) / temperature + log_g_reverse - log_g_forward;
  if (exponent >= 0.0) return 1.0;
  return std::exp(exponent);
}

inline double acceptance_rate(const ScoreBundle& pi_old, const ScoreBundle& pi_new, const EditProposal& proposal,
                              double temperature) {
  return acceptance_rate(pi_old.log_pi, pi_new.log_pi, proposal.log_g_forward, proposal.log_g_reverse, temperature);
}

// temp_base ^ floor(t / temp_interval)
inline double temperature(const SamplerConfig& config, std::size_t t) {
  return std::pow(config.temp_base, static_cast<double>(t / config.temp_interval));
}

// ---------------------------------------------------------------------------
// The chain
// ---------------------------------------------------------------------------

struct TraceEntry {
  std::size_t step = 0;
  EditOp op = EditOp::replacement;
  std::size_t position = 0;
  std::string ending;
  double log_pi = 0.0;
  double alpha = 0.0;
};

inline nlohmann::json to_json(const TraceEntry& e) {
  return nlohmann::json{{"step", e.step},   {"op", to_string(e.op)}, {"position", e.position},
                        {"ending", e.ending}, {"log_pi", e.log_pi},    {"alpha", e.alpha}};
}

enum class StepKind { accepted, rejected, skipped };

struct StepResult {
  StepKind kind = StepKind::skipped;
  std::optional<EditProposal> proposal;
  double alpha = 0.0;
};

// One Metropolis-Hastings chain over endings of a single story. Owns its
// rng; shares nothing mutable with other chains.
class Chain {
 public:
  Chain(const Scorer& scorer, SamplerConfig config, const StoryInstance& story)
      : scorer_(scorer), config_(std::move(config)), story_(story) {
    config_.validate();
    state_.ending = story_.original_ending;
    state_.rng.seed(config_.rng_seed);
    current_ = score_ending(scorer_, story_, state_.ending);
    refresh_conflict();
  }

  const ChainState& state() const { return state_; }
  const ScoreBundle& current_scores() const { return current_.bundle; }
  const std::vector<TraceEntry>& trace() const { return trace_; }
  const SamplerConfig& config() const { return config_; }

  StepResult step() {
    StepResult result;
    const double temp = temperature(config_, state_.step);
    std::optional<ProposedEdit> edit;
    if (conflict_) edit = propose_edit(scorer_, config_, state_, story_, *conflict_);
    if (!edit) {
      ++state_.step;
      return result;
    }
    auto& proposal = edit->proposal;
    EndingScore next = score_ending(scorer_, story_, edit->ending);
    std::optional<ConflictDistribution> next_conflict;
    try {
      next_conflict = conflict_from_scores(edit->ending, next);
    } catch (const DegenerateProposal&) {
    }
    if (config_.position_correction) apply_position_correction(proposal, edit->ending, next_conflict);

    result.proposal = proposal;
    result.alpha = acceptance_rate(current_.bundle, next.bundle, proposal, temp);
    if (detail::uniform01(state_.rng) < result.alpha) {
      result.kind = StepKind::accepted;
      state_.ending = std::move(edit->ending);
      current_ = std::move(next);
      conflict_ = std::move(next_conflict);
      state_.accepted.push_back({state_.ending, current_.bundle});
      trace_.push_back({state_.step, proposal.op, proposal.position, detokenize(state_.ending), current_.bundle.log_pi,
                        result.alpha});
    } else {
      result.kind = StepKind::rejected;
    }
    ++state_.step;
    return result;
  }

 private:
  void refresh_conflict() {
    try {
      conflict_ = conflict_from_scores(state_.ending, current_);
    } catch (const DegenerateProposal&) {
      conflict_.reset();
    }
  }

  void apply_position_correction(EditProposal& proposal, const TokenSequence& next_ending,
                                 const std::optional<ConflictDistribution>& next_conflict) const {
    const std::size_t m = proposal.position;
    proposal.log_g_forward += std::log(conflict_->probs[m]);
    // Reverse moves: replacement at m, insertion before m (undoes deletion),
    // deletion at m (undoes insertion). All act on position m of the new
    // ending.
    double reverse = 0.0;
    if (next_conflict && m < next_ending.size()) reverse = next_conflict->probs[m];
    proposal.log_g_reverse += reverse > 0.0 ? std::log(reverse) : kLogProbFloor;
  }

  const Scorer& scorer_;
  SamplerConfig config_;
  const StoryInstance& story_;
  ChainState state_;
  EndingScore current_;
  std::optional<ConflictDistribution> conflict_;
  std::vector<TraceEntry> trace_;
};

struct RewriteResult {
  TokenSequence best_ending;
  ScoreBundle best_scores;
  std::vector<AcceptedState> accepted;
  std::vector<TraceEntry> trace;
  std::size_t steps_run = 0;
};

// Raised when the scorer fails mid-run; carries what was completed.
class RewriteError : public Error {
 public:
  RewriteError(const std::string& what, std::vector<TraceEntry> trace, std::size_t completed_steps,
               std::exception_ptr cause)
      : Error(what), trace_(std::move(trace)), completed_steps_(completed_steps), cause_(std::move(cause)) {}

  const std::vector<TraceEntry>& trace() const { return trace_; }
  std::size_t completed_steps() const { return completed_steps_; }
  std::exception_ptr cause() const { return cause_; }

 private:
  std::vector<TraceEntry> trace_;
  std::size_t completed_steps_;
  std::exception_ptr cause_;
};

// Runs n_steps of the chain and returns the highest-scoring ending among
// the original and every accepted state (earliest wins ties).
inline RewriteResult rewrite(const Scorer& scorer, const SamplerConfig& config, const StoryInstance& story) {
  std::optional<Chain> chain;
  try {
    chain.emplace(scorer, config, story);
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw RewriteError(e.what(), {}, 0, std::current_exception());
  }
  const ScoreBundle original = chain->current_scores();
  for (std::size_t t = 0; t < config.n_steps; ++t) {
    try {
      chain->step();
    } catch (const Error& e) {
      throw RewriteError(std::string("step ") + std::to_string(t) + ": " + e.what(), chain->trace(), t,
                         std::current_exception());
    }
  }

  RewriteResult out;
  out.best_ending = story.original_ending;
  out.best_scores = original;
  for (const auto& acc : chain->state().accepted) {
    if (acc.scores.log_pi > out.best_scores.log_pi) {
      out.best_ending = acc.ending;
      out.best_scores = acc.scores;
    }
  }
  out.accepted = chain->state().accepted;
  out.trace = chain->trace();
  out.steps_run = chain->state().step;
  return out;
}

}  // namespace cfrewrite
