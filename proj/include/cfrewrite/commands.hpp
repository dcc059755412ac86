#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"
#include "cfrewrite/metrics.hpp"
#include "cfrewrite/ngram.hpp"
#include "cfrewrite/remote_scorer.hpp"
#include "cfrewrite/sampler.hpp"

namespace cfrewrite {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kServerUrlEnv = "REWRITER_SERVER_URL";

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitValidation = 2,
  kExitDataMismatch = 3,
  kExitBackendUnreachable = 4,
};

// Carries the process exit code a command wants.
class CommandError : public Error {
 public:
  CommandError(int code, const std::string& what) : Error(what), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

namespace detail {

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CommandError(kExitValidation, "cannot write " + path);
  return out;
}

// Non-empty lines of an NDJSON file as parsed objects, with line numbers.
inline std::vector<std::pair<std::size_t, nlohmann::json>> read_ndjson(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError(kExitValidation, "cannot open " + path);
  std::vector<std::pair<std::size_t, nlohmann::json>> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto doc = nlohmann::json::parse(line, nullptr, false);
    if (doc.is_discarded() || !doc.is_object())
      throw CommandError(kExitValidation, path + ":" + std::to_string(lineno) + ": not a JSON object");
    out.emplace_back(lineno, std::move(doc));
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// train-ngram
// ---------------------------------------------------------------------------

enum class CorpusFormat { text, dataset };

struct TrainNgramArgs {
  std::string corpus_path;
  std::string output_path;
  std::size_t order = 3;
  double discount = 0.75;
  CorpusFormat format = CorpusFormat::text;
};

struct TrainSummary {
  std::size_t vocabulary_size = 0;
  std::vector<std::size_t> ngram_counts;  // per order, 1-based order at index 0
};

// Sequences to train on. Text corpora give one sequence per non-blank
// line; datasets give each story twice, once per context, with every
// ending that goes with that context.
inline std::vector<TokenSequence> read_corpus(const std::string& path, CorpusFormat format) {
  std::vector<TokenSequence> corpus;
  if (format == CorpusFormat::text) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open corpus " + path);
    std::string line;
    while (std::getline(in, line)) {
      auto seq = tokenize(line);
      if (!seq.empty()) corpus.push_back(std::move(seq));
    }
    return corpus;
  }
  const auto data = load_dataset(path);
  if (!data.errors.empty())
    throw ValidationError(path + ":" + std::to_string(data.errors.front().line) + ": " + data.errors.front().message);
  for (const auto& s : data.instances) {
    corpus.push_back(concat(concat(s.premise, s.initial_context), s.original_ending));
    for (const auto& ref : s.reference_endings)
      corpus.push_back(concat(concat(s.premise, s.counterfactual_context), ref));
  }
  return corpus;
}

inline TrainSummary cmd_train_ngram(const TrainNgramArgs& args, std::ostream& log) {
  if (args.order < 2) throw CommandError(kExitValidation, "order must be >= 2, got " + std::to_string(args.order));
  if (!(args.discount > 0.0 && args.discount < 1.0)) throw CommandError(kExitValidation, "discount must be in (0, 1)");
  std::vector<TokenSequence> corpus;
  try {
    corpus = read_corpus(args.corpus_path, args.format);
  } catch (const Error& e) {
    throw CommandError(kExitValidation, e.what());
  }
  if (corpus.empty()) throw CommandError(kExitValidation, "corpus " + args.corpus_path + " is empty");

  const auto model = train_ngram(corpus, args.order, args.discount);
  try {
    save_ngram(model, args.output_path);
  } catch (const IoError& e) {
    throw CommandError(kExitValidation, e.what());
  }

  TrainSummary summary;
  summary.vocabulary_size = model.vocabulary_size();
  for (std::size_t k = 1; k <= model.order(); ++k) summary.ngram_counts.push_back(model.table(k).size());
  log << "trained order-" << args.order << " model on " << corpus.size() << " sequences\n";
  log << "vocabulary: " << summary.vocabulary_size << "\n";
  for (std::size_t k = 1; k <= model.order(); ++k) log << k << "-grams: " << summary.ngram_counts[k - 1] << "\n";
  log << "wrote " << args.output_path << "\n";
  return summary;
}

// ---------------------------------------------------------------------------
// rewrite
// ---------------------------------------------------------------------------

struct BackendSpec {
  std::string kind = "ngram";  // "ngram" | "remote"
  std::string ngram_model;
  std::string server_url;
};

struct RewriteArgs {
  std::string input_path;
  std::string output_path;
  BackendSpec backend;
  SamplerConfig sampler;
  std::size_t jobs = 1;
  std::string trace_path;  // empty: no trace
};

// Everything needed to replay a rewrite run.
struct RunManifest {
  RewriteArgs args;
  std::string started_at;
  std::string finished_at;
  std::string version = kVersion;
};

inline nlohmann::json to_json(const SamplerConfig& c) {
  return {{"n_steps", c.n_steps},
          {"temp_base", c.temp_base},
          {"temp_interval", c.temp_interval},
          {"top_k_candidates", c.top_k_candidates},
          {"rng_seed", c.rng_seed},
          {"min_ending_length", c.min_ending_length},
          {"op_weights", c.op_weights},
          {"position_correction", c.position_correction}};
}

inline SamplerConfig sampler_config_from_json(const nlohmann::json& j) {
  SamplerConfig c;
  c.n_steps = j.at("n_steps").get<std::size_t>();
  c.temp_base = j.at("temp_base").get<double>();
  c.temp_interval = j.at("temp_interval").get<std::size_t>();
  c.top_k_candidates = j.at("top_k_candidates").get<std::size_t>();
  c.rng_seed = j.at("rng_seed").get<std::uint64_t>();
  c.min_ending_length = j.at("min_ending_length").get<std::size_t>();
  c.op_weights = j.at("op_weights").get<std::array<double, 3>>();
  c.position_correction = j.value("position_correction", false);
  return c;
}

inline nlohmann::json to_json(const RunManifest& m) {
  return {{"version", m.version},
          {"started_at", m.started_at},
          {"finished_at", m.finished_at},
          {"input", m.args.input_path},
          {"output", m.args.output_path},
          {"trace", m.args.trace_path},
          {"jobs", m.args.jobs},
          {"backend",
           {{"kind", m.args.backend.kind},
            {"ngram_model", m.args.backend.ngram_model},
            {"server_url", m.args.backend.server_url}}},
          {"config", to_json(m.args.sampler)}};
}

inline RunManifest manifest_from_json(const nlohmann::json& j) {
  RunManifest m;
  try {
    m.version = j.at("version").get<std::string>();
    m.started_at = j.value("started_at", "");
    m.finished_at = j.value("finished_at", "");
    m.args.input_path = j.at("input").get<std::string>();
    m.args.output_path = j.at("output").get<std::string>();
    m.args.trace_path = j.value("trace", "");
    m.args.jobs = j.value("jobs", std::size_t{1});
    const auto& b = j.at("backend");
    m.args.backend.kind = b.at("kind").get<std::string>();
    m.args.backend.ngram_model = b.value("ngram_model", "");
    m.args.backend.server_url = b.value("server_url", "");
    m.args.sampler = sampler_config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw CommandError(kExitValidation, std::string("bad manifest: ") + e.what());
  }
  return m;
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CommandError(kExitValidation, "cannot open manifest " + path);
  const auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw CommandError(kExitValidation, "manifest " + path + " is not JSON");
  return manifest_from_json(j);
}

inline std::string manifest_path_for(const std::string& output_path) { return output_path + ".manifest.json"; }

inline std::unique_ptr<Scorer> make_scorer(const BackendSpec& spec) {
  if (spec.kind == "ngram") {
    if (spec.ngram_model.empty()) throw CommandError(kExitValidation, "--ngram-model is required for the ngram backend");
    try {
      return std::make_unique<NgramScorer>(std::make_shared<const NgramModel>(load_ngram(spec.ngram_model)));
    } catch (const Error& e) {
      throw CommandError(kExitValidation, e.what());
    }
  }
  if (spec.kind == "remote") {
    std::string url = spec.server_url;
    if (url.empty())
      if (const char* env = std::getenv(kServerUrlEnv)) url = env;
    if (url.empty()) throw CommandError(kExitValidation, "--server-url or REWRITER_SERVER_URL is required");
    return std::make_unique<RemoteScorerClient>(RemoteScorerClient::Options{url});
  }
  throw CommandError(kExitValidation, "unknown backend '" + spec.kind + "'");
}

struct StoryOutcome {
  std::optional<RewriteResult> result;
  std::string error;
  bool backend_unreachable = false;
};

inline int cmd_rewrite(const RewriteArgs& args, std::ostream& log) {
  RunManifest manifest;
  manifest.args = args;
  manifest.started_at = detail::utc_timestamp();
  try {
    args.sampler.validate();
  } catch (const ValidationError& e) {
    throw CommandError(kExitValidation, e.what());
  }
  if (args.jobs < 1) throw CommandError(kExitValidation, "--jobs must be >= 1");

  DatasetLoad data;
  try {
    data = load_dataset(args.input_path);
  } catch (const IoError& e) {
    throw CommandError(kExitValidation, e.what());
  }
  for (const auto& w : data.warnings) log << args.input_path << ":" << w.line << ": warning: " << w.message << "\n";
  if (!data.errors.empty()) {
    for (const auto& e : data.errors) log << args.input_path << ":" << e.line << ": " << e.message << "\n";
    throw CommandError(kExitValidation, std::to_string(data.errors.size()) + " malformed line(s) in " + args.input_path);
  }
  const auto scorer = make_scorer(args.backend);
  const auto& stories = data.instances;

  std::vector<StoryOutcome> outcomes(stories.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  const auto worker = [&] {
    for (std::size_t i = next++; i < stories.size(); i = next++) {
      auto& out = outcomes[i];
      try {
        out.result = rewrite(*scorer, args.sampler, stories[i]);
      } catch (const RewriteError& e) {
        out.error = e.what();
        try {
          if (e.cause()) std::rethrow_exception(e.cause());
        } catch (const TransportError&) {
          out.backend_unreachable = true;
        } catch (...) {
        }
      } catch (const Error& e) {
        out.error = e.what();
      }
      if (!out.error.empty()) {
        std::lock_guard lock(log_mutex);
        log << "story " << stories[i].story_id << " failed: " << out.error << "\n";
      }
    }
  };
  const std::size_t n_threads = std::min<std::size_t>(args.jobs, std::max<std::size_t>(stories.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();

  auto out = detail::open_output(args.output_path);
  std::optional<std::ofstream> trace;
  if (!args.trace_path.empty()) trace.emplace(detail::open_output(args.trace_path));
  std::size_t failures = 0;
  bool any_unreachable = false;
  for (std::size_t i = 0; i < stories.size(); ++i) {
    const auto& o = outcomes[i];
    if (!o.result) {
      ++failures;
      any_unreachable = any_unreachable || o.backend_unreachable;
      out << nlohmann::json{{"story_id", stories[i].story_id}, {"error", o.error}}.dump() << "\n";
      continue;
    }
    out << nlohmann::json{{"story_id", stories[i].story_id},
                          {"rewritten_ending", detokenize(o.result->best_ending)},
                          {"log_pi", o.result->best_scores.log_pi},
                          {"n_accepted", o.result->accepted.size()}}
               .dump()
        << "\n";
    if (trace) {
      for (const auto& entry : o.result->trace) {
        auto j = to_json(entry);
        j["story_id"] = stories[i].story_id;
        *trace << j.dump() << "\n";
      }
    }
  }
  out.flush();
  if (!out) throw CommandError(kExitFailure, "write failure on " + args.output_path);

  manifest.finished_at = detail::utc_timestamp();
  auto mf = detail::open_output(manifest_path_for(args.output_path));
  mf << to_json(manifest).dump(2) << "\n";

  log << "rewrote " << (stories.size() - failures) << "/" << stories.size() << " stories\n";
  if (!stories.empty() && failures == stories.size())
    return any_unreachable ? kExitBackendUnreachable : kExitFailure;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string hypotheses_path;
  std::string dataset_path;
  std::string scores_path;  // optional
  std::string server_url;   // optional; EntScore from /v1/coherence
  std::string output_path;  // optional; report copy
};

struct MetricsReport {
  double bleu4 = 0.0;
  std::optional<double> ents;
  std::optional<double> hmean;
  std::size_t n = 0;
};

inline MetricsReport make_report(double bleu, std::optional<double> ents, std::size_t n) {
  MetricsReport r;
  r.bleu4 = bleu;
  r.ents = ents;
  if (ents) r.hmean = hmean(bleu, *ents);
  r.n = n;
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["bleu4"] = r.bleu4;
  j["ents"] = r.ents ? nlohmann::json(*r.ents) : nlohmann::json(nullptr);
  j["hmean"] = r.hmean ? nlohmann::json(*r.hmean) : nlohmann::json(nullptr);
  j["n"] = r.n;
  return j;
}

// Scores file: {"story_id": ..., "coherence_score": percent} per line.
inline std::map<std::string, double> load_coherence_scores(const std::string& path) {
  std::map<std::string, double> scores;
  for (const auto& [lineno, doc] : detail::read_ndjson(path)) {
    const auto where = path + ":" + std::to_string(lineno);
    if (!doc.contains("story_id") || !doc["story_id"].is_string() || !doc.contains("coherence_score") ||
        !doc["coherence_score"].is_number())
      throw CommandError(kExitValidation, where + ": expected story_id and coherence_score");
    const double v = doc["coherence_score"].get<double>();
    if (!(v >= 0.0 && v <= 100.0)) throw CommandError(kExitValidation, where + ": coherence_score outside [0, 100]");
    scores[doc["story_id"].get<std::string>()] = v;
  }
  return scores;
}

inline MetricsReport cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& log) {
  DatasetLoad data;
  try {
    data = load_dataset(args.dataset_path);
  } catch (const IoError& e) {
    throw CommandError(kExitValidation, e.what());
  }
  if (!data.errors.empty()) {
    for (const auto& e : data.errors) log << args.dataset_path << ":" << e.line << ": " << e.message << "\n";
    throw CommandError(kExitValidation, "malformed dataset " + args.dataset_path);
  }
  std::map<std::string, const StoryInstance*> by_id;
  for (const auto& s : data.instances) by_id[s.story_id] = &s;

  std::vector<EvalRecord> records;
  std::vector<const StoryInstance*> sources;
  std::vector<std::string> missing;
  for (const auto& [lineno, doc] : detail::read_ndjson(args.hypotheses_path)) {
    if (!doc.contains("story_id") || !doc["story_id"].is_string() || !doc.contains("rewritten_ending") ||
        !doc["rewritten_ending"].is_string())
      throw CommandError(kExitValidation, args.hypotheses_path + ":" + std::to_string(lineno) +
                                              ": expected story_id and rewritten_ending");
    const auto id = doc["story_id"].get<std::string>();
    const auto it = by_id.find(id);
    if (it == by_id.end()) {
      missing.push_back(id);
      continue;
    }
    if (it->second->reference_endings.empty()) {
      log << "story " << id << " has no reference endings; skipped\n";
      continue;
    }
    records.push_back({id, tokenize(doc["rewritten_ending"].get<std::string>()), it->second->reference_endings, {}});
    sources.push_back(it->second);
  }
  if (!missing.empty()) {
    std::string ids;
    for (const auto& id : missing) ids += (ids.empty() ? "" : ", ") + id;
    log << "story ids not in dataset: " << ids << "\n";
    throw CommandError(kExitDataMismatch, "hypotheses reference unknown story ids: " + ids);
  }
  if (records.empty()) throw CommandError(kExitValidation, "nothing to evaluate");

  std::optional<double> ents;
  if (!args.scores_path.empty()) {
    const auto scores = load_coherence_scores(args.scores_path);
    std::vector<std::string> unscored;
    for (auto& r : records) {
      const auto it = scores.find(r.story_id);
      if (it == scores.end()) unscored.push_back(r.story_id);
      else r.coherence_score = it->second;
    }
    if (!unscored.empty()) {
      std::string ids;
      for (const auto& id : unscored) ids += (ids.empty() ? "" : ", ") + id;
      throw CommandError(kExitDataMismatch, "no coherence score for: " + ids);
    }
  } else if (!args.server_url.empty()) {
    const RemoteScorerClient client(RemoteScorerClient::Options{args.server_url});
    try {
      for (std::size_t i = 0; i < records.size(); ++i) {
        const double lp = client.coherence_logprob(concat(sources[i]->premise, sources[i]->counterfactual_context),
                                                   records[i].hypothesis);
        if (!client.has_native_coherence())
          throw CommandError(kExitBackendUnreachable, "server at " + args.server_url + " has no /v1/coherence");
        records[i].coherence_score = 100.0 * std::exp(lp);
      }
    } catch (const TransportError& e) {
      throw CommandError(kExitBackendUnreachable, e.what());
    } catch (const ProtocolError& e) {
      throw CommandError(kExitBackendUnreachable, e.what());
    }
  }
  if (records.front().coherence_score) {
    double sum = 0.0;
    for (const auto& r : records) sum += *r.coherence_score;
    ents = sum / static_cast<double>(records.size());
  }

  const auto report = make_report(bleu4(records), ents, records.size());
  const auto text = to_json(report).dump();
  out << text << "\n";
  if (!args.output_path.empty()) {
    auto f = detail::open_output(args.output_path);
    f << text << "\n";
  }
  return report;
}

}  // namespace cfrewrite
