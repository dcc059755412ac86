// cfrewrite: train an n-gram backend, rewrite story endings, evaluate.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "cfrewrite/commands.hpp"

namespace {

using namespace cfrewrite;

int run_train(const TrainNgramArgs& args) {
  cmd_train_ngram(args, std::cout);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual story-ending rewriter"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  // train-ngram
  TrainNgramArgs train;
  std::string corpus_format = "text";
  auto* train_cmd = app.add_subcommand("train-ngram", "Train a Kneser-Ney n-gram backend");
  train_cmd->add_option("--corpus", train.corpus_path, "Corpus file (text: one sequence per line)")->required();
  train_cmd->add_option("--output", train.output_path, "Model file to write")->required();
  train_cmd->add_option("--order", train.order, "N-gram order (>= 2)")->capture_default_str();
  train_cmd->add_option("--discount", train.discount, "Absolute discount in (0, 1)")->capture_default_str();
  train_cmd->add_option("--format", corpus_format, "Corpus format")
      ->check(CLI::IsMember({"text", "dataset"}))
      ->capture_default_str();

  // rewrite
  RewriteArgs rw;
  std::string manifest_path;
  auto* rw_cmd = app.add_subcommand("rewrite", "Rewrite story endings for their counterfactual contexts");
  rw_cmd->add_option("--input", rw.input_path, "Dataset (NDJSON)");
  rw_cmd->add_option("--output", rw.output_path, "Output file (NDJSON)");
  rw_cmd->add_option("--backend", rw.backend.kind, "Scoring backend")
      ->check(CLI::IsMember({"ngram", "remote"}))
      ->capture_default_str();
  rw_cmd->add_option("--ngram-model", rw.backend.ngram_model, "Model file for the ngram backend");
  rw_cmd->add_option("--server-url", rw.backend.server_url, "Model server URL (fallback: $REWRITER_SERVER_URL)");
  rw_cmd->add_option("--steps", rw.sampler.n_steps, "MH steps per story")->capture_default_str();
  rw_cmd->add_option("--seed", rw.sampler.rng_seed, "RNG seed")->capture_default_str();
  rw_cmd->add_option("--top-k", rw.sampler.top_k_candidates, "Candidate set size")->capture_default_str();
  rw_cmd->add_option("--temp-base", rw.sampler.temp_base, "Cooling base")->capture_default_str();
  rw_cmd->add_option("--temp-interval", rw.sampler.temp_interval, "Steps per cooling stage")->capture_default_str();
  rw_cmd->add_option("--min-ending-len", rw.sampler.min_ending_length, "Minimum ending length in tokens")
      ->capture_default_str();
  rw_cmd->add_option("--jobs", rw.jobs, "Stories rewritten in parallel")->capture_default_str();
  rw_cmd->add_option("--trace", rw.trace_path, "Write accepted steps here (NDJSON)");
  rw_cmd->add_option("--manifest", manifest_path, "Replay the run described by this manifest");

  // eval
  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "BLEU-4 / EntScore / HMean report");
  ev_cmd->add_option("--hypotheses", ev.hypotheses_path, "Rewrite output (NDJSON)")->required();
  ev_cmd->add_option("--dataset", ev.dataset_path, "Dataset with reference endings")->required();
  ev_cmd->add_option("--scores", ev.scores_path, "Coherence scores (NDJSON, percent)");
  ev_cmd->add_option("--server-url", ev.server_url, "Fetch coherence scores from this model server");
  ev_cmd->add_option("--output", ev.output_path, "Also write the report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (*train_cmd) {
      train.format = corpus_format == "dataset" ? CorpusFormat::dataset : CorpusFormat::text;
      return run_train(train);
    }
    if (*rw_cmd) {
      if (!manifest_path.empty()) {
        rw = load_manifest(manifest_path).args;
      } else if (rw.input_path.empty() || rw.output_path.empty()) {
        std::cerr << "rewrite: --input and --output are required (or --manifest)\n";
        return kExitValidation;
      }
      return cmd_rewrite(rw, std::cerr);
    }
    if (*ev_cmd) {
      cmd_eval(ev, std::cout, std::cerr);
      return kExitOk;
    }
  } catch (const CommandError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code();
  } catch (const TransportError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBackendUnreachable;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
