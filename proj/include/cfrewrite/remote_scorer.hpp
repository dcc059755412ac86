#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "cfrewrite/core.hpp"
#include "cfrewrite/error.hpp"
#include "cfrewrite/scorer.hpp"

namespace cfrewrite {

// Scorer backed by a model server speaking JSON over HTTP.
//
// Text crosses the wire as wire_text(): one whitespace-separated word per
// engine token, so the server's word count equals our token count.
// Transport failures and 5xx are retried up to `retry_budget` times, then
// surface as TransportError; 4xx and malformed bodies are ProtocolError.
// A fresh connection is used per request, so concurrent calls are safe.
class RemoteScorerClient final : public Scorer {
 public:
  struct Options {
    std::string base_url;
    std::chrono::milliseconds timeout{30000};
    int retry_budget = 2;
    bool use_coherence_endpoint = true;
  };

  explicit RemoteScorerClient(Options options) : options_(std::move(options)) {
    if (options_.base_url.empty()) throw ValidationError("RemoteScorerClient: empty base URL");
    while (!options_.base_url.empty() && options_.base_url.back() == '/') options_.base_url.pop_back();
  }

  const Options& options() const { return options_; }

  std::vector<double> clm_logprobs(const TokenSequence& context, const TokenSequence& continuation) const override {
    const auto body = post("/v1/clm/logprobs", {{"context", wire_text(context)}, {"continuation", wire_text(continuation)}});
    if (!body.contains("logprobs") || !body["logprobs"].is_array())
      throw ProtocolError("clm response lacks \"logprobs\" array");
    std::vector<double> out;
    for (const auto& v : body["logprobs"]) out.push_back(finite_logprob(v));
    if (out.size() != continuation.size())
      throw ProtocolError("clm response arity " + std::to_string(out.size()) + " != " +
                          std::to_string(continuation.size()));
    return out;
  }

  std::vector<Candidate> mlm_candidates(const TokenSequence& sequence, std::size_t position,
                                        std::size_t k) const override {
    const auto body =
        post("/v1/mlm/candidates", {{"tokens", sequence.tokens()}, {"mask_index", position}, {"top_k", k}});
    if (!body.contains("candidates") || !body["candidates"].is_array())
      throw ProtocolError("mlm response lacks \"candidates\" array");
    std::vector<Candidate> out;
    for (const auto& c : body["candidates"]) {
      if (!c.is_object() || !c.contains("token") || !c["token"].is_string() || !c.contains("logprob"))
        throw ProtocolError("malformed candidate");
      out.push_back({c["token"].get<std::string>(), finite_logprob(c["logprob"])});
    }
    for (std::size_t i = 1; i < out.size(); ++i)
      if (out[i].logprob > out[i - 1].logprob) throw ProtocolError("candidates not sorted by descending logprob");
    if (out.size() > k) throw ProtocolError("server returned more than top_k candidates");
    return out;
  }

  double coherence_logprob(const TokenSequence& context, const TokenSequence& ending) const override {
    if (!has_native_coherence()) return Scorer::coherence_logprob(context, ending);
    const auto res = post_raw("/v1/coherence", {{"context", wire_text(context)}, {"ending", wire_text(ending)}});
    if (res.status == 404) {
      coherence_missing_.store(true);
      return Scorer::coherence_logprob(context, ending);
    }
    const auto body = checked_body(res, "/v1/coherence");
    if (!body.contains("logprob")) throw ProtocolError("coherence response lacks \"logprob\"");
    return finite_logprob(body["logprob"]);
  }

  bool has_native_coherence() const override {
    return options_.use_coherence_endpoint && !coherence_missing_.load();
  }

 private:
  struct RawResponse {
    int status = 0;
    std::string body;
  };

  static double finite_logprob(const nlohmann::json& v) {
    if (!v.is_number()) throw ProtocolError("log-prob is not a number");
    const double d = v.get<double>();
    if (!std::isfinite(d) || d > 0.0) throw ProtocolError("log-prob not finite and <= 0");
    return d;
  }

  RawResponse post_raw(const std::string& path, const nlohmann::json& payload) const {
    const std::string data = payload.dump();
    std::string last_error = "no attempt made";
    for (int attempt = 0; attempt <= options_.retry_budget; ++attempt) {
      httplib::Client client(options_.base_url);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      auto res = client.Post(path, data, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      return {res->status, res->body};
    }
    throw TransportError("POST " + options_.base_url + path + " failed: " + last_error);
  }

  static nlohmann::json checked_body(const RawResponse& res, const std::string& path) {
    auto body = nlohmann::json::parse(res.body, nullptr, false);
    if (res.status < 200 || res.status >= 300) {
      std::string msg = "HTTP " + std::to_string(res.status);
      if (!body.is_discarded() && body.is_object() && body.contains("error") && body["error"].is_string())
        msg += ": " + body["error"].get<std::string>();
      throw ProtocolError(path + " " + msg);
    }
    if (body.is_discarded() || !body.is_object()) throw ProtocolError(path + " returned a non-object body");
    return body;
  }

  nlohmann::json post(const std::string& path, const nlohmann::json& payload) const {
    return checked_body(post_raw(path, payload), path);
  }

  Options options_;
  mutable std::atomic<bool> coherence_missing_{false};
};

}  // namespace cfrewrite
