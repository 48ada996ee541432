#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "httplib.h"
// <resolv.h> (pulled in by httplib) defines _res, which Eigen uses as a name.
#ifdef _res
#undef _res
#endif
#include "json.hpp"

#include "mmattack/errors.hpp"

namespace mmattack::harness {

struct QueryRequest {
  std::string image_png;  // encoded PNG bytes
  std::string prompt;
};

// One chat-with-image endpoint. Implementations throw AuthError,
// RateLimitError, TransportError or ContentRejected.
class TargetClient {
 public:
  virtual ~TargetClient() = default;
  virtual const std::string& target_id() const = 0;
  virtual std::string describe(const QueryRequest& request) = 0;
  // Advertised model version or update date, copied into record provenance.
  virtual std::string model_update() const { return {}; }
};

// Test double. Plays back a script of responses and errors, then repeats the
// fallback caption.
class StubClient final : public TargetClient {
 public:
  enum class Fault { transport, rate_limit, auth, content_rejected };
  using Step = std::variant<std::string, Fault>;

  StubClient(std::string id, std::string fallback, std::vector<Step> script = {})
      : id_(std::move(id)), fallback_(std::move(fallback)), script_(script.begin(), script.end()) {}

  const std::string& target_id() const override { return id_; }

  std::string describe(const QueryRequest& request) override {
    std::lock_guard lock(mu_);
    requests_.push_back(request);
    if (script_.empty()) return fallback_;
    const Step step = script_.front();
    script_.pop_front();
    if (const auto* text = std::get_if<std::string>(&step)) return *text;
    switch (std::get<Fault>(step)) {
      case Fault::transport: throw TransportError(id_ + ": simulated connection reset");
      case Fault::rate_limit: throw RateLimitError(id_ + ": simulated HTTP 429");
      case Fault::auth: throw AuthError(id_ + ": simulated HTTP 401");
      case Fault::content_rejected: throw ContentRejected("Sorry, I can't help with that image.");
    }
    return fallback_;
  }

  std::size_t calls() const {
    std::lock_guard lock(mu_);
    return requests_.size();
  }

  const std::vector<QueryRequest>& requests() const { return requests_; }

 private:
  std::string id_;
  std::string fallback_;
  std::deque<Step> script_;
  std::vector<QueryRequest> requests_;
  mutable std::mutex mu_;
};

inline std::string require_env(const std::string& variable) {
  const char* v = std::getenv(variable.c_str());
  if (!v || !*v) throw MissingCredential(variable);
  return v;
}

struct HttpTargetConfig {
  std::string id;
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key_env;
  int max_tokens = 300;
  int timeout_seconds = 60;
  std::string model_update;
};

// Client for endpoints speaking the OpenAI chat-completions format with image
// content parts. The API key is read from the environment at construction.
class OpenAiCompatibleClient final : public TargetClient {
 public:
  explicit OpenAiCompatibleClient(HttpTargetConfig config)
      : config_(std::move(config)), api_key_(require_env(config_.api_key_env)) {
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
    if (config_.base_url.starts_with("https://")) {
      throw ConfigError("evaluation.targets." + config_.id + ".base_url",
                        "this build has no TLS support; use an http:// endpoint or rebuild with OpenSSL");
    }
#endif
  }

  const std::string& target_id() const override { return config_.id; }
  std::string model_update() const override { return config_.model_update; }

  nlohmann::json request_body(const QueryRequest& r) const {
    const std::string url = "data:image/png;base64," + httplib::detail::base64_encode(r.image_png);
    return {{"model", config_.model},
            {"max_tokens", config_.max_tokens},
            {"messages",
             {{{"role", "user"},
               {"content",
                {{{"type", "text"}, {"text", r.prompt}},
                 {{"type", "image_url"}, {"image_url", {{"url", url}}}}}}}}}};
  }

  std::string describe(const QueryRequest& request) override {
    httplib::Client cli(config_.base_url);
    cli.set_connection_timeout(config_.timeout_seconds);
    cli.set_read_timeout(config_.timeout_seconds);
    cli.set_bearer_token_auth(api_key_);
    const auto res = cli.Post(config_.path, request_body(request).dump(), "application/json");
    if (!res) throw TransportError(config_.id + ": " + httplib::to_string(res.error()));

    const int status = res->status;
    const auto body = nlohmann::json::parse(res->body, nullptr, false);
    const std::string message = body.is_object() && body.contains("error") && body["error"].is_object()
                                    ? body["error"].value("message", res->body)
                                    : res->body;
    if (status == 401 || status == 403) throw AuthError(config_.id + ": HTTP " + std::to_string(status) + ": " + message);
    if (status == 429) throw RateLimitError(config_.id + ": HTTP 429: " + message);
    if (status >= 500) throw TransportError(config_.id + ": HTTP " + std::to_string(status));
    if (status == 400 && body.is_object() && body.contains("error") && body["error"].is_object()) {
      const auto code = body["error"].value("code", "");
      if (code == "content_policy_violation" || code == "content_filter") throw ContentRejected(message);
    }
    if (status != 200) throw ServiceError(config_.id + ": HTTP " + std::to_string(status) + ": " + message);
    if (body.is_discarded()) throw TransportError(config_.id + ": response is not JSON");

    try {
      const auto& choice = body.at("choices").at(0);
      const auto& content = choice.at("message").at("content");
      const std::string text = content.is_string() ? content.get<std::string>() : std::string();
      if (choice.value("finish_reason", "") == "content_filter") throw ContentRejected(text);
      return text;
    } catch (const nlohmann::json::exception& e) {
      throw ServiceError(config_.id + ": unexpected response shape: " + e.what());
    }
  }

 private:
  HttpTargetConfig config_;
  std::string api_key_;
};

using Sleeper = std::function<void(std::chrono::milliseconds)>;

inline void real_sleep(std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }

// Spaces requests to at most `per_minute` per client.
class RateLimiter {
 public:
  using Clock = std::chrono::steady_clock;

  explicit RateLimiter(double per_minute, std::function<Clock::time_point()> now = Clock::now,
                       Sleeper sleep = real_sleep)
      : interval_(per_minute > 0 ? std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(60.0 / per_minute))
                                 : Clock::duration::zero()),
        now_(std::move(now)), sleep_(std::move(sleep)) {
    if (!(per_minute >= 0)) throw ConfigError("rate_limit.requests_per_minute", "must be >= 0");
  }

  void acquire() {
    std::lock_guard lock(mu_);
    if (interval_ == Clock::duration::zero()) return;
    const auto t = now_();
    if (started_ && t < next_) {
      sleep_(std::chrono::ceil<std::chrono::milliseconds>(next_ - t));
      next_ += interval_;
    } else {
      next_ = t + interval_;
    }
    started_ = true;
  }

 private:
  Clock::duration interval_;
  std::function<Clock::time_point()> now_;
  Sleeper sleep_;
  Clock::time_point next_{};
  bool started_ = false;
  std::mutex mu_;
};

struct RetryPolicy {
  int max_retries = 4;
  std::chrono::milliseconds base_delay{500};
  std::chrono::milliseconds max_delay{8000};

  std::chrono::milliseconds delay(int attempt) const {
    auto d = base_delay;
    for (int i = 0; i < attempt && d < max_delay; ++i) d *= 2;
    return std::min(d, max_delay);
  }
};

struct QueryOutcome {
  std::string response_text;
  int retries = 0;
  bool service_rejected = false;
};

// Sends one query. Transport failures and HTTP 429 are retried with bounded
// exponential backoff; auth failures and content rejections are not.
inline QueryOutcome query_target(TargetClient& client, const QueryRequest& request, const RetryPolicy& policy = {},
                                 const Sleeper& sleep = real_sleep, RateLimiter* limiter = nullptr) {
  QueryOutcome out;
  for (int attempt = 0;; ++attempt) {
    if (limiter) limiter->acquire();
    try {
      out.response_text = client.describe(request);
      out.retries = attempt;
      return out;
    } catch (const ContentRejected& e) {
      out.response_text = e.response_text();
      out.retries = attempt;
      out.service_rejected = true;
      return out;
    } catch (const TransportError&) {
      if (attempt >= policy.max_retries) throw;
    } catch (const RateLimitError&) {
      if (attempt >= policy.max_retries) throw;
    }
    sleep(policy.delay(attempt));
  }
}

}  // namespace mmattack::harness
