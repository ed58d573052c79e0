#pragma once

#include <chrono>
#include <cstdlib>
#include <mutex>
#include <condition_variable>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "espl/errors.hpp"
#include "espl/reflect.hpp"
#include "espl/rollout.hpp"

// Chat-completions client: POST to an OpenAI-compatible endpoint, bearer
// token from the environment, exponential backoff on 429/5xx, and a cap on
// concurrent in-flight requests.

namespace espl {

namespace detail {

// "http://host:8080/v1/chat/completions" -> {"http://host:8080", "/v1/..."}
inline std::pair<std::string, std::string> split_endpoint(const std::string& url) {
  std::size_t scheme = url.find("://");
  if (scheme == std::string::npos)
    throw ConfigError("http: endpoint must include a scheme: '" + url + "'");
  std::size_t path = url.find('/', scheme + 3);
  if (path == std::string::npos) return {url, "/v1/chat/completions"};
  return {url.substr(0, path), url.substr(path)};
}

class InFlightLimiter {
public:
  explicit InFlightLimiter(int cap) : available_(cap) {}
  void acquire() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return available_ > 0; });
    --available_;
  }
  void release() {
    std::lock_guard lock(mu_);
    ++available_;
    cv_.notify_one();
  }

private:
  std::mutex mu_;
  std::condition_variable cv_;
  int available_;
};

} // namespace detail

class HttpChatTransport final : public ChatTransport {
public:
  explicit HttpChatTransport(const ReflectorConfig& cfg)
      : cfg_(cfg), limiter_(cfg.max_in_flight) {
    auto [base, path] = detail::split_endpoint(cfg.endpoint);
    base_ = base;
    path_ = path;
    if (const char* key = std::getenv(cfg.api_key_env.c_str()))
      bearer_ = key;
  }

  std::string complete(const ChatRequest& request) override {
    limiter_.acquire();
    struct Release {
      detail::InFlightLimiter* l;
      ~Release() { l->release(); }
    } release{&limiter_};

    const std::string body = chat_request_to_json(request).dump();
    std::string last_error;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        double seconds = cfg_.backoff_initial_seconds * (1 << (attempt - 1));
        std::this_thread::sleep_for(
            std::chrono::duration<double>(std::min(seconds, 8.0)));
      }
      httplib::Client client(base_);
      client.set_connection_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
      client.set_read_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
      client.set_write_timeout(std::chrono::duration<double>(cfg_.timeout_seconds));
      httplib::Headers headers;
      if (!bearer_.empty())
        headers.emplace("Authorization", "Bearer " + bearer_);

      auto res = client.Post(path_, headers, body, "application/json");
      if (!res) {
        last_error = "connection failure: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "status " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200)
        throw TransportError("chat endpoint returned status " +
                             std::to_string(res->status) + ": " + res->body);
      return extract_content(res->body);
    }
    throw TransportError("chat endpoint unreachable after " +
                         std::to_string(cfg_.max_retries + 1) +
                         " attempts (" + last_error + ")");
  }

private:
  static std::string extract_content(const std::string& body) {
    nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded())
      throw TransportError("chat endpoint returned invalid JSON");
    try {
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(std::string("unexpected chat response shape: ") + e.what());
    }
  }

  ReflectorConfig cfg_;
  std::string base_;
  std::string path_;
  std::string bearer_;
  detail::InFlightLimiter limiter_;
};

// Rollout sampling through the same chat transport the reflector uses. The
// system message is the evolving prompt; grading is exact-match against the
// problem's target string.
class HttpSampler final : public Sampler {
public:
  HttpSampler(ChatTransport& transport, std::string model, double temperature)
      : transport_(&transport), model_(std::move(model)), temperature_(temperature) {}

  Trajectory sample(const PromptRef& prompt, const Problem& problem,
                    RngStream&) override {
    if (problem.grader_key != "exact_match")
      throw TransportError("http sampler cannot grade '" + problem.grader_key + "'",
                           prompt.id, problem.id);
    ChatRequest req{model_,
                    {{"system", prompt.text}, {"user", problem.payload}},
                    temperature_};
    Trajectory t;
    t.text = transport_->complete(req);
    t.reward = grade_exact_match(problem, t.text);
    return t;
  }

private:
  ChatTransport* transport_;
  std::string model_;
  double temperature_;
};

} // namespace espl
