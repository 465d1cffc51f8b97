#pragma once

// Chat-completion client for OpenAI-compatible endpoints.
//
// Request:  POST {api_base}{path}
//           {"model", "messages": [{"role": "user", "content": prompt}], "temperature", "max_tokens"}
// Response: choices[0].message.content
//
// The client never retries; the runner owns retry and backoff policy.

#include <chrono>
#include <cstdlib>
#include <optional>
#include <stdexcept>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

namespace market_loop {

inline constexpr const char* kApiKeyEnv = "MARKET_LOOP_API_KEY";
inline constexpr const char* kApiBaseEnv = "MARKET_LOOP_API_BASE";

struct RemoteBackend {
  std::string api_base;  // empty: read MARKET_LOOP_API_BASE
  std::string path = "/chat/completions";
  std::string model_id;
  double temperature = 0.0;
  int max_tokens = 1024;
  int timeout_ms = 120000;

  bool operator==(const RemoteBackend&) const = default;
};

struct TokenUsage {
  int prompt_tokens = 0;
  int completion_tokens = 0;
};

struct RawCompletion {
  std::string text;
  std::optional<TokenUsage> usage;
  std::optional<std::chrono::milliseconds> latency;
};

enum class TransportErrorKind { Timeout, Connection, HttpStatus, MalformedResponse };

class TransportError : public std::runtime_error {
public:
  TransportError(TransportErrorKind kind, const std::string& what, int status = 0)
      : std::runtime_error(what), kind_(kind), status_(status) {}

  TransportErrorKind kind() const { return kind_; }
  int status() const { return status_; }

private:
  TransportErrorKind kind_;
  int status_;
};

/// Seam between the runner and the network; tests substitute fakes.
class CompletionClient {
public:
  virtual ~CompletionClient() = default;
  virtual RawCompletion complete(const RemoteBackend& backend, const std::string& prompt) = 0;
};

namespace detail {

inline std::string env_or(const char* name, std::string fallback = {}) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

struct SplitUrl {
  std::string scheme_host_port;
  std::string path;
};

// "https://host:443/v1" + "/chat/completions" -> {"https://host:443", "/v1/chat/completions"}
inline SplitUrl split_url(const std::string& base, const std::string& path) {
  const auto scheme_end = base.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("api base must include a scheme: " + base);
  const auto path_start = base.find('/', scheme_end + 3);
  SplitUrl out;
  out.scheme_host_port = base.substr(0, path_start);
  std::string prefix = path_start == std::string::npos ? "" : base.substr(path_start);
  while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
  out.path = prefix + (path.empty() || path.front() == '/' ? path : "/" + path);
  return out;
}

}  // namespace detail

inline nlohmann::json build_request(const RemoteBackend& backend, const std::string& prompt) {
  return {{"model", backend.model_id},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", prompt}}})},
          {"temperature", backend.temperature},
          {"max_tokens", backend.max_tokens}};
}

/// Extracts the completion text, or throws MalformedResponse.
inline RawCompletion parse_response_body(const std::string& body) {
  const auto doc = nlohmann::json::parse(body, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) {
    throw TransportError(TransportErrorKind::MalformedResponse, "response is not a JSON object");
  }
  const auto choices = doc.find("choices");
  if (choices == doc.end() || !choices->is_array() || choices->empty()) {
    throw TransportError(TransportErrorKind::MalformedResponse, "response has no choices");
  }
  const auto& first = (*choices)[0];
  if (!first.is_object() || !first.contains("message") || !first["message"].is_object()) {
    throw TransportError(TransportErrorKind::MalformedResponse, "choices[0] has no message");
  }
  const auto& msg = first["message"];
  if (!msg.contains("content") || !msg["content"].is_string() || msg["content"].get<std::string>().empty()) {
    throw TransportError(TransportErrorKind::MalformedResponse, "message content missing or empty");
  }
  RawCompletion out;
  out.text = msg["content"].get<std::string>();
  if (const auto u = doc.find("usage"); u != doc.end() && u->is_object()) {
    out.usage = TokenUsage{u->value("prompt_tokens", 0), u->value("completion_tokens", 0)};
  }
  return out;
}

/// Issues one chat-completion request.
inline RawCompletion complete(const RemoteBackend& backend, const std::string& prompt,
                              const std::string& api_key, const std::string& default_base) {
  const std::string base = backend.api_base.empty() ? default_base : backend.api_base;
  if (base.empty()) {
    throw TransportError(TransportErrorKind::Connection,
                         std::string("no api base configured (set ") + kApiBaseEnv + ")");
  }
  const auto url = detail::split_url(base, backend.path);

  httplib::Client cli(url.scheme_host_port);
  const auto timeout = std::chrono::milliseconds(backend.timeout_ms);
  cli.set_connection_timeout(timeout);
  cli.set_read_timeout(timeout);
  cli.set_write_timeout(timeout);
  if (!api_key.empty()) cli.set_bearer_token_auth(api_key);

  const auto started = std::chrono::steady_clock::now();
  auto res = cli.Post(url.path, build_request(backend, prompt).dump(), "application/json");
  const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::ConnectionTimeout || (err == httplib::Error::Read && elapsed >= timeout * 9 / 10)) {
      throw TransportError(TransportErrorKind::Timeout, "request timed out after " + std::to_string(elapsed.count()) + " ms");
    }
    throw TransportError(TransportErrorKind::Connection, "transport failure: " + httplib::to_string(err));
  }
  if (res->status < 200 || res->status >= 300) {
    throw TransportError(TransportErrorKind::HttpStatus, "http status " + std::to_string(res->status), res->status);
  }
  auto out = parse_response_body(res->body);
  out.latency = elapsed;
  return out;
}

/// Real network client. Reads the key and base URL from the environment once.
class HttpCompletionClient final : public CompletionClient {
public:
  HttpCompletionClient() : api_key_(detail::env_or(kApiKeyEnv)), default_base_(detail::env_or(kApiBaseEnv)) {}
  HttpCompletionClient(std::string api_key, std::string default_base)
      : api_key_(std::move(api_key)), default_base_(std::move(default_base)) {}

  RawCompletion complete(const RemoteBackend& backend, const std::string& prompt) override {
    return market_loop::complete(backend, prompt, api_key_, default_base_);
  }

private:
  std::string api_key_;
  std::string default_base_;
};

}  // namespace market_loop
