#pragma once

#include <cstdint>
#include <stdexcept>
#include <variant>

#include "market_loop/agents/parse.hpp"
#include "market_loop/agents/prompt.hpp"
#include "market_loop/agents/remote.hpp"
#include "market_loop/agents/scripted.hpp"

namespace market_loop {

struct ScriptedBackend {
  ScriptedPolicy policy;
  std::uint64_t seed = 0;

  bool operator==(const ScriptedBackend&) const = default;
};

using Backend = std::variant<ScriptedBackend, RemoteBackend>;

/// Which role an agent plays and what drives it.
struct AgentBinding {
  Role role = Role::MarketMaker;
  Backend backend;
  int retry_limit = 2;

  bool operator==(const AgentBinding&) const = default;

  bool is_remote() const { return std::holds_alternative<RemoteBackend>(backend); }

  void validate() const {
    if (retry_limit < 0) throw std::invalid_argument("retry_limit must be >= 0");
    if (const auto* s = std::get_if<ScriptedBackend>(&backend)) {
      s->policy.validate();
    } else {
      const auto& r = std::get<RemoteBackend>(backend);
      if (!(r.temperature >= 0.0)) throw std::invalid_argument("temperature must be >= 0");
      if (r.model_id.empty()) throw std::invalid_argument("remote agent needs a model id");
      if (!r.api_base.empty() && r.api_base.find("://") == std::string::npos) {
        throw std::invalid_argument("api_base must include a scheme, e.g. https://");
      }
      if (r.max_tokens < 1) throw std::invalid_argument("max_tokens must be >= 1");
      if (r.timeout_ms < 1) throw std::invalid_argument("timeout must be positive");
    }
  }

  /// Label used in reports: the remote model id, or "scripted:<policy>".
  std::string model_label() const {
    if (const auto* r = std::get_if<RemoteBackend>(&backend)) return r->model_id;
    return "scripted:" + std::string(to_string(std::get<ScriptedBackend>(backend).policy.id));
  }
};

}  // namespace market_loop
