#pragma once

// Run configuration.
//
// The configuration is a JSON document. Resolution order is
// defaults < config file < `--set key=value` overrides. Every key a user
// may set exists in `default_config_json()`; anything else is rejected,
// except entries under `models.<model_id>.{family,parameters_b}`.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "market_loop/agents.hpp"
#include "market_loop/protocol.hpp"
#include "market_loop/task.hpp"

namespace market_loop {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr int kArtifactSchemaVersion = 1;

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ModelInfo {
  std::string family;
  std::optional<double> parameters_b;  // billions

  bool operator==(const ModelInfo&) const = default;
};

struct RuntimeOptions {
  double requests_per_minute = 60.0;  // <= 0 disables rate limiting
  double backoff_base_s = 1.0;
  double backoff_cap_s = 60.0;
};

struct RunConfig {
  std::string run_id = "run";
  std::filesystem::path output_dir = "runs/run";
  int parallelism = 1;
  EquilibriumConfig equilibrium;
  AgentBinding maker{Role::MarketMaker, ScriptedBackend{}, 2};
  AgentBinding trader{Role::Trader, ScriptedBackend{}, 2};
  std::string dataset_path;  // "synthetic" for generated tasks
  DatasetKind dataset_kind = DatasetKind::TruthfulQA;
  std::size_t sample_n = 0;  // 0 = all tasks
  std::uint64_t sample_seed = 0;
  std::string maker_template;   // empty = built-in
  std::string trader_template;  // empty = built-in
  RuntimeOptions runtime;
  double failure_threshold = 0.2;
  std::map<std::string, ModelInfo> models;

  // The resolved JSON this config was built from.
  nlohmann::json resolved;
};

inline nlohmann::json default_agent_json(std::string_view policy) {
  return {{"backend", "scripted"},
          {"retry_limit", 2},
          // scripted
          {"policy", std::string(policy)},
          {"seed", 0},
          {"step_size", 0.1},
          {"noise_scale", 0.0},
          {"start", 0.5},
          {"target", 1.0},
          // remote
          {"model", ""},
          {"api_base", ""},
          {"path", "/chat/completions"},
          {"temperature", 0.0},
          {"max_tokens", 1024},
          {"timeout_ms", 120000}};
}

inline nlohmann::json default_config_json() {
  return {{"run_id", "run"},
          {"output_dir", "runs/run"},
          {"parallelism", 1},
          {"equilibrium", {{"max_judgments", 10}, {"threshold", 0.2}}},
          {"maker", default_agent_json("truth-convergent")},
          {"trader", default_agent_json("truth-convergent")},
          {"dataset", {{"path", ""}, {"kind", "truthfulqa"}}},
          {"sample", {{"n", 0}, {"seed", 0}}},
          {"prompts", {{"maker", ""}, {"trader", ""}}},
          {"runtime", {{"requests_per_minute", 60.0}, {"backoff_base_s", 1.0}, {"backoff_cap_s", 60.0}}},
          {"report", {{"failure_threshold", 0.2}}},
          {"models", nlohmann::json::object()}};
}

namespace detail {

inline bool is_model_key(const std::vector<std::string>& path) { return !path.empty() && path[0] == "models"; }

inline void check_model_entry(const std::string& where, const nlohmann::json& entry) {
  if (!entry.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : entry.items()) {
    if (k == "family") {
      if (!v.is_string()) throw ConfigError(where + ".family must be a string");
    } else if (k == "parameters_b") {
      if (!v.is_number()) throw ConfigError(where + ".parameters_b must be a number");
    } else {
      throw ConfigError("unknown config key " + where + "." + k);
    }
  }
}

// Overlays `src` onto `dst`, which must already hold every key (the schema).
inline void merge_checked(nlohmann::json& dst, const nlohmann::json& src, const std::string& prefix) {
  if (!src.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + " must be an object");
  for (const auto& [k, v] : src.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (prefix == "models") {
      check_model_entry(key, v);
      dst[k] = v;
      continue;
    }
    if (!dst.contains(k)) throw ConfigError("unknown config key " + key);
    auto& slot = dst[k];
    if (slot.is_object()) {
      merge_checked(slot, v, key);
    } else if (slot.is_number() != v.is_number() || slot.is_string() != v.is_string() ||
               slot.is_boolean() != v.is_boolean()) {
      throw ConfigError("config key " + key + " has the wrong type");
    } else {
      slot = v;
    }
  }
}

inline std::vector<std::string> split_key(std::string_view key) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    out.emplace_back(key.substr(pos, dot - pos));
    if (dot == std::string_view::npos) break;
    pos = dot + 1;
  }
  for (const auto& part : out) {
    if (part.empty()) throw ConfigError("malformed config key \"" + std::string(key) + "\"");
  }
  return out;
}

inline nlohmann::json parse_scalar_like(const nlohmann::json& like, const std::string& key, const std::string& text) {
  try {
    if (like.is_number_integer()) {
      std::size_t used = 0;
      const long long v = std::stoll(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      return v;
    }
    if (like.is_number()) {
      std::size_t used = 0;
      const double v = std::stod(text, &used);
      if (used != text.size()) throw std::invalid_argument("trailing characters");
      return v;
    }
    if (like.is_boolean()) {
      if (text == "true") return true;
      if (text == "false") return false;
      throw std::invalid_argument("expected true or false");
    }
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + " cannot take value \"" + text + "\"");
  }
  return text;
}

}  // namespace detail

/// Applies one `key=value` override to a resolved config document.
inline void apply_override(nlohmann::json& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override must look like key=value, got \"" + std::string(assignment) + "\"");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string value(assignment.substr(eq + 1));
  const auto path = detail::split_key(key);

  if (detail::is_model_key(path)) {
    if (path.size() != 3 || (path[2] != "family" && path[2] != "parameters_b")) {
      throw ConfigError("model metadata keys look like models.<id>.family or models.<id>.parameters_b");
    }
    auto& entry = cfg["models"][path[1]];
    if (path[2] == "family") {
      entry["family"] = value;
    } else {
      entry["parameters_b"] = detail::parse_scalar_like(nlohmann::json(0.0), key, value);
    }
    return;
  }

  nlohmann::json* node = &cfg;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (!node->is_object() || !node->contains(path[i])) throw ConfigError("unknown config key " + key);
    node = &(*node)[path[i]];
  }
  if (node->is_object()) throw ConfigError("config key " + key + " names a section, not a value");
  *node = detail::parse_scalar_like(*node, key, value);
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  return doc;
}

/// defaults < file < overrides.
inline nlohmann::json resolve_config_json(const std::optional<std::filesystem::path>& file,
                                          const std::vector<std::string>& overrides) {
  auto cfg = default_config_json();
  if (file) detail::merge_checked(cfg, read_json_file(*file), "");
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

namespace detail {

inline AgentBinding agent_from_json(const nlohmann::json& j, Role role, const std::string& where) {
  AgentBinding b;
  b.role = role;
  b.retry_limit = j.at("retry_limit").get<int>();
  const auto backend = j.at("backend").get<std::string>();
  try {
    if (backend == "scripted") {
      ScriptedBackend s;
      s.policy.id = policy_from_string(j.at("policy").get<std::string>());
      s.policy.step_size = j.at("step_size").get<double>();
      s.policy.noise_scale = j.at("noise_scale").get<double>();
      s.policy.start = Probability::from_double(j.at("start").get<double>());
      s.policy.target = Probability::from_double(j.at("target").get<double>());
      const auto seed = j.at("seed").get<long long>();
      s.seed = static_cast<std::uint64_t>(seed);
      b.backend = s;
    } else if (backend == "remote") {
      RemoteBackend r;
      r.model_id = j.at("model").get<std::string>();
      r.api_base = j.at("api_base").get<std::string>();
      r.path = j.at("path").get<std::string>();
      r.temperature = j.at("temperature").get<double>();
      r.max_tokens = j.at("max_tokens").get<int>();
      r.timeout_ms = j.at("timeout_ms").get<int>();
      b.backend = r;
    } else {
      throw std::invalid_argument("backend must be \"scripted\" or \"remote\"");
    }
    b.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return b;
}

inline bool filesystem_safe(std::string_view id) {
  if (id.empty() || id == "." || id == "..") return false;
  for (char c : id) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '_' || c == '.';
    if (!ok) return false;
  }
  return true;
}

}  // namespace detail

/// Builds and validates a RunConfig from a resolved document.
inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  try {
    c.run_id = j.at("run_id").get<std::string>();
    if (!detail::filesystem_safe(c.run_id)) throw ConfigError("run_id must be non-empty and use only [A-Za-z0-9._-]");
    c.output_dir = j.at("output_dir").get<std::string>();
    c.parallelism = j.at("parallelism").get<int>();
    if (c.parallelism < 1) throw ConfigError("parallelism must be >= 1");

    const auto& eq = j.at("equilibrium");
    try {
      c.equilibrium = EquilibriumConfig::make(eq.at("max_judgments").get<int>(), eq.at("threshold").get<double>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("equilibrium: ") + e.what());
    }

    c.maker = detail::agent_from_json(j.at("maker"), Role::MarketMaker, "maker");
    c.trader = detail::agent_from_json(j.at("trader"), Role::Trader, "trader");

    c.dataset_path = j.at("dataset").at("path").get<std::string>();
    try {
      c.dataset_kind = dataset_kind_from_string(j.at("dataset").at("kind").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }

    const auto n = j.at("sample").at("n").get<long long>();
    if (n < 0) throw ConfigError("sample.n must be >= 0");
    c.sample_n = static_cast<std::size_t>(n);
    c.sample_seed = static_cast<std::uint64_t>(j.at("sample").at("seed").get<long long>());

    c.maker_template = j.at("prompts").at("maker").get<std::string>();
    c.trader_template = j.at("prompts").at("trader").get<std::string>();

    const auto& rt = j.at("runtime");
    c.runtime.requests_per_minute = rt.at("requests_per_minute").get<double>();
    c.runtime.backoff_base_s = rt.at("backoff_base_s").get<double>();
    c.runtime.backoff_cap_s = rt.at("backoff_cap_s").get<double>();
    if (c.runtime.backoff_base_s < 0 || c.runtime.backoff_cap_s < 0) throw ConfigError("backoff times must be >= 0");

    c.failure_threshold = j.at("report").at("failure_threshold").get<double>();
    if (!(c.failure_threshold >= 0.0 && c.failure_threshold <= 1.0)) {
      throw ConfigError("report.failure_threshold must lie in [0, 1]");
    }

    for (const auto& [id, m] : j.at("models").items()) {
      ModelInfo info;
      info.family = m.value("family", "");
      if (m.contains("parameters_b")) info.parameters_b = m["parameters_b"].get<double>();
      c.models[id] = info;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.resolved = j;
  return c;
}

inline PromptTemplates load_templates(const RunConfig& c) {
  PromptTemplates t;
  try {
    if (!c.maker_template.empty()) t.maker = read_template_file(c.maker_template);
    if (!c.trader_template.empty()) t.trader = read_template_file(c.trader_template);
    t.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("prompts: ") + e.what());
  }
  return t;
}

/// Hash of everything that can change a session's outcome. Parallelism,
/// output location, runtime throttling, reporting and model metadata are
/// excluded so a run can be resumed with different operational settings.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = c.resolved;
  for (const char* k : {"parallelism", "output_dir", "runtime", "report", "models"}) j.erase(k);
  const auto templates = load_templates(c);
  const std::string material = j.dump() + '\x1f' + templates.maker + '\x1f' + templates.trader;
  return hex64(fnv1a64(material));
}

}  // namespace market_loop
