#pragma once

// Session orchestration and run artifacts.
//
// An artifact directory holds:
//   manifest.json      config snapshot, config hash, code version, dataset hash, timestamps
//   tasks.jsonl        the (sampled) normalized tasks the run covers
//   skips.jsonl        source rows that could not be binarized
//   transcripts.jsonl  one finished session per line, appended as sessions complete
//
// Each transcript line is written with a single write(2) and fdatasync(2).
// A crash can leave at most a torn final line; readers drop lines that do
// not parse, and resume compacts the file before appending.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "market_loop/agents.hpp"
#include "market_loop/config.hpp"
#include "market_loop/datasets.hpp"
#include "market_loop/protocol.hpp"

namespace market_loop {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigMismatch : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// ---- rate limiting ----------------------------------------------------------

/// Thread-safe token bucket shared by every remote call in a run.
class RateLimiter {
public:
  explicit RateLimiter(double requests_per_minute)
      : rate_per_s_(requests_per_minute / 60.0),
        capacity_(std::max(1.0, rate_per_s_)),
        tokens_(capacity_),
        last_(std::chrono::steady_clock::now()) {}

  bool unlimited() const { return rate_per_s_ <= 0.0; }

  void acquire() {
    if (unlimited()) return;
    std::chrono::duration<double> wait{0.0};
    {
      std::lock_guard lock(mu_);
      const auto now = std::chrono::steady_clock::now();
      tokens_ = std::min(capacity_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_per_s_);
      last_ = now;
      // Reserve a token; a negative balance is time owed by this caller.
      tokens_ -= 1.0;
      if (tokens_ < 0.0) wait = std::chrono::duration<double>(-tokens_ / rate_per_s_);
    }
    if (wait.count() > 0.0) std::this_thread::sleep_for(wait);
  }

private:
  double rate_per_s_;
  double capacity_;
  std::mutex mu_;
  double tokens_;
  std::chrono::steady_clock::time_point last_;
};

// ---- sessions ---------------------------------------------------------------

/// What a session needs besides its agents. `client` is required only
/// when an agent is remote.
struct SessionEnv {
  CompletionClient* client = nullptr;
  RateLimiter* limiter = nullptr;
  PromptTemplates templates;
  ScaleDictionary scale = ScaleDictionary::standard();
  double backoff_base_s = 1.0;
  double backoff_cap_s = 60.0;
  std::function<void(std::chrono::duration<double>)> sleep = [](std::chrono::duration<double> d) {
    std::this_thread::sleep_for(d);
  };
};

inline std::chrono::duration<double> backoff_delay(int n_throttled, double base_s, double cap_s) {
  const double d = base_s * std::pow(2.0, std::max(0, n_throttled - 1));
  return std::chrono::duration<double>(std::min(d, cap_s));
}

namespace detail {

// One agent turn with retries. Returns nullopt once retries are exhausted.
inline std::optional<Event> agent_turn(const AgentBinding& agent, const Task& task, Transcript& t, SessionEnv& env) {
  const Role role = agent.role;
  if (const auto* s = std::get_if<ScriptedBackend>(&agent.backend)) {
    ++t.timing.agent_calls;
    return scripted_step(s->policy, s->seed, role, t, task);
  }

  const auto& remote = std::get<RemoteBackend>(agent.backend);
  if (env.client == nullptr) throw std::logic_error("remote agent configured without a completion client");

  const std::size_t round = role == Role::MarketMaker ? t.judgments.size() : t.judgments.size() - 1;
  const std::string prompt = role == Role::MarketMaker ? render_maker_prompt(task, t, env.scale, env.templates)
                                                       : render_trader_prompt(task, t, env.templates);
  const std::string_view reminder = role == Role::MarketMaker ? prompts::kMakerReminder : prompts::kTraderReminder;

  bool with_reminder = false;
  int throttled = 0;
  for (int attempt = 1; attempt <= agent.retry_limit + 1; ++attempt) {
    RetryRecord failure{role, round, attempt, {}, false};
    try {
      if (env.limiter) env.limiter->acquire();
      ++t.timing.agent_calls;
      const auto raw = env.client->complete(remote, with_reminder ? prompt + std::string(reminder) : prompt);
      if (raw.latency) t.timing.latency_ms += raw.latency->count();
      if (role == Role::MarketMaker) return parse_judgment(raw.text, task, round);
      return parse_argument(raw.text, round);
    } catch (const ParseError& e) {
      failure.error = std::string("parse: ") + e.what();
      with_reminder = true;
    } catch (const TransportError& e) {
      failure.error = std::string("transport: ") + e.what();
      if (e.kind() == TransportErrorKind::HttpStatus && e.status() == 429 && attempt <= agent.retry_limit) {
        env.sleep(backoff_delay(++throttled, env.backoff_base_s, env.backoff_cap_s));
      }
    }
    failure.reminder_appended = with_reminder;
    t.retries.push_back(std::move(failure));
  }
  return std::nullopt;
}

}  // namespace detail

/// Drives one market-making session to termination. Agent failures after
/// retry exhaustion end the session with AgentFailure; nothing escapes.
inline Transcript run_session(const Task& task, const AgentBinding& maker, const AgentBinding& trader,
                              const EquilibriumConfig& config, SessionEnv& env) {
  Transcript t;
  t.task_id = task.task_id;
  t.config_snapshot = config;
  while (true) {
    const auto action = next_action(t, config);
    if (const auto* done = std::get_if<Terminate>(&action)) {
      t.termination = done->reason;
      return t;
    }
    const auto& agent = std::holds_alternative<NeedJudgment>(action) ? maker : trader;
    auto event = detail::agent_turn(agent, task, t, env);
    if (!event) {
      t.termination = TerminationReason::AgentFailure;
      return t;
    }
    t = append_event(t, *event, config);
  }
}

// ---- transcript records -----------------------------------------------------

struct TranscriptRecord {
  Transcript transcript;
  std::string config_hash;

  bool operator==(const TranscriptRecord&) const = default;
};

/// One JSONL line, without the trailing newline. Predictions are written
/// as JSON numbers with exactly four fractional digits.
inline std::string serialize_transcript(const Transcript& t, const std::string& config_hash) {
  using nlohmann::json;
  std::string out = "{\"task_id\":" + json(t.task_id).dump() + ",\"config_hash\":" + json(config_hash).dump();
  out += ",\"judgments\":[";
  for (std::size_t i = 0; i < t.judgments.size(); ++i) {
    const auto& j = t.judgments[i];
    if (i) out += ',';
    out += "{\"round\":" + std::to_string(j.round_index) + ",\"claim\":\"" + std::string(to_string(j.claim)) +
           "\",\"reasoning\":" + json(j.reasoning).dump() + ",\"prediction\":" + format_probability(j.prediction) + "}";
  }
  out += "],\"arguments\":[";
  for (std::size_t i = 0; i < t.arguments.size(); ++i) {
    if (i) out += ',';
    out += "{\"round\":" + std::to_string(t.arguments[i].round_index) + ",\"text\":" + json(t.arguments[i].text).dump() + "}";
  }
  out += "],\"termination\":";
  out += t.termination ? "\"" + std::string(to_string(*t.termination)) + "\"" : "null";
  out += ",\"timing\":{\"agent_calls\":" + std::to_string(t.timing.agent_calls) +
         ",\"latency_ms\":" + std::to_string(t.timing.latency_ms) + "}";
  out += ",\"equilibrium\":{\"max_judgments\":" + std::to_string(t.config_snapshot.max_judgments) +
         ",\"threshold\":" + format_probability(t.config_snapshot.threshold) + "}";
  out += ",\"retries\":[";
  for (std::size_t i = 0; i < t.retries.size(); ++i) {
    const auto& r = t.retries[i];
    if (i) out += ',';
    out += "{\"role\":\"" + std::string(to_string(r.role)) + "\",\"round\":" + std::to_string(r.round_index) +
           ",\"attempt\":" + std::to_string(r.attempt) + ",\"error\":" + json(r.error).dump() +
           ",\"reminder_appended\":" + (r.reminder_appended ? "true" : "false") + "}";
  }
  out += "]}";
  return out;
}

inline TranscriptRecord parse_transcript(const nlohmann::json& j) {
  TranscriptRecord rec;
  auto& t = rec.transcript;
  t.task_id = j.at("task_id").get<std::string>();
  rec.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& jj : j.at("judgments")) {
    Judgment x;
    x.round_index = jj.at("round").get<std::size_t>();
    x.claim = claim_side_from_string(jj.at("claim").get<std::string>());
    x.reasoning = jj.at("reasoning").get<std::string>();
    x.prediction = Probability::from_double(jj.at("prediction").get<double>());
    t.judgments.push_back(std::move(x));
  }
  for (const auto& ja : j.at("arguments")) {
    t.arguments.push_back({ja.at("text").get<std::string>(), ja.at("round").get<std::size_t>()});
  }
  if (!j.at("termination").is_null()) t.termination = termination_from_string(j.at("termination").get<std::string>());
  t.timing.agent_calls = j.at("timing").at("agent_calls").get<int>();
  t.timing.latency_ms = j.at("timing").at("latency_ms").get<std::int64_t>();
  if (j.contains("equilibrium")) {
    t.config_snapshot.max_judgments = j["equilibrium"].at("max_judgments").get<int>();
    t.config_snapshot.threshold = Probability::from_double(j["equilibrium"].at("threshold").get<double>());
  }
  if (j.contains("retries")) {
    for (const auto& jr : j["retries"]) {
      RetryRecord r;
      r.role = jr.at("role").get<std::string>() == "maker" ? Role::MarketMaker : Role::Trader;
      r.round_index = jr.at("round").get<std::size_t>();
      r.attempt = jr.at("attempt").get<int>();
      r.error = jr.at("error").get<std::string>();
      r.reminder_appended = jr.at("reminder_appended").get<bool>();
      t.retries.push_back(std::move(r));
    }
  }
  return rec;
}

struct TranscriptFile {
  std::vector<TranscriptRecord> records;
  std::vector<std::string> lines;  // raw text of each valid record
  std::size_t invalid_lines = 0;
};

/// Reads every whole, well-formed record; torn or corrupt lines are counted and dropped.
inline TranscriptFile read_transcripts(const fs::path& path) {
  TranscriptFile out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (in.eof()) {
      // No trailing newline: the write was cut short.
      if (!line.empty()) ++out.invalid_lines;
      break;
    }
    if (line.empty()) continue;
    const auto doc = nlohmann::json::parse(line, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
      ++out.invalid_lines;
      continue;
    }
    try {
      out.records.push_back(parse_transcript(doc));
      out.lines.push_back(line);
    } catch (const std::exception&) {
      ++out.invalid_lines;
    }
  }
  return out;
}

namespace detail {

inline void write_all_fd(int fd, std::string_view data, const fs::path& path) {
  while (!data.empty()) {
    const auto n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("write to " + path.string() + " failed: " + std::strerror(errno));
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
}

}  // namespace detail

/// Writes `content` to `path` via a temporary file and rename.
inline void write_file_atomic(const fs::path& path, std::string_view content) {
  const fs::path tmp = path.string() + ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
  if (fd < 0) throw IoError("cannot create " + tmp.string() + ": " + std::strerror(errno));
  try {
    detail::write_all_fd(fd, content, tmp);
  } catch (...) {
    ::close(fd);
    throw;
  }
  ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

/// Serialized, durable appends to transcripts.jsonl.
class TranscriptSink {
public:
  explicit TranscriptSink(fs::path path) : path_(std::move(path)) {
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open " + path_.string() + ": " + std::strerror(errno));
  }
  TranscriptSink(const TranscriptSink&) = delete;
  TranscriptSink& operator=(const TranscriptSink&) = delete;
  ~TranscriptSink() {
    if (fd_ >= 0) ::close(fd_);
  }

  // Returns the number of records appended through this sink so far.
  // `after` runs under the sink lock, so no other append can slip in before it.
  std::size_t append(const Transcript& t, const std::string& config_hash,
                     const std::function<void(std::size_t)>& after = {}) {
    const std::string line = serialize_transcript(t, config_hash) + "\n";
    std::lock_guard lock(mu_);
    detail::write_all_fd(fd_, line, path_);
    ::fdatasync(fd_);
    ++count_;
    if (after) after(count_);
    return count_;
  }

private:
  fs::path path_;
  int fd_ = -1;
  std::mutex mu_;
  std::size_t count_ = 0;
};

// ---- artifacts --------------------------------------------------------------

struct ArtifactPaths {
  fs::path dir;
  fs::path manifest() const { return dir / "manifest.json"; }
  fs::path tasks() const { return dir / "tasks.jsonl"; }
  fs::path skips() const { return dir / "skips.jsonl"; }
  fs::path transcripts() const { return dir / "transcripts.jsonl"; }
};

struct RunArtifact {
  nlohmann::json manifest;
  std::vector<Task> tasks;
  std::vector<TranscriptRecord> transcripts;
};

/// Test seam: called after each transcript is durably appended, with the
/// number appended so far in this invocation. Throwing aborts the run.
struct RunHooks {
  std::function<void(std::size_t)> after_persist;
};

struct RunStats {
  std::size_t sessions_executed = 0;
  std::size_t dropped_records = 0;  // torn, failed or duplicate records removed on resume
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json read_manifest(const fs::path& dir) {
  const ArtifactPaths p{dir};
  std::ifstream in(p.manifest());
  if (!in) throw IoError("no manifest.json in " + dir.string());
  auto doc = nlohmann::json::parse(in, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) throw IoError(p.manifest().string() + " is not valid JSON");
  return doc;
}

inline RunArtifact load_artifact(const fs::path& dir) {
  const ArtifactPaths p{dir};
  RunArtifact a;
  a.manifest = read_manifest(dir);
  if (fs::exists(p.tasks())) a.tasks = read_task_file(p.tasks());
  a.transcripts = read_transcripts(p.transcripts()).records;
  return a;
}

namespace detail {

inline void run_pool(const std::vector<Task>& tasks, const RunConfig& config, SessionEnv& env,
                     TranscriptSink& sink, const std::string& hash, const RunHooks& hooks) {
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  std::mutex err_mu;
  std::exception_ptr first_error;

  auto worker = [&] {
    // Sessions share only the client, limiter and sink.
    SessionEnv local = env;
    while (!stop.load()) {
      const auto i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        const auto t = run_session(tasks[i], config.maker, config.trader, config.equilibrium, local);
        sink.append(t, hash, hooks.after_persist);
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
        stop = true;
      }
    }
  };

  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(config.parallelism), tasks.size());
  {
    std::vector<std::jthread> pool;
    pool.reserve(n_workers);
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
  }
  if (first_error) std::rethrow_exception(first_error);
}

inline nlohmann::json make_manifest(const RunConfig& config, const std::string& hash, const std::string& dataset_hash,
                                    std::size_t n_tasks) {
  nlohmann::json m;
  m["schema_version"] = kArtifactSchemaVersion;
  m["run_id"] = config.run_id;
  m["code_version"] = std::string(kVersion);
  m["config"] = config.resolved;
  m["config_hash"] = hash;
  m["dataset"] = {{"path", config.dataset_path},
                  {"kind", std::string(to_string(config.dataset_kind))},
                  {"content_hash", dataset_hash}};
  m["task_file"] = "tasks.jsonl";
  m["n_tasks"] = n_tasks;
  m["started_at"] = utc_timestamp();
  m["finished_at"] = nullptr;
  return m;
}

}  // namespace detail

/// Loads and samples the configured dataset.
inline LoadResult load_configured_tasks(const RunConfig& config) {
  auto loaded = load_dataset(config.dataset_path, config.dataset_kind);
  if (config.sample_n > 0) loaded.tasks = sample_tasks(loaded.tasks, config.sample_n, config.sample_seed);
  return loaded;
}

inline SessionEnv make_session_env(const RunConfig& config, CompletionClient* client, RateLimiter* limiter) {
  SessionEnv env;
  env.client = client;
  env.limiter = limiter;
  env.templates = load_templates(config);
  env.backoff_base_s = config.runtime.backoff_base_s;
  env.backoff_cap_s = config.runtime.backoff_cap_s;
  return env;
}

/// Runs every task and writes a fresh artifact into config.output_dir.
///
/// Refuses to overwrite an existing artifact (use resume_experiment).
/// Session failures are recorded, never fatal; I/O failures throw IoError.
inline RunArtifact run_experiment(const RunConfig& config, const LoadResult& dataset, SessionEnv& env,
                                  const std::string& dataset_hash, const RunHooks& hooks = {}) {
  const ArtifactPaths p{config.output_dir};
  std::error_code ec;
  fs::create_directories(p.dir, ec);
  if (ec) throw IoError("cannot create output directory " + p.dir.string() + ": " + ec.message());
  if (fs::exists(p.manifest()) || fs::exists(p.transcripts())) {
    throw IoError(p.dir.string() + " already holds a run artifact; resume it or choose another output_dir");
  }

  const auto hash = config_hash(config);
  auto manifest = detail::make_manifest(config, hash, dataset_hash, dataset.tasks.size());
  write_file_atomic(p.manifest(), manifest.dump(2) + "\n");
  write_file_atomic(p.tasks(), serialize_tasks(dataset.tasks));
  write_file_atomic(p.skips(), serialize_skips(dataset.skips));

  {
    TranscriptSink sink(p.transcripts());
    detail::run_pool(dataset.tasks, config, env, sink, hash, hooks);
  }

  manifest["finished_at"] = utc_timestamp();
  write_file_atomic(p.manifest(), manifest.dump(2) + "\n");
  return load_artifact(p.dir);
}

/// Completes an interrupted artifact in config.output_dir.
///
/// Keeps the first well-formed, non-failed transcript per task; drops torn
/// lines, AgentFailure records, duplicates and records written under another
/// config hash; then runs what is missing.
inline RunArtifact resume_experiment(const RunConfig& config, SessionEnv& env, const RunHooks& hooks = {},
                                     RunStats* stats = nullptr) {
  const ArtifactPaths p{config.output_dir};
  auto manifest = read_manifest(p.dir);
  const auto hash = config_hash(config);
  if (manifest.value("config_hash", std::string()) != hash) {
    throw ConfigMismatch("config hash " + hash + " does not match the artifact's " +
                         manifest.value("config_hash", std::string("<none>")));
  }
  const auto tasks = read_task_file(p.tasks());
  std::set<std::string> task_ids;
  for (const auto& t : tasks) task_ids.insert(t.task_id);

  const auto existing = read_transcripts(p.transcripts());
  std::set<std::string> done;
  std::string kept;
  std::size_t kept_count = 0;
  for (std::size_t i = 0; i < existing.records.size(); ++i) {
    const auto& rec = existing.records[i];
    if (rec.config_hash != hash || !rec.transcript.termination ||
        rec.transcript.termination == TerminationReason::AgentFailure) {
      continue;
    }
    if (!task_ids.count(rec.transcript.task_id) || !done.insert(rec.transcript.task_id).second) continue;
    kept += existing.lines[i];
    kept += '\n';
    ++kept_count;
  }
  const std::size_t dropped = existing.records.size() - kept_count + existing.invalid_lines;
  if (dropped > 0) write_file_atomic(p.transcripts(), kept);

  std::vector<Task> remaining;
  for (const auto& t : tasks) {
    if (!done.count(t.task_id)) remaining.push_back(t);
  }
  if (stats) *stats = RunStats{remaining.size(), dropped};

  if (!remaining.empty()) {
    {
      TranscriptSink sink(p.transcripts());
      detail::run_pool(remaining, config, env, sink, hash, hooks);
    }
    manifest["finished_at"] = utc_timestamp();
    write_file_atomic(p.manifest(), manifest.dump(2) + "\n");
  }
  return load_artifact(p.dir);
}

/// Transcript lines of an artifact, sorted; the canonical form for comparing runs.
inline std::vector<std::string> sorted_transcript_lines(const fs::path& dir) {
  auto lines = read_transcripts(ArtifactPaths{dir}.transcripts()).lines;
  std::sort(lines.begin(), lines.end());
  return lines;
}

}  // namespace market_loop
