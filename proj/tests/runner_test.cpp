#include <gtest/gtest.h>

#include <deque>
#include <mutex>

#include "test_support.hpp"

using namespace market_loop;
using market_loop::testing::make_task;
using market_loop::testing::scripted;
using market_loop::testing::slurp;
using market_loop::testing::spit;
using market_loop::testing::TempDir;

namespace {

const EquilibriumConfig kDefault{};

// Replays canned completions, or throws canned transport errors, in order.
class FakeClient final : public CompletionClient {
public:
  using Step = std::variant<std::string, TransportError>;

  explicit FakeClient(std::deque<Step> steps) : steps_(std::move(steps)) {}

  RawCompletion complete(const RemoteBackend&, const std::string& prompt) override {
    std::lock_guard lock(mu_);
    prompts.push_back(prompt);
    if (steps_.empty()) throw TransportError(TransportErrorKind::Connection, "script exhausted");
    auto step = std::move(steps_.front());
    steps_.pop_front();
    if (auto* e = std::get_if<TransportError>(&step)) throw *e;
    RawCompletion r;
    r.text = std::get<std::string>(step);
    r.latency = std::chrono::milliseconds(3);
    return r;
  }

  std::vector<std::string> prompts;

private:
  std::mutex mu_;
  std::deque<Step> steps_;
};

AgentBinding remote(Role role, int retry_limit = 2) {
  RemoteBackend b;
  b.model_id = "fake";
  return AgentBinding{role, b, retry_limit};
}

std::string judgment(const char* p) { return std::string("CLAIM: The kettle is boiling.\nREASONING: r\nPREDICTION: ") + p; }

RunConfig sim_config(const std::filesystem::path& out, std::vector<std::string> extra = {}) {
  std::vector<std::string> sets = {"output_dir=" + out.string(), "dataset.path=synthetic", "maker.policy=noisy-walk",
                                   "maker.noise_scale=0.2", "trader.policy=noisy-walk", "maker.seed=5",
                                   "trader.seed=5"};
  sets.insert(sets.end(), extra.begin(), extra.end());
  return config_from_json(resolve_config_json(std::nullopt, sets));
}

LoadResult synthetic(std::size_t n, std::uint64_t seed = 1) {
  LoadResult r;
  r.tasks = synthetic_tasks(n, seed, DatasetKind::TruthfulQA);
  r.source_rows = n;
  return r;
}

}  // namespace

// ---- sessions with retries --------------------------------------------------

TEST(Session, ParseFailureRetriesWithReminder) {
  FakeClient client({std::string("I think it is boiling."), judgment("0.5"), judgment("0.5"), judgment("0.5")});
  SessionEnv env;
  env.client = &client;
  const auto t = run_session(make_task(), remote(Role::MarketMaker), scripted(Role::Trader, PolicyId::Stubborn),
                             kDefault, env);
  EXPECT_EQ(t.termination, TerminationReason::Equilibrium);
  ASSERT_EQ(t.retries.size(), 1u);
  EXPECT_EQ(t.retries[0].role, Role::MarketMaker);
  EXPECT_EQ(t.retries[0].round_index, 0u);
  EXPECT_EQ(t.retries[0].attempt, 1);
  EXPECT_TRUE(t.retries[0].reminder_appended);
  EXPECT_NE(t.retries[0].error.find("MissingField"), std::string::npos);
  ASSERT_GE(client.prompts.size(), 2u);
  EXPECT_EQ(client.prompts[0].find(prompts::kMakerReminder), std::string::npos);
  EXPECT_TRUE(client.prompts[1].ends_with(prompts::kMakerReminder));
  EXPECT_EQ(t.timing.agent_calls, 4 + 2);  // 4 maker calls, 2 scripted trader calls
  EXPECT_EQ(t.timing.latency_ms, 12);
}

TEST(Session, RetriesAreCountedPerBinding) {
  // retry_limit 1: two attempts per turn. The maker fails once in each of two rounds and still finishes.
  FakeClient client({std::string("junk"), judgment("0.5"), std::string("junk"), judgment("0.5"), judgment("0.5")});
  SessionEnv env;
  env.client = &client;
  const auto t = run_session(make_task(), remote(Role::MarketMaker, 1), scripted(Role::Trader, PolicyId::Stubborn),
                             kDefault, env);
  EXPECT_EQ(t.termination, TerminationReason::Equilibrium);
  EXPECT_EQ(t.retries.size(), 2u);
}

TEST(Session, ExhaustedRetriesEndInAgentFailure) {
  FakeClient client({judgment("0.5"), std::string(""), std::string(" "), std::string("\n")});
  SessionEnv env;
  env.client = &client;
  const auto t = run_session(make_task(), remote(Role::MarketMaker), remote(Role::Trader), kDefault, env);
  EXPECT_EQ(t.termination, TerminationReason::AgentFailure);
  EXPECT_EQ(t.judgments.size(), 1u);
  EXPECT_TRUE(t.arguments.empty());
  ASSERT_EQ(t.retries.size(), 3u);
  for (const auto& r : t.retries) EXPECT_EQ(r.role, Role::Trader);
  EXPECT_TRUE(client.prompts[3].ends_with(prompts::kTraderReminder));
}

TEST(Session, ThrottlingBacksOffWithCap) {
  auto throttle = TransportError(TransportErrorKind::HttpStatus, "http status 429", 429);
  FakeClient client({throttle, throttle, throttle, judgment("0.5"), judgment("0.5"), judgment("0.5")});
  SessionEnv env;
  env.client = &client;
  env.backoff_base_s = 1.0;
  env.backoff_cap_s = 3.0;
  std::vector<double> sleeps;
  env.sleep = [&](std::chrono::duration<double> d) { sleeps.push_back(d.count()); };
  const auto t = run_session(make_task(), remote(Role::MarketMaker, 3), scripted(Role::Trader, PolicyId::Stubborn),
                             kDefault, env);
  EXPECT_EQ(t.termination, TerminationReason::Equilibrium);
  EXPECT_EQ(sleeps, (std::vector<double>{1.0, 2.0, 3.0}));
  EXPECT_EQ(t.retries.size(), 3u);
  EXPECT_FALSE(t.retries[0].reminder_appended);
}

TEST(Session, OtherTransportErrorsDoNotSleep) {
  FakeClient client({TransportError(TransportErrorKind::Timeout, "timed out"), judgment("0.5"), judgment("0.5"),
                     judgment("0.5")});
  SessionEnv env;
  env.client = &client;
  int sleeps = 0;
  env.sleep = [&](std::chrono::duration<double>) { ++sleeps; };
  const auto t = run_session(make_task(), remote(Role::MarketMaker), scripted(Role::Trader, PolicyId::Stubborn),
                             kDefault, env);
  EXPECT_EQ(sleeps, 0);
  ASSERT_EQ(t.retries.size(), 1u);
  EXPECT_NE(t.retries[0].error.find("timed out"), std::string::npos);
}

TEST(Session, RemoteAgentWithoutClientIsAProgrammingError) {
  SessionEnv env;
  EXPECT_THROW(run_session(make_task(), remote(Role::MarketMaker), remote(Role::Trader), kDefault, env),
               std::logic_error);
}

TEST(Backoff, DoublesAndCaps) {
  EXPECT_DOUBLE_EQ(backoff_delay(1, 0.5, 10).count(), 0.5);
  EXPECT_DOUBLE_EQ(backoff_delay(4, 0.5, 10).count(), 4.0);
  EXPECT_DOUBLE_EQ(backoff_delay(10, 0.5, 10).count(), 10.0);
}

TEST(RateLimiter, SpacesRequests) {
  RateLimiter limiter(600.0);  // 10 per second, burst of 10
  const auto start = std::chrono::steady_clock::now();
  for (int i = 0; i < 15; ++i) limiter.acquire();
  const auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_GE(elapsed, 0.4);
  EXPECT_LT(elapsed, 2.0);
  RateLimiter unlimited(0);
  EXPECT_TRUE(unlimited.unlimited());
}

// ---- transcript records -----------------------------------------------------

TEST(Transcripts, SerializeRoundTrips) {
  Transcript t;
  t.task_id = "t\"1";
  t.judgments = {Judgment{ClaimSide::B, "multi\nline \"quoted\"", Probability::from_double(0.1234), 0},
                 Judgment{ClaimSide::A, "r", Probability::from_double(1.0), 1}};
  t.arguments = {TraderArgument{"arg\twith tab", 0}};
  t.termination = TerminationReason::MaxJudgments;
  t.config_snapshot = EquilibriumConfig::make(2, 0.15);
  t.retries = {RetryRecord{Role::Trader, 0, 1, "parse: x", true}};
  t.timing = {7, 42};
  const auto line = serialize_transcript(t, "abc");
  EXPECT_EQ(line.find('\n'), std::string::npos);
  EXPECT_NE(line.find("\"prediction\":0.1234"), std::string::npos);
  const auto rec = parse_transcript(nlohmann::json::parse(line));
  EXPECT_EQ(rec.transcript, t);
  EXPECT_EQ(rec.config_hash, "abc");
  EXPECT_EQ(serialize_transcript(rec.transcript, rec.config_hash), line);
}

TEST(Transcripts, ReaderDropsTornAndCorruptLines) {
  TempDir dir;
  Transcript t;
  t.task_id = "a";
  t.judgments = {Judgment{ClaimSide::A, "r", Probability::from_double(0.5), 0}};
  t.termination = TerminationReason::MaxJudgments;
  const auto good = serialize_transcript(t, "h");
  spit(dir / "t.jsonl", good + "\n{\"garbage\": true}\nnot json\n\n" + good + "\n" + good.substr(0, 20));
  const auto f = read_transcripts(dir / "t.jsonl");
  EXPECT_EQ(f.records.size(), 2u);
  EXPECT_EQ(f.invalid_lines, 3u);
  EXPECT_TRUE(read_transcripts(dir / "absent.jsonl").records.empty());
}

TEST(Transcripts, SinkAppendsWholeLines) {
  TempDir dir;
  Transcript t;
  t.task_id = "a";
  {
    TranscriptSink sink(dir / "t.jsonl");
    EXPECT_EQ(sink.append(t, "h"), 1u);
    EXPECT_EQ(sink.append(t, "h"), 2u);
  }
  const auto text = slurp(dir / "t.jsonl");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 2);
  EXPECT_THROW(TranscriptSink(dir / "no" / "such" / "dir.jsonl"), IoError);
}

TEST(Files, AtomicWriteReplaces) {
  TempDir dir;
  write_file_atomic(dir / "f.txt", "one");
  write_file_atomic(dir / "f.txt", "two");
  EXPECT_EQ(slurp(dir / "f.txt"), "two");
  EXPECT_THROW(write_file_atomic(dir / "missing" / "f.txt", "x"), IoError);
}

// ---- experiments ------------------------------------------------------------

TEST(Experiment, WritesCompleteArtifact) {
  TempDir dir;
  const auto cfg = sim_config(dir / "run");
  auto env = make_session_env(cfg, nullptr, nullptr);
  const auto data = synthetic(12);
  const auto a = run_experiment(cfg, data, env, "datahash");
  EXPECT_EQ(a.tasks.size(), 12u);
  EXPECT_EQ(a.transcripts.size(), 12u);
  EXPECT_EQ(a.manifest["schema_version"], kArtifactSchemaVersion);
  EXPECT_EQ(a.manifest["config_hash"], config_hash(cfg));
  EXPECT_EQ(a.manifest["dataset"]["content_hash"], "datahash");
  EXPECT_EQ(a.manifest["n_tasks"], 12);
  EXPECT_FALSE(a.manifest["finished_at"].is_null());
  for (const auto& r : a.transcripts) {
    EXPECT_EQ(r.config_hash, config_hash(cfg));
    EXPECT_EQ(replay(r.transcript), r.transcript);
  }
  EXPECT_THROW(run_experiment(cfg, data, env, "datahash"), IoError);
}

TEST(Experiment, ParallelismDoesNotChangeTranscripts) {
  TempDir dir;
  const auto data = synthetic(40);
  for (int p : {1, 3, 8}) {
    const auto cfg = sim_config(dir / ("p" + std::to_string(p)), {"parallelism=" + std::to_string(p)});
    auto env = make_session_env(cfg, nullptr, nullptr);
    run_experiment(cfg, data, env, "h");
  }
  const auto base = sorted_transcript_lines(dir / "p1");
  EXPECT_EQ(base.size(), 40u);
  EXPECT_EQ(sorted_transcript_lines(dir / "p3"), base);
  EXPECT_EQ(sorted_transcript_lines(dir / "p8"), base);
}

TEST(Experiment, HookFailureStopsTheRun) {
  TempDir dir;
  const auto cfg = sim_config(dir / "run");
  auto env = make_session_env(cfg, nullptr, nullptr);
  RunHooks hooks;
  hooks.after_persist = [](std::size_t n) {
    if (n == 4) throw std::runtime_error("simulated crash");
  };
  EXPECT_THROW(run_experiment(cfg, synthetic(10), env, "h", hooks), std::runtime_error);
  EXPECT_EQ(read_transcripts(dir / "run" / "transcripts.jsonl").records.size(), 4u);
}

TEST(Resume, CompletesExactlyTheMissingTasks) {
  TempDir dir;
  const auto data = synthetic(25);
  {
    const auto cfg = sim_config(dir / "full");
    auto env = make_session_env(cfg, nullptr, nullptr);
    run_experiment(cfg, data, env, "h");
  }
  const auto cfg = sim_config(dir / "cut", {"parallelism=4"});
  auto env = make_session_env(cfg, nullptr, nullptr);
  RunHooks crash;
  crash.after_persist = [](std::size_t n) {
    if (n == 9) throw std::runtime_error("crash");
  };
  EXPECT_THROW(run_experiment(cfg, data, env, "h", crash), std::runtime_error);
  const auto written = read_transcripts(dir / "cut" / "transcripts.jsonl").records.size();

  // Add a torn tail and a duplicate of the first record.
  const auto lines = read_transcripts(dir / "cut" / "transcripts.jsonl").lines;
  {
    std::ofstream out(dir / "cut" / "transcripts.jsonl", std::ios::app);
    out << lines.front() << "\n" << lines.back().substr(0, lines.back().size() / 2);
  }

  RunStats stats;
  std::vector<std::size_t> seen;
  RunHooks count;
  count.after_persist = [&](std::size_t n) { seen.push_back(n); };
  const auto a = resume_experiment(cfg, env, count, &stats);
  EXPECT_EQ(stats.sessions_executed, 25u - written);
  EXPECT_EQ(stats.dropped_records, 2u);
  EXPECT_EQ(seen.size(), 25u - written);
  EXPECT_EQ(a.transcripts.size(), 25u);
  EXPECT_EQ(sorted_transcript_lines(dir / "cut"), sorted_transcript_lines(dir / "full"));
  EXPECT_EQ(slurp(dir / "cut" / "tasks.jsonl"), slurp(dir / "full" / "tasks.jsonl"));

  RunStats again;
  resume_experiment(cfg, env, {}, &again);
  EXPECT_EQ(again.sessions_executed, 0u);
  EXPECT_EQ(again.dropped_records, 0u);
}

TEST(Resume, RerunsAgentFailures) {
  TempDir dir;
  const auto cfg = sim_config(dir / "run");
  auto env = make_session_env(cfg, nullptr, nullptr);
  run_experiment(cfg, synthetic(3), env, "h");
  auto f = read_transcripts(dir / "run" / "transcripts.jsonl");
  auto failed = f.records[1].transcript;
  failed.judgments.resize(1);
  failed.arguments.clear();
  failed.termination = TerminationReason::AgentFailure;
  std::string text = f.lines[0] + "\n" + serialize_transcript(failed, f.records[1].config_hash) + "\n" + f.lines[2] + "\n";
  spit(dir / "run" / "transcripts.jsonl", text);
  RunStats stats;
  const auto a = resume_experiment(cfg, env, {}, &stats);
  EXPECT_EQ(stats.sessions_executed, 1u);
  EXPECT_EQ(stats.dropped_records, 1u);
  for (const auto& r : a.transcripts) EXPECT_NE(r.transcript.termination, TerminationReason::AgentFailure);
}

TEST(Resume, RefusesAChangedConfig) {
  TempDir dir;
  const auto cfg = sim_config(dir / "run");
  auto env = make_session_env(cfg, nullptr, nullptr);
  run_experiment(cfg, synthetic(3), env, "h");
  const auto changed = sim_config(dir / "run", {"equilibrium.threshold=0.1"});
  EXPECT_THROW(resume_experiment(changed, env), ConfigMismatch);
  const auto ops_only = sim_config(dir / "run", {"parallelism=6"});
  EXPECT_NO_THROW(resume_experiment(ops_only, env));
  EXPECT_THROW(resume_experiment(sim_config(dir / "nothing-here"), env), IoError);
}
