#pragma once

// Command-line front end: run, resume, simulate, report, validate-dataset.
//
// Exit codes: 0 success, 2 configuration or validation error, 3 I/O failure,
// 4 a reported run exceeds the AgentFailure threshold.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "market_loop/agents.hpp"
#include "market_loop/config.hpp"
#include "market_loop/datasets.hpp"
#include "market_loop/metrics.hpp"
#include "market_loop/runner.hpp"

namespace market_loop::cli {

enum ExitCode : int { kOk = 0, kConfigError = 2, kIoError = 3, kFailureThreshold = 4 };

// Crash simulation for resume testing: exit abruptly after k persisted sessions.
inline constexpr const char* kFaultAfterEnv = "MARKET_LOOP_FAULT_AFTER";

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> sets;
  std::string output;
  std::optional<long long> seed;
  std::optional<int> parallelism;
  bool echo_config = false;
};

inline constexpr std::size_t kDefaultSimulatedTasks = 50;

struct SimulateOptions {
  std::optional<std::size_t> tasks;
  std::string maker_policy;
  std::string trader_policy;
  std::optional<double> step;
  std::optional<double> start;
  std::optional<double> noise;
};

inline void add_common(CLI::App* sub, CommonOptions& o, bool with_run_flags) {
  sub->add_option("--config", o.config_path, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", o.sets, "Override a config key: KEY=VALUE (repeatable)")->expected(1, -1);
  sub->add_option("--output", o.output, "Output directory");
  if (with_run_flags) {
    sub->add_option("--seed", o.seed, "Seed for sampling and scripted agents");
    sub->add_option("--parallelism", o.parallelism, "Sessions in flight")->check(CLI::PositiveNumber);
  }
  sub->add_flag("--echo-config", o.echo_config, "Print the resolved configuration and exit");
}

// --set assignments followed by the dedicated flags, which win.
inline std::vector<std::string> flag_overrides(const CommonOptions& o) {
  std::vector<std::string> sets = o.sets;
  if (!o.output.empty()) sets.push_back("output_dir=" + o.output);
  if (o.seed) {
    for (const char* k : {"sample.seed", "maker.seed", "trader.seed"}) sets.push_back(std::string(k) + "=" + std::to_string(*o.seed));
  }
  if (o.parallelism) sets.push_back("parallelism=" + std::to_string(*o.parallelism));
  return sets;
}

/// defaults < file < `extra_sets` < --set < dedicated flags.
inline nlohmann::json resolve(const CommonOptions& o, std::vector<std::string> extra_sets = {}) {
  for (auto& s : flag_overrides(o)) extra_sets.push_back(std::move(s));
  std::optional<std::filesystem::path> file;
  if (!o.config_path.empty()) file = o.config_path;
  return resolve_config_json(file, extra_sets);
}

inline RunHooks fault_hooks() {
  RunHooks hooks;
  if (const char* v = std::getenv(kFaultAfterEnv); v && *v) {
    const auto k = std::strtoull(v, nullptr, 10);
    hooks.after_persist = [k](std::size_t n) {
      if (n >= k) std::_Exit(86);
    };
  }
  return hooks;
}

inline void print_summary(std::ostream& out, const RunConfig& cfg, const RunArtifact& a) {
  std::map<std::string, Task> tasks;
  for (const auto& t : a.tasks) tasks.emplace(t.task_id, t);
  std::vector<Transcript> ts;
  for (const auto& r : a.transcripts) ts.push_back(r.transcript);
  std::size_t eq = 0, maxj = 0, failed = 0;
  for (const auto& t : ts) {
    if (t.termination == TerminationReason::Equilibrium) ++eq;
    else if (t.termination == TerminationReason::MaxJudgments) ++maxj;
    else ++failed;
  }
  out << "run_id: " << cfg.run_id << "\n"
      << "output_dir: " << cfg.output_dir.string() << "\n"
      << "tasks: " << a.tasks.size() << "\n"
      << "transcripts: " << ts.size() << " (equilibrium " << eq << ", max_judgments " << maxj << ", agent_failure "
      << failed << ")\n";
  if (!ts.empty()) {
    const auto scores = score_run(a.tasks, ts);
    const auto r = aggregate(scores, cfg.maker.model_label(), cfg.dataset_kind);
    out << "equilibrium_rate: " << r.equilibrium_rate_str() << "\n"
        << "mean_rounds: " << r.mean_rounds_str() << "\n"
        << "acc_initial: " << r.acc_initial_str() << "  acc_final: " << r.acc_final_str()
        << "  net_gain: " << r.net_gain_str() << "\n";
  }
}

inline int with_errors(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const ConfigMismatch& e) {
    err << "config mismatch: " << e.what() << "\n";
    return kConfigError;
  } catch (const IngestError& e) {
    err << "dataset error: " << e.what() << "\n";
    return e.kind() == IngestErrorKind::Unreadable ? kIoError : kConfigError;
  } catch (const SampleTooLarge& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << "\n";
    return kIoError;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "io error: " << e.what() << "\n";
    return kIoError;
  }
}

inline std::unique_ptr<CompletionClient> client_for(const RunConfig& cfg) {
  if (cfg.maker.is_remote() || cfg.trader.is_remote()) return std::make_unique<HttpCompletionClient>();
  return nullptr;
}

inline int cmd_run(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  return with_errors(err, [&] {
    const auto resolved = resolve(o);
    if (o.echo_config) {
      out << resolved.dump(2) << "\n";
      return int{kOk};
    }
    const auto cfg = config_from_json(resolved);
    if (cfg.dataset_path.empty()) throw ConfigError("dataset.path is required");
    const auto data = load_configured_tasks(cfg);
    auto client = client_for(cfg);
    RateLimiter limiter(cfg.runtime.requests_per_minute);
    auto env = make_session_env(cfg, client.get(), &limiter);
    const auto artifact = run_experiment(cfg, data, env, file_content_hash(cfg.dataset_path), fault_hooks());
    print_summary(out, cfg, artifact);
    return int{kOk};
  });
}

// Without --config, resume starts from the configuration recorded in the
// artifact, so only --output is needed.
inline nlohmann::json resolve_for_resume(const CommonOptions& o) {
  if (!o.config_path.empty()) return resolve(o);
  if (o.output.empty()) throw ConfigError("resume needs --output or --config");
  auto cfg = default_config_json();
  detail::merge_checked(cfg, read_manifest(o.output).at("config"), "");
  for (const auto& s : flag_overrides(o)) apply_override(cfg, s);
  return cfg;
}

inline int cmd_resume(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  return with_errors(err, [&] {
    const auto resolved = resolve_for_resume(o);
    if (o.echo_config) {
      out << resolved.dump(2) << "\n";
      return int{kOk};
    }
    const auto cfg = config_from_json(resolved);
    auto client = client_for(cfg);
    RateLimiter limiter(cfg.runtime.requests_per_minute);
    auto env = make_session_env(cfg, client.get(), &limiter);
    RunStats stats;
    const auto artifact = resume_experiment(cfg, env, fault_hooks(), &stats);
    out << "resumed: executed " << stats.sessions_executed << " sessions, dropped " << stats.dropped_records
        << " records\n";
    print_summary(out, cfg, artifact);
    return int{kOk};
  });
}

inline int cmd_simulate(const CommonOptions& o, const SimulateOptions& s, std::ostream& out, std::ostream& err) {
  return with_errors(err, [&] {
    auto resolved = resolve(o);
    // Simulation is scripted by definition, whatever the file says.
    resolved["maker"]["backend"] = "scripted";
    resolved["trader"]["backend"] = "scripted";
    resolved["dataset"]["path"] = "synthetic";
    if (s.tasks) {
      resolved["sample"]["n"] = *s.tasks;
    } else if (resolved["sample"]["n"] == 0) {
      resolved["sample"]["n"] = kDefaultSimulatedTasks;
    }
    if (!s.maker_policy.empty()) resolved["maker"]["policy"] = s.maker_policy;
    if (!s.trader_policy.empty()) resolved["trader"]["policy"] = s.trader_policy;
    if (s.step) resolved["maker"]["step_size"] = *s.step;
    if (s.start) resolved["maker"]["start"] = *s.start;
    if (s.noise) resolved["maker"]["noise_scale"] = *s.noise;
    if (o.echo_config) {
      out << resolved.dump(2) << "\n";
      return int{kOk};
    }
    const auto cfg = config_from_json(resolved);
    if (cfg.sample_n == 0) throw ConfigError("simulate needs at least one task");
    LoadResult data;
    data.tasks = synthetic_tasks(cfg.sample_n, cfg.sample_seed, cfg.dataset_kind);
    data.source_rows = data.tasks.size();
    auto env = make_session_env(cfg, nullptr, nullptr);
    const auto artifact =
        run_experiment(cfg, data, env, hex64(fnv1a64(serialize_tasks(data.tasks))), fault_hooks());
    print_summary(out, cfg, artifact);
    return int{kOk};
  });
}

struct ReportOptions {
  std::vector<std::string> dirs;
  std::string format = "md";
  bool strict_claim = false;
};

inline int cmd_report(const CommonOptions& o, const ReportOptions& r, std::ostream& out, std::ostream& err) {
  return with_errors(err, [&]() -> int {
    const auto resolved = resolve(o);
    if (o.echo_config) {
      out << resolved.dump(2) << "\n";
      return kOk;
    }
    const auto base = config_from_json(resolved);
    const auto mode = r.strict_claim ? ScoringMode::StrictClaim : ScoringMode::ClaimAndConfidence;

    std::map<std::string, ModelInfo> models;
    std::vector<RunReport> reports;
    std::optional<int> schema;
    for (const auto& dir : r.dirs) {
      const auto artifact = load_artifact(dir);
      const int v = artifact.manifest.value("schema_version", -1);
      if (v != kArtifactSchemaVersion || (schema && *schema != v)) {
        err << "config error: " << dir << " has artifact schema version " << v << ", expected "
            << kArtifactSchemaVersion << "\n";
        return kConfigError;
      }
      schema = v;
      const auto cfg = config_from_json(artifact.manifest.at("config"));
      for (const auto& [id, info] : cfg.models) models.insert_or_assign(id, info);

      const auto model = cfg.maker.model_label();
      RunReport rep;
      rep.model_id = model;
      rep.dataset = cfg.dataset_kind;
      if (!artifact.transcripts.empty()) {
        std::vector<Transcript> ts;
        for (const auto& rec : artifact.transcripts) ts.push_back(rec.transcript);
        rep = aggregate(score_run(artifact.tasks, ts, mode), model, cfg.dataset_kind);
      }
      const auto existing = std::find_if(reports.begin(), reports.end(), [&](const RunReport& x) {
        return x.model_id == rep.model_id && x.dataset == rep.dataset;
      });
      if (existing != reports.end()) {
        *existing = merge(*existing, rep);
      } else {
        reports.push_back(rep);
      }
    }
    // Fields given on the command line win over what the artifacts recorded.
    for (const auto& [id, info] : base.models) {
      auto& m = models[id];
      if (!info.family.empty()) m.family = info.family;
      if (info.parameters_b) m.parameters_b = info.parameters_b;
    }
    for (auto& rep : reports) {
      if (const auto it = models.find(rep.model_id); it != models.end()) rep.family = it->second.family;
    }

    std::vector<RunReport> plottable;
    for (const auto& rep : reports) {
      const auto it = models.find(rep.model_id);
      if (it != models.end() && it->second.parameters_b) {
        plottable.push_back(rep);
      } else {
        err << "warning: no parameter count for " << rep.model_id << "; omitted from plotdata.csv\n";
      }
    }

    const std::filesystem::path out_dir = o.output.empty() ? std::filesystem::path(".") : std::filesystem::path(o.output);
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    const auto md = render_report(reports, ReportFormat::Markdown);
    const auto csv_text = render_report(reports, ReportFormat::Csv);
    write_file_atomic(out_dir / "report.md", md);
    write_file_atomic(out_dir / "report.csv", csv_text);
    write_file_atomic(out_dir / "plotdata.csv", emit_plot_data(plottable, models));
    out << (r.format == "csv" ? csv_text : md);

    int code = kOk;
    for (const auto& rep : reports) {
      if (rep.failure_rate() > base.failure_threshold) {
        err << "error: " << rep.model_id << " on " << to_string(rep.dataset) << " has agent-failure rate "
            << format_fixed2(100.0 * rep.failure_rate()) << "% (threshold "
            << format_fixed2(100.0 * base.failure_threshold) << "%)\n";
        code = kFailureThreshold;
      }
    }
    return code;
  });
}

struct ValidateOptions {
  std::string path;
  std::string kind;
};

inline int cmd_validate(const CommonOptions& o, const ValidateOptions& v, std::ostream& out, std::ostream& err) {
  return with_errors(err, [&]() -> int {
    std::vector<std::string> sets;
    if (!v.path.empty()) sets.push_back("dataset.path=" + v.path);
    if (!v.kind.empty() && v.kind != "tasks") sets.push_back("dataset.kind=" + v.kind);
    const auto resolved = resolve(o, sets);
    if (o.echo_config) {
      out << resolved.dump(2) << "\n";
      return kOk;
    }
    const auto cfg = config_from_json(resolved);
    if (cfg.dataset_path.empty()) throw ConfigError("no dataset path given");

    LoadResult data;
    if (v.kind == "tasks") {
      data.tasks = read_task_file(cfg.dataset_path);
      data.source_rows = data.tasks.size();
    } else {
      data = load_dataset(cfg.dataset_path, cfg.dataset_kind);
    }
    const auto rep = validate_dataset(data.tasks);
    out << "rows: " << data.source_rows << "\n"
        << "tasks: " << data.tasks.size() << "\n"
        << "skipped: " << data.skips.size() << "\n";
    for (const auto& s : data.skips) out << "  skip " << s.provenance << ": " << s.reason << "\n";
    out << "balance (truth = A): " << format_fixed2(rep.balance) << (rep.degenerate_balance ? " [degenerate]" : "")
        << "\n";
    auto list = [&](const char* what, const std::vector<std::string>& ids) {
      for (const auto& id : ids) out << "  " << what << ": " << id << "\n";
    };
    list("duplicate id", rep.duplicate_ids);
    list("duplicate content", rep.duplicate_content);
    list("claim collision", rep.claim_collisions);
    list("empty field", rep.empty_fields);
    out << "violations: " << rep.violations() << "\n";

    if (!o.output.empty()) {
      std::error_code ec;
      std::filesystem::create_directories(o.output, ec);
      if (ec) throw IoError("cannot create " + o.output + ": " + ec.message());
      write_file_atomic(std::filesystem::path(o.output) / "tasks.jsonl", serialize_tasks(data.tasks));
      write_file_atomic(std::filesystem::path(o.output) / "skips.jsonl", serialize_skips(data.skips));
    }
    return rep.violations() == 0 ? kOk : kConfigError;
  });
}

/// Parses argv and dispatches. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Market-making truth elicitation: sessions, experiments and reports", "market_loop"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  CommonOptions run_o, resume_o, sim_o, report_o, validate_o;
  SimulateOptions sim;
  ReportOptions rep;
  ValidateOptions val;

  auto* run = app.add_subcommand("run", "Run an experiment over a dataset");
  add_common(run, run_o, true);
  auto* resume = app.add_subcommand("resume", "Complete an interrupted run in its output directory");
  add_common(resume, resume_o, true);

  auto* simulate = app.add_subcommand("simulate", "Run scripted agents on synthetic tasks");
  add_common(simulate, sim_o, true);
  simulate->add_option("--tasks", sim.tasks, "Number of synthetic tasks (default: sample.n, or 50)")->check(CLI::PositiveNumber);
  simulate->add_option("--maker", sim.maker_policy, "Maker policy: truth-convergent|stubborn|adversarial|noisy-walk");
  simulate->add_option("--trader", sim.trader_policy, "Trader policy");
  simulate->add_option("--step", sim.step, "Maker step size in [0, 1]");
  simulate->add_option("--start", sim.start, "Maker initial prediction");
  simulate->add_option("--noise", sim.noise, "Maker noise scale in [0, 0.5]");

  auto* report = app.add_subcommand("report", "Merge run artifacts into report.md, report.csv and plotdata.csv");
  add_common(report, report_o, false);
  report->add_option("dirs", rep.dirs, "Artifact directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--format", rep.format, "Table printed to stdout")->check(CLI::IsMember({"md", "csv"}));
  report->add_flag("--strict-claim", rep.strict_claim, "Score by stated claim only, ignoring the prediction");

  auto* validate = app.add_subcommand("validate-dataset", "Load a benchmark file and check the normalized tasks");
  add_common(validate, validate_o, false);
  validate->add_option("path", val.path, "Benchmark file (default: dataset.path from config)");
  validate->add_option("--kind", val.kind, "Dataset kind, or \"tasks\" for a normalized task file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kConfigError;
  }

  if (run->parsed()) return cmd_run(run_o, out, err);
  if (resume->parsed()) return cmd_resume(resume_o, out, err);
  if (simulate->parsed()) return cmd_simulate(sim_o, sim, out, err);
  if (report->parsed()) return cmd_report(report_o, rep, out, err);
  return cmd_validate(validate_o, val, out, err);
}

}  // namespace market_loop::cli
