#pragma once

// Scoring and reporting.
//
// Accuracy is tracked as integer counts; percentages are derived from the
// counts and rounded only when rendered, so net gain is always exactly
// final accuracy minus initial accuracy.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "market_loop/config.hpp"
#include "market_loop/datasets.hpp"
#include "market_loop/protocol.hpp"
#include "market_loop/task.hpp"

namespace market_loop {

enum class ScoringMode {
  // The claim counts only if the prediction backs it (p > 0.5); p < 0.5
  // endorses the other claim; p == 0.5 is an abstention and scores wrong.
  ClaimAndConfidence,
  // The stated claim alone decides.
  StrictClaim,
};

inline bool score_judgment(const Judgment& j, const Task& task, ScoringMode mode = ScoringMode::ClaimAndConfidence) {
  if (mode == ScoringMode::StrictClaim) return j.claim == task.truth;
  constexpr auto half = Probability::kScale / 2;
  if (j.prediction.ticks() == half) return false;
  const ClaimSide effective = j.prediction.ticks() > half ? j.claim : opposite(j.claim);
  return effective == task.truth;
}

class TaskMismatch : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct SessionScore {
  std::string task_id;
  std::optional<bool> initial_correct;  // empty for AgentFailure
  std::optional<bool> final_correct;
  std::size_t rounds = 0;
  TerminationReason terminated_by = TerminationReason::MaxJudgments;

  bool failed() const { return terminated_by == TerminationReason::AgentFailure; }
};

inline SessionScore score_transcript(const Transcript& t, const Task& task,
                                     ScoringMode mode = ScoringMode::ClaimAndConfidence) {
  if (t.task_id != task.task_id) throw TaskMismatch("transcript " + t.task_id + " scored against task " + task.task_id);
  if (!t.termination) throw std::invalid_argument("transcript " + t.task_id + " has not terminated");
  SessionScore s;
  s.task_id = t.task_id;
  s.rounds = t.judgments.size();
  s.terminated_by = *t.termination;
  if (s.failed()) return s;
  if (t.judgments.empty()) throw std::invalid_argument("transcript " + t.task_id + " terminated without a judgment");
  s.initial_correct = score_judgment(t.judgments.front(), task, mode);
  s.final_correct = score_judgment(t.judgments.back(), task, mode);
  return s;
}

/// Scores every transcript against its task.
inline std::vector<SessionScore> score_run(const std::vector<Task>& tasks, const std::vector<Transcript>& transcripts,
                                           ScoringMode mode = ScoringMode::ClaimAndConfidence) {
  std::unordered_map<std::string, const Task*> by_id;
  for (const auto& t : tasks) by_id.emplace(t.task_id, &t);
  std::vector<SessionScore> out;
  out.reserve(transcripts.size());
  for (const auto& tr : transcripts) {
    const auto it = by_id.find(tr.task_id);
    if (it == by_id.end()) throw TaskMismatch("transcript for unknown task " + tr.task_id);
    out.push_back(score_transcript(tr, *it->second, mode));
  }
  return out;
}

// "13.67" from 1367/100: 100*num/den rounded half away from zero to two decimals.
inline std::string format_percent_ratio(std::int64_t num, std::int64_t den, bool percent = true) {
  if (den <= 0) return "-";
  const bool neg = num < 0;
  const __int128 mag = static_cast<__int128>(neg ? -num : num) * (percent ? 10000 : 100);
  const auto hundredths = static_cast<long long>((2 * mag + den) / (2 * static_cast<__int128>(den)));
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%s%lld.%02lld", (neg && hundredths != 0) ? "-" : "", hundredths / 100,
                hundredths % 100);
  return buf;
}

inline std::string format_fixed2(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  std::string s = buf;
  if (s == "-0.00") s = "0.00";
  return s;
}

/// Per-(model, dataset) summary. All statistics derive from the counts.
struct RunReport {
  std::string model_id;
  std::string family;
  DatasetKind dataset = DatasetKind::TruthfulQA;
  std::int64_t n_scored = 0;
  std::int64_t n_failed = 0;
  std::int64_t n_initial_correct = 0;
  std::int64_t n_final_correct = 0;
  std::int64_t total_rounds = 0;
  std::int64_t n_equilibrium = 0;

  double acc_initial() const { return n_scored ? 100.0 * n_initial_correct / n_scored : 0.0; }
  double acc_final() const { return n_scored ? 100.0 * n_final_correct / n_scored : 0.0; }
  double net_gain() const { return n_scored ? 100.0 * (n_final_correct - n_initial_correct) / n_scored : 0.0; }
  double mean_rounds() const { return n_scored ? static_cast<double>(total_rounds) / n_scored : 0.0; }
  double equilibrium_rate() const { return n_scored ? static_cast<double>(n_equilibrium) / n_scored : 0.0; }
  double failure_rate() const {
    const auto total = n_scored + n_failed;
    return total ? static_cast<double>(n_failed) / total : 0.0;
  }

  std::string acc_initial_str() const { return format_percent_ratio(n_initial_correct, n_scored); }
  std::string acc_final_str() const { return format_percent_ratio(n_final_correct, n_scored); }
  std::string net_gain_str() const { return format_percent_ratio(n_final_correct - n_initial_correct, n_scored); }
  std::string mean_rounds_str() const { return format_percent_ratio(total_rounds, n_scored, false); }
  std::string equilibrium_rate_str() const { return format_percent_ratio(n_equilibrium, n_scored, false); }

  bool operator==(const RunReport&) const = default;
};

class EmptyScores : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

inline RunReport aggregate(const std::vector<SessionScore>& scores, std::string model_id, DatasetKind dataset,
                           std::string family = {}) {
  if (scores.empty()) throw EmptyScores("no session scores to aggregate");
  RunReport r;
  r.model_id = std::move(model_id);
  r.family = std::move(family);
  r.dataset = dataset;
  for (const auto& s : scores) {
    if (s.failed()) {
      ++r.n_failed;
      continue;
    }
    ++r.n_scored;
    r.n_initial_correct += s.initial_correct.value_or(false) ? 1 : 0;
    r.n_final_correct += s.final_correct.value_or(false) ? 1 : 0;
    r.total_rounds += static_cast<std::int64_t>(s.rounds);
    r.n_equilibrium += s.terminated_by == TerminationReason::Equilibrium ? 1 : 0;
  }
  return r;
}

/// Sums the counts of two reports for the same model and dataset.
inline RunReport merge(RunReport a, const RunReport& b) {
  if (a.model_id != b.model_id || a.dataset != b.dataset) {
    throw std::invalid_argument("cannot merge reports for different models or datasets");
  }
  a.n_scored += b.n_scored;
  a.n_failed += b.n_failed;
  a.n_initial_correct += b.n_initial_correct;
  a.n_final_correct += b.n_final_correct;
  a.total_rounds += b.total_rounds;
  a.n_equilibrium += b.n_equilibrium;
  if (a.family.empty()) a.family = b.family;
  return a;
}

enum class ReportFormat { Markdown, Csv };

namespace detail {

struct FamilyGroup {
  std::string family;
  std::vector<std::string> models;  // first-appearance order
};

inline std::vector<FamilyGroup> group_by_family(const std::vector<RunReport>& reports) {
  std::vector<FamilyGroup> groups;
  for (const auto& r : reports) {
    const std::string fam = r.family.empty() ? "Other" : r.family;
    auto g = std::find_if(groups.begin(), groups.end(), [&](const FamilyGroup& x) { return x.family == fam; });
    if (g == groups.end()) {
      groups.push_back({fam, {}});
      g = std::prev(groups.end());
    }
    if (std::find(g->models.begin(), g->models.end(), r.model_id) == g->models.end()) g->models.push_back(r.model_id);
  }
  return groups;
}

inline std::vector<DatasetKind> present_datasets(const std::vector<RunReport>& reports) {
  std::vector<DatasetKind> out;
  for (auto k : kAllDatasets) {
    if (std::any_of(reports.begin(), reports.end(), [&](const RunReport& r) { return r.dataset == k; })) out.push_back(k);
  }
  return out;
}

inline const RunReport* find_report(const std::vector<RunReport>& reports, const std::string& model, DatasetKind d) {
  for (const auto& r : reports) {
    if (r.model_id == model && r.dataset == d) return &r;
  }
  return nullptr;
}

}  // namespace detail

/// Mean net gain of the family's models that have scored sessions on `dataset`.
inline std::optional<double> family_average(const std::vector<RunReport>& reports, std::string_view family,
                                            DatasetKind dataset) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : reports) {
    const std::string_view fam = r.family.empty() ? std::string_view("Other") : std::string_view(r.family);
    if (fam == family && r.dataset == dataset && r.n_scored > 0) {
      sum += r.net_gain();
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

inline constexpr std::string_view kReportCsvHeader =
    "model_id,family,dataset,n_scored,n_failed,acc_initial,acc_final,net_gain,mean_rounds,equilibrium_rate";

/// Net-gain table grouped by model family (Markdown), or one CSV row per
/// (model, dataset) with the full statistics.
inline std::string render_report(const std::vector<RunReport>& reports, ReportFormat format) {
  const auto groups = detail::group_by_family(reports);
  const auto datasets = detail::present_datasets(reports);
  std::string out;

  if (format == ReportFormat::Csv) {
    out = std::string(kReportCsvHeader) + "\n";
    for (const auto& g : groups) {
      for (const auto& m : g.models) {
        for (auto d : datasets) {
          const auto* r = detail::find_report(reports, m, d);
          if (!r) continue;
          out += csv::quote(r->model_id) + "," + csv::quote(g.family) + "," + std::string(to_string(d)) + "," +
                 std::to_string(r->n_scored) + "," + std::to_string(r->n_failed) + "," + r->acc_initial_str() + "," +
                 r->acc_final_str() + "," + r->net_gain_str() + "," + r->mean_rounds_str() + "," +
                 r->equilibrium_rate_str() + "\n";
        }
      }
    }
    return out;
  }

  out = "| Model |";
  for (auto d : datasets) out += " " + std::string(display_name(d)) + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < datasets.size(); ++i) out += "---:|";
  out += "\n";
  const std::string blank_cells = [&] {
    std::string s;
    for (std::size_t i = 0; i < datasets.size(); ++i) s += " |";
    return s;
  }();

  for (const auto& g : groups) {
    out += "| **" + g.family + "** |" + blank_cells + "\n";
    for (const auto& m : g.models) {
      out += "| " + m + " |";
      for (auto d : datasets) {
        const auto* r = detail::find_report(reports, m, d);
        out += " " + (r && r->n_scored > 0 ? r->net_gain_str() : std::string("-")) + " |";
      }
      out += "\n";
    }
    out += "| **Average** |";
    for (auto d : datasets) {
      const auto avg = family_average(reports, g.family, d);
      out += " " + (avg ? format_fixed2(*avg) : std::string("-")) + " |";
    }
    out += "\n";
  }
  return out;
}

/// A report CSV row read back; dashes become empty optionals.
struct ReportRow {
  std::string model_id;
  std::string family;
  DatasetKind dataset = DatasetKind::TruthfulQA;
  std::int64_t n_scored = 0;
  std::int64_t n_failed = 0;
  std::optional<double> acc_initial, acc_final, net_gain, mean_rounds, equilibrium_rate;
};

inline std::vector<ReportRow> parse_report_csv(std::string_view text) {
  const auto rows = csv::parse(text);
  if (rows.empty() || rows[0].size() != 10) throw std::invalid_argument("not a report CSV");
  std::vector<ReportRow> out;
  auto num = [](const std::string& s) -> std::optional<double> {
    if (s == "-") return std::nullopt;
    return std::stod(s);
  };
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 10) throw std::invalid_argument("report CSV row " + std::to_string(i) + " has wrong width");
    ReportRow x;
    x.model_id = r[0];
    x.family = r[1];
    x.dataset = dataset_kind_from_string(r[2]);
    x.n_scored = std::stoll(r[3]);
    x.n_failed = std::stoll(r[4]);
    x.acc_initial = num(r[5]);
    x.acc_final = num(r[6]);
    x.net_gain = num(r[7]);
    x.mean_rounds = num(r[8]);
    x.equilibrium_rate = num(r[9]);
    out.push_back(std::move(x));
  }
  return out;
}

class MissingParameterCount : public std::invalid_argument {
public:
  explicit MissingParameterCount(const std::string& model_id)
      : std::invalid_argument("no parameter count configured for model " + model_id), model_id_(model_id) {}
  const std::string& model_id() const { return model_id_; }

private:
  std::string model_id_;
};

inline constexpr std::string_view kPlotCsvHeader = "family,model_id,parameters_b,dataset,net_gain";

/// Net gain against parameter count, one row per (model, dataset), sorted
/// by family, then parameter count, then dataset.
inline std::string emit_plot_data(const std::vector<RunReport>& reports, const std::map<std::string, ModelInfo>& models) {
  struct Row {
    std::size_t family_rank;
    double params;
    std::size_t dataset_rank;
    const RunReport* report;
  };
  const auto groups = detail::group_by_family(reports);
  std::vector<Row> rows;
  for (const auto& r : reports) {
    if (r.n_scored == 0) continue;
    const auto it = models.find(r.model_id);
    if (it == models.end() || !it->second.parameters_b) throw MissingParameterCount(r.model_id);
    const std::string fam = r.family.empty() ? "Other" : r.family;
    const auto g = std::find_if(groups.begin(), groups.end(), [&](const auto& x) { return x.family == fam; });
    const auto d = std::find(kAllDatasets.begin(), kAllDatasets.end(), r.dataset);
    rows.push_back({static_cast<std::size_t>(g - groups.begin()), *it->second.parameters_b,
                    static_cast<std::size_t>(d - kAllDatasets.begin()), &r});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.family_rank != b.family_rank) return a.family_rank < b.family_rank;
    if (a.params != b.params) return a.params < b.params;
    return a.dataset_rank < b.dataset_rank;
  });

  std::string out = std::string(kPlotCsvHeader) + "\n";
  for (const auto& row : rows) {
    char params[32];
    std::snprintf(params, sizeof(params), "%g", row.params);
    out += csv::quote(groups[row.family_rank].family) + "," + csv::quote(row.report->model_id) + "," + params + "," +
           std::string(to_string(row.report->dataset)) + "," + row.report->net_gain_str() + "\n";
  }
  return out;
}

}  // namespace market_loop
