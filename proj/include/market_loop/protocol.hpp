#pragma once

// Market-making session state machine.
//
// A session alternates maker judgments and trader arguments:
//
//   J0, A0, J1, A1, ..., Jk
//
// and always ends on a judgment. It terminates when the last three
// prediction values span at most T, or when N judgments have been made.
// Everything here is a pure function over immutable values.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace market_loop {

/// Probability in [0, 1] at a fixed resolution of 1e-4.
///
/// Stored as integer ten-thousandths so that equality, the equilibrium
/// range test and the 4-digit wire format are exact.
class Probability {
public:
  static constexpr std::int32_t kScale = 10000;

  constexpr Probability() = default;

  static constexpr Probability from_ticks(std::int32_t ticks) {
    if (ticks < 0 || ticks > kScale) {
      throw std::out_of_range("probability ticks outside [0, 10000]: " + std::to_string(ticks));
    }
    Probability p;
    p.ticks_ = ticks;
    return p;
  }

  /// Rounds to the nearest 1e-4. Rejects NaN and anything outside [0, 1].
  static Probability from_double(double value) {
    if (!std::isfinite(value) || value < 0.0 || value > 1.0) {
      throw std::out_of_range("probability outside [0, 1]: " + std::to_string(value));
    }
    return from_ticks(static_cast<std::int32_t>(std::llround(value * kScale)));
  }

  constexpr std::int32_t ticks() const { return ticks_; }
  constexpr double value() const { return static_cast<double>(ticks_) / kScale; }

  constexpr auto operator<=>(const Probability&) const = default;

private:
  std::int32_t ticks_ = 0;
};

/// "0.8500" style rendering, the canonical wire form.
inline std::string format_probability(Probability p) {
  const auto t = p.ticks();
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%d.%04d", t / Probability::kScale, t % Probability::kScale);
  return buf;
}

enum class ClaimSide { A, B };

constexpr ClaimSide opposite(ClaimSide side) {
  return side == ClaimSide::A ? ClaimSide::B : ClaimSide::A;
}

constexpr std::string_view to_string(ClaimSide side) {
  return side == ClaimSide::A ? "A" : "B";
}

inline ClaimSide claim_side_from_string(std::string_view s) {
  if (s == "A") return ClaimSide::A;
  if (s == "B") return ClaimSide::B;
  throw std::invalid_argument("claim side must be \"A\" or \"B\", got \"" + std::string(s) + "\"");
}

struct Judgment {
  ClaimSide claim = ClaimSide::A;
  std::string reasoning;
  Probability prediction;
  std::size_t round_index = 0;

  bool operator==(const Judgment&) const = default;
};

struct TraderArgument {
  std::string text;
  // Index of the judgment this argument responds to.
  std::size_t round_index = 0;

  bool operator==(const TraderArgument&) const = default;
};

/// N (max_judgments, counting the initial judgment) and T (threshold).
struct EquilibriumConfig {
  int max_judgments = 10;
  Probability threshold = Probability::from_ticks(2000);

  bool operator==(const EquilibriumConfig&) const = default;

  static EquilibriumConfig make(int max_judgments, double threshold) {
    if (max_judgments < 1) {
      throw std::invalid_argument("max_judgments must be >= 1");
    }
    if (!std::isfinite(threshold) || threshold < 0.0 || threshold > 1.0) {
      throw std::invalid_argument("threshold must lie in [0, 1], got " + std::to_string(threshold));
    }
    return EquilibriumConfig{max_judgments, Probability::from_double(threshold)};
  }
};

enum class TerminationReason { Equilibrium, MaxJudgments, AgentFailure };

constexpr std::string_view to_string(TerminationReason r) {
  switch (r) {
    case TerminationReason::Equilibrium: return "equilibrium";
    case TerminationReason::MaxJudgments: return "max_judgments";
    case TerminationReason::AgentFailure: return "agent_failure";
  }
  return "unknown";
}

inline TerminationReason termination_from_string(std::string_view s) {
  if (s == "equilibrium") return TerminationReason::Equilibrium;
  if (s == "max_judgments") return TerminationReason::MaxJudgments;
  if (s == "agent_failure") return TerminationReason::AgentFailure;
  throw std::invalid_argument("unknown termination reason \"" + std::string(s) + "\"");
}

enum class Role { MarketMaker, Trader };

constexpr std::string_view to_string(Role r) {
  return r == Role::MarketMaker ? "maker" : "trader";
}

/// One retried agent step, kept in the transcript for auditability.
struct RetryRecord {
  Role role = Role::MarketMaker;
  std::size_t round_index = 0;
  int attempt = 0;  // 1-based attempt that failed
  std::string error;
  bool reminder_appended = false;

  bool operator==(const RetryRecord&) const = default;
};

struct SessionTiming {
  int agent_calls = 0;
  std::int64_t latency_ms = 0;  // remote calls only

  bool operator==(const SessionTiming&) const = default;
};

/// A session, either in progress (termination empty) or finished.
struct Transcript {
  std::string task_id;
  std::vector<Judgment> judgments;
  std::vector<TraderArgument> arguments;
  std::optional<TerminationReason> termination;
  EquilibriumConfig config_snapshot;
  std::vector<RetryRecord> retries;
  SessionTiming timing;

  bool operator==(const Transcript&) const = default;

  std::vector<Probability> predictions() const {
    std::vector<Probability> out;
    out.reserve(judgments.size());
    for (const auto& j : judgments) out.push_back(j.prediction);
    return out;
  }
};

enum class ProtocolErrorKind { OutOfTurn, InvalidRoundIndex, BrokenAlternation, AlreadyTerminated };

class ProtocolError : public std::logic_error {
public:
  ProtocolError(ProtocolErrorKind kind, const std::string& what) : std::logic_error(what), kind_(kind) {}
  ProtocolErrorKind kind() const { return kind_; }

private:
  ProtocolErrorKind kind_;
};

/// True iff there are at least three values and the last three span <= threshold.
inline bool check_equilibrium(std::span<const Probability> history, Probability threshold) {
  if (history.size() < 3) return false;
  const auto window = history.last(3);
  const auto [lo, hi] = std::minmax_element(window.begin(), window.end());
  return hi->ticks() - lo->ticks() <= threshold.ticks();
}

struct NeedJudgment {
  bool operator==(const NeedJudgment&) const = default;
};
struct NeedArgument {
  bool operator==(const NeedArgument&) const = default;
};
struct Terminate {
  TerminationReason reason;
  bool operator==(const Terminate&) const = default;
};

using Action = std::variant<NeedJudgment, NeedArgument, Terminate>;

inline Action next_action(const Transcript& session, const EquilibriumConfig& config) {
  if (session.termination) return Terminate{*session.termination};

  const auto nj = session.judgments.size();
  const auto na = session.arguments.size();
  if (nj != na && nj != na + 1) {
    throw ProtocolError(ProtocolErrorKind::BrokenAlternation,
                        "judgment count " + std::to_string(nj) + " incompatible with argument count " +
                            std::to_string(na));
  }
  const auto max_j = static_cast<std::size_t>(config.max_judgments);
  if (nj > max_j) {
    throw ProtocolError(ProtocolErrorKind::BrokenAlternation, "more judgments than max_judgments");
  }

  const auto preds = session.predictions();
  const bool at_equilibrium = check_equilibrium(preds, config.threshold);

  if (nj == na) {
    // Last event was an argument (or the session is empty). A terminal
    // condition here means the session continued past its end.
    if (nj > 0 && (at_equilibrium || nj == max_j)) {
      throw ProtocolError(ProtocolErrorKind::BrokenAlternation, "argument recorded after a terminal judgment");
    }
    return NeedJudgment{};
  }
  if (at_equilibrium) return Terminate{TerminationReason::Equilibrium};
  if (nj == max_j) return Terminate{TerminationReason::MaxJudgments};
  return NeedArgument{};
}

using Event = std::variant<Judgment, TraderArgument>;

/// Returns a copy of `session` with `event` appended.
inline Transcript append_event(const Transcript& session, const Event& event, const EquilibriumConfig& config) {
  if (session.termination) {
    throw ProtocolError(ProtocolErrorKind::AlreadyTerminated, "session already terminated");
  }
  const auto action = next_action(session, config);
  Transcript next = session;

  if (const auto* j = std::get_if<Judgment>(&event)) {
    if (!std::holds_alternative<NeedJudgment>(action)) {
      throw ProtocolError(ProtocolErrorKind::OutOfTurn, "judgment submitted when none is pending");
    }
    if (j->round_index != session.judgments.size()) {
      throw ProtocolError(ProtocolErrorKind::InvalidRoundIndex,
                          "judgment round " + std::to_string(j->round_index) + ", expected " +
                              std::to_string(session.judgments.size()));
    }
    next.judgments.push_back(*j);
  } else {
    const auto& a = std::get<TraderArgument>(event);
    if (!std::holds_alternative<NeedArgument>(action)) {
      throw ProtocolError(ProtocolErrorKind::OutOfTurn, "argument submitted when none is pending");
    }
    if (a.round_index + 1 != session.judgments.size()) {
      throw ProtocolError(ProtocolErrorKind::InvalidRoundIndex,
                          "argument round " + std::to_string(a.round_index) + ", expected " +
                              std::to_string(session.judgments.size() - 1));
    }
    next.arguments.push_back(a);
  }
  return next;
}

/// Marks the session finished if next_action says so. Returns the reason, if any.
inline std::optional<TerminationReason> settle(Transcript& session, const EquilibriumConfig& config) {
  const auto action = next_action(session, config);
  if (const auto* t = std::get_if<Terminate>(&action)) {
    session.termination = t->reason;
    return t->reason;
  }
  return std::nullopt;
}

/// Re-derives a transcript by feeding its events through append_event in
/// protocol order. AgentFailure is the only termination carried over
/// verbatim, since the protocol never produces it.
inline Transcript replay(const Transcript& recorded) {
  const auto& cfg = recorded.config_snapshot;
  Transcript session;
  session.task_id = recorded.task_id;
  session.config_snapshot = cfg;
  session.retries = recorded.retries;
  session.timing = recorded.timing;

  for (std::size_t i = 0; i < recorded.judgments.size(); ++i) {
    session = append_event(session, recorded.judgments[i], cfg);
    if (i < recorded.arguments.size()) session = append_event(session, recorded.arguments[i], cfg);
  }
  if (recorded.arguments.size() > recorded.judgments.size()) {
    throw ProtocolError(ProtocolErrorKind::BrokenAlternation, "more arguments than judgments");
  }
  if (!settle(session, cfg) && recorded.termination == TerminationReason::AgentFailure) {
    session.termination = TerminationReason::AgentFailure;
  }
  return session;
}

}  // namespace market_loop
