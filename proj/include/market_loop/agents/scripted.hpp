#pragma once

// Deterministic agents for simulation and tests.
//
// Makers always state the task's true claim (the adversarial maker states
// the false one) and move their prediction according to the policy. They do
// not read the trader's arguments, so session outcomes follow from policy
// arithmetic alone. All randomness is derived from (seed, task, round, role)
// and all arithmetic is on integer ten-thousandths.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "market_loop/protocol.hpp"
#include "market_loop/random.hpp"
#include "market_loop/task.hpp"

namespace market_loop {

enum class PolicyId { TruthConvergent, Stubborn, Adversarial, NoisyWalk };

constexpr std::string_view to_string(PolicyId p) {
  switch (p) {
    case PolicyId::TruthConvergent: return "truth-convergent";
    case PolicyId::Stubborn: return "stubborn";
    case PolicyId::Adversarial: return "adversarial";
    case PolicyId::NoisyWalk: return "noisy-walk";
  }
  return "unknown";
}

inline PolicyId policy_from_string(std::string_view s) {
  for (auto p : {PolicyId::TruthConvergent, PolicyId::Stubborn, PolicyId::Adversarial, PolicyId::NoisyWalk}) {
    if (s == to_string(p)) return p;
  }
  throw std::invalid_argument("unknown scripted policy \"" + std::string(s) + "\"");
}

struct ScriptedPolicy {
  PolicyId id = PolicyId::TruthConvergent;
  double step_size = 0.1;
  double noise_scale = 0.0;
  Probability target = Probability::from_ticks(Probability::kScale);
  Probability start = Probability::from_ticks(Probability::kScale / 2);

  bool operator==(const ScriptedPolicy&) const = default;

  void validate() const {
    if (!(step_size >= 0.0 && step_size <= 1.0)) {
      throw std::invalid_argument("step_size must lie in [0, 1], got " + std::to_string(step_size));
    }
    if (!(noise_scale >= 0.0 && noise_scale <= 0.5)) {
      throw std::invalid_argument("noise_scale must lie in [0, 0.5], got " + std::to_string(noise_scale));
    }
  }

  std::int32_t step_ticks() const { return static_cast<std::int32_t>(std::llround(step_size * Probability::kScale)); }
  std::int32_t noise_ticks() const { return static_cast<std::int32_t>(std::llround(noise_scale * Probability::kScale)); }
};

namespace detail {

inline PortableRng step_rng(std::uint64_t seed, std::string_view task_id, std::size_t round, Role role) {
  return PortableRng(seed ^ splitmix64(fnv1a64(task_id) + round * 0x632be59bd9b4e019ULL +
                                      static_cast<std::uint64_t>(role)));
}

inline Probability move_toward(Probability from, Probability target, std::int32_t step) {
  const auto f = from.ticks();
  const auto t = target.ticks();
  if (f < t) return Probability::from_ticks(std::min(f + step, t));
  return Probability::from_ticks(std::max(f - step, t));
}

}  // namespace detail

/// Produces the next event for `role` given the session so far.
inline Event scripted_step(const ScriptedPolicy& policy, std::uint64_t seed, Role role, const Transcript& transcript,
                           const Task& task) {
  const std::size_t round = transcript.judgments.size() - (role == Role::Trader ? 1 : 0);
  auto rng = detail::step_rng(seed, task.task_id, round, role);

  if (role == Role::MarketMaker) {
    if (transcript.judgments.size() != transcript.arguments.size()) {
      throw ProtocolError(ProtocolErrorKind::OutOfTurn, "scripted maker asked to act out of turn");
    }
    Judgment j;
    j.round_index = round;
    j.claim = policy.id == PolicyId::Adversarial ? opposite(task.truth) : task.truth;
    const bool first = transcript.judgments.empty();
    const Probability prev = first ? policy.start : transcript.judgments.back().prediction;

    switch (policy.id) {
      case PolicyId::TruthConvergent:
      case PolicyId::Adversarial:
        j.prediction = first ? prev : detail::move_toward(prev, policy.target, policy.step_ticks());
        break;
      case PolicyId::Stubborn:
        j.prediction = prev;
        break;
      case PolicyId::NoisyWalk: {
        if (first) {
          j.prediction = prev;
          break;
        }
        const auto n = policy.noise_ticks();
        const auto delta = static_cast<std::int32_t>(rng.below(2 * static_cast<std::uint64_t>(n) + 1)) - n;
        j.prediction = Probability::from_ticks(std::clamp(prev.ticks() + delta, 0, Probability::kScale));
        break;
      }
    }
    j.reasoning = std::string("Scripted ") + std::string(to_string(policy.id)) + " maker, round " +
                  std::to_string(round) + ".";
    return j;
  }

  if (transcript.judgments.size() != transcript.arguments.size() + 1) {
    throw ProtocolError(ProtocolErrorKind::OutOfTurn, "scripted trader asked to act out of turn");
  }
  TraderArgument a;
  a.round_index = round;
  switch (policy.id) {
    case PolicyId::TruthConvergent:
      a.text = "Round " + std::to_string(round) + ": the evidence supports \"" + task.claim(task.truth) + "\".";
      break;
    case PolicyId::Adversarial:
      a.text = "Round " + std::to_string(round) + ": the evidence supports \"" + task.claim(opposite(task.truth)) + "\".";
      break;
    case PolicyId::Stubborn:
      a.text = "The current prediction is mistaken.";
      break;
    case PolicyId::NoisyWalk: {
      const auto side = rng.below(2) == 0 ? ClaimSide::A : ClaimSide::B;
      a.text = "Round " + std::to_string(round) + ": consider \"" + task.claim(side) + "\".";
      break;
    }
  }
  return a;
}

}  // namespace market_loop
