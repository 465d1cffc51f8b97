#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <string_view>

#include "market_loop/protocol.hpp"

namespace market_loop {

enum class DatasetKind { TruthfulQA, ScruplesDilemmas, EthicsJustice, EthicsCommonsense, CommonsenseQA2 };

inline constexpr std::array<DatasetKind, 5> kAllDatasets = {
    DatasetKind::TruthfulQA, DatasetKind::ScruplesDilemmas, DatasetKind::CommonsenseQA2,
    DatasetKind::EthicsCommonsense, DatasetKind::EthicsJustice};

constexpr std::string_view to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::TruthfulQA: return "truthfulqa";
    case DatasetKind::ScruplesDilemmas: return "scruples-dilemmas";
    case DatasetKind::EthicsJustice: return "ethics-justice";
    case DatasetKind::EthicsCommonsense: return "ethics-commonsense";
    case DatasetKind::CommonsenseQA2: return "csqa2";
  }
  return "unknown";
}

// Column headings used in reports.
constexpr std::string_view display_name(DatasetKind k) {
  switch (k) {
    case DatasetKind::TruthfulQA: return "TruthfulQA";
    case DatasetKind::ScruplesDilemmas: return "Scruples";
    case DatasetKind::EthicsJustice: return "ETHICS-J";
    case DatasetKind::EthicsCommonsense: return "ETHICS-C";
    case DatasetKind::CommonsenseQA2: return "CommonsenseQA";
  }
  return "unknown";
}

inline DatasetKind dataset_kind_from_string(std::string_view s) {
  for (auto k : kAllDatasets) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown dataset kind \"" + std::string(s) + "\"");
}

/// One binarized benchmark item.
struct Task {
  std::string task_id;
  std::string question;
  std::string claim_a;
  std::string claim_b;
  ClaimSide truth = ClaimSide::A;
  DatasetKind dataset = DatasetKind::TruthfulQA;
  std::string provenance;

  const std::string& claim(ClaimSide side) const { return side == ClaimSide::A ? claim_a : claim_b; }

  bool operator==(const Task&) const = default;
};

// FNV-1a, 64-bit. Stable across platforms; used for task ids, side
// placement and config hashes. Not a security primitive.
constexpr std::uint64_t fnv1a64(std::string_view data, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace market_loop
