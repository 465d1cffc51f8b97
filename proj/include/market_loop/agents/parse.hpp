#pragma once

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "market_loop/protocol.hpp"
#include "market_loop/task.hpp"

namespace market_loop {

enum class ParseErrorKind { MissingField, DuplicateField, ClaimNotCanonical, PredictionOutOfRange, PredictionUnparseable };

constexpr std::string_view to_string(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::MissingField: return "MissingField";
    case ParseErrorKind::DuplicateField: return "DuplicateField";
    case ParseErrorKind::ClaimNotCanonical: return "ClaimNotCanonical";
    case ParseErrorKind::PredictionOutOfRange: return "PredictionOutOfRange";
    case ParseErrorKind::PredictionUnparseable: return "PredictionUnparseable";
  }
  return "unknown";
}

class ParseError : public std::runtime_error {
public:
  // `detail` is the field name, the offending claim text, or the raw number.
  ParseError(ParseErrorKind kind, std::string detail)
      : std::runtime_error(std::string(to_string(kind)) + "(" + detail + ")"), kind_(kind), detail_(std::move(detail)) {}

  ParseErrorKind kind() const { return kind_; }
  const std::string& detail() const { return detail_; }

private:
  ParseErrorKind kind_;
  std::string detail_;
};

/// Trim, collapse whitespace runs to one space, ASCII lower-case.
inline std::string normalize_claim(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

enum Field { kClaim = 0, kReasoning = 1, kPrediction = 2 };
inline constexpr std::array<std::string_view, 3> kLabels = {"CLAIM", "REASONING", "PREDICTION"};

// Recognizes `LABEL:` at the start of a line, tolerating leading
// whitespace and markdown decoration such as `**CLAIM:**` or `## CLAIM:`.
// On success returns the field and sets `rest` to the text after the colon.
inline std::optional<Field> match_label(std::string_view line, std::string_view& rest) {
  std::size_t i = 0;
  while (i < line.size() && (std::isspace(static_cast<unsigned char>(line[i])) || line[i] == '*' || line[i] == '#')) ++i;
  for (int f = 0; f < 3; ++f) {
    const auto label = kLabels[f];
    if (line.size() - i < label.size()) continue;
    bool eq = true;
    for (std::size_t k = 0; k < label.size(); ++k) {
      if (std::toupper(static_cast<unsigned char>(line[i + k])) != label[k]) {
        eq = false;
        break;
      }
    }
    if (!eq) continue;
    std::size_t j = i + label.size();
    while (j < line.size() && line[j] == '*') ++j;
    if (j >= line.size() || line[j] != ':') continue;
    ++j;
    while (j < line.size() && line[j] == '*') ++j;
    rest = line.substr(j);
    return static_cast<Field>(f);
  }
  return std::nullopt;
}

inline Probability parse_prediction(std::string_view block) {
  const auto text = trim(block);
  if (text.empty()) throw ParseError(ParseErrorKind::MissingField, "PREDICTION");

  std::string_view num = text;
  if (num.front() == '+') num.remove_prefix(1);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(num.data(), num.data() + num.size(), value);
  const std::string token(text.substr(0, text.find_first_of(" \t\r\n")));
  if (ec != std::errc() || ptr == num.data()) throw ParseError(ParseErrorKind::PredictionUnparseable, token);

  // Only a separator may follow the number: "0.85", "0.85 (likely)", "0.85." are fine; "0.85abc", "85%", "0,85" are not.
  const auto consumed = static_cast<std::size_t>(ptr - num.data());
  if (consumed < num.size()) {
    const char next = num[consumed];
    const bool then_digit = consumed + 1 < num.size() && std::isdigit(static_cast<unsigned char>(num[consumed + 1]));
    const bool then_end = consumed + 1 == num.size() || std::isspace(static_cast<unsigned char>(num[consumed + 1]));
    const bool ok = std::isspace(static_cast<unsigned char>(next)) || ((next == ',' || next == ';') && !then_digit) ||
                    next == ')' || (next == '.' && then_end);
    if (!ok) throw ParseError(ParseErrorKind::PredictionUnparseable, token);
  }
  if (!std::isfinite(value)) throw ParseError(ParseErrorKind::PredictionUnparseable, token);
  if (value < 0.0 || value > 1.0) {
    throw ParseError(ParseErrorKind::PredictionOutOfRange, std::string(num.substr(0, consumed)));
  }
  return Probability::from_double(value);
}

}  // namespace detail

/// Parses maker output in the CLAIM / REASONING / PREDICTION grammar.
///
/// Text before the first label is ignored. Each field runs until the next
/// label line. Errors are checked in order: missing or duplicate fields,
/// then the prediction, then the claim.
inline Judgment parse_judgment(std::string_view raw, const Task& task, std::size_t round_index = 0) {
  std::array<std::optional<std::string>, 3> fields;
  std::optional<detail::Field> current;

  std::size_t pos = 0;
  while (pos <= raw.size()) {
    auto end = raw.find('\n', pos);
    if (end == std::string_view::npos) end = raw.size();
    std::string_view line = raw.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);

    std::string_view rest;
    if (auto f = detail::match_label(line, rest)) {
      if (fields[*f]) throw ParseError(ParseErrorKind::DuplicateField, std::string(detail::kLabels[*f]));
      fields[*f] = std::string(rest);
      current = f;
    } else if (current) {
      *fields[*current] += '\n';
      *fields[*current] += line;
    }
    pos = end + 1;
  }

  for (int f = 0; f < 3; ++f) {
    if (!fields[f] || detail::trim(*fields[f]).empty()) {
      throw ParseError(ParseErrorKind::MissingField, std::string(detail::kLabels[f]));
    }
  }

  Judgment j;
  j.round_index = round_index;
  j.prediction = detail::parse_prediction(*fields[detail::kPrediction]);
  j.reasoning = std::string(detail::trim(*fields[detail::kReasoning]));

  const auto claim = normalize_claim(*fields[detail::kClaim]);
  if (claim == normalize_claim(task.claim_a)) {
    j.claim = ClaimSide::A;
  } else if (claim == normalize_claim(task.claim_b)) {
    j.claim = ClaimSide::B;
  } else {
    throw ParseError(ParseErrorKind::ClaimNotCanonical, std::string(detail::trim(*fields[detail::kClaim])));
  }
  return j;
}

/// Trader output is free text; only emptiness is an error.
inline TraderArgument parse_argument(std::string_view raw, std::size_t round_index) {
  const auto text = detail::trim(raw);
  if (text.empty()) throw ParseError(ParseErrorKind::MissingField, "ARGUMENT");
  return TraderArgument{std::string(text), round_index};
}

}  // namespace market_loop
