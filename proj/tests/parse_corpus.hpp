#pragma once

// Hand-written malformed maker completions and the error each must raise.
// The task they are parsed against is testing::make_task().

#include <string>
#include <string_view>
#include <vector>

#include "market_loop/agents/parse.hpp"

namespace market_loop::testing {

struct Malformed {
  std::string raw;
  ParseErrorKind kind;
  std::string detail;
};

inline std::string completion(std::string_view claim, std::string_view reasoning, std::string_view prediction) {
  return "CLAIM: " + std::string(claim) + "\nREASONING: " + std::string(reasoning) + "\nPREDICTION: " +
         std::string(prediction) + "\n";
}

inline const std::vector<Malformed>& malformed_corpus() {
  static const std::string kA = "The kettle is boiling.";
  static const std::vector<Malformed> corpus = {
      // missing fields
      Malformed{"", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"The kettle is boiling, 90% sure.", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"CLAIM: " + kA + "\nPREDICTION: 0.8", ParseErrorKind::MissingField, "REASONING"},
      Malformed{"CLAIM: " + kA + "\nREASONING: hot", ParseErrorKind::MissingField, "PREDICTION"},
      Malformed{"REASONING: hot\nPREDICTION: 0.8", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"CLAIM:\nREASONING: hot\nPREDICTION: 0.8", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"CLAIM: " + kA + "\nREASONING:   \nPREDICTION: 0.8", ParseErrorKind::MissingField, "REASONING"},
      Malformed{"CLAIM: " + kA + "\nREASONING: hot\nPREDICTION:", ParseErrorKind::MissingField, "PREDICTION"},
      Malformed{"CLAIM " + kA + "\nREASONING hot\nPREDICTION 0.8", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"{\"claim\": \"" + kA + "\", \"reasoning\": \"hot\", \"prediction\": 0.8}",
                ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"PREDICTION: 0.8 CLAIM: " + kA + " REASONING: hot", ParseErrorKind::MissingField, "CLAIM"},
      Malformed{"Claims: " + kA + "\nREASONING: hot\nPREDICTION: 0.8", ParseErrorKind::MissingField, "CLAIM"},
      // duplicates
      Malformed{"CLAIM: " + kA + "\nCLAIM: The kettle is not boiling.\nREASONING: hot\nPREDICTION: 0.8",
                ParseErrorKind::DuplicateField, "CLAIM"},
      Malformed{"CLAIM: " + kA + "\nREASONING: hot\nPREDICTION: 0.8\nPREDICTION: 0.3",
                ParseErrorKind::DuplicateField, "PREDICTION"},
      Malformed{"CLAIM: " + kA + "\nREASONING: hot\nREASONING: cold\nPREDICTION: 0.8",
                ParseErrorKind::DuplicateField, "REASONING"},
      // out-of-range predictions
      Malformed{completion(kA, "hot", "1.2"), ParseErrorKind::PredictionOutOfRange, "1.2"},
      Malformed{completion(kA, "hot", "-0.1"), ParseErrorKind::PredictionOutOfRange, "-0.1"},
      Malformed{completion(kA, "hot", "85"), ParseErrorKind::PredictionOutOfRange, "85"},
      Malformed{completion(kA, "hot", "1e5"), ParseErrorKind::PredictionOutOfRange, "1e5"},
      Malformed{completion(kA, "hot", "1.0001"), ParseErrorKind::PredictionOutOfRange, "1.0001"},
      // unparseable predictions
      Malformed{completion(kA, "hot", "85%"), ParseErrorKind::PredictionUnparseable, "85%"},
      Malformed{completion(kA, "hot", "high"), ParseErrorKind::PredictionUnparseable, "high"},
      Malformed{completion(kA, "hot", "0.8abc"), ParseErrorKind::PredictionUnparseable, "0.8abc"},
      Malformed{completion(kA, "hot", "nan"), ParseErrorKind::PredictionUnparseable, "nan"},
      Malformed{completion(kA, "hot", "inf"), ParseErrorKind::PredictionUnparseable, "inf"},
      Malformed{completion(kA, "hot", "0,85"), ParseErrorKind::PredictionUnparseable, "0,85"},
      Malformed{completion(kA, "hot", "0.8.5"), ParseErrorKind::PredictionUnparseable, "0.8.5"},
      Malformed{completion(kA, "hot", "1/2"), ParseErrorKind::PredictionUnparseable, "1/2"},
      Malformed{completion(kA, "hot", "0x1p-1"), ParseErrorKind::PredictionUnparseable, "0x1p-1"},
      Malformed{completion(kA, "hot", "likely true (0.7)"), ParseErrorKind::PredictionUnparseable, "likely"},
      // non-canonical claims
      Malformed{completion("The kettle is warm.", "hot", "0.8"), ParseErrorKind::ClaimNotCanonical,
                "The kettle is warm."},
      Malformed{completion("A", "hot", "0.8"), ParseErrorKind::ClaimNotCanonical, "A"},
      Malformed{completion("Claim A: " + kA, "hot", "0.8"), ParseErrorKind::ClaimNotCanonical, "Claim A: " + kA},
      Malformed{completion("The kettle is boiling, I think.", "hot", "0.8"), ParseErrorKind::ClaimNotCanonical,
                "The kettle is boiling, I think."},
      Malformed{completion("Both claims are partly true.", "hot", "0.8"), ParseErrorKind::ClaimNotCanonical,
                "Both claims are partly true."},
      Malformed{"CLAIM: " + kA + "\nI am fairly sure about this.\nREASONING: hot\nPREDICTION: 0.8",
                ParseErrorKind::ClaimNotCanonical, kA + "\nI am fairly sure about this."},
      Malformed{completion("\"" + kA + "\"", "hot", "0.8"), ParseErrorKind::ClaimNotCanonical, "\"" + kA + "\""},
  };
  return corpus;
}

}  // namespace market_loop::testing
