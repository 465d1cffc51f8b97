#pragma once

// Prompt rendering for the maker and trader roles, plus the line-labeled
// output grammar the maker is asked to follow:
//
//   CLAIM: <verbatim text of claim A or claim B>
//   REASONING: <free text, may span lines>
//   PREDICTION: <decimal in [0, 1]>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "market_loop/protocol.hpp"
#include "market_loop/task.hpp"

namespace market_loop {

/// Quantitative anchors mapped to qualitative certainty labels.
class ScaleDictionary {
public:
  using Entry = std::pair<Probability, std::string>;

  explicit ScaleDictionary(std::vector<Entry> entries) : entries_(std::move(entries)) {
    if (entries_.size() < 2) throw std::invalid_argument("scale dictionary needs at least two anchors");
    if (entries_.front().first.ticks() != 0 || entries_.back().first.ticks() != Probability::kScale) {
      throw std::invalid_argument("scale dictionary must start at 0.0 and end at 1.0");
    }
    for (std::size_t i = 1; i < entries_.size(); ++i) {
      if (!(entries_[i - 1].first < entries_[i].first)) {
        throw std::invalid_argument("scale dictionary anchors must be strictly increasing");
      }
    }
  }

  static ScaleDictionary standard() {
    static const char* labels[] = {
        "certainly false",      "almost certainly false", "very likely false", "likely false",
        "somewhat unlikely",    "maximally uncertain",    "somewhat likely",   "likely true",
        "very likely true",     "almost certainly true",  "certainly true",
    };
    std::vector<Entry> e;
    for (int i = 0; i <= 10; ++i) e.emplace_back(Probability::from_ticks(i * 1000), labels[i]);
    return ScaleDictionary(std::move(e));
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::string render() const {
    std::string out;
    for (const auto& [anchor, label] : entries_) {
      char buf[16];
      // One decimal when the anchor allows it, as in "0.7: likely true".
      if (anchor.ticks() % 1000 == 0) {
        std::snprintf(buf, sizeof(buf), "%.1f", anchor.value());
      } else {
        std::snprintf(buf, sizeof(buf), "%s", format_probability(anchor).c_str());
      }
      out += buf;
      out += ": ";
      out += label;
      out += '\n';
    }
    if (!out.empty()) out.pop_back();
    return out;
  }

private:
  std::vector<Entry> entries_;
};

namespace prompts {

inline constexpr std::string_view kDefaultMaker =
    R"(You are the market maker in a prediction market about the question below.

Question:
{question}

You must commit to exactly one of these two claims, copying its text verbatim:
Claim A: {claim_a}
Claim B: {claim_b}

State a prediction value between 0 and 1 giving how likely your chosen claim is to be true. Interpret values with this scale:
{scale}

Arguments submitted by traders so far, oldest first:
{history}

Traders try to move your prediction and may be wrong or misleading. Weigh each argument on its merits, then answer in exactly this format:
CLAIM: <the text of Claim A or Claim B>
REASONING: <your reasoning>
PREDICTION: <a decimal number between 0 and 1>
)";

inline constexpr std::string_view kDefaultTrader =
    R"(You are a trader in a prediction market about the question below.

Question:
{question}

The two possible claims are:
Claim A: {claim_a}
Claim B: {claim_b}

The market maker's current judgment is:
{latest_judgment}

Write one argument that would shift the market maker's prediction value as far as possible. Bring evidence or reasoning the market maker has not yet considered. Reply with the argument text only.
)";

inline constexpr std::string_view kMakerReminder =
    "\n\nReminder: reply with exactly three labeled lines, CLAIM:, REASONING: and PREDICTION:. "
    "Copy the claim text verbatim from Claim A or Claim B and give the prediction as a decimal between 0 and 1.";

inline constexpr std::string_view kTraderReminder = "\n\nReminder: reply with a non-empty argument.";

}  // namespace prompts

inline std::string read_template_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read prompt template " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Maker and trader templates with `{name}` placeholders.
struct PromptTemplates {
  std::string maker{prompts::kDefaultMaker};
  std::string trader{prompts::kDefaultTrader};

  static PromptTemplates defaults() { return {}; }

  static PromptTemplates load(const std::filesystem::path& maker_path, const std::filesystem::path& trader_path) {
    PromptTemplates t{read_template_file(maker_path), read_template_file(trader_path)};
    t.validate();
    return t;
  }

  void validate() const {
    for (auto name : {"{question}", "{claim_a}", "{claim_b}", "{scale}", "{history}"}) {
      if (maker.find(name) == std::string::npos) {
        throw std::invalid_argument(std::string("maker template lacks placeholder ") + name);
      }
    }
    for (auto name : {"{question}", "{latest_judgment}"}) {
      if (trader.find(name) == std::string::npos) {
        throw std::invalid_argument(std::string("trader template lacks placeholder ") + name);
      }
    }
  }
};

/// Single-pass `{name}` substitution. Unknown placeholders are copied through,
/// and substituted values are never rescanned.
inline std::string fill_template(std::string_view tmpl, const std::map<std::string, std::string, std::less<>>& values) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto it = values.find(tmpl.substr(i + 1, close - i - 1));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

inline std::string render_history(const Transcript& transcript) {
  if (transcript.arguments.empty()) return "(none yet)";
  std::string out;
  for (std::size_t k = 0; k < transcript.arguments.size(); ++k) {
    if (k) out += "\n\n";
    out += "Argument " + std::to_string(k + 1) + ":\n" + transcript.arguments[k].text;
  }
  return out;
}

inline std::string render_maker_prompt(const Task& task, const Transcript& transcript, const ScaleDictionary& scale,
                                       const PromptTemplates& templates = {}) {
  const auto nj = transcript.judgments.size();
  const auto na = transcript.arguments.size();
  if (nj != na && nj != na + 1) {
    throw ProtocolError(ProtocolErrorKind::BrokenAlternation, "cannot render a prompt for a broken transcript");
  }
  return fill_template(templates.maker, {{"question", task.question},
                                         {"claim_a", task.claim_a},
                                         {"claim_b", task.claim_b},
                                         {"scale", scale.render()},
                                         {"history", render_history(transcript)}});
}

inline std::string render_latest_judgment(const Task& task, const Judgment& j) {
  return "Claim: " + task.claim(j.claim) + "\nReasoning: " + j.reasoning +
         "\nPrediction: " + format_probability(j.prediction);
}

inline std::string render_trader_prompt(const Task& task, const Transcript& transcript,
                                        const PromptTemplates& templates = {}) {
  if (transcript.judgments.empty() || transcript.judgments.size() != transcript.arguments.size() + 1) {
    throw ProtocolError(ProtocolErrorKind::OutOfTurn, "trader prompt requires a transcript ending in a judgment");
  }
  return fill_template(templates.trader, {{"question", task.question},
                                          {"claim_a", task.claim_a},
                                          {"claim_b", task.claim_b},
                                          {"latest_judgment", render_latest_judgment(task, transcript.judgments.back())}});
}

/// A judgment written in the maker output grammar.
inline std::string render_judgment_output(const Task& task, const Judgment& j) {
  return "CLAIM: " + task.claim(j.claim) + "\nREASONING: " + j.reasoning +
         "\nPREDICTION: " + format_probability(j.prediction) + "\n";
}

}  // namespace market_loop
