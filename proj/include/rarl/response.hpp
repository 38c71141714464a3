#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <set>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rarl/errors.hpp"
#include "rarl/ordinal.hpp"

namespace rarl {

// Fills the [Rule] / [Value_Range] slots of the instruction template.
struct PromptSpec {
  std::string rule;         // e.g. "age"
  std::string value_range;  // e.g. "0-100"
  int num_images = 1;

  void validate() const {
    if (rule.empty()) throw ConfigInvalid("PromptSpec: rule must be non-empty");
    if (value_range.empty()) throw ConfigInvalid("PromptSpec: value_range must be non-empty");
    if (num_images < 1) throw ConfigInvalid("PromptSpec: num_images must be >= 1");
  }
};

// One model output in structured form. format_ok = true guarantees
// non-empty entries with distinct, expected ids and finite values.
struct ParsedResponse {
  std::string raw_text;
  std::vector<std::pair<int, double>> entries;  // (image_id, value) in appearance order
  Permutation pred_perm;                        // entry ids in appearance order
  bool format_ok = false;
  std::optional<std::string> parse_error;
};

inline constexpr const char* kSystemPrompt =
    "The user asks a question, and the Assistant solves it. The assistant first "
    "thinks about the reasoning process in the mind and then provides the user "
    "with the answer. The reasoning process and answer are enclosed within "
    "<think> </think> and <answer> </answer> tags, respectively, i.e., <think> "
    "reasoning process here </think> <answer> answer here </answer>.";

inline constexpr const char* kInstructTemplate =
    "Analyze each image to determine the [Rule], and if there are multiple "
    "images, sort them in ascending order of [Rule]. Output the results as a "
    "JSON list of dictionaries in this format: [{'image_id': number, 'value': "
    "value}, ...], where value is the [Rule] ([Value_Range]). Ensure the list "
    "is sorted correctly with strictly followed syntax.";

namespace detail {

inline void replace_all(std::string& text, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
}

// Shortest round-trip decimal form, always carrying a decimal point or
// exponent so values read back as floating point.
inline std::string format_value(double v) {
  std::string s = nlohmann::json(v).dump();
  if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
      s.find('E') == std::string::npos) {
    s += ".0";
  }
  return s;
}

inline std::size_t count_occurrences(const std::string& text, const std::string& needle) {
  std::size_t count = 0, pos = 0;
  while ((pos = text.find(needle, pos)) != std::string::npos) {
    ++count;
    pos += needle.size();
  }
  return count;
}

inline bool is_all_whitespace(const std::string& s) {
  for (char c : s) {
    if (c != ' ' && c != '\t' && c != '\n' && c != '\r' && c != '\f' && c != '\v') return false;
  }
  return true;
}

}  // namespace detail

// System prompt + instruction with both slots substituted. Byte-stable for
// identical inputs.
inline std::string build_prompt(const PromptSpec& spec) {
  spec.validate();
  std::string instruct = kInstructTemplate;
  detail::replace_all(instruct, "[Rule]", spec.rule);
  detail::replace_all(instruct, "[Value_Range]", spec.value_range);
  return std::string(kSystemPrompt) + "\n\n" + instruct;
}

// <think>...</think><answer>[{"image_id": n, "value": v}, ...]</answer>
// with one canonical spacing so logs are byte-stable.
inline std::string serialize_response(const std::vector<std::pair<int, double>>& entries,
                                      const std::string& think_text) {
  if (entries.empty()) throw EmptyEntries("serialize_response: no entries");
  std::unordered_set<int> seen;
  for (const auto& [id, value] : entries) {
    if (!seen.insert(id).second) {
      throw DuplicateIds("serialize_response: duplicate image_id " + std::to_string(id));
    }
    if (!std::isfinite(value)) {
      throw NonFiniteValue("serialize_response: non-finite value for image_id " +
                           std::to_string(id));
    }
  }
  std::string out = "<think>";
  out += think_text;
  out += "</think><answer>[";
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (i > 0) out += ", ";
    out += "{\"image_id\": ";
    out += std::to_string(entries[i].first);
    out += ", \"value\": ";
    out += detail::format_value(entries[i].second);
    out += "}";
  }
  out += "]</answer>";
  return out;
}

// Accepts arbitrary bytes and never throws: every failure is encoded in the
// result. format_ok requires exactly one think block followed by exactly one
// answer block (whitespace-only text outside the tags), an answer body that
// is a JSON array of objects with integer "image_id" and numeric "value",
// and distinct ids drawn from expected_ids.
inline ParsedResponse parse_response(const std::string& raw, const std::set<int>& expected_ids) {
  ParsedResponse pr;
  pr.raw_text = raw;
  auto fail = [&pr](const std::string& why) {
    pr.format_ok = false;
    pr.parse_error = why;
    pr.entries.clear();
    pr.pred_perm.order.clear();
    return pr;
  };

  static const std::string kThinkOpen = "<think>";
  static const std::string kThinkClose = "</think>";
  static const std::string kAnswerOpen = "<answer>";
  static const std::string kAnswerClose = "</answer>";
  if (detail::count_occurrences(raw, kThinkOpen) != 1 ||
      detail::count_occurrences(raw, kThinkClose) != 1 ||
      detail::count_occurrences(raw, kAnswerOpen) != 1 ||
      detail::count_occurrences(raw, kAnswerClose) != 1) {
    return fail("expected exactly one <think> block and one <answer> block");
  }
  const std::size_t think_open = raw.find(kThinkOpen);
  const std::size_t think_close = raw.find(kThinkClose);
  const std::size_t answer_open = raw.find(kAnswerOpen);
  const std::size_t answer_close = raw.find(kAnswerClose);
  if (!(think_open < think_close && think_close < answer_open && answer_open < answer_close)) {
    return fail("tags out of order");
  }
  if (!detail::is_all_whitespace(raw.substr(0, think_open)) ||
      !detail::is_all_whitespace(raw.substr(think_close + kThinkClose.size(),
                                            answer_open - think_close - kThinkClose.size())) ||
      !detail::is_all_whitespace(raw.substr(answer_close + kAnswerClose.size()))) {
    return fail("unexpected text outside the tag blocks");
  }

  const std::string body = raw.substr(answer_open + kAnswerOpen.size(),
                                      answer_close - answer_open - kAnswerOpen.size());
  const nlohmann::json parsed = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) return fail("answer body is not valid JSON");
  if (!parsed.is_array()) return fail("answer body is not a JSON array");
  if (parsed.empty()) return fail("answer array is empty");

  std::vector<std::pair<int, double>> entries;
  std::unordered_set<int> seen;
  for (const auto& element : parsed) {
    if (!element.is_object()) return fail("answer array element is not an object");
    if (!element.contains("image_id") || !element["image_id"].is_number_integer()) {
      return fail("element missing integer image_id");
    }
    if (!element.contains("value") || !element["value"].is_number()) {
      return fail("element missing numeric value");
    }
    const auto wide_id = element["image_id"].get<std::int64_t>();
    if (wide_id < std::numeric_limits<int>::min() || wide_id > std::numeric_limits<int>::max()) {
      return fail("image_id out of range");
    }
    const int id = static_cast<int>(wide_id);
    const double value = element["value"].get<double>();
    if (!std::isfinite(value)) return fail("value is not finite");
    if (!seen.insert(id).second) {
      return fail("duplicate image_id " + std::to_string(id));
    }
    if (expected_ids.find(id) == expected_ids.end()) {
      return fail("unexpected image_id " + std::to_string(id));
    }
    entries.emplace_back(id, value);
  }

  pr.entries = std::move(entries);
  pr.pred_perm.order.clear();
  for (const auto& [id, value] : pr.entries) {
    (void)value;
    pr.pred_perm.order.push_back(id);
  }
  pr.format_ok = true;
  return pr;
}

// Binary structured-output compliance signal.
inline double format_reward(const ParsedResponse& pr) { return pr.format_ok ? 1.0 : 0.0; }

}  // namespace rarl
