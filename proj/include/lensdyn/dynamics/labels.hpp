#pragma once

#include <algorithm>
#include <filesystem>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/fs.hpp"
#include "lensdyn/core/vocab.hpp"

namespace lensdyn {

enum class OutputLabel { Correct, Incorrect, Filtered };

inline const char* to_string(OutputLabel l) {
  switch (l) {
    case OutputLabel::Correct: return "correct";
    case OutputLabel::Incorrect: return "incorrect";
    case OutputLabel::Filtered: return "filtered";
  }
  return "?";
}

inline OutputLabel parse_output_label(std::string_view s) {
  if (s == "correct") return OutputLabel::Correct;
  if (s == "incorrect") return OutputLabel::Incorrect;
  if (s == "filtered") return OutputLabel::Filtered;
  throw FormatError("unknown output label '" + std::string(s) + "'");
}

/// Negation and option-letter terms that disqualify a correct generation.
struct FilterSpec {
  std::vector<std::string> terms;

  static FilterSpec defaults() {
    return {{"not", "no", "never", "unknown", "unclear", "n't", "a)", "b)", "(a", "(b", "option"}};
  }

  static FilterSpec parse(std::string_view text) {
    FilterSpec f;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
      while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      f.terms.push_back(line.substr(first));
    }
    return f;
  }

  static FilterSpec load(const std::filesystem::path& path) { return parse(read_file(path)); }
};

/// Filter terms as token-id sequences for one vocabulary. Terms containing an
/// out-of-vocabulary word can never be generated and are dropped.
struct CompiledFilter {
  std::vector<std::vector<TokenId>> sequences;

  static CompiledFilter compile(const FilterSpec& spec, const Vocab& vocab) {
    CompiledFilter out;
    for (const auto& term : spec.terms) {
      auto words = split_words(term);
      if (words.empty()) continue;
      std::vector<TokenId> ids;
      bool known = true;
      for (const auto& w : words) {
        if (!vocab.contains(w)) {
          known = false;
          break;
        }
        ids.push_back(vocab.id(w));
      }
      if (known) out.sequences.push_back(std::move(ids));
    }
    return out;
  }

  bool matches(std::span<const TokenId> generated) const {
    for (const auto& seq : sequences)
      if (std::search(generated.begin(), generated.end(), seq.begin(), seq.end()) != generated.end()) return true;
    return false;
  }
};

/// Correct iff any answer token occurs among the generated tokens; a correct
/// generation that also contains a filter term is Filtered.
inline OutputLabel label_output(std::span<const TokenId> generated, std::span<const TokenId> answer_tokens,
                                const CompiledFilter& filter) {
  if (answer_tokens.empty()) throw SpecError("label_output: empty answer set");
  const bool hit = std::any_of(generated.begin(), generated.end(), [&](TokenId t) {
    return std::find(answer_tokens.begin(), answer_tokens.end(), t) != answer_tokens.end();
  });
  if (!hit) return OutputLabel::Incorrect;
  return filter.matches(generated) ? OutputLabel::Filtered : OutputLabel::Correct;
}

}  // namespace lensdyn
