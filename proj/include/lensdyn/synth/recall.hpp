#pragma once

#include <map>
#include <string>
#include <vector>

#include "lensdyn/core/model.hpp"
#include "lensdyn/dynamics/labels.hpp"
#include "lensdyn/synth/world.hpp"

namespace lensdyn {

inline constexpr int kRecallTokens = 10;

struct QueryOutcome {
  std::size_t fact = 0;
  std::size_t template_index = 0;
  std::vector<TokenId> prompt;     // BOS + prompt tokens
  std::vector<TokenId> generated;  // up to kRecallTokens, EOS included when emitted
  OutputLabel label = OutputLabel::Incorrect;
};

struct RecallCell {
  std::string relation_id;
  std::size_t template_index = 0;
  int n = 0;
  int answered = 0;  // answer present (Correct or Filtered)
  int filtered = 0;

  double accuracy() const { return n == 0 ? 0.0 : static_cast<double>(answered) / n; }
};

struct RecallTable {
  std::vector<QueryOutcome> outcomes;  // fact-major, template-minor
  std::vector<RecallCell> cells;       // registry order

  double template_accuracy(std::size_t template_index) const {
    int n = 0, a = 0;
    for (const auto& c : cells)
      if (c.template_index == template_index) n += c.n, a += c.answered;
    return n == 0 ? 0.0 : static_cast<double>(a) / n;
  }
};

inline std::vector<RecallCell> tabulate_recall(const World& world, const std::vector<QueryOutcome>& outcomes) {
  std::map<std::pair<std::string, std::size_t>, RecallCell> cells;
  for (const auto& o : outcomes) {
    const auto& rel = world.facts[o.fact].relation_id;
    auto& c = cells[{rel, o.template_index}];
    c.relation_id = rel;
    c.template_index = o.template_index;
    ++c.n;
    if (o.label != OutputLabel::Incorrect) ++c.answered;
    if (o.label == OutputLabel::Filtered) ++c.filtered;
  }
  std::vector<RecallCell> out;
  for (const auto& r : world.registry.relations())
    for (std::size_t t = 0; t < r.templates.size(); ++t)
      if (auto it = cells.find({r.relation_id, t}); it != cells.end()) out.push_back(it->second);
  return out;
}

/// Greedy-decodes every template of every listed fact and labels the result.
inline RecallTable evaluate_recall(const Weights& weights, const World& world, const std::vector<std::size_t>& facts,
                                   const Vocab& vocab, const CompiledFilter& filter) {
  RecallTable table;
  for (std::size_t i : facts) {
    const auto& f = world.facts.at(i);
    const auto answers = answer_tokens(f, vocab);
    const auto& templates = world.registry.at(f.relation_id).templates;
    for (std::size_t t = 0; t < templates.size(); ++t) {
      QueryOutcome o;
      o.fact = i;
      o.template_index = t;
      o.prompt = encode_prompt(render_query(f, templates[t]), vocab);
      o.generated = greedy_generate(o.prompt, weights, kRecallTokens);
      o.label = label_output(o.generated, answers, filter);
      table.outcomes.push_back(std::move(o));
    }
  }
  table.cells = tabulate_recall(world, table.outcomes);
  return table;
}

inline std::string recall_csv(const std::vector<RecallCell>& cells) {
  std::string out = "relation_id,template_index,n,answered,filtered,accuracy\n";
  char buf[32];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%.6f", c.accuracy());
    out += c.relation_id + "," + std::to_string(c.template_index) + "," + std::to_string(c.n) + "," +
           std::to_string(c.answered) + "," + std::to_string(c.filtered) + "," + buf + "\n";
  }
  return out;
}

}  // namespace lensdyn
