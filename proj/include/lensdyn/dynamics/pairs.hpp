#pragma once

#include <map>
#include <vector>

#include "lensdyn/synth/recall.hpp"

namespace lensdyn {

/// Two queries of one fact: p_r answered correctly, p_w hallucinated.
struct RecallPair {
  int pair_id = 0;
  std::size_t fact = 0;
  std::size_t template_r = 0;
  std::size_t template_w = 0;
  std::vector<TokenId> prompt_r;
  std::vector<TokenId> prompt_w;
  TokenId a_r = 0;  // first token of the object
  TokenId a_w = 0;  // first generated token under p_w
  std::vector<TokenId> generated_r;
  std::vector<TokenId> generated_w;
};

inline constexpr int kDefaultPairCap = 4;

/// Enumerates (Correct, Incorrect) combinations per fact in template order,
/// keeping at most `cap` per fact. Filtered queries take part in neither role.
inline std::vector<RecallPair> build_recall_pairs(const std::vector<QueryOutcome>& outcomes, const World& world,
                                                  const Vocab& vocab, int cap = kDefaultPairCap) {
  if (cap < 1) throw SpecError("pair cap must be >= 1");
  std::map<std::size_t, std::vector<const QueryOutcome*>> by_fact;
  for (const auto& o : outcomes) by_fact[o.fact].push_back(&o);

  std::vector<RecallPair> pairs;
  for (auto& [fact, queries] : by_fact) {
    std::stable_sort(queries.begin(), queries.end(),
                     [](const auto* a, const auto* b) { return a->template_index < b->template_index; });
    const auto answers = answer_tokens(world.facts.at(fact), vocab);
    int emitted = 0;
    for (const auto* r : queries) {
      if (r->label != OutputLabel::Correct) continue;
      for (const auto* w : queries) {
        if (w->label != OutputLabel::Incorrect || emitted >= cap) continue;
        if (w->generated.empty()) continue;
        RecallPair p;
        p.pair_id = static_cast<int>(pairs.size());
        p.fact = fact;
        p.template_r = r->template_index;
        p.template_w = w->template_index;
        p.prompt_r = r->prompt;
        p.prompt_w = w->prompt;
        p.a_r = answers.front();
        p.a_w = w->generated.front();
        p.generated_r = r->generated;
        p.generated_w = w->generated;
        pairs.push_back(std::move(p));
        ++emitted;
      }
    }
  }
  return pairs;
}

}  // namespace lensdyn
