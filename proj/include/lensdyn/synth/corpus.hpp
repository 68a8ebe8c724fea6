#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/vocab.hpp"
#include "lensdyn/synth/world.hpp"

namespace lensdyn {

struct CorpusSentence {
  std::size_t fact = 0;
  std::size_t template_index = 0;
  std::string text;  // prompt followed by the object

  bool operator==(const CorpusSentence&) const = default;
};

inline std::string render_sentence(const TripletFact& fact, std::string_view tmpl) {
  return render_query(fact, tmpl) + " " + fact.object;
}

/// Exposure-weighted training sentences, shuffled by `seed`. Each
/// (fact, template) pair appears floor(w * R) times plus one more with
/// probability frac(w * R), where w is the template's exposure weight and R
/// the spec's base_repeats.
inline std::vector<CorpusSentence> build_training_corpus(const World& world, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<CorpusSentence> out;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    const auto& f = world.facts[i];
    const auto& templates = world.registry.at(f.relation_id).templates;
    for (std::size_t t = 0; t < templates.size(); ++t) {
      const double expected = world.spec.exposure(t) * world.spec.base_repeats;
      auto copies = static_cast<long>(std::floor(expected));
      if (rng.uniform() < expected - std::floor(expected)) ++copies;
      if (copies == 0) continue;
      const auto text = render_sentence(f, templates[t]);
      for (long c = 0; c < copies; ++c) out.push_back({i, t, text});
    }
  }
  if (out.empty()) throw SpecError("training corpus is empty; raise base_repeats or exposure weights");
  rng.shuffle(std::span(out));
  return out;
}

/// Every template of every lens-holdout fact, once, in fact order.
inline std::vector<CorpusSentence> build_lens_corpus(const World& world) {
  std::vector<CorpusSentence> out;
  for (std::size_t i : world.lens_facts()) {
    const auto& f = world.facts[i];
    const auto& templates = world.registry.at(f.relation_id).templates;
    for (std::size_t t = 0; t < templates.size(); ++t) out.push_back({i, t, render_sentence(f, templates[t])});
  }
  return out;
}

/// BOS + tokens + EOS.
inline std::vector<TokenId> encode_sentence(std::string_view text, const Vocab& vocab) {
  std::vector<TokenId> ids{Vocab::kBos};
  for (TokenId t : tokenize(text, vocab)) ids.push_back(t);
  ids.push_back(Vocab::kEos);
  return ids;
}

inline std::vector<std::vector<TokenId>> encode_corpus(const std::vector<CorpusSentence>& corpus, const Vocab& vocab) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) out.push_back(encode_sentence(s.text, vocab));
  return out;
}

// Corpus file: "fact<TAB>template<TAB>text" per line.

inline std::string serialize_corpus(const std::vector<CorpusSentence>& corpus) {
  std::string out;
  for (const auto& s : corpus) out += std::to_string(s.fact) + "\t" + std::to_string(s.template_index) + "\t" + s.text + "\n";
  return out;
}

inline std::vector<CorpusSentence> parse_corpus(std::string_view text) {
  std::vector<CorpusSentence> out;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos) throw FormatError("corpus line " + std::to_string(line_no) + ": expected 3 tab-separated fields");
    try {
      out.push_back({std::stoul(line.substr(0, a)), std::stoul(line.substr(a + 1, b - a - 1)), line.substr(b + 1)});
    } catch (const std::logic_error&) {
      throw FormatError("corpus line " + std::to_string(line_no) + ": bad index");
    }
  }
  return out;
}

}  // namespace lensdyn
