#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/fs.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/vocab.hpp"
#include "lensdyn/dynamics/labels.hpp"
#include "lensdyn/synth/templates.hpp"

namespace lensdyn {

struct TripletFact {
  std::string subject;
  std::string relation_id;
  std::string object;
  std::vector<std::string> aliases;

  bool operator==(const TripletFact&) const = default;
};

/// Shape of the synthetic world and of its training corpus.
struct WorldSpec {
  int n_relations = 25;
  int n_subjects_per_relation = 16;
  int n_objects_per_relation = 8;
  /// Training frequency weight per template index; missing indices weigh 0.
  std::vector<double> template_exposure{1.0, 0.6, 0.25, 0.05};
  /// Sentence copies per unit of exposure for every fact.
  double base_repeats = 3.0;
  /// Fraction of facts reserved for tuned-lens training (never probed).
  double lens_holdout_fraction = 0.1;
  /// Zipf exponent of the object distribution within a relation (0 = uniform).
  double object_skew = 0.0;
  int min_subject_tokens = 1;
  int max_subject_tokens = 3;
  /// When positive, subjects are combinations of two or more words from one
  /// shared pool of this size, so no single word identifies a subject.
  int subject_pool = 0;
  std::uint64_t seed = 1;

  void validate(const TemplateRegistry& registry) const {
    if (n_relations < 1 || n_subjects_per_relation < 1 || n_objects_per_relation < 1)
      throw SpecError("world spec: relation, subject and object counts must be >= 1");
    if (static_cast<std::size_t>(n_relations) > registry.size())
      throw SpecError("world spec: " + std::to_string(n_relations) + " relations requested, registry has " +
                      std::to_string(registry.size()));
    if (!(base_repeats > 0)) throw SpecError("world spec: base_repeats must be positive");
    if (!(lens_holdout_fraction >= 0 && lens_holdout_fraction < 1))
      throw SpecError("world spec: lens_holdout_fraction must lie in [0, 1)");
    if (min_subject_tokens < 1 || max_subject_tokens < min_subject_tokens)
      throw SpecError("world spec: need 1 <= min_subject_tokens <= max_subject_tokens");
    if (subject_pool < 0 || (subject_pool > 0 && max_subject_tokens < 2))
      throw SpecError("world spec: a subject pool needs max_subject_tokens >= 2");
    if (subject_pool > 0) {
      double combos = 0;
      for (int k = std::max(2, min_subject_tokens); k <= max_subject_tokens; ++k) combos += std::pow(static_cast<double>(subject_pool), k);
      if (combos < 2.0 * n_relations * n_subjects_per_relation)
        throw SpecError("world spec: subject pool too small for the requested number of subjects");
    }
    for (double w : template_exposure)
      if (!(w >= 0)) throw SpecError("world spec: exposure weights must be >= 0");
    for (int r = 0; r < n_relations; ++r) {
      const auto& rel = registry.relations()[static_cast<std::size_t>(r)];
      bool any = false;
      for (std::size_t t = 0; t < rel.templates.size(); ++t) any = any || exposure(t) > 0;
      if (!any) throw SpecError("world spec: relation '" + rel.relation_id + "' has no template with positive exposure");
    }
  }

  double exposure(std::size_t template_index) const {
    return template_index < template_exposure.size() ? template_exposure[template_index] : 0.0;
  }
};

template <typename Json>
void to_json(Json& j, const WorldSpec& s) {
  j = {{"n_relations", s.n_relations},
       {"n_subjects_per_relation", s.n_subjects_per_relation},
       {"n_objects_per_relation", s.n_objects_per_relation},
       {"template_exposure", s.template_exposure},
       {"base_repeats", s.base_repeats},
       {"lens_holdout_fraction", s.lens_holdout_fraction},
       {"object_skew", s.object_skew},
       {"min_subject_tokens", s.min_subject_tokens},
       {"max_subject_tokens", s.max_subject_tokens},
       {"subject_pool", s.subject_pool},
       {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, WorldSpec& s) {
  WorldSpec d;
  s.n_relations = j.value("n_relations", d.n_relations);
  s.n_subjects_per_relation = j.value("n_subjects_per_relation", d.n_subjects_per_relation);
  s.n_objects_per_relation = j.value("n_objects_per_relation", d.n_objects_per_relation);
  s.template_exposure = j.value("template_exposure", d.template_exposure);
  s.base_repeats = j.value("base_repeats", d.base_repeats);
  s.lens_holdout_fraction = j.value("lens_holdout_fraction", d.lens_holdout_fraction);
  s.object_skew = j.value("object_skew", d.object_skew);
  s.min_subject_tokens = j.value("min_subject_tokens", d.min_subject_tokens);
  s.max_subject_tokens = j.value("max_subject_tokens", d.max_subject_tokens);
  s.subject_pool = j.value("subject_pool", d.subject_pool);
  s.seed = j.value("seed", d.seed);
}

/// Substitutes the subject for every placeholder. The result never contains
/// the object as a word sequence.
inline std::string render_query(const TripletFact& fact, std::string_view tmpl) {
  if (count_placeholders(tmpl) < 1) throw TemplateError("template \"" + std::string(tmpl) + "\" lacks {subject}");
  std::string out;
  std::size_t pos = 0;
  for (auto hit = tmpl.find(kSubjectPlaceholder); hit != std::string_view::npos;
       hit = tmpl.find(kSubjectPlaceholder, pos)) {
    out.append(tmpl.substr(pos, hit - pos));
    out.append(fact.subject);
    pos = hit + kSubjectPlaceholder.size();
  }
  out.append(tmpl.substr(pos));
  const auto words = split_words(out);
  const auto obj = split_words(fact.object);
  if (!obj.empty() && std::search(words.begin(), words.end(), obj.begin(), obj.end()) != words.end())
    throw TemplateError("prompt \"" + out + "\" contains its own answer '" + fact.object + "'");
  return out;
}

inline std::string render_query(const TripletFact& fact, const TemplateRegistry& registry, std::size_t template_index) {
  const auto& rel = registry.at(fact.relation_id);
  if (template_index >= rel.templates.size())
    throw TemplateError("relation '" + fact.relation_id + "' has no template #" + std::to_string(template_index));
  return render_query(fact, rel.templates[template_index]);
}

struct World {
  WorldSpec spec;
  TemplateRegistry registry;  // only the relations in use
  std::vector<TripletFact> facts;
  std::vector<bool> lens_holdout;  // parallel to facts

  std::vector<std::size_t> probe_facts() const { return select(false); }
  std::vector<std::size_t> lens_facts() const { return select(true); }

  /// Every word of every rendered (fact, template) sentence, including objects.
  std::vector<std::string> vocabulary_words() const {
    std::vector<std::string> words;
    for (const auto& f : facts) {
      for (const auto& t : registry.at(f.relation_id).templates) {
        auto w = split_words(render_query(f, t) + " " + f.object);
        words.insert(words.end(), w.begin(), w.end());
      }
      for (const auto& a : f.aliases) {
        auto w = split_words(a);
        words.insert(words.end(), w.begin(), w.end());
      }
    }
    return words;
  }

 private:
  std::vector<std::size_t> select(bool holdout) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < facts.size(); ++i)
      if (lens_holdout[i] == holdout) out.push_back(i);
    return out;
  }
};

namespace detail {

/// Pronounceable synthetic words that collide with nothing already taken.
class NameForge {
 public:
  NameForge(Rng& rng, std::unordered_set<std::string> reserved) : rng_(rng), taken_(std::move(reserved)) {}

  std::string make() {
    static constexpr std::string_view kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r",
                                                   "s", "t", "v", "z", "br", "dr", "kr", "st", "th", "sh"};
    static constexpr std::string_view kNuclei[] = {"a", "e", "i", "o", "u", "ai", "ei", "ou"};
    static constexpr std::string_view kCodas[] = {"", "", "", "n", "l", "r", "s"};
    for (;;) {
      const int syllables = 2 + static_cast<int>(rng_.uniform_int(2));
      std::string w;
      for (int s = 0; s < syllables; ++s) {
        w += kOnsets[rng_.uniform_int(std::size(kOnsets))];
        w += kNuclei[rng_.uniform_int(std::size(kNuclei))];
        if (s + 1 == syllables) w += kCodas[rng_.uniform_int(std::size(kCodas))];
      }
      if (taken_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::unordered_set<std::string> taken_;
};

inline std::unordered_set<std::string> template_words(const TemplateRegistry& registry) {
  std::unordered_set<std::string> words;
  for (const auto& r : registry.relations())
    for (const auto& t : r.templates) {
      std::string plain(t);
      for (auto p = plain.find(kSubjectPlaceholder); p != std::string::npos; p = plain.find(kSubjectPlaceholder))
        plain.replace(p, kSubjectPlaceholder.size(), " ");
      for (auto& w : split_words(plain)) words.insert(w);
    }
  for (const auto& t : FilterSpec::defaults().terms)
    for (auto& w : split_words(t)) words.insert(w);
  return words;
}

}  // namespace detail

/// Generates facts deterministically from the spec seed. Subjects are one to
/// `max_subject_tokens` words: optional shared given names followed by a
/// unique surname. Objects are single words private to their relation.
inline World build_world(const WorldSpec& spec, const TemplateRegistry& full_registry) {
  spec.validate(full_registry);
  World world;
  world.spec = spec;
  world.registry = full_registry.prefix(static_cast<std::size_t>(spec.n_relations));

  Rng rng(spec.seed);
  detail::NameForge forge(rng, detail::template_words(world.registry));
  std::vector<std::string> given(spec.subject_pool > 0 ? static_cast<std::size_t>(spec.subject_pool) : 16);
  for (auto& g : given) g = forge.make();
  std::unordered_set<std::string> subjects;

  std::vector<double> object_weights(static_cast<std::size_t>(spec.n_objects_per_relation));
  for (std::size_t i = 0; i < object_weights.size(); ++i)
    object_weights[i] = 1.0 / std::pow(static_cast<double>(i + 1), spec.object_skew);
  double total = 0;
  for (double w : object_weights) total += w;

  for (const auto& rel : world.registry.relations()) {
    std::vector<std::string> objects(object_weights.size());
    for (auto& o : objects) o = forge.make();
    for (int s = 0; s < spec.n_subjects_per_relation; ++s) {
      std::string subject;
      if (spec.subject_pool > 0) {
        do {
          const int lo = std::max(2, spec.min_subject_tokens);
          const int n_tokens = lo + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(spec.max_subject_tokens - lo + 1)));
          subject.clear();
          for (int g = 0; g < n_tokens; ++g) subject += (g ? " " : "") + given[rng.uniform_int(given.size())];
        } while (!subjects.insert(subject).second);
      } else {
        const double u = rng.uniform();
        int n_tokens = 1;
        if (spec.max_subject_tokens >= 2 && u >= 0.5) n_tokens = 2;
        if (spec.max_subject_tokens >= 3 && u >= 0.85) n_tokens = 3;
        for (int g = 1; g < n_tokens; ++g) subject += given[rng.uniform_int(given.size())] + " ";
        subject += forge.make();
      }

      double pick = rng.uniform() * total;
      std::size_t o = 0;
      while (o + 1 < objects.size() && pick >= object_weights[o]) pick -= object_weights[o++];
      world.facts.push_back({subject, rel.relation_id, objects[o], {}});
    }
  }

  world.lens_holdout.assign(world.facts.size(), false);
  const auto n_holdout = static_cast<std::size_t>(std::llround(spec.lens_holdout_fraction * world.facts.size()));
  std::vector<std::size_t> idx(world.facts.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(std::span(idx));
  for (std::size_t i = 0; i < n_holdout; ++i) world.lens_holdout[idx[i]] = true;
  return world;
}

inline Vocab build_vocab(const World& world) { return Vocab::from_words(world.vocabulary_words()); }

/// First token of the object and of every alias.
inline std::vector<TokenId> answer_tokens(const TripletFact& fact, const Vocab& vocab) {
  std::vector<TokenId> out;
  auto add = [&](const std::string& s) {
    const auto ids = tokenize(s, vocab);
    if (!ids.empty() && std::find(out.begin(), out.end(), ids.front()) == out.end()) out.push_back(ids.front());
  };
  add(fact.object);
  for (const auto& a : fact.aliases) add(a);
  return out;
}

// Facts file: one JSON object per line.

inline std::string serialize_facts(const World& world) {
  std::string out;
  for (std::size_t i = 0; i < world.facts.size(); ++i) {
    const auto& f = world.facts[i];
    nlohmann::ordered_json j{{"subject", f.subject},
                             {"relation_id", f.relation_id},
                             {"object", f.object},
                             {"aliases", f.aliases},
                             {"split", world.lens_holdout[i] ? "lens" : "probe"}};
    out += j.dump() + "\n";
  }
  return out;
}

inline void parse_facts(std::string_view text, World& world) {
  world.facts.clear();
  world.lens_holdout.clear();
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TripletFact f{j.at("subject").get<std::string>(), j.at("relation_id").get<std::string>(),
                    j.at("object").get<std::string>(), j.value("aliases", std::vector<std::string>{})};
      if (f.subject.empty() || f.object.empty()) throw FormatError("empty subject or object");
      if (!world.registry.contains(f.relation_id))
        throw FormatError("relation '" + f.relation_id + "' is not in the template registry");
      world.facts.push_back(std::move(f));
      world.lens_holdout.push_back(j.value("split", std::string("probe")) == "lens");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("facts line " + std::to_string(line_no) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError("facts line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace lensdyn
