#include <map>

#include <gtest/gtest.h>

#include "lensdyn/dynamics/labels.hpp"
#include "lensdyn/dynamics/pairs.hpp"
#include "lensdyn/synth/corpus.hpp"
#include "lensdyn/synth/recall.hpp"
#include "lensdyn/synth/world.hpp"

namespace lensdyn {
namespace {

TemplateRegistry shipped_templates() { return TemplateRegistry::load(std::filesystem::path(LENSDYN_DATA_DIR) / "templates.txt"); }

WorldSpec small_spec() {
  WorldSpec s;
  s.n_relations = 5;
  s.n_subjects_per_relation = 6;
  s.n_objects_per_relation = 4;
  s.template_exposure = {1.0, 0.5, 0.1, 0.0};
  s.base_repeats = 6;
  s.lens_holdout_fraction = 0.2;
  s.min_subject_tokens = 2;
  s.max_subject_tokens = 3;
  s.subject_pool = 12;
  return s;
}

TEST(Templates, ShippedFileParses) {
  const auto reg = shipped_templates();
  EXPECT_GE(reg.size(), 25u);
  for (const auto& r : reg.relations()) {
    EXPECT_GE(r.templates.size(), 2u) << r.relation_id;
    for (const auto& t : r.templates) EXPECT_GE(count_placeholders(t), 1) << t;
  }
  EXPECT_EQ(TemplateRegistry::parse(reg.serialize()).serialize(), reg.serialize());
}

TEST(Templates, Errors) {
  EXPECT_THROW(TemplateRegistry::parse("{subject} is\n"), FormatError);
  EXPECT_THROW(TemplateRegistry::parse("[P1 broken\n{subject} a\n"), FormatError);
  EXPECT_THROW(TemplateRegistry::parse("[P1] x\n{subject} a\n"), TemplateError);
  EXPECT_THROW(TemplateRegistry::parse("[P1] x\n{subject} a\nno placeholder\n"), TemplateError);
  EXPECT_THROW(TemplateRegistry::parse("[P1] x\n{subject} a\n{subject} b\n[P1] y\n{subject} a\n{subject} b\n"),
               TemplateError);
  const auto reg = TemplateRegistry::parse("# c\n[P1] x\n{subject} a\n\n{subject} b\n");
  EXPECT_EQ(reg.at("P1").templates.size(), 2u);
  EXPECT_THROW(reg.at("P2"), TemplateError);
  EXPECT_THROW(reg.prefix(2), SpecError);
}

TEST(Templates, RenderQuery) {
  TripletFact f{"bo tan", "P19", "rome", {}};
  EXPECT_EQ(render_query(f, "Where was {subject} born? {subject} was born in"),
            "Where was bo tan born? bo tan was born in");
  EXPECT_THROW(render_query(f, "no subject here"), TemplateError);
  EXPECT_THROW(render_query(f, "{subject} left rome for"), TemplateError);
}

TEST(World, DeterministicAndWellFormed) {
  const auto reg = shipped_templates();
  const auto spec = small_spec();
  const auto a = build_world(spec, reg), b = build_world(spec, reg);
  EXPECT_EQ(serialize_facts(a), serialize_facts(b));
  ASSERT_EQ(a.facts.size(), 30u);
  std::map<std::string, int> per_relation;
  std::set<std::string> subjects;
  for (const auto& f : a.facts) {
    ++per_relation[f.relation_id];
    subjects.insert(f.subject);
    const auto words = split_words(f.subject).size();
    EXPECT_GE(words, 2u);
    EXPECT_LE(words, 3u);
  }
  EXPECT_EQ(per_relation.size(), 5u);
  for (const auto& [_, n] : per_relation) EXPECT_EQ(n, 6);
  EXPECT_EQ(subjects.size(), a.facts.size());
  EXPECT_EQ(a.lens_facts().size(), 6u);
  EXPECT_EQ(a.lens_facts().size() + a.probe_facts().size(), a.facts.size());

  auto other = spec;
  other.seed = 2;
  EXPECT_NE(serialize_facts(build_world(other, reg)), serialize_facts(a));
}

TEST(World, SpecValidation) {
  const auto reg = shipped_templates();
  auto s = small_spec();
  s.n_relations = 1000;
  EXPECT_THROW(build_world(s, reg), SpecError);
  s = small_spec();
  s.template_exposure = {0, 0, 0, 0, 0, 0};
  EXPECT_THROW(build_world(s, reg), SpecError);
  s = small_spec();
  s.subject_pool = 2;
  EXPECT_THROW(build_world(s, reg), SpecError);
  s = small_spec();
  s.lens_holdout_fraction = 1.0;
  EXPECT_THROW(build_world(s, reg), SpecError);
}

TEST(World, FactsRoundTrip) {
  const auto w = build_world(small_spec(), shipped_templates());
  World back;
  back.spec = w.spec;
  back.registry = w.registry;
  parse_facts(serialize_facts(w), back);
  EXPECT_EQ(serialize_facts(back), serialize_facts(w));
  EXPECT_EQ(back.lens_holdout, w.lens_holdout);
  EXPECT_THROW(parse_facts("{\"subject\":\"a\",\"relation_id\":\"P999\",\"object\":\"b\"}\n", back), FormatError);
  EXPECT_THROW(parse_facts("not json\n", back), FormatError);
}

TEST(Corpus, CopyCountsFollowExposure) {
  const auto w = build_world(small_spec(), shipped_templates());
  const auto corpus = build_training_corpus(w, 7);
  std::map<std::pair<std::size_t, std::size_t>, int> counts;
  for (const auto& s : corpus) ++counts[{s.fact, s.template_index}];
  int third_template_hits = 0, third_template_cells = 0;
  for (std::size_t i = 0; i < w.facts.size(); ++i) {
    const auto n_templates = w.registry.at(w.facts[i].relation_id).templates.size();
    for (std::size_t t = 0; t < n_templates; ++t) {
      const int c = counts.count({i, t}) ? counts[{i, t}] : 0;
      const double expected = w.spec.exposure(t) * w.spec.base_repeats;
      if (t == 2) {
        ++third_template_cells;
        third_template_hits += c;
        EXPECT_TRUE(c == 0 || c == 1);
      } else {
        EXPECT_EQ(c, static_cast<int>(expected)) << "fact " << i << " template " << t;
      }
    }
  }
  // frac(0.1 * 6) = 0.6 chance of one copy.
  EXPECT_NEAR(static_cast<double>(third_template_hits) / third_template_cells, 0.6, 0.2);
  EXPECT_EQ(serialize_corpus(build_training_corpus(w, 7)), serialize_corpus(corpus));
  const auto parsed = parse_corpus(serialize_corpus(corpus));
  ASSERT_EQ(parsed.size(), corpus.size());
  EXPECT_EQ(parsed.back().text, corpus.back().text);
}

TEST(Corpus, LensCorpusUsesOnlyHeldOutFacts) {
  const auto w = build_world(small_spec(), shipped_templates());
  for (const auto& s : build_lens_corpus(w)) EXPECT_TRUE(w.lens_holdout[s.fact]);
}

TEST(Labels, CorrectIncorrectFiltered) {
  const auto vocab = Vocab::from_words({"rome", "paris", "not", "in", "no"});
  const auto filter = CompiledFilter::compile(FilterSpec::defaults(), vocab);
  const std::vector<TokenId> answers{vocab.id("rome")};
  const std::vector<TokenId> good{vocab.id("in"), vocab.id("rome")};
  const std::vector<TokenId> wrong{vocab.id("paris")};
  const std::vector<TokenId> negated{vocab.id("not"), vocab.id("rome")};
  EXPECT_EQ(label_output(good, answers, filter), OutputLabel::Correct);
  EXPECT_EQ(label_output(wrong, answers, filter), OutputLabel::Incorrect);
  EXPECT_EQ(label_output(negated, answers, filter), OutputLabel::Filtered);
  const std::vector<TokenId> none;
  EXPECT_THROW(label_output(good, none, filter), SpecError);
  EXPECT_EQ(parse_output_label(to_string(OutputLabel::Filtered)), OutputLabel::Filtered);
}

TEST(Pairs, CrossCorrectWithIncorrectUpToCap) {
  World w;
  w.registry = TemplateRegistry::parse("[P1] x\n{subject} a\n{subject} b\n{subject} c\n{subject} d\n");
  w.facts = {{"bo", "P1", "rome", {}}};
  w.lens_holdout = {false};
  const auto vocab = Vocab::from_words({"bo", "rome", "paris", "a", "b", "c", "d"});
  auto outcome = [&](std::size_t t, OutputLabel l, TokenId first) {
    QueryOutcome o;
    o.fact = 0;
    o.template_index = t;
    o.prompt = {Vocab::kBos, vocab.id("bo"), static_cast<TokenId>(vocab.id("a") + static_cast<TokenId>(t))};
    o.generated = {first, Vocab::kEos};
    o.label = l;
    return o;
  };
  const std::vector<QueryOutcome> outs{outcome(2, OutputLabel::Incorrect, vocab.id("paris")),
                                       outcome(0, OutputLabel::Correct, vocab.id("rome")),
                                       outcome(1, OutputLabel::Correct, vocab.id("rome")),
                                       outcome(3, OutputLabel::Filtered, vocab.id("rome"))};
  const auto pairs = build_recall_pairs(outs, w, vocab, 4);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].template_r, 0u);
  EXPECT_EQ(pairs[1].template_r, 1u);
  for (const auto& p : pairs) {
    EXPECT_EQ(p.template_w, 2u);
    EXPECT_EQ(p.a_r, vocab.id("rome"));
    EXPECT_EQ(p.a_w, vocab.id("paris"));
  }
  EXPECT_EQ(build_recall_pairs(outs, w, vocab, 1).size(), 1u);
  EXPECT_THROW(build_recall_pairs(outs, w, vocab, 0), SpecError);
}

}  // namespace
}  // namespace lensdyn
