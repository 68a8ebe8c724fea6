#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/attribution/attribution.hpp"
#include "lensdyn/core/weights_io.hpp"
#include "lensdyn/detector/features.hpp"
#include "lensdyn/detector/svm.hpp"
#include "lensdyn/dynamics/dynamics.hpp"
#include "lensdyn/dynamics/pairs.hpp"
#include "lensdyn/lenses/logit_lens.hpp"
#include "lensdyn/lenses/tuned_lens.hpp"
#include "lensdyn/pipeline/artifacts.hpp"
#include "lensdyn/pipeline/config.hpp"
#include "lensdyn/report/svg.hpp"
#include "lensdyn/synth/corpus.hpp"
#include "lensdyn/synth/recall.hpp"
#include "lensdyn/synth/train.hpp"
#include "lensdyn/synth/world.hpp"
#include "lensdyn/trace/curves.hpp"

namespace lensdyn {

/// Command-line refinements of the config for a single run.
struct RunOptions {
  std::optional<FeatureSet> feature_set;
  std::vector<int> ks;               // empty: config
  std::string relation;              // empty: config
  std::filesystem::path curves;      // external curve file; empty: probe output
};

namespace detail {

inline World load_world(RunManifest& m) {
  World world;
  try {
    world.spec = nlohmann::json::parse(read_file(m.input("world/spec.json"))).get<WorldSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("world/spec.json: " + std::string(e.what()));
  }
  world.registry = TemplateRegistry::load(m.input("world/templates.txt"));
  parse_facts(read_file(m.input("world/facts.jsonl")), world);
  return world;
}

inline Vocab load_vocab(RunManifest& m) { return Vocab::load(m.input("world/vocab.txt")); }

inline Weights load_model(RunManifest& m, const Vocab& vocab) {
  auto w = load_weights(m.input("model/model.json"));
  m.input("model/model.bin");
  if (w.config.vocab_size != vocab.size())
    throw ValidationError("model vocabulary has " + std::to_string(w.config.vocab_size) + " entries, world/vocab.txt has " +
                          std::to_string(vocab.size()) + "; rerun train-model");
  return w;
}

inline std::string model_id(const PipelineConfig& cfg, const Weights& w) {
  return cfg.model_name + "-" + weights_fingerprint(w).substr(0, 12);
}

inline std::vector<RecallPair> parse_pairs(const std::filesystem::path& path) {
  std::vector<RecallPair> pairs;
  for (const auto& j : read_jsonl(path)) {
    try {
      RecallPair p;
      p.pair_id = j.at("pair_id").get<int>();
      p.fact = j.at("fact").get<std::size_t>();
      p.template_r = j.at("template_r").get<std::size_t>();
      p.template_w = j.at("template_w").get<std::size_t>();
      p.prompt_r = j.at("prompt_r").get<std::vector<TokenId>>();
      p.prompt_w = j.at("prompt_w").get<std::vector<TokenId>>();
      p.a_r = j.at("a_r").get<TokenId>();
      p.a_w = j.at("a_w").get<TokenId>();
      p.generated_r = j.at("generated_r").get<std::vector<TokenId>>();
      p.generated_w = j.at("generated_w").get<std::vector<TokenId>>();
      pairs.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return pairs;
}

inline CurveFile load_curves(RunManifest& m, const RunOptions& opts) {
  const auto path = opts.curves.empty() ? m.input("probe/curves.jsonl") : m.external_input(opts.curves);
  auto file = import_curves(path);
  if (!file.rejected.empty())
    throw ValidationError(path.string() + ": " + std::to_string(file.rejected.size()) +
                          " invalid curve records (first at line " + std::to_string(file.rejected.front().line) +
                          ": " + file.rejected.front().message + "); run import-curves for a full list");
  if (file.records.empty()) throw ValidationError(path.string() + " holds no curve records");
  return file;
}

inline std::string feature_model_path(FeatureSet s) { return std::string("detector/svm_") + to_string(s) + ".json"; }

}  // namespace detail

// gen-world

inline void cmd_gen_world(const PipelineConfig& cfg, const RunOptions&) {
  RunManifest m("gen-world", cfg, {cfg.out});
  const auto registry = TemplateRegistry::load(m.external_input(cfg.templates));
  const FilterSpec filter = cfg.filter_terms.empty() ? FilterSpec::defaults() : FilterSpec::load(m.external_input(cfg.filter_terms));
  const World world = build_world(cfg.world, registry);
  const Vocab vocab = build_vocab(world);

  for (const auto& f : world.facts)
    for (const auto& t : world.registry.at(f.relation_id).templates) {
      const auto prompt = static_cast<int>(encode_prompt(render_query(f, t), vocab).size());
      const auto sentence = static_cast<int>(encode_sentence(render_sentence(f, t), vocab).size());
      if (std::max(prompt + kRecallTokens, sentence) > cfg.model.max_seq_len)
        throw ConfigError("query \"" + render_query(f, t) + "\" needs " + std::to_string(prompt + kRecallTokens) +
                          " positions with generation; raise model.max_seq_len");
    }

  nlohmann::ordered_json spec = world.spec;
  m.write("world/spec.json", spec.dump(2) + "\n");
  m.write("world/templates.txt", world.registry.serialize());
  std::string filter_text = "# Filter terms, one per line.\n";
  for (const auto& t : filter.terms) filter_text += t + "\n";
  m.write("world/filter_terms.txt", filter_text);
  m.write("world/facts.jsonl", serialize_facts(world));
  std::string vocab_text;
  for (const auto& t : vocab.tokens()) vocab_text += t + "\n";
  m.write("world/vocab.txt", vocab_text);
  const auto corpus = build_training_corpus(world, cfg.seeds.corpus);
  m.write("world/corpus.tsv", serialize_corpus(corpus));
  m.write("world/lens_corpus.tsv", serialize_corpus(build_lens_corpus(world)));
  m.finish();
  log_line("world: " + std::to_string(world.facts.size()) + " facts, " + std::to_string(world.registry.size()) +
           " relations, vocabulary " + std::to_string(vocab.size()) + ", training corpus " +
           std::to_string(corpus.size()) + " sentences");
}

// train-model

inline void cmd_train_model(const PipelineConfig& cfg, const RunOptions&) {
  RunManifest m("train-model", cfg, {cfg.out});
  const World world = detail::load_world(m);
  const Vocab vocab = detail::load_vocab(m);
  const auto corpus = parse_corpus(read_file(m.input("world/corpus.tsv")));
  const auto filter = CompiledFilter::compile(FilterSpec::load(m.input("world/filter_terms.txt")), vocab);

  ModelConfig mc = cfg.model;
  mc.vocab_size = vocab.size();
  const auto result = train_toy_model(encode_corpus(corpus, vocab), mc, cfg.train, cfg.seeds.train, [](const EpochStats& s) {
    log_line("epoch " + std::to_string(s.epoch) + " loss " + fmt(s.mean_loss, 4));
  });
  save_weights(result.weights, m.output_path("model/model.json"));
  m.record_output("model/model.json");
  m.record_output("model/model.bin");

  std::string report = "epoch,mean_loss,steps\n";
  for (const auto& e : result.report.epochs)
    report += std::to_string(e.epoch) + "," + fmt(e.mean_loss, 6) + "," + std::to_string(e.steps) + "\n";
  m.write("model/train_report.csv", report);

  const auto recall = evaluate_recall(result.weights, world, world.probe_facts(), vocab, filter);
  std::size_t n_templates = 0;
  for (const auto& r : world.registry.relations()) n_templates = std::max(n_templates, r.templates.size());
  std::string tr = "template_index,exposure,accuracy\n";
  for (std::size_t t = 0; t < n_templates; ++t)
    tr += std::to_string(t) + "," + fmt(world.spec.exposure(t), 4) + "," + fmt(recall.template_accuracy(t)) + "\n";
  m.write("model/template_recall.csv", tr);
  m.finish();
  log_line("final loss " + fmt(result.report.final_loss, 4) + ", template-0 recall " + fmt(recall.template_accuracy(0), 3));
}

// train-lens

inline void cmd_train_lens(const PipelineConfig& cfg, const RunOptions&) {
  RunManifest m("train-lens", cfg, {cfg.out});
  const Vocab vocab = detail::load_vocab(m);
  const Weights w = detail::load_model(m, vocab);
  const auto corpus_path = m.input("world/lens_corpus.tsv");
  const auto corpus = parse_corpus(read_file(corpus_path));
  const auto t = train_tuned_lens(w, encode_corpus(corpus, vocab), cfg.lens, cfg.seeds.lens, sha256_file(corpus_path));
  save_translators(t, m.output_path("lens/translators.json"));
  m.record_output("lens/translators.json");
  m.record_output("lens/translators.bin");
  std::string report = "layer,logit_val_kl,tuned_val_kl,improved\n";
  int improved = 0;
  for (int l = 0; l < t.n_layers(); ++l) {
    const bool ok = t.val_kl[l] <= t.logit_val_kl[l];
    improved += ok ? 1 : 0;
    report += std::to_string(l + 1) + "," + fmt(t.logit_val_kl[l], 8) + "," + fmt(t.val_kl[l], 8) + "," + (ok ? "1" : "0") + "\n";
  }
  m.write("lens/lens_report.csv", report);
  m.finish();
  log_line("tuned lens beats the logit lens on " + std::to_string(improved) + "/" + std::to_string(t.n_layers()) + " layers");
}

// probe

inline void cmd_probe(const PipelineConfig& cfg, const RunOptions&) {
  RunManifest m("probe", cfg, {cfg.out});
  const World world = detail::load_world(m);
  const Vocab vocab = detail::load_vocab(m);
  const Weights w = detail::load_model(m, vocab);
  const auto filter = CompiledFilter::compile(FilterSpec::load(m.input("world/filter_terms.txt")), vocab);
  const auto fingerprint = weights_fingerprint(w);
  const auto translators = load_translators(m.input("lens/translators.json"), fingerprint);
  m.input("lens/translators.bin");
  translators.check_compatible(w);

  const auto recall = evaluate_recall(w, world, world.probe_facts(), vocab, filter);
  std::string gen;
  for (const auto& o : recall.outcomes) {
    const auto& f = world.facts[o.fact];
    nlohmann::ordered_json j{{"fact", o.fact},
                             {"relation_id", f.relation_id},
                             {"subject", f.subject},
                             {"template_index", o.template_index},
                             {"prompt", detokenize(std::span(o.prompt).subspan(1), vocab)},
                             {"generated", detokenize(o.generated, vocab)},
                             {"generated_ids", o.generated},
                             {"label", to_string(o.label)}};
    gen += j.dump() + "\n";
  }
  m.write("probe/generations.jsonl", gen);
  m.write("probe/recall_accuracy.csv", recall_csv(recall.cells));

  const auto pairs = build_recall_pairs(recall.outcomes, world, vocab, cfg.pair_cap);
  std::string pairs_text;
  const CurveHeader header{cfg.model_name + "-" + fingerprint.substr(0, 12), w.config.n_layers,
                           CurveHeader{}.answer_token_rule};
  std::vector<CurveRecord> records;
  nlohmann::ordered_json rank_head{{"vocab_size", w.config.vocab_size}, {"lens", "logit"},
                                   {"checkpoints", w.config.checkpoint_count()}};
  std::string ranks = rank_head.dump() + "\n";
  for (const auto& p : pairs) {
    const auto& f = world.facts[p.fact];
    nlohmann::ordered_json pj{{"pair_id", p.pair_id},         {"fact", p.fact},
                              {"relation_id", f.relation_id}, {"subject", f.subject},
                              {"template_r", p.template_r},   {"template_w", p.template_w},
                              {"prompt_r", p.prompt_r},       {"prompt_w", p.prompt_w},
                              {"a_r", p.a_r},                 {"a_w", p.a_w},
                              {"a_r_token", vocab.token(p.a_r)}, {"a_w_token", vocab.token(p.a_w)},
                              {"generated_r", p.generated_r}, {"generated_w", p.generated_w}};
    pairs_text += pj.dump() + "\n";

    const auto tr = forward(p.prompt_r, w, CaptureSpec::last_token(false)).trace;
    const auto tw = forward(p.prompt_w, w, CaptureSpec::last_token(false)).trace;
    const int pos_r = static_cast<int>(p.prompt_r.size()) - 1, pos_w = static_cast<int>(p.prompt_w.size()) - 1;
    const Matrix logit_r = logit_lens(tr, pos_r, w), logit_w = logit_lens(tw, pos_w, w);
    const Matrix tuned_r = tuned_lens(tr, translators, pos_r, w), tuned_w = tuned_lens(tw, translators, pos_w, w);
    for (auto& r : curve_records(p, f.relation_id, curve_triplet(p, logit_r, logit_w), LensKind::Logit))
      records.push_back(std::move(r));
    for (auto& r : curve_records(p, f.relation_id, curve_triplet(p, tuned_r, tuned_w), LensKind::Tuned))
      records.push_back(std::move(r));

    for (auto [role, dist, token] : {std::tuple{Role::Suc, &logit_r, p.a_r}, std::tuple{Role::Fail, &logit_w, p.a_r},
                                     std::tuple{Role::Hal, &logit_w, p.a_w}}) {
      nlohmann::ordered_json rj{{"pair_id", p.pair_id}, {"relation_id", f.relation_id}, {"role", to_string(role)},
                                {"token", token},       {"ranks", rank_sequence(*dist, token)}};
      ranks += rj.dump() + "\n";
    }
  }
  m.write("probe/pairs.jsonl", pairs_text);
  m.write("probe/curves.jsonl", serialize_curves(header, records));
  m.write("probe/ranks.jsonl", ranks);
  m.finish();
  log_line("probe: " + std::to_string(recall.outcomes.size()) + " queries, " + std::to_string(pairs.size()) +
           " recall pairs");
}

// stats

inline void cmd_stats(const PipelineConfig& cfg, const RunOptions& opts) {
  RunManifest m("stats", cfg, {cfg.out});
  const auto rows = read_jsonl(m.input("probe/ranks.jsonl"));
  if (rows.empty()) throw FormatError("probe/ranks.jsonl is empty");
  int vocab_size = 0;
  std::vector<RankSample> samples;
  try {
    vocab_size = rows.front().at("vocab_size").get<int>();
    for (std::size_t i = 1; i < rows.size(); ++i)
      samples.push_back({rows[i].at("relation_id").get<std::string>(), parse_role(rows[i].at("role").get<std::string>()),
                         rows[i].at("ranks").get<std::vector<int>>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe/ranks.jsonl: ") + e.what());
  }
  if (samples.empty()) throw ValidationError("no rank samples; the probe found no recall pairs");
  const auto ks = opts.ks.empty() ? cfg.ks : opts.ks;
  const auto stats = topk_presence_stats(samples, ks, vocab_size);
  m.write("stats/rank_stats.csv", rank_stats_csv(stats));
  m.finish();
  for (int k : ks)
    log_line("top-" + std::to_string(k) + " presence Suc " + fmt(stats.macro(Role::Suc, k), 3) + ", Fail " +
             fmt(stats.macro(Role::Fail, k), 3) + ", Hal " + fmt(stats.macro(Role::Hal, k), 3));
}

// attribute

inline void cmd_attribute(const PipelineConfig& cfg, const RunOptions&) {
  RunManifest m("attribute", cfg, {cfg.out});
  const World world = detail::load_world(m);
  const Vocab vocab = detail::load_vocab(m);
  const Weights w = detail::load_model(m, vocab);
  auto pairs = detail::parse_pairs(m.input("probe/pairs.jsonl"));
  if (pairs.empty()) throw ValidationError("probe/pairs.jsonl holds no pairs");
  if (static_cast<int>(pairs.size()) > cfg.attribution_pairs) pairs.resize(static_cast<std::size_t>(cfg.attribution_pairs));

  const int L = w.config.n_layers;
  std::string contrib = "pair_id,prompt,token_id,layer,attention,mlp\n";
  std::string deltas = "pair_id,prompt,position,group,layer,module,delta\n";
  auto correct = AblationHeatmap::empty(L), hallucinated = AblationHeatmap::empty(L);
  for (const auto& p : pairs) {
    if (p.fact >= world.facts.size()) throw ValidationError("pair " + std::to_string(p.pair_id) + " names an unknown fact");
    for (auto [name, prompt, token] : {std::tuple{"correct", &p.prompt_r, p.a_r}, std::tuple{"hallucinated", &p.prompt_w, p.a_w}}) {
      const auto trace = forward(*prompt, w, CaptureSpec::last_token(true)).trace;
      const auto c = module_contributions(trace, token, static_cast<int>(prompt->size()) - 1, w);
      for (int l = 0; l < L; ++l)
        contrib += std::to_string(p.pair_id) + "," + name + "," + std::to_string(token) + "," + std::to_string(l + 1) +
                   "," + fmt(c.attn[l], 8) + "," + fmt(c.mlp[l], 8) + "\n";
    }
    const auto subject = tokenize(world.facts[p.fact].subject, vocab);
    const auto sweep = ablation_sweep(w, p, subject);
    for (auto [name, list, heat] : {std::tuple{"correct", &sweep.correct, &correct},
                                    std::tuple{"hallucinated", &sweep.hallucinated, &hallucinated}}) {
      for (const auto& d : *list) {
        heat->add(d);
        deltas += std::to_string(p.pair_id) + "," + name + "," + std::to_string(d.position) + "," + to_string(d.group) +
                  "," + std::to_string(d.layer) + "," + to_string(d.module) + "," + fmt(d.delta, 8) + "\n";
      }
    }
  }
  m.write("attribution/contributions.csv", contrib);
  m.write("attribution/ablation_deltas.csv", deltas);
  m.write("attribution/ablation_correct.csv", heatmap_csv(correct));
  m.write("attribution/ablation_hallucinated.csv", heatmap_csv(hallucinated));
  m.finish();
  log_line("attribution over " + std::to_string(pairs.size()) + " pairs");
}

// train-detector / classify

struct DetectorRun {
  FeatureSet set;
  SvmModel model;
  Evaluation eval;
};

inline std::string detector_summary(const std::vector<DetectorRun>& runs, std::size_t n_pairs, std::size_t n_test_pairs) {
  std::string s = "Hallucination detector (linear soft-margin SVM on lens curves)\n\n";
  s += "pairs: " + std::to_string(n_pairs) + " (" + std::to_string(n_test_pairs) + " held out, pair-disjoint split)\n";
  s += "held-out vectors are classified one at a time (vector-level accuracy)\n\n";
  s += "feature_set  length  test_acc  majority  train_acc\n";
  char buf[160];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%-11s  %6d  %8.4f  %8.4f  %9.4f\n", to_string(r.set), r.model.spec.length(),
                  r.eval.accuracy, r.eval.majority_baseline(), r.model.train_accuracy);
    s += buf;
  }
  s += "\nReference accuracies of real models (logit / tuned / both), for comparison only:\n";
  for (const auto& ref : kDetectorReference) {
    std::snprintf(buf, sizeof buf, "  %-15s %.3f / %.3f / %.3f\n", ref.model, ref.logit, ref.tuned, ref.both);
    s += buf;
  }
  return s;
}

inline void cmd_train_detector(const PipelineConfig& cfg, const RunOptions& opts) {
  RunManifest m("train-detector", cfg, {cfg.out});
  const auto file = detail::load_curves(m, opts);
  const auto grouped = group_pair_curves(file.records);
  const FeatureSet chosen = opts.feature_set.value_or(cfg.feature_set);

  std::vector<DetectorRun> runs;
  std::string split_csv;
  std::size_t n_test_pairs = 0;
  for (FeatureSet set : {FeatureSet::LogitOnly, FeatureSet::TunedOnly, FeatureSet::Both}) {
    const FeatureSpec spec{set, file.header.n_layers, file.header.model};
    const auto data = featurize_all(grouped, spec);
    const auto split = split_dataset(data, cfg.test_fraction, cfg.seeds.split);
    if (split.test.empty()) throw ValidationError("the test split is empty; more recall pairs are needed");
    if (split_csv.empty()) {
      split_csv = "pair_id,relation_id,side\n";
      std::set<int> test_ids;
      for (const auto& v : split.test) test_ids.insert(v.pair_id);
      n_test_pairs = test_ids.size();
      for (const auto& p : grouped)
        split_csv += std::to_string(p.pair_id) + "," + p.relation_id + "," + (test_ids.contains(p.pair_id) ? "test" : "train") + "\n";
    }
    auto model = train_svm(split.train, spec, cfg.svm, cfg.seeds.svm);
    const auto eval = evaluate(model, split.test);
    m.write(detail::feature_model_path(set), serialize_svm(model));
    if (set == chosen) m.write("detector/svm.json", serialize_svm(model));
    runs.push_back({set, std::move(model), eval});
  }
  m.write("detector/split.csv", split_csv);
  std::string eval_csv =
      "feature_set,length,n_test,accuracy,majority_baseline,precision_recalling,recall_recalling,"
      "precision_hallucinating,recall_hallucinating,train_accuracy,final_objective\n";
  for (const auto& r : runs) {
    const auto& e = r.eval;
    eval_csv += std::string(to_string(r.set)) + "," + std::to_string(r.model.spec.length()) + "," + std::to_string(e.n) +
                "," + fmt(e.accuracy) + "," + fmt(e.majority_baseline()) + "," + fmt(e.precision(ClassLabel::Recalling)) +
                "," + fmt(e.recall(ClassLabel::Recalling)) + "," + fmt(e.precision(ClassLabel::Hallucinating)) + "," +
                fmt(e.recall(ClassLabel::Hallucinating)) + "," + fmt(r.model.train_accuracy) + "," +
                fmt(r.model.objective_trace.back()) + "\n";
  }
  m.write("detector/detector_eval.csv", eval_csv);
  m.write("detector/summary.txt", detector_summary(runs, grouped.size(), n_test_pairs));
  m.finish();
  for (const auto& r : runs) log_line(std::string(to_string(r.set)) + " held-out accuracy " + fmt(r.eval.accuracy, 4));
}

inline void cmd_classify(const PipelineConfig& cfg, const RunOptions& opts) {
  RunManifest m("classify", cfg, {cfg.out});
  const auto path = opts.feature_set ? detail::feature_model_path(*opts.feature_set) : std::string("detector/svm.json");
  const auto model = parse_svm(read_file(m.input(path)));
  const auto file = detail::load_curves(m, opts);
  if (model.spec.model_id != file.header.model)
    throw FeatureError("detector was trained on curves of model '" + model.spec.model_id + "', these come from '" +
                       file.header.model + "'");
  if (model.spec.n_layers != file.header.n_layers)
    throw FeatureError("detector expects L=" + std::to_string(model.spec.n_layers) + ", curves have L=" +
                       std::to_string(file.header.n_layers));
  const auto data = featurize_all(group_pair_curves(file.records), model.spec);
  std::string out = "pair_id,relation_id,true_label,predicted,margin\n";
  int correct = 0;
  for (const auto& v : data) {
    const auto p = predict(model, v.x);
    correct += p.label == v.label ? 1 : 0;
    out += std::to_string(v.pair_id) + "," + v.relation_id + "," + to_string(v.label) + "," + to_string(p.label) + "," +
           fmt(p.margin, 8) + "\n";
  }
  m.write("detector/classifications.csv", out);
  m.finish();
  log_line("classified " + std::to_string(data.size()) + " curves with the " + to_string(model.spec.set) +
           " detector; agreement with the recorded roles " + fmt(static_cast<double>(correct) / data.size(), 4));
}

// import-curves

inline void cmd_import_curves(const PipelineConfig& cfg, const RunOptions& opts) {
  if (opts.curves.empty()) throw ConfigError("import-curves needs --curves <file>");
  RunManifest m("import-curves", cfg, {cfg.out});
  const auto file = import_curves(m.external_input(opts.curves));
  std::string diag = "line,sample_id,message\n";
  for (const auto& d : file.rejected) {
    std::string msg = d.message;
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    diag += std::to_string(d.line) + "," + d.sample_id + "," + msg + "\n";
  }
  m.write("imported/curves.jsonl", serialize_curves(file.header, file.records));
  m.write("imported/diagnostics.csv", diag);
  m.finish();
  log_line("imported " + std::to_string(file.records.size()) + " records, rejected " + std::to_string(file.rejected.size()));
  if (!file.rejected.empty())
    throw ValidationError(std::to_string(file.rejected.size()) + " curve records failed validation; see imported/diagnostics.csv");
}

// report

namespace detail {

struct CurveKey {
  std::string relation;
  Role role;
  LensKind lens;
  auto operator<=>(const CurveKey&) const = default;
};

struct MeanCurve {
  std::vector<double> sum;
  int n = 0;
  std::vector<double> mean() const {
    auto out = sum;
    for (auto& v : out) v /= std::max(1, n);
    return out;
  }
};

inline void accumulate(MeanCurve& c, const std::vector<double>& v) {
  if (c.sum.empty()) c.sum.assign(v.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) c.sum[i] += v[i];
  ++c.n;
}

inline double column_max(const std::vector<svg::Series>& s) {
  double mx = 0.0;
  for (const auto& x : s)
    for (double v : x.values) mx = std::max(mx, v);
  return mx;
}

inline std::string lens_axis(LensKind k) {
  return k == LensKind::Logit ? "checkpoint (embedding, then attention/block per layer)" : "layer";
}

}  // namespace detail

inline void cmd_report(const PipelineConfig& cfg, const RunOptions& opts) {
  RunManifest m("report", cfg, {cfg.out});
  const auto file = detail::load_curves(m, opts);

  std::map<detail::CurveKey, detail::MeanCurve> means;
  std::map<std::string, int> pairs_per_relation;
  for (const auto& r : file.records) {
    detail::accumulate(means[{r.relation_id, r.role, r.lens}], r.values);
    detail::accumulate(means[{"all", r.role, r.lens}], r.values);
    if (r.role == Role::Suc && r.lens == LensKind::Logit) ++pairs_per_relation[r.relation_id];
  }
  if (!opts.relation.empty() && !pairs_per_relation.contains(opts.relation))
    throw ConfigError("relation '" + opts.relation + "' has no recall pairs in the curve file");

  std::string mc = "relation_id,role,lens,index,mean,n\n";
  for (const auto& [key, curve] : means) {
    if (!opts.relation.empty() && key.relation != "all" && key.relation != opts.relation) continue;
    const auto mean = curve.mean();
    for (std::size_t i = 0; i < mean.size(); ++i)
      mc += key.relation + "," + to_string(key.role) + "," + to_string(key.lens) + "," + std::to_string(i) + "," +
            fmt(mean[i], 8) + "," + std::to_string(curve.n) + "\n";
  }
  m.write("report/mean_curves.csv", mc);

  auto curve_chart = [&](const std::string& relation, LensKind lens) {
    std::vector<svg::Series> series;
    for (Role role : {Role::Suc, Role::Fail, Role::Hal})
      if (auto it = means.find({relation, role, lens}); it != means.end())
        series.push_back({to_string(role), it->second.mean()});
    return svg::line_chart("Mean " + std::string(to_string(lens)) + "-lens curves (" + relation + ")",
                           detail::lens_axis(lens), "probability of tracked token", series, 0.0,
                           std::max(0.05, std::ceil(detail::column_max(series) * 20.0) / 20.0));
  };
  for (LensKind lens : {LensKind::Logit, LensKind::Tuned})
    m.write(std::string("report/mean_curves_") + to_string(lens) + ".svg", curve_chart("all", lens));

  // Blended ratios: the first round(r n) pairs contribute Suc curves, the rest Hal curves.
  std::string relation = opts.relation.empty() ? cfg.report_relation : opts.relation;
  if (!pairs_per_relation.contains(relation)) {
    const auto best = std::max_element(pairs_per_relation.begin(), pairs_per_relation.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    log_line("relation " + relation + " has no recall pairs; blending " + best->first + " instead");
    relation = best->first;
  }
  for (LensKind lens : {LensKind::Logit, LensKind::Tuned})
    m.write("report/mean_curves_" + relation + "_" + to_string(lens) + ".svg", curve_chart(relation, lens));
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> pair_curves[2];
  for (const auto& r : file.records) {
    if (r.relation_id != relation || r.role == Role::Fail) continue;
    auto& slot = pair_curves[r.lens == LensKind::Logit ? 0 : 1][r.pair_id];
    (r.role == Role::Suc ? slot.first : slot.second) = r.values;
  }
  std::string blend = "ratio,lens,index,mean,n_suc,n_hal\n";
  for (LensKind lens : {LensKind::Logit, LensKind::Tuned}) {
    const auto& pc = pair_curves[lens == LensKind::Logit ? 0 : 1];
    const int n = static_cast<int>(pc.size());
    std::vector<svg::Series> series;
    for (double ratio : cfg.blend_ratios) {
      const int n_suc = static_cast<int>(std::llround(ratio * n));
      detail::MeanCurve c;
      int i = 0;
      for (const auto& [id, sh] : pc) detail::accumulate(c, i++ < n_suc ? sh.first : sh.second);
      const auto mean = c.mean();
      for (std::size_t k = 0; k < mean.size(); ++k)
        blend += fmt(ratio, 2) + "," + to_string(lens) + "," + std::to_string(k) + "," + fmt(mean[k], 8) + "," +
                 std::to_string(n_suc) + "," + std::to_string(n - n_suc) + "\n";
      series.push_back({"correct " + fmt(ratio * 100, 0) + "%", mean});
    }
    m.write("report/blend_" + relation + "_" + to_string(lens) + ".svg",
            svg::line_chart("Blended curves, " + relation + " (" + to_string(lens) + " lens)", detail::lens_axis(lens),
                            "mean probability", series, 0.0,
                            std::max(0.05, std::ceil(detail::column_max(series) * 20.0) / 20.0)));
  }
  m.write("report/blend_" + relation + ".csv", blend);

  // Optional sections: included when their producer has run.
  auto have = [&](std::string_view rel) { return std::filesystem::exists(m.output_path(rel)); };
  if (have("stats/rank_stats.csv")) {
    const auto rows = read_csv(m.input("stats/rank_stats.csv"));
    std::map<std::string, std::map<std::string, double>> by_series;  // series -> role -> value
    std::string topk = "source,role,k,frequency\n";
    for (const auto& row : rows) {
      if (row.size() != 4 || row[0] == "relation_id") continue;
      if (row[0] != "macro" && row[0] != "llama2_7b_chat_reference") continue;
      const std::string source = row[0] == "macro" ? "toy" : "reference";
      topk += source + "," + row[1] + "," + row[2] + "," + row[3] + "\n";
      by_series[source + " top-" + row[2]][row[1]] = std::stod(row[3]);
    }
    m.write("report/topk.csv", topk);
    std::vector<svg::Series> series;
    for (const auto& [name, roles] : by_series)
      series.push_back({name, {roles.count("Suc") ? roles.at("Suc") : 0.0, roles.count("Fail") ? roles.at("Fail") : 0.0,
                               roles.count("Hal") ? roles.at("Hal") : 0.0}});
    m.write("report/topk.svg", svg::bar_chart("Tracked token in top-k before the output", {"Suc", "Fail", "Hal"}, series));
  } else {
    log_line("report: no stats/rank_stats.csv, top-k figure skipped (run stats)");
  }

  if (have("attribution/contributions.csv")) {
    std::map<std::string, std::map<int, std::pair<double, double>>> sums;  // prompt -> layer -> (attn, mlp)
    std::map<std::string, std::set<int>> pairs;
    for (const auto& row : read_csv(m.input("attribution/contributions.csv"))) {
      if (row.size() != 6 || row[0] == "pair_id") continue;
      auto& s = sums[row[1]][std::stoi(row[3])];
      s.first += std::stod(row[4]);
      s.second += std::stod(row[5]);
      pairs[row[1]].insert(std::stoi(row[0]));
    }
    std::string out = "# raw inner products with the tracked token's unembedding column, before the final norm\n"
                      "prompt,layer,attention,mlp,n\n";
    std::vector<svg::Series> series;
    double lo = 0.0, hi = 0.0;
    for (const auto& [prompt, layers] : sums) {
      const double n = static_cast<double>(pairs[prompt].size());
      svg::Series a{"attention (" + prompt + ")", {}}, b{"mlp (" + prompt + ")", {}};
      for (const auto& [layer, s] : layers) {
        out += prompt + "," + std::to_string(layer) + "," + fmt(s.first / n, 8) + "," + fmt(s.second / n, 8) + "," +
               std::to_string(pairs[prompt].size()) + "\n";
        a.values.push_back(s.first / n);
        b.values.push_back(s.second / n);
        lo = std::min({lo, s.first / n, s.second / n});
        hi = std::max({hi, s.first / n, s.second / n});
      }
      series.push_back(std::move(a));
      series.push_back(std::move(b));
    }
    m.write("report/contributions.csv", out);
    m.write("report/contributions.svg", svg::line_chart("Mean module contributions (logit-direction units)",
                                                        "layer - 1", "projection on W_U[:, token]", series, lo, hi));
  } else {
    log_line("report: no attribution/contributions.csv, contribution figure skipped (run attribute)");
  }

  for (const std::string which : {"correct", "hallucinated"}) {
    const std::string rel = "attribution/ablation_" + which + ".csv";
    if (!have(rel)) continue;
    std::vector<std::string> rows, cols;
    std::vector<std::vector<double>> values;
    std::map<std::string, std::size_t> row_index;
    for (const auto& row : read_csv(m.input(rel))) {
      if (row.size() != 5 || row[0] == "group") continue;
      const std::string label = row[0] + " " + (row[2] == "attention" ? "attn" : "mlp");
      if (!row_index.contains(label)) {
        row_index[label] = rows.size();
        rows.push_back(label);
        values.emplace_back();
      }
      values[row_index[label]].push_back(std::stod(row[3]));
      const auto layer = row[1];
      if (std::find(cols.begin(), cols.end(), layer) == cols.end()) cols.push_back(layer);
    }
    m.write("report/ablation_" + which + ".svg",
            svg::heatmap("Mean probability change on ablation (" + which + " prompts)", rows, cols, values, "layer"));
  }

  if (have("detector/detector_eval.csv")) {
    std::string det = "source,feature_set,accuracy\n";
    std::vector<svg::Series> series;
    svg::Series toy{"toy model", {}};
    for (const auto& row : read_csv(m.input("detector/detector_eval.csv"))) {
      if (row.size() < 4 || row[0] == "feature_set") continue;
      det += "toy," + row[0] + "," + row[3] + "\n";
      toy.values.push_back(std::stod(row[3]));
    }
    series.push_back(std::move(toy));
    for (const auto& ref : kDetectorReference) {
      det += std::string(ref.model) + ",logit," + fmt(ref.logit, 3) + "\n" + ref.model + ",tuned," + fmt(ref.tuned, 3) +
             "\n" + ref.model + ",both," + fmt(ref.both, 3) + "\n";
      series.push_back({ref.model, {ref.logit, ref.tuned, ref.both}});
    }
    m.write("report/detector.csv", det);
    m.write("report/detector.svg", svg::bar_chart("Held-out detector accuracy", {"logit", "tuned", "both"}, series));
  } else {
    log_line("report: no detector/detector_eval.csv, detector table skipped (run train-detector)");
  }
  m.finish();
  log_line("report written to " + (cfg.out / "report").string());
}

// validate

inline void cmd_validate(const PipelineConfig& cfg, const RunOptions& opts) {
  RunManifest m("validate", cfg, {cfg.out});
  std::vector<std::tuple<std::string, bool, std::string>> checks;
  auto check = [&](std::string name, bool ok, std::string detail) {
    log_line(std::string(ok ? "ok   " : "FAIL ") + name + ": " + detail);
    checks.emplace_back(std::move(name), ok, std::move(detail));
  };
  auto have = [&](std::string_view rel) { return std::filesystem::exists(m.output_path(rel)); };

  const World world = detail::load_world(m);
  const Vocab vocab = detail::load_vocab(m);
  check("vocabulary", build_vocab(world).tokens() == vocab.tokens(), std::to_string(vocab.size()) + " tokens");

  std::optional<Weights> w;
  if (have("model/model.json")) {
    w = detail::load_model(m, vocab);
    check("model", w->all_finite(), "L=" + std::to_string(w->config.n_layers) + " d=" + std::to_string(w->config.hidden_dim));
    double lens_err = 0.0, rec_err = 0.0;
    std::size_t violations = 0, n = 0;
    for (std::size_t i : world.probe_facts()) {
      if (n >= 50) break;
      const auto& f = world.facts[i];
      const auto prompt = encode_prompt(render_query(f, world.registry, 0), vocab);
      const auto out = forward(prompt, *w, CaptureSpec::all(true));
      violations += validate_trace(out.trace).size();
      const int last = static_cast<int>(prompt.size()) - 1;
      const Matrix lens = logit_lens(out.trace, last, *w);
      const Matrix soft = softmax_rows(Matrix(out.logits.row(last)));
      lens_err = std::max(lens_err, static_cast<double>((lens.row(lens.rows() - 1) - soft.row(0)).cwiseAbs().maxCoeff()));
      for (const auto& p : out.trace.positions)
        rec_err = std::max(rec_err, (reconstruct_final_state(p) - p.residual(w->config.n_layers).cast<double>()).cwiseAbs().maxCoeff());
      ++n;
    }
    check("trace additivity", violations == 0, std::to_string(violations) + " violations over " + std::to_string(n) + " prompts");
    check("lens identity", lens_err <= 1e-5, "max abs diff " + fmt(lens_err, 9));
    check("residual reconstruction", rec_err <= 1e-4, "max abs diff " + fmt(rec_err, 9));
  }
  if (w && have("lens/translators.json")) {
    try {
      const auto t = load_translators(m.input("lens/translators.json"), weights_fingerprint(*w));
      t.check_compatible(*w);
      check("translators", true, std::to_string(t.n_layers()) + " layers, fingerprint matches the model");
    } catch (const TranslatorError& e) {
      check("translators", false, e.what());
    }
  }
  std::optional<CurveFile> curves;
  if (!opts.curves.empty() || have("probe/curves.jsonl")) {
    const auto path = opts.curves.empty() ? m.input("probe/curves.jsonl") : m.external_input(opts.curves);
    curves = import_curves(path);
    check("curves", curves->rejected.empty(),
          std::to_string(curves->records.size()) + " valid, " + std::to_string(curves->rejected.size()) + " rejected");
    if (w && opts.curves.empty())
      check("curve model id", curves->header.model == detail::model_id(cfg, *w), curves->header.model);
  }
  for (FeatureSet set : {FeatureSet::LogitOnly, FeatureSet::TunedOnly, FeatureSet::Both}) {
    const auto rel = detail::feature_model_path(set);
    if (!have(rel)) continue;
    const auto model = parse_svm(read_file(m.input(rel)));
    bool ok = model.spec.set == set;
    std::string why = "length " + std::to_string(model.spec.length());
    if (curves && model.spec.model_id != curves->header.model) {
      ok = false;
      why = "trained on '" + model.spec.model_id + "', curves from '" + curves->header.model + "'";
    }
    check(std::string("detector ") + to_string(set), ok, why);
  }

  std::string out = "check,status,detail\n";
  bool all_ok = true;
  for (const auto& [name, ok, detail] : checks) {
    all_ok = all_ok && ok;
    std::string d = detail;
    std::replace(d.begin(), d.end(), ',', ';');
    out += name + "," + (ok ? "ok" : "fail") + "," + d + "\n";
  }
  m.write("validate/validation.csv", out);
  m.finish();
  if (!all_ok) throw ValidationError("artifact validation failed; see validate/validation.csv");
}

// Dispatch.

using Command = void (*)(const PipelineConfig&, const RunOptions&);

inline const std::vector<std::pair<std::string, Command>>& commands() {
  static const std::vector<std::pair<std::string, Command>> kCommands{
      {"gen-world", cmd_gen_world},   {"train-model", cmd_train_model}, {"train-lens", cmd_train_lens},
      {"probe", cmd_probe},           {"stats", cmd_stats},             {"attribute", cmd_attribute},
      {"train-detector", cmd_train_detector}, {"classify", cmd_classify}, {"report", cmd_report},
      {"import-curves", cmd_import_curves},   {"validate", cmd_validate}};
  return kCommands;
}

/// Runs one subcommand (or "all") under the output directory lock.
inline void run_command(const std::string& name, const PipelineConfig& cfg, const RunOptions& opts) {
  DirLock lock(cfg.out);
  if (name == "all") {
    for (const auto& step : {"gen-world", "train-model", "train-lens", "probe", "stats", "attribute", "train-detector",
                             "classify", "report"}) {
      log_line("== " + std::string(step));
      for (const auto& [n, fn] : commands())
        if (n == step) fn(cfg, opts);
    }
    return;
  }
  for (const auto& [n, fn] : commands())
    if (n == name) return fn(cfg, opts);
  throw ConfigError("unknown subcommand '" + name + "'");
}

}  // namespace lensdyn
