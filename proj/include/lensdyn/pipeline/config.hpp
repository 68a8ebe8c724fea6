#pragma once

#include <cctype>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/config.hpp"
#include "lensdyn/core/fs.hpp"
#include "lensdyn/detector/svm.hpp"
#include "lensdyn/dynamics/pairs.hpp"
#include "lensdyn/lenses/tuned_lens.hpp"
#include "lensdyn/synth/train.hpp"
#include "lensdyn/synth/world.hpp"

namespace lensdyn {

/// Named seeds; every random stream of the pipeline derives from one of them.
struct Seeds {
  std::uint64_t world = 1;
  std::uint64_t corpus = 7;
  std::uint64_t train = 11;
  std::uint64_t lens = 5;
  std::uint64_t split = 3;
  std::uint64_t svm = 9;

  std::map<std::string, std::uint64_t*> named() {
    return {{"world", &world}, {"corpus", &corpus}, {"train", &train},
            {"lens", &lens},   {"split", &split},   {"svm", &svm}};
  }
};

struct PipelineConfig {
  std::filesystem::path source;  // config file, for relative paths
  std::filesystem::path templates;
  std::filesystem::path filter_terms;
  std::filesystem::path out;
  std::string model_name = "toy";
  WorldSpec world;
  ModelConfig model;  // vocab_size comes from the world
  TrainHyper train;
  TunedLensHyper lens;
  int pair_cap = kDefaultPairCap;
  int attribution_pairs = 32;
  double test_fraction = 0.2;
  SvmHyper svm;
  FeatureSet feature_set = FeatureSet::Both;
  std::vector<int> ks{1, 5};
  std::string report_relation = "P36";
  std::vector<double> blend_ratios{0.0, 0.25, 0.5, 0.75, 1.0};
  Seeds seeds;

  /// Applies "name=int".
  void override_seed(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw ConfigError("seed override '" + std::string(assignment) + "' is not name=int");
    const std::string name(assignment.substr(0, eq));
    const std::string value(assignment.substr(eq + 1));
    auto named = seeds.named();
    auto it = named.find(name);
    if (it == named.end()) throw ConfigError("unknown seed '" + name + "'");
    try {
      if (value.empty() || !std::isdigit(static_cast<unsigned char>(value.front())))
        throw std::invalid_argument("not a digit");
      std::size_t used = 0;
      const auto v = std::stoull(value, &used);
      if (used != value.size()) throw std::invalid_argument("trailing characters");
      *it->second = v;
    } catch (const std::logic_error&) {
      throw ConfigError("seed '" + name + "' needs a non-negative integer, got '" + value + "'");
    }
    world.seed = seeds.world;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["paths"] = {{"templates", templates.string()}, {"filter_terms", filter_terms.string()}, {"out", out.string()}};
    j["model_name"] = model_name;
    j["world"] = world;
    j["model"] = {{"n_layers", model.n_layers},       {"hidden_dim", model.hidden_dim}, {"n_heads", model.n_heads},
                  {"max_seq_len", model.max_seq_len}, {"mlp_ratio", model.mlp_ratio},   {"norm_epsilon", model.norm_epsilon}};
    j["train"] = train;
    j["tuned_lens"] = lens;
    j["probe"] = {{"pair_cap", pair_cap}};
    j["attribution"] = {{"pairs", attribution_pairs}};
    j["detector"] = {{"test_fraction", test_fraction},
                     {"C", svm.C},
                     {"epochs", svm.epochs},
                     {"learning_rate", svm.learning_rate},
                     {"feature_set", to_string(feature_set)}};
    j["stats"] = {{"k", ks}};
    j["report"] = {{"relation", report_relation}, {"blend_ratios", blend_ratios}};
    j["seeds"] = {{"world", seeds.world}, {"corpus", seeds.corpus}, {"train", seeds.train},
                  {"lens", seeds.lens},   {"split", seeds.split},   {"svm", seeds.svm}};
    return j;
  }

  static PipelineConfig parse(std::string_view text, const std::filesystem::path& source) {
    PipelineConfig c;
    c.source = source;
    const auto base = source.has_parent_path() ? source.parent_path() : std::filesystem::path(".");
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_absolute() ? path : (base / path).lexically_normal();
    };
    try {
      const auto j = nlohmann::json::parse(text);
      const auto& paths = j.at("paths");
      c.templates = resolve(paths.at("templates").get<std::string>());
      c.filter_terms = resolve(paths.value("filter_terms", std::string{}));
      c.out = resolve(paths.value("out", std::string("out")));
      if (paths.value("filter_terms", std::string{}).empty()) c.filter_terms.clear();
      c.model_name = j.value("model_name", c.model_name);
      if (j.contains("world")) c.world = j["world"].get<WorldSpec>();
      if (j.contains("model")) {
        const auto& m = j["model"];
        ModelConfig d;
        c.model.n_layers = m.value("n_layers", d.n_layers);
        c.model.hidden_dim = m.value("hidden_dim", d.hidden_dim);
        c.model.n_heads = m.value("n_heads", d.n_heads);
        c.model.max_seq_len = m.value("max_seq_len", d.max_seq_len);
        c.model.mlp_ratio = m.value("mlp_ratio", d.mlp_ratio);
        c.model.norm_epsilon = m.value("norm_epsilon", d.norm_epsilon);
      }
      if (j.contains("train")) c.train = j["train"].get<TrainHyper>();
      if (j.contains("tuned_lens")) c.lens = j["tuned_lens"].get<TunedLensHyper>();
      if (j.contains("probe")) c.pair_cap = j["probe"].value("pair_cap", c.pair_cap);
      if (j.contains("attribution")) c.attribution_pairs = j["attribution"].value("pairs", c.attribution_pairs);
      if (j.contains("detector")) {
        const auto& d = j["detector"];
        c.test_fraction = d.value("test_fraction", c.test_fraction);
        c.svm.C = d.value("C", c.svm.C);
        c.svm.epochs = d.value("epochs", c.svm.epochs);
        c.svm.learning_rate = d.value("learning_rate", c.svm.learning_rate);
        c.feature_set = parse_feature_set(d.value("feature_set", std::string("both")));
      }
      if (j.contains("stats")) c.ks = j["stats"].value("k", c.ks);
      if (j.contains("report")) {
        c.report_relation = j["report"].value("relation", c.report_relation);
        c.blend_ratios = j["report"].value("blend_ratios", c.blend_ratios);
      }
      if (!j.contains("seeds")) throw ConfigError("config must list every seed explicitly under \"seeds\"");
      const auto& s = j["seeds"];
      for (auto& [name, slot] : c.seeds.named()) {
        if (!s.contains(name)) throw ConfigError("config is missing seed '" + name + "'");
        *slot = s.at(name).get<std::uint64_t>();
      }
      c.world.seed = c.seeds.world;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + source.string() + ": " + e.what());
    } catch (const SpecError& e) {
      throw ConfigError("config " + source.string() + ": " + e.what());
    }
    c.validate();
    return c;
  }

  static PipelineConfig load(const std::filesystem::path& path) {
    std::string text;
    try {
      text = read_file(path);
    } catch (const FormatError&) {
      throw ConfigError("cannot read config file " + path.string());
    }
    return parse(text, path);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (pair_cap < 1) fail("probe.pair_cap must be >= 1");
    if (attribution_pairs < 0) fail("attribution.pairs must be >= 0");
    if (!(test_fraction > 0 && test_fraction < 1)) fail("detector.test_fraction must lie in (0, 1)");
    if (ks.empty()) fail("stats.k must not be empty");
    for (int k : ks)
      if (k < 1) fail("stats.k entries must be >= 1");
    for (double r : blend_ratios)
      if (!(r >= 0 && r <= 1)) fail("report.blend_ratios must lie in [0, 1]");
    if (templates.empty()) fail("paths.templates is required");
    try {
      ModelConfig probe = model;
      probe.vocab_size = 3;
      probe.validate();
    } catch (const SpecError& e) {
      fail(e.what());
    }
  }
};

}  // namespace lensdyn
