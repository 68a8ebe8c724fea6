#include <cstdio>
#include <exception>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lensdyn/pipeline/pipeline.hpp"

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kOther = 1;
constexpr int kConfig = 2;
constexpr int kPrerequisite = 3;
constexpr int kValidation = 4;

std::vector<int> parse_k_list(const std::string& text) {
  std::vector<int> ks;
  std::stringstream in(text);
  for (std::string item; std::getline(in, item, ',');) {
    try {
      std::size_t used = 0;
      ks.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw lensdyn::ConfigError("--k expects a comma separated list of integers, got '" + text + "'");
    }
  }
  return ks;
}

int report(const char* kind, const std::exception& e, int code) {
  std::fprintf(stderr, "lensdyn: %s: %s\n", kind, e.what());
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Toy-scale lens dynamics toolkit: synthetic facts, residual lenses, attribution and a curve detector"};
  app.set_version_flag("--version", std::string(LENSDYN_VERSION));
  app.require_subcommand(1);

  std::string config_path = "configs/default.json";
  std::vector<std::string> seed_overrides;
  std::string out_dir, feature_set, k_list, relation, curves;
  app.add_option("--config", config_path, "pipeline config (JSON)");
  app.add_option("--seed-override", seed_overrides, "replace a named seed, name=int (repeatable)");
  app.add_option("--out", out_dir, "output directory (overrides paths.out)");
  app.add_option("--feature-set", feature_set, "detector features")->check(CLI::IsMember({"logit", "tuned", "both"}));
  app.add_option("--k", k_list, "top-k list for stats, e.g. 1,5");
  app.add_option("--relation", relation, "relation shown by report");
  app.add_option("--curves", curves, "external curve file (import-curves, train-detector, classify, report, validate)");

  const std::vector<std::pair<std::string, std::string>> subcommands{
      {"gen-world", "generate the synthetic world, vocabulary and corpora"},
      {"train-model", "train the toy transformer"},
      {"train-lens", "fit tuned-lens translators"},
      {"probe", "query the model, build recall pairs and lens curves"},
      {"stats", "top-k presence statistics"},
      {"attribute", "module contributions and ablation sweeps"},
      {"train-detector", "train linear SVM detectors on lens curves"},
      {"classify", "classify curves with a trained detector"},
      {"report", "CSV tables and SVG figures"},
      {"import-curves", "validate and import an external curve file"},
      {"validate", "check artifact invariants"},
      {"all", "run gen-world through report"}};
  for (const auto& [name, help] : subcommands) {
    auto* sub = app.add_subcommand(name, help);
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    auto cfg = lensdyn::PipelineConfig::load(config_path);
    for (const auto& s : seed_overrides) cfg.override_seed(s);
    if (!out_dir.empty()) cfg.out = std::filesystem::absolute(out_dir).lexically_normal();
    lensdyn::RunOptions opts;
    if (!feature_set.empty()) opts.feature_set = lensdyn::parse_feature_set(feature_set);
    if (!k_list.empty()) opts.ks = parse_k_list(k_list);
    opts.relation = relation;
    if (!curves.empty()) opts.curves = std::filesystem::absolute(curves);
    lensdyn::run_command(command, cfg, opts);
    return kOk;
  } catch (const lensdyn::ConfigError& e) {
    return report("config error", e, kConfig);
  } catch (const lensdyn::SpecError& e) {
    return report("config error", e, kConfig);
  } catch (const lensdyn::PrerequisiteError& e) {
    return report("missing prerequisite", e, kPrerequisite);
  } catch (const lensdyn::ValidationError& e) {
    return report("validation failure", e, kValidation);
  } catch (const lensdyn::FormatError& e) {
    return report("validation failure", e, kValidation);
  } catch (const lensdyn::TranslatorError& e) {
    return report("validation failure", e, kValidation);
  } catch (const lensdyn::FeatureError& e) {
    return report("validation failure", e, kValidation);
  } catch (const std::exception& e) {
    return report("error", e, kOther);
  }
}
