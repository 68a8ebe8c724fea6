#pragma once

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/fs.hpp"
#include "lensdyn/detector/features.hpp"

namespace lensdyn {

struct SvmHyper {
  double C = 1.0;
  int epochs = 200;
  double learning_rate = 0.05;  // initial step of the per-sample subgradient pass
};

struct SvmModel {
  std::vector<double> w;
  double b = 0.0;
  FeatureSpec spec;
  double C = 1.0;
  std::uint64_t seed = 0;
  std::vector<double> objective_trace;  // accepted objective after each epoch (index 0 = initial)
  double train_accuracy = 0.0;
};

struct Prediction {
  ClassLabel label = ClassLabel::Hallucinating;
  double margin = 0.0;
};

/// Score <w, x> + b; positive means Recalling, zero or below Hallucinating.
inline Prediction predict(const SvmModel& m, const std::vector<double>& x) {
  if (x.size() != m.w.size())
    throw FeatureError("vector of length " + std::to_string(x.size()) + " given to a model expecting " +
                       std::to_string(m.w.size()) + " (" + to_string(m.spec.set) + " features)");
  double s = m.b;
  for (std::size_t i = 0; i < x.size(); ++i) s += m.w[i] * x[i];
  return {s > 0.0 ? ClassLabel::Recalling : ClassLabel::Hallucinating, s};
}

namespace detail {
inline double svm_target(ClassLabel l) { return l == ClassLabel::Recalling ? 1.0 : -1.0; }

inline double svm_objective(const std::vector<double>& w, double b, const std::vector<LabeledVector>& data, double C) {
  double reg = 0.0;
  for (double v : w) reg += v * v;
  double hinge = 0.0;
  for (const auto& s : data) {
    double score = b;
    for (std::size_t i = 0; i < w.size(); ++i) score += w[i] * s.x[i];
    hinge += std::max(0.0, 1.0 - svm_target(s.label) * score);
  }
  return 0.5 * reg + C * hinge;
}
}  // namespace detail

/// Soft-margin linear SVM, J(w, b) = |w|^2 / 2 + C sum_i max(0, 1 - y_i(w.x_i + b)).
/// Each epoch runs one seeded-order pass of per-sample subgradient steps on
/// J / n. An epoch that raises J is rolled back and the step halved, so the
/// recorded objective never increases.
inline SvmModel train_svm(const std::vector<LabeledVector>& train, const FeatureSpec& spec, const SvmHyper& hyper,
                          std::uint64_t seed) {
  if (train.empty()) throw TrainingError("svm: empty training set");
  if (!(hyper.C > 0) || hyper.epochs < 1 || !(hyper.learning_rate > 0))
    throw SpecError("svm: C, epochs and learning_rate must be positive");
  bool has[2] = {false, false};
  const auto D = static_cast<std::size_t>(spec.length());
  for (const auto& s : train) {
    if (s.x.size() != D)
      throw FeatureError("svm: vector of length " + std::to_string(s.x.size()) + ", feature spec expects " +
                         std::to_string(D));
    has[s.label == ClassLabel::Recalling ? 0 : 1] = true;
  }
  if (!has[0] || !has[1]) throw TrainingError("svm: training set holds a single class");

  const double n = static_cast<double>(train.size());
  const double lambda = 1.0 / (hyper.C * n);  // J / (C n) = lambda |w|^2 / 2 + mean hinge
  SvmModel m;
  m.w.assign(D, 0.0);
  m.spec = spec;
  m.C = hyper.C;
  m.seed = seed;
  double objective = detail::svm_objective(m.w, m.b, train, hyper.C);
  m.objective_trace.push_back(objective);

  Rng rng(seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double eta = hyper.learning_rate;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(std::span(order));
    auto w = m.w;
    double b = m.b;
    for (std::size_t idx : order) {
      const auto& s = train[idx];
      const double y = detail::svm_target(s.label);
      double score = b;
      for (std::size_t i = 0; i < D; ++i) score += w[i] * s.x[i];
      const bool active = y * score < 1.0;
      for (std::size_t i = 0; i < D; ++i) w[i] -= eta * (lambda * w[i] - (active ? y * s.x[i] : 0.0));
      if (active) b += eta * y;
    }
    const double next = detail::svm_objective(w, b, train, hyper.C);
    if (next <= objective) {
      m.w = std::move(w);
      m.b = b;
      objective = next;
    } else {
      eta *= 0.5;
    }
    m.objective_trace.push_back(objective);
  }
  int correct = 0;
  for (const auto& s : train) correct += predict(m, s.x).label == s.label ? 1 : 0;
  m.train_accuracy = correct / n;
  return m;
}

struct Evaluation {
  int n = 0;
  double accuracy = 0.0;
  // confusion[true][predicted], index 0 = Recalling, 1 = Hallucinating
  std::array<std::array<int, 2>, 2> confusion{};
  double precision(ClassLabel c) const {
    const int i = c == ClassLabel::Recalling ? 0 : 1;
    const int predicted = confusion[0][i] + confusion[1][i];
    return predicted == 0 ? 0.0 : static_cast<double>(confusion[i][i]) / predicted;
  }
  double recall(ClassLabel c) const {
    const int i = c == ClassLabel::Recalling ? 0 : 1;
    const int actual = confusion[i][0] + confusion[i][1];
    return actual == 0 ? 0.0 : static_cast<double>(confusion[i][i]) / actual;
  }
  double majority_baseline() const {
    const int rec = confusion[0][0] + confusion[0][1];
    return n == 0 ? 0.0 : static_cast<double>(std::max(rec, n - rec)) / n;
  }
};

inline Evaluation evaluate(const SvmModel& m, const std::vector<LabeledVector>& test) {
  Evaluation e;
  for (const auto& s : test) {
    const int t = s.label == ClassLabel::Recalling ? 0 : 1;
    const int p = predict(m, s.x).label == ClassLabel::Recalling ? 0 : 1;
    ++e.confusion[t][p];
    ++e.n;
  }
  e.accuracy = e.n == 0 ? 0.0 : static_cast<double>(e.confusion[0][0] + e.confusion[1][1]) / e.n;
  return e;
}

/// Held-out accuracies reported for real models (Logit, Tuned, Both).
struct DetectorReference {
  const char* model;
  double logit, tuned, both;
};
inline constexpr std::array<DetectorReference, 4> kDetectorReference{{{"Llama2-7B-chat", 0.839, 0.854, 0.879},
                                                                       {"Llama2-13B", 0.849, 0.840, 0.878},
                                                                       {"OPT-6.7B", 0.856, 0.858, 0.865},
                                                                       {"Pythia-6.9B", 0.824, 0.764, 0.822}}};

// Model file.

inline constexpr std::string_view kSvmFormat = "lensdyn-svm";

inline std::string serialize_svm(const SvmModel& m) {
  nlohmann::ordered_json j{{"format", kSvmFormat},
                           {"version", 1},
                           {"feature_spec",
                            {{"feature_set", to_string(m.spec.set)},
                             {"n_layers", m.spec.n_layers},
                             {"length", m.spec.length()},
                             {"model_id", m.spec.model_id}}},
                           {"C", m.C},
                           {"seed", m.seed},
                           {"b", m.b},
                           {"w", m.w},
                           {"metrics",
                            {{"train_accuracy", m.train_accuracy},
                             {"final_objective", m.objective_trace.empty() ? 0.0 : m.objective_trace.back()},
                             {"epochs", static_cast<int>(m.objective_trace.size()) - 1}}},
                           {"objective_trace", m.objective_trace}};
  return j.dump(1) + "\n";
}

inline SvmModel parse_svm(std::string_view text) {
  SvmModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format").get<std::string>() != kSvmFormat) throw FormatError("svm model: unknown format");
    if (j.at("version").get<int>() != 1) throw FormatError("svm model: unsupported version");
    const auto& fs = j.at("feature_spec");
    m.spec.set = parse_feature_set(fs.at("feature_set").get<std::string>());
    m.spec.n_layers = fs.at("n_layers").get<int>();
    m.spec.model_id = fs.value("model_id", std::string{});
    m.C = j.at("C").get<double>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.b = j.at("b").get<double>();
    m.w = j.at("w").get<std::vector<double>>();
    m.objective_trace = j.value("objective_trace", std::vector<double>{});
    m.train_accuracy = j.at("metrics").value("train_accuracy", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("svm model: ") + e.what());
  }
  if (static_cast<int>(m.w.size()) != m.spec.length())
    throw FormatError("svm model: weight vector has " + std::to_string(m.w.size()) + " entries, feature spec needs " +
                      std::to_string(m.spec.length()));
  for (double v : m.w)
    if (!std::isfinite(v)) throw FormatError("svm model: non-finite weight");
  if (!std::isfinite(m.b)) throw FormatError("svm model: non-finite bias");
  return m;
}

}  // namespace lensdyn
