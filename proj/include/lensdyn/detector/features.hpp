#pragma once

#include <array>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/trace/curves.hpp"

namespace lensdyn {

enum class FeatureSet { LogitOnly, TunedOnly, Both };

inline const char* to_string(FeatureSet f) {
  switch (f) {
    case FeatureSet::LogitOnly: return "logit";
    case FeatureSet::TunedOnly: return "tuned";
    case FeatureSet::Both: return "both";
  }
  return "?";
}
inline FeatureSet parse_feature_set(std::string_view s) {
  if (s == "logit") return FeatureSet::LogitOnly;
  if (s == "tuned") return FeatureSet::TunedOnly;
  if (s == "both") return FeatureSet::Both;
  throw SpecError("unknown feature set '" + std::string(s) + "' (expected logit, tuned or both)");
}

struct FeatureSpec {
  FeatureSet set = FeatureSet::Both;
  int n_layers = 0;
  std::string model_id;

  int length() const {
    switch (set) {
      case FeatureSet::LogitOnly: return 2 * n_layers + 1;
      case FeatureSet::TunedOnly: return n_layers;
      case FeatureSet::Both: return 3 * n_layers + 1;
    }
    return 0;
  }
  bool operator==(const FeatureSpec&) const = default;
};

enum class ClassLabel { Recalling, Hallucinating };
inline const char* to_string(ClassLabel l) { return l == ClassLabel::Recalling ? "Recalling" : "Hallucinating"; }

struct LabeledVector {
  std::vector<double> x;
  ClassLabel label = ClassLabel::Recalling;
  int pair_id = 0;
  std::string relation_id;
};

/// Suc and Hal curves of one pair under both lenses.
struct PairCurves {
  int pair_id = 0;
  std::string relation_id;
  std::vector<double> suc_logit, suc_tuned, hal_logit, hal_tuned;
};

/// Collects Suc/Hal records per pair (pair-id order). Fail curves are not
/// features.
inline std::vector<PairCurves> group_pair_curves(const std::vector<CurveRecord>& records) {
  std::map<int, PairCurves> by_pair;
  for (const auto& r : records) {
    if (r.role == Role::Fail) continue;
    auto& p = by_pair[r.pair_id];
    p.pair_id = r.pair_id;
    p.relation_id = r.relation_id;
    auto& slot = r.role == Role::Suc ? (r.lens == LensKind::Logit ? p.suc_logit : p.suc_tuned)
                                     : (r.lens == LensKind::Logit ? p.hal_logit : p.hal_tuned);
    slot = r.values;
  }
  std::vector<PairCurves> out;
  for (auto& [id, p] : by_pair) out.push_back(std::move(p));
  return out;
}

namespace detail {
inline std::vector<double> feature_vector(const std::vector<double>& logit, const std::vector<double>& tuned,
                                          const FeatureSpec& spec, int pair_id) {
  std::vector<double> x;
  if (spec.set != FeatureSet::TunedOnly) {
    if (static_cast<int>(logit.size()) != 2 * spec.n_layers + 1)
      throw FeatureError("pair " + std::to_string(pair_id) + ": logit curve has " + std::to_string(logit.size()) +
                         " values, expected " + std::to_string(2 * spec.n_layers + 1));
    x.insert(x.end(), logit.begin(), logit.end());
  }
  if (spec.set != FeatureSet::LogitOnly) {
    if (static_cast<int>(tuned.size()) != spec.n_layers)
      throw FeatureError("pair " + std::to_string(pair_id) + ": tuned curve has " + std::to_string(tuned.size()) +
                         " values, expected " + std::to_string(spec.n_layers));
    x.insert(x.end(), tuned.begin(), tuned.end());
  }
  return x;
}
}  // namespace detail

/// One Recalling vector (Suc curve) and one Hallucinating vector (Hal curve);
/// Both = logit followed by tuned.
inline std::array<LabeledVector, 2> featurize(const PairCurves& c, const FeatureSpec& spec) {
  return {LabeledVector{detail::feature_vector(c.suc_logit, c.suc_tuned, spec, c.pair_id), ClassLabel::Recalling,
                        c.pair_id, c.relation_id},
          LabeledVector{detail::feature_vector(c.hal_logit, c.hal_tuned, spec, c.pair_id), ClassLabel::Hallucinating,
                        c.pair_id, c.relation_id}};
}

inline std::vector<LabeledVector> featurize_all(const std::vector<PairCurves>& pairs, const FeatureSpec& spec) {
  std::vector<LabeledVector> out;
  for (const auto& p : pairs)
    for (auto& v : featurize(p, spec)) out.push_back(std::move(v));
  return out;
}

struct Split {
  std::vector<LabeledVector> train, test;
};

/// Pair-level split: round(fraction * pairs) pairs, chosen by a seeded
/// shuffle of the sorted pair ids, go to the test side. Input order is kept
/// within each side.
inline Split split_dataset(const std::vector<LabeledVector>& data, double test_fraction, std::uint64_t seed) {
  if (data.empty()) throw SpecError("split: empty dataset");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw SpecError("split: test fraction must lie in (0, 1)");
  std::vector<int> ids;
  for (const auto& v : data) ids.push_back(v.pair_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(seed);
  rng.shuffle(std::span(ids));
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
  std::vector<int> test_ids(ids.begin(), ids.begin() + static_cast<long>(n_test));
  std::sort(test_ids.begin(), test_ids.end());
  Split s;
  for (const auto& v : data)
    (std::binary_search(test_ids.begin(), test_ids.end(), v.pair_id) ? s.test : s.train).push_back(v);
  return s;
}

}  // namespace lensdyn
