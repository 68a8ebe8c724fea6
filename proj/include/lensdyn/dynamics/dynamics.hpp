#pragma once

#include <array>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lensdyn/core/tensor.hpp"
#include "lensdyn/dynamics/pairs.hpp"
#include "lensdyn/trace/curves.hpp"

namespace lensdyn {

/// Suc, Fail and Hal curves of one pair under one lens.
struct CurveTriplet {
  std::vector<double> suc;   // P(a_r | p_r)
  std::vector<double> fail;  // P(a_r | p_w)
  std::vector<double> hal;   // P(a_w | p_w)

  const std::vector<double>& operator[](Role r) const {
    return r == Role::Suc ? suc : r == Role::Fail ? fail : hal;
  }
};

inline std::vector<double> column_curve(const Matrix& dist, TokenId token) {
  if (token < 0 || token >= dist.cols()) throw VocabError("tracked token " + std::to_string(token) + " outside the distribution");
  std::vector<double> out(static_cast<std::size_t>(dist.rows()));
  for (Eigen::Index i = 0; i < dist.rows(); ++i) out[static_cast<std::size_t>(i)] = dist(i, token);
  return out;
}

/// `dist_r` / `dist_w`: lens distributions (checkpoint rows) at the last
/// token of p_r / p_w.
inline CurveTriplet curve_triplet(const RecallPair& pair, const Matrix& dist_r, const Matrix& dist_w) {
  if (dist_r.size() == 0 || dist_w.size() == 0) throw CaptureError("curve_triplet: missing lens distributions");
  return {column_curve(dist_r, pair.a_r), column_curve(dist_w, pair.a_r), column_curve(dist_w, pair.a_w)};
}

/// Records for the three roles, sample ids "<pair>-<role>-<lens>".
inline std::vector<CurveRecord> curve_records(const RecallPair& pair, const std::string& relation_id,
                                              const CurveTriplet& c, LensKind lens) {
  std::vector<CurveRecord> out;
  for (Role role : {Role::Suc, Role::Fail, Role::Hal}) {
    CurveRecord r;
    r.sample_id = std::to_string(pair.pair_id) + "-" + to_string(role) + "-" + to_string(lens);
    r.relation_id = relation_id;
    r.pair_id = pair.pair_id;
    r.role = role;
    r.lens = lens;
    r.tracked_token_id = role == Role::Hal ? pair.a_w : pair.a_r;
    r.values = c[role];
    out.push_back(std::move(r));
  }
  return out;
}

// Top-k presence statistics.

/// 0-based rank of `token`: entries with a larger probability, plus equal
/// probability at a lower id, rank ahead of it.
template <typename Derived>
int token_rank(const Eigen::DenseBase<Derived>& row, TokenId token) {
  const auto pt = row(token);
  int rank = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j)
    if (row(j) > pt || (row(j) == pt && j < token)) ++rank;
  return rank;
}

inline std::vector<int> rank_sequence(const Matrix& dist, TokenId token) {
  std::vector<int> out;
  for (Eigen::Index i = 0; i < dist.rows(); ++i) out.push_back(token_rank(dist.row(i), token));
  return out;
}

struct RankSample {
  std::string relation_id;
  Role role = Role::Suc;
  std::vector<int> ranks;  // per checkpoint, final output checkpoint last
};

/// Ranked ahead of position k at any checkpoint before the final one.
inline bool present_in_topk(const std::vector<int>& ranks, int k) {
  for (std::size_t i = 0; i + 1 < ranks.size(); ++i)
    if (ranks[i] < k) return true;
  return false;
}

struct RankCell {
  std::string relation_id;  // "macro" for the cross-relation average
  Role role = Role::Suc;
  int k = 1;
  double frequency = 0.0;
  int n = 0;
};

struct RankStats {
  std::vector<RankCell> cells;  // per relation (sorted), then macro rows

  double macro(Role role, int k) const {
    for (const auto& c : cells)
      if (c.relation_id == "macro" && c.role == role && c.k == k) return c.frequency;
    throw SpecError("rank stats have no macro cell for k=" + std::to_string(k));
  }
};

/// Presence frequency per (relation, role, k), then the unweighted mean of
/// relations per (role, k).
inline RankStats topk_presence_stats(const std::vector<RankSample>& samples, const std::vector<int>& ks, int vocab_size) {
  for (int k : ks)
    if (k < 1 || k >= vocab_size)
      throw SpecError("k=" + std::to_string(k) + " must lie in [1, V) with V=" + std::to_string(vocab_size));
  std::set<std::string> relations;
  for (const auto& s : samples) relations.insert(s.relation_id);

  RankStats stats;
  std::map<std::pair<int, int>, std::pair<double, int>> macro;  // (role, k) -> (sum, relations)
  for (const auto& rel : relations) {
    for (Role role : {Role::Suc, Role::Fail, Role::Hal}) {
      for (int k : ks) {
        int n = 0, hit = 0;
        for (const auto& s : samples) {
          if (s.relation_id != rel || s.role != role) continue;
          ++n;
          hit += present_in_topk(s.ranks, k) ? 1 : 0;
        }
        if (n == 0) continue;
        const double f = static_cast<double>(hit) / n;
        stats.cells.push_back({rel, role, k, f, n});
        auto& m = macro[{static_cast<int>(role), k}];
        m.first += f;
        ++m.second;
      }
    }
  }
  for (Role role : {Role::Suc, Role::Fail, Role::Hal})
    for (int k : ks)
      if (auto it = macro.find({static_cast<int>(role), k}); it != macro.end())
        stats.cells.push_back({"macro", role, k, it->second.first / it->second.second, it->second.second});
  return stats;
}

/// Reference presence frequencies (percent) of the analysed 7B chat model.
struct RankReference {
  int k;
  double suc, fail, hal;
};
inline constexpr std::array<RankReference, 2> kRankReference{{{1, 77.57, 31.28, 68.04}, {5, 93.21, 56.71, 92.70}}};

inline std::string rank_stats_csv(const RankStats& stats) {
  std::string out =
      "# presence = tracked token in top-k at any checkpoint before the output; macro = unweighted mean over "
      "relations\nrelation_id,role,k,frequency\n";
  char buf[64];
  for (const auto& c : stats.cells) {
    std::snprintf(buf, sizeof buf, "%.6f", c.frequency);
    out += c.relation_id + "," + to_string(c.role) + "," + std::to_string(c.k) + "," + buf + "\n";
  }
  for (const auto& r : kRankReference)
    for (auto [role, v] : {std::pair{Role::Suc, r.suc}, std::pair{Role::Fail, r.fail}, std::pair{Role::Hal, r.hal}}) {
      std::snprintf(buf, sizeof buf, "%.4f", v / 100.0);
      out += std::string("llama2_7b_chat_reference,") + to_string(role) + "," + std::to_string(r.k) + "," + buf + "\n";
    }
  return out;
}

}  // namespace lensdyn
