#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "lensdyn/core/model.hpp"
#include "lensdyn/dynamics/pairs.hpp"

namespace lensdyn {

/// Per-layer projections of a^l and m^l onto one token's unembedding column.
struct ContributionProfile {
  TokenId token = 0;
  std::vector<double> attn;  // layer 1..L
  std::vector<double> mlp;
};

/// Raw inner products <a^l, W_U[:, token]> and <m^l, W_U[:, token]>, before
/// the final normalization (which is not additive over layers).
inline ContributionProfile module_contributions(const ResidualTrace& trace, TokenId token, int position,
                                                const Weights& w) {
  const auto& p = trace.at(position);
  if (!p.has_module_outputs()) throw CaptureError("module outputs were not captured at position " + std::to_string(position));
  if (token < 0 || token >= w.config.vocab_size) throw VocabError("token " + std::to_string(token) + " outside vocabulary");
  const RowVectorT<double> u = w.unembedding.col(token).transpose().cast<double>();
  ContributionProfile out{token, {}, {}};
  for (int l = 0; l < p.attn_out.rows(); ++l) {
    out.attn.push_back(p.attn_out.row(l).cast<double>().dot(u));
    out.mlp.push_back(p.mlp_out.row(l).cast<double>().dot(u));
  }
  return out;
}

inline double final_probability(const Matrix& logits, TokenId token) {
  const auto row = logits.row(logits.rows() - 1);
  const double mx = row.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index j = 0; j < row.size(); ++j) sum += std::exp(static_cast<double>(row(j)) - mx);
  return std::exp(static_cast<double>(row(token)) - mx) / sum;
}

/// P_ablated(tracked) - P_original(tracked) at the last position, with the
/// chosen module's output at (layer, position) forced to zero.
inline double ablate_module(const Weights& w, std::span<const TokenId> tokens, int layer, ModuleKind which, int position,
                            TokenId tracked) {
  if (layer < 1 || layer > w.config.n_layers)
    throw IndexError("layer " + std::to_string(layer) + " outside [1, " + std::to_string(w.config.n_layers) + "]");
  if (position < 0 || position >= static_cast<int>(tokens.size()))
    throw IndexError("position " + std::to_string(position) + " outside the prompt");
  if (tracked < 0 || tracked >= w.config.vocab_size) throw VocabError("tracked token outside vocabulary");
  const double base = final_probability(forward(tokens, w).logits, tracked);
  const Ablation ab{layer, which, position};
  const double ablated = final_probability(forward(tokens, w, CaptureSpec::none(), std::span(&ab, 1)).logits, tracked);
  return ablated - base;
}

// Position grouping.

enum class PositionGroup { SubjectFirst, SubjectMiddle, SubjectLast, RelationOther, LastToken };
inline constexpr std::array<PositionGroup, 5> kPositionGroups{PositionGroup::SubjectFirst, PositionGroup::SubjectMiddle,
                                                              PositionGroup::SubjectLast, PositionGroup::RelationOther,
                                                              PositionGroup::LastToken};

inline const char* to_string(PositionGroup g) {
  switch (g) {
    case PositionGroup::SubjectFirst: return "subject-first";
    case PositionGroup::SubjectMiddle: return "subject-middle";
    case PositionGroup::SubjectLast: return "subject-last";
    case PositionGroup::RelationOther: return "relation/other";
    case PositionGroup::LastToken: return "last-token";
  }
  return "?";
}

/// Inclusive token span [first, last].
struct Span {
  int first = 0;
  int last = 0;
};

/// Last occurrence of the subject's tokens inside the prompt.
inline Span locate_subject(std::span<const TokenId> prompt, std::span<const TokenId> subject) {
  if (subject.empty()) throw SpanError("empty subject");
  for (auto start = static_cast<long>(prompt.size()) - static_cast<long>(subject.size()); start >= 0; --start)
    if (std::equal(subject.begin(), subject.end(), prompt.begin() + start))
      return {static_cast<int>(start), static_cast<int>(start + static_cast<long>(subject.size()) - 1)};
  throw SpanError("subject not found in prompt");
}

/// One label per position. The final position is always last-token; on a
/// one-token subject subject-last wins over subject-first.
inline std::vector<PositionGroup> position_groups(int n_tokens, Span subject) {
  if (n_tokens < 1) throw SpanError("empty prompt");
  if (subject.first < 0 || subject.last < subject.first || subject.last >= n_tokens)
    throw SpanError("subject span [" + std::to_string(subject.first) + ", " + std::to_string(subject.last) +
                    "] outside a prompt of " + std::to_string(n_tokens) + " tokens");
  std::vector<PositionGroup> out(static_cast<std::size_t>(n_tokens), PositionGroup::RelationOther);
  for (int i = subject.first; i <= subject.last; ++i) out[i] = PositionGroup::SubjectMiddle;
  out[subject.first] = PositionGroup::SubjectFirst;
  out[subject.last] = PositionGroup::SubjectLast;
  out.back() = PositionGroup::LastToken;
  return out;
}

struct PositionDelta {
  int position = 0;
  PositionGroup group = PositionGroup::RelationOther;
  int layer = 1;
  ModuleKind module = ModuleKind::Attention;
  double delta = 0.0;
};

struct HeatmapCell {
  PositionGroup group = PositionGroup::RelationOther;
  int layer = 1;
  ModuleKind module = ModuleKind::Attention;
  double sum = 0.0;
  int n = 0;
  double mean() const { return n == 0 ? 0.0 : sum / n; }
};

/// Cells in (group, layer, module) order; |groups| x L x 2 of them.
struct AblationHeatmap {
  int n_layers = 0;
  std::vector<HeatmapCell> cells;

  static AblationHeatmap empty(int n_layers) {
    AblationHeatmap h{n_layers, {}};
    for (auto g : kPositionGroups)
      for (int l = 1; l <= n_layers; ++l)
        for (auto m : {ModuleKind::Attention, ModuleKind::Mlp}) h.cells.push_back({g, l, m, 0.0, 0});
    return h;
  }
  HeatmapCell& cell(PositionGroup g, int layer, ModuleKind m) {
    return cells[(static_cast<std::size_t>(g) * n_layers + (layer - 1)) * 2 + (m == ModuleKind::Mlp ? 1 : 0)];
  }
  const HeatmapCell& cell(PositionGroup g, int layer, ModuleKind m) const {
    return const_cast<AblationHeatmap*>(this)->cell(g, layer, m);
  }
  void add(const PositionDelta& d) {
    auto& c = cell(d.group, d.layer, d.module);
    c.sum += d.delta;
    ++c.n;
  }
};

/// Every (position, layer, module) ablation of one prompt, canonical order.
inline std::vector<PositionDelta> sweep_prompt(const Weights& w, std::span<const TokenId> prompt, Span subject,
                                               TokenId tracked) {
  const auto groups = position_groups(static_cast<int>(prompt.size()), subject);
  const double base = final_probability(forward(prompt, w).logits, tracked);
  std::vector<PositionDelta> out;
  for (int pos = 0; pos < static_cast<int>(prompt.size()); ++pos)
    for (int l = 1; l <= w.config.n_layers; ++l)
      for (auto m : {ModuleKind::Attention, ModuleKind::Mlp}) {
        const Ablation ab{l, m, pos};
        const double p = final_probability(forward(prompt, w, CaptureSpec::none(), std::span(&ab, 1)).logits, tracked);
        out.push_back({pos, groups[static_cast<std::size_t>(pos)], l, m, p - base});
      }
  return out;
}

struct PairAblation {
  std::vector<PositionDelta> correct;       // p_r, tracking a_r
  std::vector<PositionDelta> hallucinated;  // p_w, tracking a_w
};

inline PairAblation ablation_sweep(const Weights& w, const RecallPair& pair, std::span<const TokenId> subject) {
  return {sweep_prompt(w, pair.prompt_r, locate_subject(pair.prompt_r, subject), pair.a_r),
          sweep_prompt(w, pair.prompt_w, locate_subject(pair.prompt_w, subject), pair.a_w)};
}

inline std::string heatmap_csv(const AblationHeatmap& h) {
  std::string out = "group,layer,module,mean_delta,n\n";
  char buf[48];
  for (const auto& c : h.cells) {
    std::snprintf(buf, sizeof buf, "%.8f", c.mean());
    out += std::string(to_string(c.group)) + "," + std::to_string(c.layer) + "," +
           (c.module == ModuleKind::Attention ? "attention" : "mlp") + "," + buf + "," + std::to_string(c.n) + "\n";
  }
  return out;
}

}  // namespace lensdyn
