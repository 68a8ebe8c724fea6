#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/tensor.hpp"

namespace lensdyn {

/// Which token positions to record during a forward pass. An empty position
/// list means the last input token only.
struct CaptureSpec {
  std::vector<int> positions;
  bool every_position = false;
  bool module_outputs = true;
  bool enabled = true;

  static CaptureSpec none() { return CaptureSpec{{}, false, false, false}; }
  static CaptureSpec last_token(bool modules = true) { return CaptureSpec{{}, false, modules, true}; }
  static CaptureSpec at(std::vector<int> positions, bool modules = true) {
    return CaptureSpec{std::move(positions), false, modules, true};
  }
  static CaptureSpec all(bool modules = true) { return CaptureSpec{{}, true, modules, true}; }

  /// Resolves to concrete positions for a sequence of length T.
  std::vector<int> resolve(int T) const {
    if (!enabled) return {};
    if (every_position) {
      std::vector<int> all(static_cast<std::size_t>(T));
      for (int i = 0; i < T; ++i) all[static_cast<std::size_t>(i)] = i;
      return all;
    }
    if (positions.empty()) return {T - 1};
    for (int p : positions)
      if (p < 0 || p >= T)
        throw CaptureError("capture position " + std::to_string(p) + " outside [0, " + std::to_string(T) + ")");
    return positions;
  }
};

struct ModelMeta {
  int n_layers = 0;
  int hidden_dim = 0;
  int vocab_size = 0;
  std::string model_name;
};

/// Residual stream at one token position. `checkpoints` has 2L+1 rows:
/// x^0, then (x^{l-1} + a^l, x^l) for l = 1..L. Module outputs a^l / m^l are
/// L x d each, or empty when they were not captured.
struct PositionTrace {
  int position = 0;
  Matrix checkpoints;
  Matrix attn_out;
  Matrix mlp_out;

  static constexpr int post_attention(int layer) { return 2 * layer - 1; }
  static constexpr int post_block(int layer) { return 2 * layer; }

  bool has_module_outputs() const { return attn_out.rows() > 0 && mlp_out.rows() > 0; }
  int n_layers() const { return static_cast<int>((checkpoints.rows() - 1) / 2); }
  /// x^l for l in [0, L].
  auto residual(int layer) const { return checkpoints.row(post_block(layer)); }
};

struct ResidualTrace {
  ModelMeta meta;
  std::vector<PositionTrace> positions;

  const PositionTrace& at(int position) const {
    for (const auto& p : positions)
      if (p.position == position) return p;
    throw CaptureError("position " + std::to_string(position) + " was not captured in the trace");
  }
  bool contains(int position) const {
    for (const auto& p : positions)
      if (p.position == position) return true;
    return false;
  }
};

enum class ViolationKind { Shape, NonFinite, AttentionAdditivity, MlpAdditivity };

inline const char* to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::Shape: return "shape";
    case ViolationKind::NonFinite: return "non-finite";
    case ViolationKind::AttentionAdditivity: return "attention-additivity";
    case ViolationKind::MlpAdditivity: return "mlp-additivity";
  }
  return "?";
}

struct TraceViolation {
  int position = 0;
  int layer = 0;  // 0 when the violation is not layer specific
  ViolationKind kind = ViolationKind::Shape;
  double max_abs = 0.0;
  std::string message;
};

inline constexpr double kAdditivityTolerance = 1e-5;

/// Checks shapes and the residual update x^l = x^{l-1} + a^l + m^l (split into
/// its post-attention and post-MLP halves). Differences are evaluated in
/// double so only the float rounding of the original sums remains.
inline std::vector<TraceViolation> validate_trace(const ResidualTrace& trace,
                                                  double tolerance = kAdditivityTolerance) {
  std::vector<TraceViolation> out;
  const int L = trace.meta.n_layers, d = trace.meta.hidden_dim;
  for (const auto& p : trace.positions) {
    auto shape_fail = [&](std::string msg) {
      out.push_back({p.position, 0, ViolationKind::Shape, 0.0, std::move(msg)});
    };
    if (p.checkpoints.rows() != 2 * L + 1 || p.checkpoints.cols() != d) {
      shape_fail("checkpoints are " + std::to_string(p.checkpoints.rows()) + "x" +
                 std::to_string(p.checkpoints.cols()) + ", expected " + std::to_string(2 * L + 1) + "x" +
                 std::to_string(d));
      continue;
    }
    if (!p.checkpoints.allFinite()) out.push_back({p.position, 0, ViolationKind::NonFinite, 0.0, "non-finite state"});
    if (!p.has_module_outputs()) continue;
    if (p.attn_out.rows() != L || p.attn_out.cols() != d || p.mlp_out.rows() != L || p.mlp_out.cols() != d) {
      shape_fail("module outputs must be " + std::to_string(L) + "x" + std::to_string(d));
      continue;
    }
    for (int l = 1; l <= L; ++l) {
      const auto prev = p.checkpoints.row(PositionTrace::post_block(l - 1)).cast<double>();
      const auto mid = p.checkpoints.row(PositionTrace::post_attention(l)).cast<double>();
      const auto next = p.checkpoints.row(PositionTrace::post_block(l)).cast<double>();
      const auto a = p.attn_out.row(l - 1).cast<double>();
      const auto m = p.mlp_out.row(l - 1).cast<double>();
      const double attn_err = (mid - prev - a).cwiseAbs().maxCoeff();
      const double mlp_err = (next - mid - m).cwiseAbs().maxCoeff();
      if (!(attn_err <= tolerance))
        out.push_back({p.position, l, ViolationKind::AttentionAdditivity, attn_err,
                       "x^{l-1} + a^l differs from the post-attention state by " + std::to_string(attn_err)});
      if (!(mlp_err <= tolerance))
        out.push_back({p.position, l, ViolationKind::MlpAdditivity, mlp_err,
                       "post-attention state + m^l differs from x^l by " + std::to_string(mlp_err)});
    }
  }
  return out;
}

/// x^0 + sum_l (a^l + m^l), accumulated in double.
inline RowVectorT<double> reconstruct_final_state(const PositionTrace& p) {
  if (!p.has_module_outputs()) throw CaptureError("module outputs were not captured");
  RowVectorT<double> x = p.residual(0).cast<double>();
  for (int l = 0; l < p.attn_out.rows(); ++l)
    x += p.attn_out.row(l).cast<double>() + p.mlp_out.row(l).cast<double>();
  return x;
}

}  // namespace lensdyn
