#pragma once

#include "lensdyn/core/forward.hpp"
#include "lensdyn/core/weights.hpp"
#include "lensdyn/trace/trace.hpp"

namespace lensdyn {

/// Softmax(final-norm(x) W_U) for each row of `states`.
inline Matrix decode_states(const Matrix& states, const Weights& w) {
  Matrix normed;
  detail::rms_norm<float>(states, w.final_norm, w.config.norm_epsilon, normed, nullptr);
  Matrix logits;
  logits.noalias() = normed * w.unembedding;
  return softmax_rows(logits);
}

inline void check_trace_matches(const ResidualTrace& trace, const Weights& w) {
  if (trace.meta.n_layers != w.config.n_layers || trace.meta.hidden_dim != w.config.hidden_dim)
    throw CaptureError("trace was captured from a model with L=" + std::to_string(trace.meta.n_layers) +
                       ", d=" + std::to_string(trace.meta.hidden_dim) + "; weights have L=" +
                       std::to_string(w.config.n_layers) + ", d=" + std::to_string(w.config.hidden_dim));
}

/// Rows = the 2L+1 checkpoints (x^0, then post-attention and post-block per
/// layer), columns = vocabulary probabilities.
inline Matrix logit_lens(const ResidualTrace& trace, int position, const Weights& w) {
  check_trace_matches(trace, w);
  return decode_states(trace.at(position).checkpoints, w);
}

}  // namespace lensdyn
