#pragma once

#include <span>
#include <string>
#include <vector>

#include "lensdyn/core/forward.hpp"
#include "lensdyn/core/vocab.hpp"
#include "lensdyn/core/weights.hpp"
#include "lensdyn/trace/trace.hpp"

namespace lensdyn {

struct ForwardResult {
  Matrix logits;  // T x V
  ResidualTrace trace;
};

/// Packs captured activations of a single-sequence forward into a trace.
inline ResidualTrace extract_trace(const Activations<float>& act, const ModelConfig& cfg, const CaptureSpec& capture,
                                   std::string model_name = {}) {
  ResidualTrace trace;
  trace.meta = {cfg.n_layers, cfg.hidden_dim, cfg.vocab_size, std::move(model_name)};
  const int T = act.offsets[1] - act.offsets[0];
  const int L = cfg.n_layers;
  for (int pos : capture.resolve(T)) {
    const int row = act.offsets[0] + pos;
    PositionTrace p;
    p.position = pos;
    p.checkpoints.resize(2 * L + 1, cfg.hidden_dim);
    p.checkpoints.row(0) = act.x0.row(row);
    for (int l = 1; l <= L; ++l) {
      p.checkpoints.row(PositionTrace::post_attention(l)) = act.layers[static_cast<std::size_t>(l - 1)].h.row(row);
      p.checkpoints.row(PositionTrace::post_block(l)) = post_block_states(act, l).row(row);
    }
    if (capture.module_outputs) {
      p.attn_out.resize(L, cfg.hidden_dim);
      p.mlp_out.resize(L, cfg.hidden_dim);
      for (int l = 0; l < L; ++l) {
        p.attn_out.row(l) = act.layers[static_cast<std::size_t>(l)].attn_out.row(row);
        p.mlp_out.row(l) = act.layers[static_cast<std::size_t>(l)].mlp_out.row(row);
      }
    }
    trace.positions.push_back(std::move(p));
  }
  return trace;
}

/// Runs one sequence and returns its logits plus the requested trace.
inline ForwardResult forward(std::span<const TokenId> tokens, const Weights& weights,
                             const CaptureSpec& capture = CaptureSpec::none(), std::span<const Ablation> ablations = {}) {
  if (tokens.empty()) throw LengthError("forward: empty token sequence");
  const auto T = static_cast<int>(tokens.size());
  auto act = run_forward(weights, tokens, {0, T}, ablations);
  ForwardResult out;
  out.trace = extract_trace(act, weights.config, capture);
  out.logits = std::move(act.logits);
  return out;
}

/// Greedy decoding: argmax of the last position's logits (lowest id on ties),
/// appended and fed back. EOS is emitted and ends generation.
inline std::vector<TokenId> greedy_generate(std::span<const TokenId> prompt, const Weights& weights, int n_tokens) {
  if (n_tokens < 1) throw SpecError("greedy_generate: n_tokens must be >= 1");
  if (prompt.empty()) throw LengthError("greedy_generate: empty prompt");
  if (static_cast<int>(prompt.size()) > weights.config.max_seq_len - n_tokens)
    throw LengthError("prompt of " + std::to_string(prompt.size()) + " tokens leaves no room for " +
                      std::to_string(n_tokens) + " generated tokens (max_seq_len " +
                      std::to_string(weights.config.max_seq_len) + ")");
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  for (int i = 0; i < n_tokens; ++i) {
    const auto T = static_cast<int>(seq.size());
    const auto act = run_forward(weights, std::span<const TokenId>(seq), {0, T});
    const auto next = static_cast<TokenId>(argmax_lowest(act.logits.row(T - 1)));
    out.push_back(next);
    if (next == Vocab::kEos) break;
    seq.push_back(next);
  }
  return out;
}

}  // namespace lensdyn
