#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/tensor.hpp"
#include "lensdyn/core/weights.hpp"

namespace lensdyn {

enum class ModuleKind { Attention, Mlp };

inline const char* to_string(ModuleKind m) { return m == ModuleKind::Attention ? "attention" : "mlp"; }

/// Forces one module output (layer in [1, L]) at one position to zero.
struct Ablation {
  int layer = 1;
  ModuleKind module = ModuleKind::Attention;
  int position = 0;
};

/// Activations of one block over a packed batch. Row r of every matrix is
/// one token; `probs` holds one causal attention matrix per (sequence, head).
template <typename S>
struct LayerActivations {
  MatrixT<S> x_in, n1, q, k, v, heads, attn_out, h, n2, up, act, mlp_out;
  std::vector<S> inv_rms1, inv_rms2;
  std::vector<MatrixT<S>> probs;
};

template <typename S>
struct Activations {
  std::vector<int> offsets;  // sequence boundaries, size = n_sequences + 1
  std::vector<LayerActivations<S>> layers;
  MatrixT<S> x0, x_final, n_final, logits;
  std::vector<S> inv_rms_final;
};

namespace detail {

template <typename S>
void rms_norm(const MatrixT<S>& x, const MatrixT<S>& gain, S eps, MatrixT<S>& out, std::vector<S>* inv_out) {
  out.resize(x.rows(), x.cols());
  if (inv_out) inv_out->resize(static_cast<std::size_t>(x.rows()));
  const S inv_d = S(1) / static_cast<S>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S r = S(1) / std::sqrt(x.row(i).squaredNorm() * inv_d + eps);
    out.row(i) = (x.row(i) * r).cwiseProduct(gain);
    if (inv_out) (*inv_out)[static_cast<std::size_t>(i)] = r;
  }
}

/// Accumulates the gain gradient and returns dL/dx for y = gain * x * r(x).
template <typename S>
MatrixT<S> rms_norm_backward(const MatrixT<S>& x, const std::vector<S>& inv, const MatrixT<S>& gain,
                             const MatrixT<S>& dy, MatrixT<S>* dgain) {
  MatrixT<S> dx(x.rows(), x.cols());
  const S inv_d = S(1) / static_cast<S>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const S r = inv[static_cast<std::size_t>(i)];
    const RowVectorT<S> gy = dy.row(i).cwiseProduct(gain);
    if (dgain) *dgain += dy.row(i).cwiseProduct(x.row(i)) * r;
    dx.row(i) = gy * r - x.row(i) * (r * r * r * inv_d * gy.dot(x.row(i)));
  }
  return dx;
}

template <typename S>
S gelu(S x) {
  constexpr S c = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  return S(0.5) * x * (S(1) + std::tanh(c * (x + S(0.044715) * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  constexpr S c = static_cast<S>(0.7978845608028654);
  const S t = std::tanh(c * (x + S(0.044715) * x * x * x));
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * c * (S(1) + S(3) * S(0.044715) * x * x);
}

/// Rotary encoding tables: position x (head_dim / 2).
template <typename S>
struct Rope {
  MatrixT<S> cos, sin;
};

template <typename S>
Rope<S> make_rope(int max_len, int head_dim) {
  const int half = head_dim / 2;
  Rope<S> r{MatrixT<S>(max_len, half), MatrixT<S>(max_len, half)};
  for (int p = 0; p < max_len; ++p) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / head_dim);
      r.cos(p, i) = static_cast<S>(std::cos(p * freq));
      r.sin(p, i) = static_cast<S>(std::sin(p * freq));
    }
  }
  return r;
}

/// Rotates adjacent pairs of every head in place; `inverse` applies R^T.
template <typename S>
void apply_rope(MatrixT<S>& m, std::span<const int> offsets, int n_heads, int head_dim, const Rope<S>& rope,
                bool inverse) {
  const int half = head_dim / 2;
  const S sign = inverse ? S(-1) : S(1);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (int row = offsets[s]; row < offsets[s + 1]; ++row) {
      const int pos = row - offsets[s];
      for (int h = 0; h < n_heads; ++h) {
        S* base = m.row(row).data() + h * head_dim;
        for (int i = 0; i < half; ++i) {
          const S c = rope.cos(pos, i), sn = sign * rope.sin(pos, i);
          const S a = base[2 * i], b = base[2 * i + 1];
          base[2 * i] = a * c - b * sn;
          base[2 * i + 1] = a * sn + b * c;
        }
      }
    }
  }
}

template <typename S>
void attention_forward(LayerActivations<S>& la, std::span<const int> offsets, int n_heads, int head_dim) {
  const S scale = S(1) / std::sqrt(static_cast<S>(head_dim));
  la.heads = MatrixT<S>::Zero(la.q.rows(), la.q.cols());
  la.probs.clear();
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const int off = offsets[s], T = offsets[s + 1] - offsets[s];
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = la.q.block(off, h * head_dim, T, head_dim);
      const auto kh = la.k.block(off, h * head_dim, T, head_dim);
      const auto vh = la.v.block(off, h * head_dim, T, head_dim);
      MatrixT<S> p = (qh * kh.transpose()) * scale;
      for (int i = 0; i < T; ++i) {
        const S mx = p.row(i).head(i + 1).maxCoeff();
        S sum = 0;
        for (int j = 0; j <= i; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          sum += p(i, j);
        }
        for (int j = 0; j <= i; ++j) p(i, j) /= sum;
        for (int j = i + 1; j < T; ++j) p(i, j) = S(0);
      }
      la.heads.block(off, h * head_dim, T, head_dim).noalias() = p * vh;
      la.probs.push_back(std::move(p));
    }
  }
}

inline void check_tokens(std::span<const TokenId> tokens, const ModelConfig& cfg) {
  for (TokenId t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw VocabError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(cfg.vocab_size));
}

}  // namespace detail

/// Runs the decoder over one or more sequences packed row-wise
/// (`offsets` = boundaries) and keeps every intermediate activation.
/// Ablation positions are relative to the first sequence.
template <typename S>
Activations<S> run_forward(const BasicWeights<S>& w, std::span<const TokenId> tokens, std::vector<int> offsets,
                           std::span<const Ablation> ablations = {}) {
  const auto& cfg = w.config;
  detail::check_tokens(tokens, cfg);
  int longest = 0;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) longest = std::max(longest, offsets[s + 1] - offsets[s]);
  if (longest > cfg.max_seq_len)
    throw LengthError("sequence of length " + std::to_string(longest) + " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  for (const auto& a : ablations) {
    if (a.layer < 1 || a.layer > cfg.n_layers)
      throw IndexError("ablation layer " + std::to_string(a.layer) + " outside [1, " + std::to_string(cfg.n_layers) + "]");
    if (a.position < 0 || a.position >= offsets[1] - offsets[0])
      throw IndexError("ablation position " + std::to_string(a.position) + " outside the sequence");
  }

  const int d = cfg.hidden_dim, hd = cfg.head_dim();
  const auto rope = detail::make_rope<S>(std::max(longest, 1), hd);
  const S eps = static_cast<S>(cfg.norm_epsilon);
  const auto R = static_cast<Eigen::Index>(tokens.size());

  Activations<S> act;
  act.offsets = std::move(offsets);
  act.x0.resize(R, d);
  for (Eigen::Index r = 0; r < R; ++r) act.x0.row(r) = w.embedding.row(tokens[static_cast<std::size_t>(r)]);

  act.layers.resize(w.layers.size());
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& W = w.layers[l];
    auto& la = act.layers[l];
    if (l == 0) la.x_in = act.x0;
    detail::rms_norm(la.x_in, W.attn_norm, eps, la.n1, &la.inv_rms1);
    la.q.noalias() = la.n1 * W.wq;
    la.k.noalias() = la.n1 * W.wk;
    la.v.noalias() = la.n1 * W.wv;
    detail::apply_rope(la.q, act.offsets, cfg.n_heads, hd, rope, false);
    detail::apply_rope(la.k, act.offsets, cfg.n_heads, hd, rope, false);
    detail::attention_forward(la, act.offsets, cfg.n_heads, hd);
    la.attn_out.noalias() = la.heads * W.wo;
    for (const auto& a : ablations)
      if (a.module == ModuleKind::Attention && a.layer == static_cast<int>(l) + 1)
        la.attn_out.row(act.offsets[0] + a.position).setZero();
    la.h = la.x_in + la.attn_out;

    detail::rms_norm(la.h, W.mlp_norm, eps, la.n2, &la.inv_rms2);
    la.up.noalias() = la.n2 * W.w_up;
    la.act = la.up.unaryExpr([](S v) { return detail::gelu(v); });
    la.mlp_out.noalias() = la.act * W.w_down;
    for (const auto& a : ablations)
      if (a.module == ModuleKind::Mlp && a.layer == static_cast<int>(l) + 1)
        la.mlp_out.row(act.offsets[0] + a.position).setZero();
    if (l + 1 < w.layers.size()) {
      act.layers[l + 1].x_in = la.h + la.mlp_out;
    } else {
      act.x_final = la.h + la.mlp_out;
    }
  }
  if (w.layers.empty()) act.x_final = act.x0;
  detail::rms_norm(act.x_final, w.final_norm, eps, act.n_final, &act.inv_rms_final);
  act.logits.noalias() = act.n_final * w.unembedding;
  return act;
}

/// State after layer l (0 = embedding) for every row.
template <typename S>
const MatrixT<S>& post_block_states(const Activations<S>& act, int layer) {
  if (layer == 0) return act.x0;
  if (layer == static_cast<int>(act.layers.size())) return act.x_final;
  return act.layers[static_cast<std::size_t>(layer)].x_in;
}

/// Mean next-token cross entropy over a packed batch (every row except the
/// last of each sequence predicts its successor). When `grad` is non-null it
/// receives the gradient (overwritten, same shapes as `w`).
template <typename S>
double loss_and_gradient(const BasicWeights<S>& w, std::span<const TokenId> tokens, const std::vector<int>& offsets,
                         BasicWeights<S>* grad) {
  const auto act = run_forward(w, tokens, offsets);
  const auto& cfg = w.config;
  const int hd = cfg.head_dim();
  const auto R = act.logits.rows();

  Eigen::Index n_targets = 0;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) n_targets += offsets[s + 1] - offsets[s] - 1;
  if (n_targets <= 0) throw SpecError("loss: batch has no prediction targets");

  MatrixT<S> dlogits = MatrixT<S>::Zero(R, act.logits.cols());
  double loss = 0.0;
  const S inv_n = S(1) / static_cast<S>(n_targets);
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    for (int r = offsets[s]; r + 1 < offsets[s + 1]; ++r) {
      const TokenId target = tokens[static_cast<std::size_t>(r + 1)];
      const auto row = act.logits.row(r);
      const S mx = row.maxCoeff();
      const RowVectorT<S> e = (row.array() - mx).exp().matrix();
      const S z = e.sum();
      loss += static_cast<double>(std::log(z) + mx - row(target));
      if (grad) {
        dlogits.row(r) = e * (inv_n / z);
        dlogits(r, target) -= inv_n;
      }
    }
  }
  loss /= static_cast<double>(n_targets);
  if (!grad) return loss;

  *grad = BasicWeights<S>::zeros(cfg);
  for (auto& l : grad->layers) l.attn_norm.setZero(), l.mlp_norm.setZero();
  grad->final_norm.setZero();

  grad->unembedding.noalias() = act.n_final.transpose() * dlogits;
  MatrixT<S> dn = dlogits * w.unembedding.transpose();
  MatrixT<S> dx = detail::rms_norm_backward(act.x_final, act.inv_rms_final, w.final_norm, dn, &grad->final_norm);

  const S scale = S(1) / std::sqrt(static_cast<S>(hd));
  const auto rope = detail::make_rope<S>(cfg.max_seq_len, hd);
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& W = w.layers[static_cast<std::size_t>(l)];
    const auto& la = act.layers[static_cast<std::size_t>(l)];
    auto& G = grad->layers[static_cast<std::size_t>(l)];

    // MLP branch: x_out = h + down(gelu(up(norm(h))))
    G.w_down.noalias() = la.act.transpose() * dx;
    MatrixT<S> dup = dx * W.w_down.transpose();
    for (Eigen::Index i = 0; i < dup.size(); ++i) dup.data()[i] *= detail::gelu_grad(la.up.data()[i]);
    G.w_up.noalias() = la.n2.transpose() * dup;
    MatrixT<S> dn2 = dup * W.w_up.transpose();
    MatrixT<S> dh = dx + detail::rms_norm_backward(la.h, la.inv_rms2, W.mlp_norm, dn2, &G.mlp_norm);

    // Attention branch: h = x_in + wo(attn(norm(x_in)))
    G.wo.noalias() = la.heads.transpose() * dh;
    MatrixT<S> dheads = dh * W.wo.transpose();
    MatrixT<S> dq = MatrixT<S>::Zero(R, cfg.hidden_dim), dk = dq, dv = dq;
    std::size_t pi = 0;
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
      const int off = offsets[s], T = offsets[s + 1] - offsets[s];
      for (int h = 0; h < cfg.n_heads; ++h, ++pi) {
        const auto& P = la.probs[pi];
        const auto doh = dheads.block(off, h * hd, T, hd);
        const auto qh = la.q.block(off, h * hd, T, hd);
        const auto kh = la.k.block(off, h * hd, T, hd);
        const auto vh = la.v.block(off, h * hd, T, hd);
        const MatrixT<S> dP = doh * vh.transpose();
        dv.block(off, h * hd, T, hd).noalias() = P.transpose() * doh;
        MatrixT<S> dS(T, T);
        for (int i = 0; i < T; ++i) {
          const S dot = P.row(i).dot(dP.row(i));
          dS.row(i) = P.row(i).cwiseProduct((dP.row(i).array() - dot).matrix()) * scale;
        }
        dq.block(off, h * hd, T, hd).noalias() = dS * kh;
        dk.block(off, h * hd, T, hd).noalias() = dS.transpose() * qh;
      }
    }
    detail::apply_rope(dq, offsets, cfg.n_heads, hd, rope, true);
    detail::apply_rope(dk, offsets, cfg.n_heads, hd, rope, true);
    G.wq.noalias() = la.n1.transpose() * dq;
    G.wk.noalias() = la.n1.transpose() * dk;
    G.wv.noalias() = la.n1.transpose() * dv;
    MatrixT<S> dn1 = dq * W.wq.transpose();
    dn1.noalias() += dk * W.wk.transpose();
    dn1.noalias() += dv * W.wv.transpose();
    dx = dh + detail::rms_norm_backward(la.x_in, la.inv_rms1, W.attn_norm, dn1, &G.attn_norm);
  }
  for (Eigen::Index r = 0; r < R; ++r) grad->embedding.row(tokens[static_cast<std::size_t>(r)]) += dx.row(r);
  return loss;
}

}  // namespace lensdyn
