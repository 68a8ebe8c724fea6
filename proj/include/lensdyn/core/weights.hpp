#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "lensdyn/core/config.hpp"
#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/tensor.hpp"

namespace lensdyn {

/// Parameters of one pre-norm decoder block. Projections act on row vectors
/// (y = x * W), so every matrix is stored input-dim x output-dim.
template <typename S>
struct BasicLayerWeights {
  MatrixT<S> attn_norm;  // 1 x d
  MatrixT<S> wq, wk, wv, wo;  // d x d
  MatrixT<S> mlp_norm;  // 1 x d
  MatrixT<S> w_up;    // d x f
  MatrixT<S> w_down;  // f x d
};

/// All learned parameters of the toy decoder. The unembedding has no bias.
template <typename S>
struct BasicWeights {
  ModelConfig config;
  MatrixT<S> embedding;  // V x d
  std::vector<BasicLayerWeights<S>> layers;
  MatrixT<S> final_norm;   // 1 x d
  MatrixT<S> unembedding;  // d x V

  /// Visits every tensor in canonical (file) order.
  template <typename F>
  void for_each_tensor(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each_tensor(F&& f) const {
    visit(*this, f);
  }

  template <typename T>
  BasicWeights<T> cast() const {
    BasicWeights<T> out;
    out.config = config;
    out.embedding = embedding.template cast<T>();
    out.final_norm = final_norm.template cast<T>();
    out.unembedding = unembedding.template cast<T>();
    out.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& a = layers[l];
      auto& b = out.layers[l];
      b.attn_norm = a.attn_norm.template cast<T>();
      b.wq = a.wq.template cast<T>();
      b.wk = a.wk.template cast<T>();
      b.wv = a.wv.template cast<T>();
      b.wo = a.wo.template cast<T>();
      b.mlp_norm = a.mlp_norm.template cast<T>();
      b.w_up = a.w_up.template cast<T>();
      b.w_down = a.w_down.template cast<T>();
    }
    return out;
  }

  /// Zero tensors with the shapes implied by `config`.
  static BasicWeights zeros(const ModelConfig& cfg) {
    cfg.validate();
    const int d = cfg.hidden_dim, f = cfg.mlp_dim(), v = cfg.vocab_size;
    BasicWeights w;
    w.config = cfg;
    w.embedding = MatrixT<S>::Zero(v, d);
    w.final_norm = MatrixT<S>::Ones(1, d);
    w.unembedding = MatrixT<S>::Zero(d, v);
    w.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : w.layers) {
      l.attn_norm = MatrixT<S>::Ones(1, d);
      l.mlp_norm = MatrixT<S>::Ones(1, d);
      l.wq = l.wk = l.wv = l.wo = MatrixT<S>::Zero(d, d);
      l.w_up = MatrixT<S>::Zero(d, f);
      l.w_down = MatrixT<S>::Zero(f, d);
    }
    return w;
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const MatrixT<S>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  /// Throws SpecError naming the first tensor whose shape disagrees with config.
  void check_shapes() const {
    const auto expected = zeros(config);
    std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> want;
    expected.for_each_tensor([&](const std::string& n, const MatrixT<S>& m) {
      want.push_back({n, {m.rows(), m.cols()}});
    });
    if (layers.size() != expected.layers.size())
      throw SpecError("weights: expected " + std::to_string(expected.layers.size()) + " layers, found " +
                      std::to_string(layers.size()));
    std::size_t i = 0;
    for_each_tensor([&](const std::string& n, const MatrixT<S>& m) {
      const auto& [rows, cols] = want[i++].second;
      if (m.rows() != rows || m.cols() != cols)
        throw SpecError("weights: tensor '" + n + "' has shape " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    });
  }

  bool operator==(const BasicWeights& other) const {
    if (!(config == other.config) || layers.size() != other.layers.size()) return false;
    std::vector<const MatrixT<S>*> mine, theirs;
    for_each_tensor([&](const std::string&, const MatrixT<S>& m) { mine.push_back(&m); });
    other.for_each_tensor([&](const std::string&, const MatrixT<S>& m) { theirs.push_back(&m); });
    for (std::size_t i = 0; i < mine.size(); ++i) {
      if (mine[i]->rows() != theirs[i]->rows() || mine[i]->cols() != theirs[i]->cols()) return false;
      if (std::memcmp(mine[i]->data(), theirs[i]->data(), sizeof(S) * static_cast<std::size_t>(mine[i]->size())) != 0)
        return false;
    }
    return true;
  }

 private:
  template <typename Self, typename F>
  static void visit(Self& self, F& f) {
    f(std::string("embedding"), self.embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      f(p + "attn_norm", L.attn_norm);
      f(p + "wq", L.wq);
      f(p + "wk", L.wk);
      f(p + "wv", L.wv);
      f(p + "wo", L.wo);
      f(p + "mlp_norm", L.mlp_norm);
      f(p + "w_up", L.w_up);
      f(p + "w_down", L.w_down);
    }
    f(std::string("final_norm"), self.final_norm);
    f(std::string("unembedding"), self.unembedding);
  }
};

using LayerWeights = BasicLayerWeights<float>;
using Weights = BasicWeights<float>;

/// Gaussian initialisation; residual output projections are scaled down by
/// sqrt(2L) so the residual stream stays O(1) at init.
template <typename S = float>
BasicWeights<S> init_weights(const ModelConfig& cfg, std::uint64_t seed, double init_std = 0.02) {
  auto w = BasicWeights<S>::zeros(cfg);
  Rng rng(seed);
  const double out_std = init_std / std::sqrt(2.0 * cfg.n_layers);
  auto fill = [&](MatrixT<S>& m, double sd) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(rng.normal() * sd);
  };
  fill(w.embedding, init_std);
  for (auto& l : w.layers) {
    fill(l.wq, init_std);
    fill(l.wk, init_std);
    fill(l.wv, init_std);
    fill(l.wo, out_std);
    fill(l.w_up, init_std);
    fill(l.w_down, out_std);
  }
  fill(w.unembedding, init_std);
  return w;
}

}  // namespace lensdyn
