#pragma once

#include <cmath>
#include <string>

#include <nlohmann/json.hpp>

#include "lensdyn/core/errors.hpp"

namespace lensdyn {

struct ModelConfig {
  int n_layers = 8;
  int hidden_dim = 64;
  int n_heads = 4;
  int vocab_size = 0;
  int max_seq_len = 32;
  double mlp_ratio = 4.0;
  float norm_epsilon = 1e-5f;

  int head_dim() const { return hidden_dim / n_heads; }
  int mlp_dim() const { return static_cast<int>(std::lround(mlp_ratio * hidden_dim)); }
  /// Logit-lens checkpoints: embedding, then post-attention and post-block per layer.
  int checkpoint_count() const { return 2 * n_layers + 1; }

  void validate() const {
    if (n_layers < 1 || hidden_dim < 1 || n_heads < 1 || vocab_size < 1)
      throw SpecError("model config: all dimensions must be >= 1");
    if (max_seq_len < 2) throw SpecError("model config: max_seq_len must be >= 2");
    if (hidden_dim % n_heads != 0)
      throw SpecError("model config: hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
    if (head_dim() % 2 != 0) throw SpecError("model config: rotary encoding needs an even head_dim");
    if (!(mlp_ratio > 0.0) || mlp_dim() < 1) throw SpecError("model config: mlp_ratio must be positive");
    if (!(norm_epsilon > 0.0f)) throw SpecError("model config: norm_epsilon must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename Json>
void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"n_layers", c.n_layers},       {"hidden_dim", c.hidden_dim},
                     {"n_heads", c.n_heads},         {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len}, {"mlp_ratio", c.mlp_ratio},
                     {"norm_epsilon", c.norm_epsilon}};
}

template <typename Json>
void from_json(const Json& j, ModelConfig& c) {
  ModelConfig d;
  c.n_layers = j.value("n_layers", d.n_layers);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.norm_epsilon = j.value("norm_epsilon", d.norm_epsilon);
}

}  // namespace lensdyn
