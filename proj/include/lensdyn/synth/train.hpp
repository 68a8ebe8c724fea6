#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/adam.hpp"
#include "lensdyn/core/errors.hpp"
#include "lensdyn/core/forward.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/weights.hpp"

namespace lensdyn {

struct TrainHyper {
  double learning_rate = 3e-4;
  int epochs = 20;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  int warmup_steps = 0;
  bool cosine_decay = false;
  double init_std = 0.02;
};

template <typename Json>
void to_json(Json& j, const TrainHyper& h) {
  j = {{"learning_rate", h.learning_rate}, {"epochs", h.epochs},       {"batch_size", h.batch_size},
       {"beta1", h.beta1},                 {"beta2", h.beta2},         {"adam_eps", h.adam_eps},
       {"grad_clip", h.grad_clip},         {"warmup_steps", h.warmup_steps}, {"cosine_decay", h.cosine_decay},
       {"init_std", h.init_std}};
}
inline void from_json(const nlohmann::json& j, TrainHyper& h) {
  TrainHyper d;
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.epochs = j.value("epochs", d.epochs);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.beta1 = j.value("beta1", d.beta1);
  h.beta2 = j.value("beta2", d.beta2);
  h.adam_eps = j.value("adam_eps", d.adam_eps);
  h.grad_clip = j.value("grad_clip", d.grad_clip);
  h.warmup_steps = j.value("warmup_steps", d.warmup_steps);
  h.cosine_decay = j.value("cosine_decay", d.cosine_decay);
  h.init_std = j.value("init_std", d.init_std);
}

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  long steps = 0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double final_loss = 0.0;
  long steps = 0;
};

struct TrainResult {
  Weights weights;
  TrainReport report;
};

/// Learning rate for a step under linear warmup and optional cosine decay.
inline double scheduled_lr(const TrainHyper& h, long step, long total_steps) {
  double lr = h.learning_rate;
  if (h.warmup_steps > 0 && step < h.warmup_steps) lr *= static_cast<double>(step + 1) / h.warmup_steps;
  if (h.cosine_decay && total_steps > h.warmup_steps) {
    const double progress =
        static_cast<double>(std::max(0L, step - h.warmup_steps)) / static_cast<double>(total_steps - h.warmup_steps);
    lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress)));
  }
  return lr;
}

/// Next-token cross-entropy training with Adam for a fixed number of epochs.
/// Each corpus entry is one complete sequence (BOS ... EOS). Single-threaded
/// and fully determined by `seed`.
inline TrainResult train_toy_model(const std::vector<std::vector<TokenId>>& corpus, const ModelConfig& cfg,
                                   const TrainHyper& hyper, std::uint64_t seed,
                                   const std::function<void(const EpochStats&)>& on_epoch = {}) {
  cfg.validate();
  if (corpus.empty()) throw SpecError("train: empty corpus");
  if (hyper.epochs < 1 || hyper.batch_size < 1 || !(hyper.learning_rate > 0))
    throw SpecError("train: epochs, batch_size and learning_rate must be positive");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) throw SpecError("train: every sequence needs at least two tokens");
    if (static_cast<int>(seq.size()) > cfg.max_seq_len)
      throw LengthError("train: sequence of " + std::to_string(seq.size()) + " tokens exceeds max_seq_len");
  }

  Rng rng(seed);
  TrainResult result{init_weights(cfg, rng.fork(), hyper.init_std), {}};
  Rng order_rng(rng.fork());
  Adam adam({hyper.learning_rate, hyper.beta1, hyper.beta2, hyper.adam_eps});

  std::vector<Matrix*> params;
  result.weights.for_each_tensor([&](const std::string&, Matrix& m) { params.push_back(&m); });
  Weights grad;

  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const long batches_per_epoch = static_cast<long>((corpus.size() + hyper.batch_size - 1) / hyper.batch_size);
  const long total_steps = batches_per_epoch * hyper.epochs;
  long step = 0;
  std::vector<TokenId> tokens;
  std::vector<int> offsets;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    order_rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    long n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hyper.batch_size)) {
      tokens.clear();
      offsets.assign(1, 0);
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hyper.batch_size));
      for (std::size_t i = start; i < end; ++i) {
        const auto& seq = corpus[order[i]];
        tokens.insert(tokens.end(), seq.begin(), seq.end());
        offsets.push_back(static_cast<int>(tokens.size()));
      }
      const double loss = loss_and_gradient(result.weights, tokens, offsets, &grad);
      if (!std::isfinite(loss))
        throw TrainingError("training diverged: non-finite loss at step " + std::to_string(step) + " (epoch " +
                            std::to_string(epoch) + ")");
      std::vector<const Matrix*> grads;
      double sq = 0.0;
      grad.for_each_tensor([&](const std::string&, const Matrix& g) {
        grads.push_back(&g);
        sq += static_cast<double>(g.squaredNorm());
      });
      if (hyper.grad_clip > 0.0 && std::sqrt(sq) > hyper.grad_clip) {
        const auto scale = static_cast<float>(hyper.grad_clip / std::sqrt(sq));
        grad.for_each_tensor([&](const std::string&, Matrix& g) { g *= scale; });
      }
      adam.step(params, grads, scheduled_lr(hyper, step, total_steps));
      loss_sum += loss;
      ++n_batches;
      ++step;
    }
    EpochStats stats{epoch + 1, loss_sum / static_cast<double>(n_batches), step};
    result.report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }
  if (!result.weights.all_finite()) throw TrainingError("training produced non-finite weights");
  result.report.final_loss = result.report.epochs.back().mean_loss;
  result.report.steps = step;
  return result;
}

}  // namespace lensdyn
