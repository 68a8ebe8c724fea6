#pragma once

#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lensdyn/core/adam.hpp"
#include "lensdyn/core/archive.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/weights_io.hpp"
#include "lensdyn/lenses/logit_lens.hpp"

namespace lensdyn {

struct TunedLensHyper {
  double learning_rate = 1e-3;
  int epochs = 3;
  int batch_size = 32;
  double val_fraction = 0.2;
};

template <typename Json>
void to_json(Json& j, const TunedLensHyper& h) {
  j = {{"learning_rate", h.learning_rate}, {"epochs", h.epochs}, {"batch_size", h.batch_size},
       {"val_fraction", h.val_fraction}};
}
inline void from_json(const nlohmann::json& j, TunedLensHyper& h) {
  TunedLensHyper d;
  h.learning_rate = j.value("learning_rate", d.learning_rate);
  h.epochs = j.value("epochs", d.epochs);
  h.batch_size = j.value("batch_size", d.batch_size);
  h.val_fraction = j.value("val_fraction", d.val_fraction);
}

/// One affine map y = x A + b per layer (post-block states x^1..x^L).
struct TunedTranslators {
  std::vector<Matrix> A;  // d x d
  std::vector<Matrix> b;  // 1 x d
  std::string source_model;  // weights fingerprint
  std::string corpus_id;
  long steps = 0;
  std::vector<double> val_kl;        // per layer, after training
  std::vector<double> logit_val_kl;  // per layer, identity maps

  int n_layers() const { return static_cast<int>(A.size()); }
  int hidden_dim() const { return A.empty() ? 0 : static_cast<int>(A.front().rows()); }

  static TunedTranslators identity(int n_layers, int d) {
    TunedTranslators t;
    for (int l = 0; l < n_layers; ++l) {
      t.A.push_back(Matrix::Identity(d, d));
      t.b.push_back(Matrix::Zero(1, d));
    }
    return t;
  }

  bool all_finite() const {
    for (int l = 0; l < n_layers(); ++l)
      if (!A[l].allFinite() || !b[l].allFinite()) return false;
    return true;
  }

  Matrix apply(int layer, const Matrix& x) const {
    Matrix y;
    y.noalias() = x * A[static_cast<std::size_t>(layer - 1)];
    y.rowwise() += b[static_cast<std::size_t>(layer - 1)].row(0);
    return y;
  }

  void check_compatible(const Weights& w) const {
    if (n_layers() != w.config.n_layers || hidden_dim() != w.config.hidden_dim)
      throw TranslatorError("translators are " + std::to_string(n_layers()) + " layers x d=" +
                            std::to_string(hidden_dim()) + ", model has " + std::to_string(w.config.n_layers) +
                            " layers x d=" + std::to_string(w.config.hidden_dim));
    for (int l = 0; l < n_layers(); ++l)
      if (A[l].rows() != A[l].cols() || b[l].rows() != 1 || b[l].cols() != A[l].cols())
        throw TranslatorError("translator " + std::to_string(l + 1) + " has inconsistent shapes");
  }
};

/// Rows = layers 1..L.
inline Matrix tuned_lens(const ResidualTrace& trace, const TunedTranslators& t, int position, const Weights& w) {
  t.check_compatible(w);
  check_trace_matches(trace, w);
  const auto& p = trace.at(position);
  const int L = w.config.n_layers;
  Matrix out(L, w.config.vocab_size);
  for (int l = 1; l <= L; ++l) {
    const Matrix x = p.residual(l);
    out.row(l - 1) = decode_states(t.apply(l, x), w).row(0);
  }
  return out;
}

/// Per-layer post-block states and final distributions of a corpus, every
/// position of every sequence.
struct LensDataset {
  std::vector<Matrix> states;  // [l-1] -> N x d, [L-1] = final states
  Matrix target;               // N x V
};

inline LensDataset collect_lens_states(const Weights& w, const std::vector<std::vector<TokenId>>& seqs) {
  const int L = w.config.n_layers;
  LensDataset ds;
  std::vector<TokenId> tokens;
  std::vector<int> offsets{0};
  for (const auto& s : seqs) {
    tokens.insert(tokens.end(), s.begin(), s.end());
    offsets.push_back(static_cast<int>(tokens.size()));
  }
  const auto act = run_forward(w, tokens, offsets);
  for (int l = 1; l <= L; ++l) ds.states.push_back(post_block_states(act, l));
  ds.target = decode_states(act.x_final, w);
  return ds;
}

/// Mean KL(final || lens at layer) over the rows of a dataset.
inline double lens_kl(const LensDataset& ds, const TunedTranslators& t, int layer, const Weights& w) {
  const Matrix q = decode_states(t.apply(layer, ds.states[static_cast<std::size_t>(layer - 1)]), w);
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) total += kl_divergence(ds.target.row(i), q.row(i));
  return q.rows() == 0 ? 0.0 : total / static_cast<double>(q.rows());
}

namespace detail {

/// Loss and gradient of mean KL(p || softmax(norm(x A + b) W_U)) over a batch.
inline double translator_grad(const Matrix& x, const Matrix& p, const Matrix& A, const Matrix& b, const Weights& w,
                              Matrix& dA, Matrix& db) {
  Matrix y;
  y.noalias() = x * A;
  y.rowwise() += b.row(0);
  Matrix n;
  std::vector<float> inv;
  rms_norm(y, w.final_norm, w.config.norm_epsilon, n, &inv);
  Matrix logits;
  logits.noalias() = n * w.unembedding;
  const Matrix q = softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) loss += kl_divergence(p.row(i), q.row(i));
  const auto inv_n = 1.0f / static_cast<float>(x.rows());
  const Matrix dlogits = (q - p) * inv_n;
  Matrix dn;
  dn.noalias() = dlogits * w.unembedding.transpose();
  const Matrix dy = rms_norm_backward(y, inv, w.final_norm, dn, static_cast<Matrix*>(nullptr));
  dA.noalias() = x.transpose() * dy;
  db = dy.colwise().sum();
  return loss / static_cast<double>(x.rows());
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(rows[i]));
  return out;
}

}  // namespace detail

/// Fits each layer's translator by Adam on forward KL from the model's final
/// distribution. Sequences are split into train and validation parts by
/// `seed`; per-layer validation KL is recorded next to the identity (logit
/// lens) baseline.
inline TunedTranslators train_tuned_lens(const Weights& w, const std::vector<std::vector<TokenId>>& seqs,
                                         const TunedLensHyper& hyper, std::uint64_t seed,
                                         std::string corpus_id = {}) {
  if (seqs.size() < 2) throw SpecError("tuned lens: corpus needs at least two sequences");
  if (hyper.epochs < 1 || hyper.batch_size < 1 || !(hyper.learning_rate > 0))
    throw SpecError("tuned lens: epochs, batch_size and learning_rate must be positive");
  if (!(hyper.val_fraction > 0 && hyper.val_fraction < 1)) throw SpecError("tuned lens: val_fraction must lie in (0, 1)");
  const int L = w.config.n_layers, d = w.config.hidden_dim;

  Rng rng(seed);
  std::vector<std::size_t> order(seqs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span(order));
  auto n_val = static_cast<std::size_t>(std::llround(hyper.val_fraction * static_cast<double>(seqs.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, seqs.size() - 1);
  std::vector<std::vector<TokenId>> val_seqs, train_seqs;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_val ? val_seqs : train_seqs).push_back(seqs[order[i]]);
  const auto train = collect_lens_states(w, train_seqs);
  const auto val = collect_lens_states(w, val_seqs);

  TunedTranslators t = TunedTranslators::identity(L, d);
  t.corpus_id = std::move(corpus_id);
  t.source_model = weights_fingerprint(w);
  for (int l = 1; l <= L; ++l) t.logit_val_kl.push_back(lens_kl(val, t, l, w));

  const auto N = static_cast<std::size_t>(train.target.rows());
  std::vector<std::size_t> rows(N);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::vector<Adam> opt(static_cast<std::size_t>(L), Adam({hyper.learning_rate, 0.9, 0.999, 1e-8}));
  Matrix dA, db;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(std::span(rows));
    for (std::size_t start = 0; start < N; start += static_cast<std::size_t>(hyper.batch_size)) {
      const auto batch = std::span(rows).subspan(start, std::min<std::size_t>(hyper.batch_size, N - start));
      // Decoding the batch's own final states keeps the last layer's
      // identity map an exact optimum (zero gradient, no drift).
      const Matrix p = decode_states(detail::gather_rows(train.states.back(), batch), w);
      for (int l = 1; l <= L; ++l) {
        const auto li = static_cast<std::size_t>(l - 1);
        const Matrix x = detail::gather_rows(train.states[li], batch);
        const double loss = detail::translator_grad(x, p, t.A[li], t.b[li], w, dA, db);
        if (!std::isfinite(loss))
          throw TrainingError("tuned lens diverged at layer " + std::to_string(l) + ", step " + std::to_string(t.steps));
        opt[li].step({&t.A[li], &t.b[li]}, {&dA, &db}, hyper.learning_rate);
      }
      ++t.steps;
    }
  }
  if (!t.all_finite()) throw TrainingError("tuned lens produced non-finite translators");
  for (int l = 1; l <= L; ++l) t.val_kl.push_back(lens_kl(val, t, l, w));
  return t;
}

// Persistence: archive kind "tuned-lens", tensors "translators.<l>.A/b".

inline constexpr std::string_view kTranslatorsKind = "tuned-lens";

inline std::string save_translators(const TunedTranslators& t, const std::filesystem::path& path) {
  Archive a;
  a.kind = std::string(kTranslatorsKind);
  a.meta["n_layers"] = t.n_layers();
  a.meta["hidden_dim"] = t.hidden_dim();
  a.meta["source_model_sha256"] = t.source_model;
  a.meta["corpus_id"] = t.corpus_id;
  a.meta["steps"] = t.steps;
  a.meta["val_kl"] = t.val_kl;
  a.meta["logit_val_kl"] = t.logit_val_kl;
  for (int l = 0; l < t.n_layers(); ++l) {
    a.tensors.push_back({"translators." + std::to_string(l + 1) + ".A", t.A[l]});
    a.tensors.push_back({"translators." + std::to_string(l + 1) + ".b", t.b[l]});
  }
  return write_archive(path, a);
}

/// Loads translators; when `expected_model` is non-empty it must equal the
/// fingerprint recorded at training time.
inline TunedTranslators load_translators(const std::filesystem::path& path, std::string_view expected_model = {}) {
  const Archive a = read_archive(path, kTranslatorsKind);
  TunedTranslators t;
  try {
    const int L = a.meta.at("n_layers").get<int>();
    t.source_model = a.meta.at("source_model_sha256").get<std::string>();
    t.corpus_id = a.meta.value("corpus_id", std::string{});
    t.steps = a.meta.value("steps", 0L);
    t.val_kl = a.meta.value("val_kl", std::vector<double>{});
    t.logit_val_kl = a.meta.value("logit_val_kl", std::vector<double>{});
    for (int l = 1; l <= L; ++l) {
      t.A.push_back(a.at("translators." + std::to_string(l) + ".A"));
      t.b.push_back(a.at("translators." + std::to_string(l) + ".b"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("translators manifest: " + std::string(e.what()));
  }
  if (!expected_model.empty() && t.source_model != expected_model)
    throw TranslatorError("translators were trained on model " + t.source_model.substr(0, 12) +
                          "..., not on the loaded model " + std::string(expected_model.substr(0, 12)) + "...");
  if (!t.all_finite()) throw FormatError("translators: non-finite values in " + path.string());
  return t;
}

}  // namespace lensdyn
