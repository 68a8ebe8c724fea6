#include <gtest/gtest.h>

#include "lensdyn/core/model.hpp"
#include "lensdyn/lenses/logit_lens.hpp"
#include "lensdyn/lenses/tuned_lens.hpp"
#include "lensdyn/synth/train.hpp"
#include "reference_forward.hpp"
#include "test_util.hpp"

namespace lensdyn {
namespace {

using testing::random_weights;
using testing::temp_dir;
using testing::tiny_config;

TEST(LogitLens, RowsMatchIndependentDecoding) {
  const auto cfg = tiny_config(3, 8, 2, 13, 12);
  const auto w = random_weights(cfg, 6);
  const std::vector<TokenId> tokens{1, 5, 8, 4, 12};
  const auto trace = forward(tokens, w, CaptureSpec::last_token()).trace;
  const Matrix lens = logit_lens(trace, 4, w);
  const auto ref = testing::reference_forward(w, tokens);
  for (int c = 0; c < cfg.checkpoint_count(); ++c) {
    const auto p = testing::ref_softmax(
        testing::ref_matvec(testing::ref_norm(ref.residual[4][c], w.final_norm, cfg.norm_epsilon), w.unembedding));
    for (int v = 0; v < cfg.vocab_size; ++v) EXPECT_NEAR(lens(c, v), p[v], 1e-5) << "checkpoint " << c;
  }
}

TEST(LogitLens, RejectsForeignTrace) {
  const auto w = random_weights(tiny_config(2), 1);
  const auto other = random_weights(tiny_config(3), 1);
  const std::vector<TokenId> tokens{1, 4};
  const auto trace = forward(tokens, other, CaptureSpec::last_token()).trace;
  EXPECT_THROW(logit_lens(trace, 1, w), CaptureError);
  EXPECT_THROW(logit_lens(forward(tokens, w, CaptureSpec::last_token()).trace, 0, w), CaptureError);
}

TEST(TunedLens, IdentityTranslatorsReproduceTheLogitLens) {
  const auto cfg = tiny_config(3, 8, 2, 13, 12);
  const auto w = random_weights(cfg, 6);
  const std::vector<TokenId> tokens{1, 5, 8, 4};
  const auto trace = forward(tokens, w, CaptureSpec::last_token()).trace;
  const Matrix logit = logit_lens(trace, 3, w);
  const Matrix tuned = tuned_lens(trace, TunedTranslators::identity(cfg.n_layers, cfg.hidden_dim), 3, w);
  ASSERT_EQ(tuned.rows(), cfg.n_layers);
  for (int l = 1; l <= cfg.n_layers; ++l)
    EXPECT_LE((tuned.row(l - 1) - logit.row(PositionTrace::post_block(l))).cwiseAbs().maxCoeff(), 1e-7);
}

TEST(TunedLens, AffineMapIsApplied) {
  const auto cfg = tiny_config(2, 8, 2, 11, 12);
  const auto w = random_weights(cfg, 2);
  auto t = TunedTranslators::identity(cfg.n_layers, cfg.hidden_dim);
  Rng rng(1);
  for (auto& A : t.A)
    for (Eigen::Index i = 0; i < A.size(); ++i) A.data()[i] += static_cast<float>(0.2 * rng.normal());
  t.b[0].setConstant(0.3f);
  const std::vector<TokenId> tokens{1, 5, 8};
  const auto trace = forward(tokens, w, CaptureSpec::last_token()).trace;
  const Matrix tuned = tuned_lens(trace, t, 2, w);
  const Matrix x = trace.at(2).residual(1);
  const Matrix expected = decode_states(Matrix(x * t.A[0] + t.b[0]), w);
  EXPECT_LE((tuned.row(0) - expected.row(0)).cwiseAbs().maxCoeff(), 1e-6);
}

class TrainedLens : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    auto cfg = tiny_config(4, 16, 2, 24, 12);
    Rng rng(8);
    for (int i = 0; i < 120; ++i) {
      std::vector<TokenId> s{Vocab::kBos};
      const int subject = 3 + static_cast<int>(rng.uniform_int(10));
      s.push_back(subject);
      s.push_back(13 + static_cast<int>(rng.uniform_int(3)));
      s.push_back(16 + (subject * 7) % 8);
      s.push_back(Vocab::kEos);
      corpus_.push_back(s);
    }
    TrainHyper h;
    h.learning_rate = 3e-3;
    h.epochs = 20;
    h.batch_size = 16;
    weights_ = new Weights(train_toy_model(corpus_, cfg, h, 4).weights);
  }
  static void TearDownTestSuite() { delete weights_; }

  static inline std::vector<std::vector<TokenId>> corpus_;
  static inline Weights* weights_ = nullptr;
};

TEST_F(TrainedLens, IdentityKlEqualsLogitLensKl) {
  const auto& w = *weights_;
  const auto ds = collect_lens_states(w, corpus_);
  const auto id = TunedTranslators::identity(w.config.n_layers, w.config.hidden_dim);
  for (int l = 1; l <= w.config.n_layers; ++l) {
    // Oracle: KL of the logit lens rows computed straight from the states.
    const Matrix q = decode_states(ds.states[l - 1], w);
    double kl = 0;
    for (Eigen::Index i = 0; i < q.rows(); ++i) kl += kl_divergence(ds.target.row(i), q.row(i));
    kl /= static_cast<double>(q.rows());
    EXPECT_NEAR(lens_kl(ds, id, l, w), kl, 1e-6) << "layer " << l;
  }
  EXPECT_NEAR(lens_kl(ds, id, w.config.n_layers, w), 0.0, 1e-6);
}

TEST_F(TrainedLens, TrainingBeatsTheLogitLens) {
  const auto& w = *weights_;
  TunedLensHyper h;
  h.epochs = 5;
  const auto t = train_tuned_lens(w, corpus_, h, 5, "toy-corpus");
  ASSERT_EQ(t.val_kl.size(), static_cast<std::size_t>(w.config.n_layers));
  int better = 0;
  for (int l = 0; l < w.config.n_layers; ++l) better += t.val_kl[l] <= t.logit_val_kl[l] ? 1 : 0;
  EXPECT_GE(better, static_cast<int>(std::ceil(0.8 * w.config.n_layers)));
  EXPECT_EQ(t.source_model, weights_fingerprint(w));
  EXPECT_GT(t.steps, 0);

  const auto again = train_tuned_lens(w, corpus_, h, 5, "toy-corpus");
  for (int l = 0; l < w.config.n_layers; ++l) EXPECT_TRUE(again.A[l] == t.A[l]);
}

TEST_F(TrainedLens, SaveLoadChecksTheModel) {
  const auto& w = *weights_;
  TunedLensHyper h;
  h.epochs = 1;
  const auto t = train_tuned_lens(w, corpus_, h, 5);
  const auto dir = temp_dir("translators");
  save_translators(t, dir / "t.json");
  const auto back = load_translators(dir / "t.json", weights_fingerprint(w));
  for (int l = 0; l < t.n_layers(); ++l) {
    EXPECT_TRUE(back.A[l] == t.A[l]);
    EXPECT_TRUE(back.b[l] == t.b[l]);
  }
  EXPECT_EQ(back.val_kl, t.val_kl);
  EXPECT_THROW(load_translators(dir / "t.json", std::string(64, '0')), TranslatorError);
  EXPECT_THROW(back.check_compatible(random_weights(tiny_config(2, 16, 2, 24, 12), 1)), TranslatorError);
}

TEST(TunedLens, RejectsBadHyperparameters) {
  const auto w = random_weights(tiny_config(), 1);
  std::vector<std::vector<TokenId>> seqs{{1, 3, 2}, {1, 4, 2}};
  TunedLensHyper h;
  h.val_fraction = 1.0;
  EXPECT_THROW(train_tuned_lens(w, seqs, h, 1), SpecError);
  EXPECT_THROW(train_tuned_lens(w, {{1, 3, 2}}, TunedLensHyper{}, 1), SpecError);
}

}  // namespace
}  // namespace lensdyn
