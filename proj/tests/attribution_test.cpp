#include <gtest/gtest.h>

#include "lensdyn/attribution/attribution.hpp"
#include "reference_forward.hpp"
#include "test_util.hpp"

namespace lensdyn {
namespace {

using testing::random_weights;
using testing::tiny_config;

std::vector<TokenId> random_prompt(Rng& rng, int n, int vocab) {
  std::vector<TokenId> t{Vocab::kBos};
  for (int i = 1; i < n; ++i) t.push_back(static_cast<TokenId>(3 + rng.uniform_int(static_cast<std::uint64_t>(vocab - 3))));
  return t;
}

TEST(Contributions, TelescopeToTheResidualChange) {
  const auto cfg = tiny_config(6, 32, 4, 60, 24);
  const auto w = random_weights(cfg, 11);
  Rng rng(3);
  double worst = 0;
  for (int pair = 0; pair < 50; ++pair) {
    const auto prompt = random_prompt(rng, 3 + static_cast<int>(rng.uniform_int(12)), cfg.vocab_size);
    const auto token = static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size)));
    const int last = static_cast<int>(prompt.size()) - 1;
    const auto trace = forward(prompt, w, CaptureSpec::last_token()).trace;
    const auto c = module_contributions(trace, token, last, w);
    ASSERT_EQ(c.attn.size(), static_cast<std::size_t>(cfg.n_layers));
    double sum = 0;
    for (int l = 0; l < cfg.n_layers; ++l) sum += c.attn[l] + c.mlp[l];
    const auto& p = trace.at(last);
    double expected = 0;
    for (int i = 0; i < cfg.hidden_dim; ++i)
      expected += (static_cast<double>(p.residual(cfg.n_layers)(i)) - p.residual(0)(i)) * w.unembedding(i, token);
    worst = std::max(worst, std::abs(sum - expected));
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Contributions, NeedModuleOutputs) {
  const auto w = random_weights(tiny_config(), 1);
  const std::vector<TokenId> prompt{1, 4, 5};
  const auto trace = forward(prompt, w, CaptureSpec::last_token(false)).trace;
  EXPECT_THROW(module_contributions(trace, 3, 2, w), CaptureError);
  const auto full = forward(prompt, w, CaptureSpec::last_token()).trace;
  EXPECT_THROW(module_contributions(full, 99, 2, w), VocabError);
}

TEST(Ablation, ZeroOutputModuleIsANoOp) {
  const auto cfg = tiny_config(3, 16, 2, 30, 16);
  auto w = random_weights(cfg, 5);
  w.layers[1].wo.setZero();
  w.layers[2].w_down.setZero();
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto prompt = random_prompt(rng, 6, cfg.vocab_size);
    const auto tracked = static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size)));
    for (int pos = 0; pos < 6; ++pos) {
      EXPECT_LE(std::abs(ablate_module(w, prompt, 2, ModuleKind::Attention, pos, tracked)), 1e-6);
      EXPECT_LE(std::abs(ablate_module(w, prompt, 3, ModuleKind::Mlp, pos, tracked)), 1e-6);
    }
  }
}

TEST(Ablation, MatchesTheModifiedForwardOracle) {
  const auto cfg = tiny_config(2, 8, 2, 13, 12);
  const auto w = random_weights(cfg, 23);
  Rng rng(7);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto prompt = random_prompt(rng, 5, cfg.vocab_size);
    const auto tracked = static_cast<TokenId>(rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size)));
    const double base = testing::ref_softmax(testing::reference_forward(w, prompt).logits.back())[tracked];
    for (int layer = 1; layer <= 2; ++layer)
      for (bool mlp : {false, true})
        for (int pos = 0; pos < 5; ++pos) {
          const auto ref = testing::reference_forward(w, prompt, {layer, mlp, pos});
          const double oracle = testing::ref_softmax(ref.logits.back())[tracked] - base;
          const double got =
              ablate_module(w, prompt, layer, mlp ? ModuleKind::Mlp : ModuleKind::Attention, pos, tracked);
          worst = std::max(worst, std::abs(got - oracle));
        }
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(Ablation, RejectsBadCoordinates) {
  const auto w = random_weights(tiny_config(), 1);
  const std::vector<TokenId> prompt{1, 4, 5};
  EXPECT_THROW(ablate_module(w, prompt, 0, ModuleKind::Mlp, 0, 3), IndexError);
  EXPECT_THROW(ablate_module(w, prompt, 3, ModuleKind::Mlp, 0, 3), IndexError);
  EXPECT_THROW(ablate_module(w, prompt, 1, ModuleKind::Mlp, 3, 3), IndexError);
  EXPECT_THROW(ablate_module(w, prompt, 1, ModuleKind::Mlp, 0, 11), VocabError);
}

TEST(PositionGroups, PartitionEveryPrompt) {
  Rng rng(8);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_int(20));
    const int first = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
    const int last = first + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - 1 - first)));
    const auto g = position_groups(n, {first, last});
    ASSERT_EQ(g.size(), static_cast<std::size_t>(n));
    ASSERT_EQ(g.back(), PositionGroup::LastToken);
    for (int i = 0; i + 1 < n; ++i) {
      PositionGroup want = PositionGroup::RelationOther;
      if (i == last) want = PositionGroup::SubjectLast;
      else if (i == first) want = PositionGroup::SubjectFirst;
      else if (i > first && i < last) want = PositionGroup::SubjectMiddle;
      ASSERT_EQ(g[i], want) << "n=" << n << " span [" << first << "," << last << "] pos " << i;
    }
  }
  EXPECT_THROW(position_groups(3, {2, 3}), SpanError);
  EXPECT_THROW(position_groups(0, {0, 0}), SpanError);
}

TEST(PositionGroups, SweepFillsEveryCellOnce) {
  const auto cfg = tiny_config(2, 8, 2, 13, 12);
  const auto w = random_weights(cfg, 2);
  const std::vector<TokenId> prompt{1, 4, 5, 6, 7, 8};
  const auto deltas = sweep_prompt(w, prompt, {1, 3}, 9);
  ASSERT_EQ(deltas.size(), prompt.size() * 2 * 2);
  auto h = AblationHeatmap::empty(cfg.n_layers);
  for (const auto& d : deltas) h.add(d);
  int total = 0;
  for (const auto& c : h.cells) total += c.n;
  EXPECT_EQ(total, static_cast<int>(deltas.size()));
  EXPECT_EQ(h.cell(PositionGroup::SubjectMiddle, 2, ModuleKind::Mlp).n, 1);
  EXPECT_EQ(h.cell(PositionGroup::RelationOther, 1, ModuleKind::Attention).n, 2);
  EXPECT_NEAR(deltas[3].delta, ablate_module(w, prompt, 2, ModuleKind::Mlp, 0, 9), 1e-12);
}

TEST(Subject, LocatesLastOccurrence) {
  const std::vector<TokenId> prompt{1, 7, 8, 4, 7, 8, 5};
  const std::vector<TokenId> subject{7, 8};
  const auto s = locate_subject(prompt, subject);
  EXPECT_EQ(s.first, 4);
  EXPECT_EQ(s.last, 5);
  const std::vector<TokenId> missing{9}, none;
  EXPECT_THROW(locate_subject(prompt, missing), SpanError);
  EXPECT_THROW(locate_subject(prompt, none), SpanError);
}

}  // namespace
}  // namespace lensdyn
