#include <cmath>
#include <fstream>

#include <gtest/gtest.h>

#include "lensdyn/core/archive.hpp"
#include "lensdyn/core/hash.hpp"
#include "lensdyn/core/random.hpp"
#include "lensdyn/core/tensor.hpp"
#include "lensdyn/core/vocab.hpp"
#include "lensdyn/core/weights_io.hpp"
#include "test_util.hpp"

namespace lensdyn {
namespace {

using testing::random_weights;
using testing::temp_dir;
using testing::tiny_config;

TEST(Sha256, KnownDigests) {
  EXPECT_EQ(Sha256().update("").hex(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(Sha256().update("abc").hex(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  Sha256 split;
  split.update("ab").update("c");
  EXPECT_EQ(split.hex(), Sha256().update("abc").hex());
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    (void)c.next_u64();
  }
  EXPECT_NE(Rng(42).next_u64(), Rng(43).next_u64());
}

TEST(Rng, UniformIntStaysInRangeAndCoversIt) {
  Rng r(3);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const auto v = r.uniform_int(7);
    ASSERT_LT(v, 7u);
    ++hits[v];
  }
  for (int h : hits) EXPECT_GT(h, 800);
}

TEST(Rng, NormalMoments) {
  Rng r(9);
  double s = 0, s2 = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  EXPECT_NEAR(s / n, 0.0, 0.03);
  EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Rng, ShuffleIsAPermutation) {
  Rng r(5);
  std::vector<int> v(50);
  for (int i = 0; i < 50; ++i) v[i] = i;
  r.shuffle(std::span(v));
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Tensor, SoftmaxRowsSumToOne) {
  Matrix logits(2, 4);
  logits << 1, 2, 3, 4, 100, 100, -100, 0;
  const Matrix p = softmax_rows(logits);
  for (int r = 0; r < 2; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
  EXPECT_NEAR(p(1, 0), 0.5, 1e-6);
  EXPECT_NEAR(p(0, 3) / p(0, 2), std::exp(1.0), 1e-4);
}

TEST(Tensor, ArgmaxPrefersLowestIdOnTies) {
  RowVector v(5);
  v << 0.1f, 0.7f, 0.2f, 0.7f, 0.0f;
  EXPECT_EQ(argmax_lowest(v), 1);
}

TEST(Tensor, KlDivergence) {
  RowVector p(3), q(3);
  p << 0.5f, 0.25f, 0.25f;
  q << 0.25f, 0.5f, 0.25f;
  const double expected = 0.5 * std::log(2.0) + 0.25 * std::log(0.5);
  EXPECT_NEAR(kl_divergence(p, q), expected, 1e-6);
  EXPECT_NEAR(kl_divergence(p, p), 0.0, 1e-9);
}

TEST(Vocab, SpecialsComeFirstAndWordsAreSorted) {
  const auto v = Vocab::from_words({"zeta", "alpha", "alpha", "mid"});
  ASSERT_EQ(v.size(), 6);
  EXPECT_EQ(v.token(Vocab::kUnk), "<unk>");
  EXPECT_EQ(v.token(Vocab::kBos), "<bos>");
  EXPECT_EQ(v.token(Vocab::kEos), "<eos>");
  EXPECT_EQ(v.token(3), "alpha");
  EXPECT_EQ(v.id("zeta"), 5);
  EXPECT_EQ(v.id("missing"), Vocab::kUnk);
  EXPECT_THROW(v.token(6), VocabError);
}

TEST(Vocab, SplitsPunctuationAndCliticsAndLowercases) {
  const auto w = split_words("Which city was Bo Tan's home? It was");
  const std::vector<std::string> expected{"which", "city", "was", "bo", "tan", "'s", "home", "?", "it", "was"};
  EXPECT_EQ(w, expected);
}

TEST(Vocab, DetokenizeInvertsTokenize) {
  const std::string text = "which city did (bo tan's) life end? in";
  const auto v = Vocab::from_words(split_words(text));
  EXPECT_EQ(detokenize(tokenize(text, v), v), text);
}

TEST(Vocab, SaveLoadRoundTrip) {
  const auto dir = temp_dir("vocab");
  const auto v = Vocab::from_words({"b", "a", "c"});
  v.save(dir / "vocab.txt");
  EXPECT_EQ(Vocab::load(dir / "vocab.txt").tokens(), v.tokens());
  std::ofstream(dir / "bad.txt") << "a\nb\nc\n";
  EXPECT_THROW(Vocab::load(dir / "bad.txt"), FormatError);
}

TEST(ModelConfig, Validation) {
  auto c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 3;
  EXPECT_THROW(c.validate(), SpecError);
  c = tiny_config(2, 6, 3);  // head_dim 2
  EXPECT_NO_THROW(c.validate());
  c = tiny_config(2, 9, 3);  // odd head_dim
  EXPECT_THROW(c.validate(), SpecError);
  c = tiny_config();
  c.vocab_size = 0;
  EXPECT_THROW(c.validate(), SpecError);
  EXPECT_EQ(tiny_config(8).checkpoint_count(), 17);
}

TEST(WeightsIo, RoundTripIsExactAndFingerprintMatches) {
  const auto dir = temp_dir("weights");
  const auto w = random_weights(tiny_config(), 4);
  const auto hash = save_weights(w, dir / "model.json");
  EXPECT_TRUE(std::filesystem::exists(dir / "model.bin"));
  const auto back = load_weights(dir / "model.json");
  EXPECT_TRUE(back == w);
  EXPECT_EQ(weights_fingerprint(back), hash);
  EXPECT_NE(weights_fingerprint(random_weights(tiny_config(), 5)), hash);
}

TEST(WeightsIo, CorruptBlobIsRejected) {
  const auto dir = temp_dir("weights_bad");
  save_weights(random_weights(tiny_config(), 4), dir / "model.json");
  {
    std::fstream f(dir / "model.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    f.put('\x7f');
  }
  EXPECT_THROW(load_weights(dir / "model.json"), FormatError);
  std::filesystem::resize_file(dir / "model.bin", 12);
  EXPECT_THROW(load_weights(dir / "model.json"), FormatError);
}

TEST(WeightsIo, WrongArchiveKindIsRejected) {
  const auto dir = temp_dir("weights_kind");
  Archive a;
  a.kind = "something-else";
  a.tensors.push_back({"x", Matrix::Zero(2, 2)});
  write_archive(dir / "a.json", a);
  EXPECT_THROW(load_weights(dir / "a.json"), FormatError);
}

TEST(Fs, AtomicWriteReplacesContents) {
  const auto dir = temp_dir("fs");
  write_file_atomic(dir / "sub" / "f.txt", "one");
  write_file_atomic(dir / "sub" / "f.txt", "two");
  EXPECT_EQ(read_file(dir / "sub" / "f.txt"), "two");
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(dir / "sub")) ++n;
  EXPECT_EQ(n, 1u);
  EXPECT_THROW(read_file(dir / "missing"), FormatError);
}

}  // namespace
}  // namespace lensdyn
