#include <gtest/gtest.h>

#include <cmath>

#include "atr/textenc.hpp"
#include "checks.hpp"
#include "util.hpp"

using namespace atr;

namespace {

TinyLM zero_lm(std::size_t vocab, std::size_t context = 2) {
  const LmShape s{vocab, 2, context, 3};
  return TinyLM(s, LmParams(s));
}

}  // namespace

TEST(Tokenize, NormalizesAndMapsUnknowns) {
  const auto v = Vocabulary::build({{"best", "sunscreen"}});
  EXPECT_EQ(tokenize(v, "Best Sunscreen!"), (Tokens{v.id("best"), v.id("sunscreen")}));
  EXPECT_TRUE(tokenize(v, "").empty());
  EXPECT_EQ(tokenize(v, "moisturizer"), Tokens{kUnk});
}

TEST(Vocabulary, ReservedIdsAndRoundTrip) {
  const auto v = Vocabulary::build({{"a", "b", "a"}});
  EXPECT_EQ(v.size(), kNumReserved + 2);
  EXPECT_EQ(v.id("a"), kNumReserved);
  EXPECT_EQ(v.decode({kBos, v.id("b"), kEos}), Words{"b"});
  EXPECT_THROW(v.word(99), IndexError);
  EXPECT_THROW(Vocabulary::from_words({"<pad>", "<unk>", "<bos>", "<eos>", "x", "x"}), ShapeError);
}

TEST(EmbedText, HandCases) {
  auto lm = zero_lm(kNumReserved + 2);
  const TokenId a = kNumReserved, b = kNumReserved + 1;
  EXPECT_EQ(embed_text(lm, Tokens{a, b}), (Vec{0.0, 0.0}));
  lm.mutable_params().embedding(a, 0) = 1.0;
  lm.mutable_params().embedding(b, 1) = 1.0;
  EXPECT_EQ(embed_text(lm, Tokens{a}), (Vec{1.0, 0.0}));
  EXPECT_EQ(embed_text(lm, Tokens{a, b}), (Vec{0.5, 0.5}));
  EXPECT_THROW(embed_text(lm, Tokens{}), EmptyTextError);
}

TEST(LmLoss, UniformLogitsGiveLogV) {
  const auto lm = zero_lm(4);
  const auto r = lm_loss_and_grad(lm, {Window{kPad, kBos, kEos}});
  EXPECT_NEAR(r.loss, std::log(4.0), 1e-12);
}

TEST(LmLoss, ConfidentTargetGivesNearZero) {
  auto lm = zero_lm(5);
  lm.mutable_params().b2[4] = 60.0;
  EXPECT_LT(lm_loss(lm, {Window{kPad, kBos, 4}}), 1e-12);
}

TEST(LmLoss, WrongWindowSizeIsShapeError) {
  const auto lm = zero_lm(4);
  EXPECT_THROW(lm_loss(lm, {Window{kBos, kEos}}), ShapeError);
}

TEST(Perplexity, UniformAndPerfect) {
  const auto uniform = zero_lm(4);
  EXPECT_NEAR(perplexity(uniform, Tokens{kPad, kBos, kEos, kEos}), 4.0, 1e-12);
  auto perfect = zero_lm(5);
  perfect.mutable_params().b2[4] = 80.0;
  EXPECT_NEAR(perplexity(perfect, Tokens{kPad, kBos, 4, 4}), 1.0, 1e-12);
}

TEST(Perplexity, HandTwoStep) {
  // Context-free LM: p(a) = 0.5, p(b) = 0.25, the other five tokens 0.05 each.
  auto lm = zero_lm(7);
  const TokenId a = 4, b = 5;
  for (std::size_t t = 0; t < 7; ++t) lm.mutable_params().b2[t] = std::log(0.05);
  lm.mutable_params().b2[a] = std::log(0.5);
  lm.mutable_params().b2[b] = std::log(0.25);
  EXPECT_NEAR(perplexity(lm, Tokens{kPad, kBos, a, b}), std::sqrt(8.0), 1e-12);
}

TEST(Perplexity, TooShortIsShapeError) {
  EXPECT_THROW(perplexity(zero_lm(4), Tokens{kBos, kEos}), ShapeError);
}

TEST(Generate, GreedyRepeatsForcedArgmax) {
  auto lm = zero_lm(6);
  lm.mutable_params().b2[5] = 10.0;
  DecodeConfig cfg;
  cfg.max_new_tokens = 7;
  EXPECT_EQ(generate(lm, Tokens{kBos}, cfg), Tokens(7, 5));
}

TEST(Generate, TopKIsDeterministicPerSeed) {
  const TinyLM lm(LmShape{40, 4, 3, 6}, 3);
  DecodeConfig cfg;
  cfg.strategy = DecodeConfig::Strategy::kTopK;
  cfg.k = 5;
  cfg.seed = 17;
  cfg.max_new_tokens = 30;
  const auto a = generate(lm, Tokens{kBos}, cfg), b = generate(lm, Tokens{kBos}, cfg);
  EXPECT_EQ(a, b);
  for (auto t : a) EXPECT_GE(t, kNumReserved);
}

TEST(Generate, MinNewTokensSuppressesEos) {
  auto lm = zero_lm(6);
  lm.mutable_params().b2[kEos] = 10.0;
  DecodeConfig cfg;
  cfg.max_new_tokens = 10;
  EXPECT_TRUE(generate(lm, Tokens{kBos}, cfg).empty());
  cfg.min_new_tokens = 4;
  EXPECT_EQ(generate(lm, Tokens{kBos}, cfg).size(), 4u);
}

TEST(FramedWindows, CoversEveryTokenAndEos) {
  const auto w = framed_windows(Tokens{7, 8, 9}, 2);
  ASSERT_EQ(w.size(), 4u);
  EXPECT_EQ(w.front(), (Window{kPad, kBos, 7}));
  EXPECT_EQ(w.back(), (Window{8, 9, kEos}));
}

TEST(Checkpoint, RoundTripIsExact) {
  testutil::ScratchDir dir("lm");
  const auto vocab = Vocabulary::build({{"x", "y", "z"}});
  const TinyLM lm(LmShape{vocab.size(), 3, 2, 4}, 9);
  save_lm(dir.path() / "lm.json", lm, vocab);
  const auto [back, v2] = load_lm(dir.path() / "lm.json");
  EXPECT_EQ(back.fingerprint(), lm.fingerprint());
  EXPECT_EQ(v2.words(), vocab.words());
}

TEST(Gradients, TinyLmMatchesFiniteDifferences) {
  for (const auto& g : checks::lm_gradient_checks(11)) {
    EXPECT_TRUE(g.ok) << g.name << " max rel " << g.max_rel;
    EXPECT_GE(g.coords, std::min<std::size_t>(100, g.coords));
  }
}

TEST(Oracles, PerplexityMatchesIndependentForwardPass) {
  const auto r = checks::oracle_perplexity(5);
  EXPECT_TRUE(r.ok()) << r.mismatches << " mismatches, max err " << r.max_err;
}
