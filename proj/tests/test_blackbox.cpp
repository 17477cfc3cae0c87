#include <gtest/gtest.h>

#include "atr/blackbox.hpp"
#include "checks.hpp"
#include "util.hpp"

using namespace atr;

namespace {

struct ConvWorld {
  ConventionalRec rec;
  TinyLM lm{LmShape{30, 4, 2, 4}, 1};
  TextEncoder enc = TextEncoder::from_lm(lm);
  ItemTextCache cache;

  explicit ConvWorld(std::uint64_t seed) : rec(checks::random_conventional(seed, 12, 20, 3, 4)) {
    rec.freeze();
    std::vector<Tokens> docs;
    for (TokenId i = 0; i < 20; ++i) docs.push_back({static_cast<TokenId>(4 + i % 26), static_cast<TokenId>(5 + i)});
    cache = ItemTextCache(enc, docs);
  }
};

SequentialRec frozen_sequential(const TextEmbeddings& embs, std::uint64_t seed) {
  auto m = make_sequential(embs.size(), 3, embs[0].size(), 3, 0.5, seed, 0.5);
  Rng rng = derive_rng(seed, 5);
  std::vector<std::vector<std::size_t>> hist(6);
  for (auto& h : hist)
    for (int k = 0; k < 4; ++k) h.push_back(uniform_index(rng, embs.size()));
  m.freeze(hist, embs);
  return m;
}

ConventionalRec constant_model(std::size_t users, std::size_t items, double g) {
  ConventionalRec m(users, items, 2, 2);
  m.mutable_params().global_bias = g;
  m.freeze();
  return m;
}

}  // namespace

TEST(Ric, CountsReplayAndDeterminism) {
  ConvWorld w(3);
  BlackBox bb(w.rec, w.cache, 1.0);
  const auto x = gen_fake_profiles_ric(bb, 5, 10, 9);
  ASSERT_EQ(x.records.size(), 50u);
  EXPECT_EQ(x.num_users, 5u);
  EXPECT_EQ(bb.log().count(Access::kScore), 5u);
  EXPECT_EQ(bb.log().size(), 5u);
  const ItemTable t = w.rec.item_table(w.cache.embeddings());
  for (const auto& p : x.profiles) {
    EXPECT_EQ(p.items.size(), 10u);
    std::vector<RatedItem> rated;
    for (std::size_t k = 0; k < p.items.size(); ++k) rated.push_back({p.items[k], p.ratings[k]});
    const auto [bias, vec] = w.rec.fold_in(rated, t, 1.0);
    for (const auto& r : x.records) {
      if (r.user == p.fake_user) {
        EXPECT_EQ(r.score, t.offsets[r.item] + bias + dot(vec, t.vectors.row(r.item)));
      }
    }
  }
  BlackBox bb2(w.rec, w.cache, 1.0);
  const auto y = gen_fake_profiles_ric(bb2, 5, 10, 9);
  for (std::size_t k = 0; k < x.records.size(); ++k) {
    EXPECT_EQ(x.records[k].item, y.records[k].item);
    EXPECT_EQ(x.records[k].score, y.records[k].score);
  }
}

TEST(Ric, TooManyItemsAndWrongFamily) {
  ConvWorld w(3);
  BlackBox bb(w.rec, w.cache);
  EXPECT_THROW(gen_fake_profiles_ric(bb, 2, 21, 1), ConfigError);
  EXPECT_THROW(gen_fake_profiles_adg(bb, 2, 3, 2, 1), TypeMismatchError);
}

TEST(Adg, SeedOnlyProfiles) {
  ConvWorld w(4);
  const auto seq = frozen_sequential(w.cache.embeddings(), 4);
  BlackBox bb(seq, w.cache);
  const auto x = gen_fake_profiles_adg(bb, 6, 1, 2, 3);
  for (const auto& p : x.profiles) EXPECT_EQ(p.items.size(), 1u);
  EXPECT_TRUE(x.records.empty());
  EXPECT_EQ(bb.log().size(), 0u);
  EXPECT_THROW(gen_fake_profiles_ric(bb, 2, 3, 1), TypeMismatchError);
}

TEST(Adg, ReplayedAppendsComeFromTopK) {
  ConvWorld w(5);
  const auto seq = frozen_sequential(w.cache.embeddings(), 5);
  BlackBox bb(seq, w.cache);
  const auto x = gen_fake_profiles_adg(bb, 8, 3, 2, 11);
  EXPECT_EQ(bb.log().count(Access::kTopK), 8u * 2);
  BlackBox replay(seq, w.cache);
  for (const auto& p : x.profiles) {
    ASSERT_EQ(p.items.size(), 3u);
    for (std::size_t s = 1; s < p.items.size(); ++s) {
      const std::vector<std::size_t> prefix(p.items.begin(), p.items.begin() + static_cast<std::ptrdiff_t>(s));
      const auto top = replay.top_k_for_profile(prefix, 2);
      EXPECT_TRUE(std::any_of(top.begin(), top.end(), [&](const ScoredItem& t) { return t.item == p.items[s]; }));
    }
  }
}

TEST(BlackBox, RequiresFrozenModel) {
  ConventionalRec open(2, 3, 2, 2);
  const TinyLM lm(LmShape{10, 2, 2, 2}, 1);
  const auto enc = TextEncoder::from_lm(lm);
  const ItemTextCache cache(enc, {{4}, {5}, {6}});
  EXPECT_THROW(BlackBox(open, cache), ContractError);
}

TEST(SurrogateLoss, HandCases) {
  EXPECT_NEAR(surrogate_loss(Vec{1.0, 2.0, 3.0}, Vec{1.1, 2.1, 2.9}), 0.03, 1e-12);
  EXPECT_NEAR(surrogate_loss(Vec{0.8}, Vec{0.5}), 0.09, 1e-12);
  EXPECT_THROW(surrogate_loss(Vec{0.8}, Vec{}), ShapeError);
}

TEST(SurrogateLoss, IdenticalModelGivesZero) {
  ConvWorld w(6);
  SurrogateTrainSet x;
  x.num_users = 12;
  for (std::size_t u = 0; u < 12; ++u)
    for (std::size_t i = 0; i < 20; i += 3)
      x.records.push_back({u, {}, i, w.rec.score(u, i, w.cache.embeddings()[i])});
  EXPECT_EQ(surrogate_loss(w.rec, x, w.cache.embeddings()), 0.0);
}

TEST(Surrogate, TrainingIsDeterministicAndFits) {
  ConvWorld w(7);
  BlackBox bb(w.rec, w.cache);
  const auto x = gen_fake_profiles_ric(bb, 40, 10, 2);
  double mean_score = 0.0;
  for (const auto& r : x.records) mean_score += r.score / static_cast<double>(x.records.size());
  RecTrainConfig cfg;
  cfg.epochs = 60;
  cfg.lr = 0.3;
  auto a = make_conventional(40, 20, 3, 4, mean_score, 1), b = make_conventional(40, 20, 3, 4, mean_score, 1);
  const auto init_loss = surrogate_loss(a, x, w.cache.embeddings());
  const auto ra = train_surrogate(a, x, w.cache.embeddings(), cfg);
  train_surrogate(b, x, w.cache.embeddings(), cfg);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_TRUE(a.is_frozen());
  EXPECT_LT(ra.final_loss, init_loss);
  EXPECT_THROW(train_surrogate(b, SurrogateTrainSet{}, w.cache.embeddings(), cfg), DataError);
}

TEST(Fidelity, IdentityIsZero) {
  ConvWorld w(8);
  const std::vector<Interaction> probe{{0, 1, 4.0, 0}, {3, 2, 2.0, 0}};
  const auto r = surrogate_fidelity(w.rec, w.rec, {}, probe, w.cache.embeddings());
  EXPECT_EQ(r.relative_change, 0.0);
  EXPECT_EQ(r.metric, "rmse");
}

TEST(Fidelity, HandBuiltToy) {
  // Empty history: probe users fold in to the mean user (zero here), so
  // predictions are the global biases. Ratings {3, 4}.
  const auto bb = constant_model(2, 2, 3.0), sur = constant_model(2, 2, 3.5);
  const TextEmbeddings e(2, Vec{0.0, 0.0});
  const std::vector<Interaction> probe{{0, 0, 3.0, 0}, {1, 1, 4.0, 0}};
  const auto r = surrogate_fidelity(bb, sur, {}, probe, e);
  EXPECT_NEAR(r.blackbox_value, std::sqrt(0.5), 1e-12);
  EXPECT_NEAR(r.surrogate_value, 0.5, 1e-12);
  EXPECT_NEAR(r.relative_change, (std::sqrt(0.5) - 0.5) / std::sqrt(0.5), 1e-12);
}

TEST(Fidelity, SequentialIdentityAndFamilyMismatch) {
  ConvWorld w(9);
  const auto seq = frozen_sequential(w.cache.embeddings(), 9);
  const std::vector<std::size_t> targets{1, 4};
  const auto r = surrogate_fidelity(seq, seq, targets, w.cache.embeddings());
  EXPECT_EQ(r.relative_change, 0.0);
  EXPECT_EQ(r.metric, "appear@50");
  EXPECT_THROW(surrogate_fidelity(w.rec, seq, targets, w.cache.embeddings()), TypeMismatchError);
}

TEST(Persistence, SurrogateDataRoundTrip) {
  testutil::ScratchDir dir("surrogate");
  ConvWorld w(10);
  BlackBox bb(w.rec, w.cache);
  const auto x = gen_fake_profiles_ric(bb, 3, 4, 1);
  save_surrogate_data(x, dir.path());
  const auto y = load_surrogate_data(dir.path());
  ASSERT_EQ(y.records.size(), x.records.size());
  EXPECT_EQ(y.num_users, x.num_users);
  for (std::size_t k = 0; k < x.records.size(); ++k) EXPECT_EQ(y.records[k].score, x.records[k].score);
  EXPECT_EQ(y.profiles[2].ratings, x.profiles[2].ratings);
}

TEST(Oracles, SurrogateLossMatchesBruteForce) {
  const auto r = checks::oracle_surrogate_loss(5);
  EXPECT_TRUE(r.ok()) << r.mismatches << " of " << r.instances;
}
