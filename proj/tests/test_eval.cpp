#include <gtest/gtest.h>

#include "atr/eval.hpp"
#include "checks.hpp"

using namespace atr;

namespace {

// One latent factor: user u scores item i as sign_u * q_i.
ConventionalRec line_model(const std::vector<double>& q) {
  ConventionalRec m(2, q.size(), 1, 1);
  auto& p = m.mutable_params();
  p.user_emb(0, 0) = 1.0;
  p.user_emb(1, 0) = -1.0;
  for (std::size_t i = 0; i < q.size(); ++i) p.item_emb(i, 0) = q[i];
  m.freeze();
  return m;
}

TextEmbeddings zeros(std::size_t n) { return TextEmbeddings(n, Vec{0.0}); }

SeedMetrics sample_metrics(std::uint64_t seed) {
  SeedMetrics m;
  m.seed = seed;
  m.num_candidates = 100;
  m.avg_rank_before = 50.0;
  m.rank_ratio_before = 0.5;
  m.appear_before = 0.01;
  m.rmse_before = 0.9;
  m.perplexity_original = 40.0;
  m.avg_rank_after = 30.0;
  m.rank_ratio_after = 0.3;
  m.appear_after = 0.05;
  m.promotion_success_rate = 0.8;
  m.semantic_similarity = 0.6;
  m.perplexity_rewritten = 45.0;
  m.rmse_after = 0.901;
  m.t_statistic = 3.0;
  m.p_value = 0.01;
  m.degenerate = false;
  return m;
}

}  // namespace

TEST(AvgRank, HandCases) {
  const std::vector<std::size_t> users{0, 1};
  const auto m = line_model({6, 5, 4, 3, 2, 1, 0});
  const std::vector<std::size_t> t{2};
  EXPECT_DOUBLE_EQ(avg_predicted_rank(m, t, users, zeros(7)), 4.0);
  const std::vector<std::size_t> top{0}, u0{0};
  EXPECT_DOUBLE_EQ(avg_predicted_rank(m, top, u0, zeros(7)), 1.0);
  EXPECT_THROW(avg_predicted_rank(m, std::vector<std::size_t>{}, users, zeros(7)), DataError);
  EXPECT_THROW(avg_predicted_rank(m, t, std::vector<std::size_t>{}, zeros(7)), DataError);
}

TEST(AvgRank, BoundedAndAntiMonotone) {
  auto m = checks::random_conventional(3, 6, 30, 3, 2);
  m.freeze();
  Rng er = derive_rng(3, 2);
  const auto embs = checks::random_embs(er, 30, 2);
  const std::vector<std::size_t> users{0, 1, 2, 3, 4, 5};
  for (std::size_t i = 0; i < 30; ++i) {
    const std::vector<std::size_t> t{i};
    const double r = avg_predicted_rank(m, t, users, embs);
    EXPECT_GE(r, 1.0);
    EXPECT_LE(r, 30.0);
  }
  Rng rng = derive_rng(3, 1);
  for (int trial = 0; trial < 200; ++trial) {
    Vec row(20);
    for (auto& x : row) x = std::round(normal(rng, 0.0, 2.0));
    const std::size_t i = uniform_index(rng, row.size());
    const std::size_t before = rank_in_row(row, i);
    row[i] += 2.0 * uniform01(rng);
    EXPECT_LE(rank_in_row(row, i), before);
  }
}

TEST(Appear, HandCases) {
  std::vector<double> q(40);
  for (std::size_t i = 0; i < 40; ++i) q[i] = 40.0 - static_cast<double>(i);
  const auto m = line_model(q);
  const std::vector<std::size_t> users{0, 1};
  const std::vector<std::size_t> targets{0, 5, 25};
  EXPECT_DOUBLE_EQ(appear_at_k(m, targets, users, 20, zeros(40)), 0.075);
  const std::vector<std::size_t> none{20};
  const std::vector<std::size_t> u0{0};
  EXPECT_DOUBLE_EQ(appear_at_k(m, none, u0, 20, zeros(40)), 0.0);
  std::vector<std::size_t> all(40);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_DOUBLE_EQ(appear_at_k(m, all, users, 20, zeros(40)), 1.0);
  EXPECT_THROW(appear_at_k(m, all, users, 0, zeros(40)), ConfigError);
}

TEST(Appear, MatchesBruteForce) {
  const auto r = checks::oracle_appear_at_k(5);
  EXPECT_TRUE(r.ok()) << r.mismatches << " of " << r.instances;
}

TEST(RankRatio, Cases) {
  EXPECT_DOUBLE_EQ(rank_ratio(500.0, 1000), 0.5);
  EXPECT_DOUBLE_EQ(rank_ratio(1.0, 1), 1.0);
  EXPECT_THROW(rank_ratio(0.5, 10), RangeError);
  EXPECT_THROW(rank_ratio(11.0, 10), RangeError);
  EXPECT_THROW(rank_ratio(1.0, 0), RangeError);
}

TEST(Cosine, Cases) {
  EXPECT_DOUBLE_EQ(cosine_similarity(Vec{1, 2}, Vec{1, 2}), 1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(Vec{1, 0}, Vec{0, 3}), 0.0);
  EXPECT_NEAR(cosine_similarity(Vec{1, 0}, Vec{1, 1}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_THROW(cosine_similarity(Vec{0, 0}, Vec{1, 1}), UndefinedSimilarityError);
  EXPECT_THROW(cosine_similarity(Vec{1}, Vec{1, 1}), ShapeError);
}

TEST(SuccessRate, Cases) {
  EXPECT_DOUBLE_EQ(promotion_success_rate(Vec{1, 2}, Vec{2, 3}), 1.0);
  EXPECT_DOUBLE_EQ(promotion_success_rate(Vec{1, 2}, Vec{1, 2}), 0.0);
  EXPECT_DOUBLE_EQ(promotion_success_rate(Vec{1, 2, 3, 4}, Vec{2, 3, 4, 4}), 0.75);
  EXPECT_THROW(promotion_success_rate(Vec{1}, Vec{1, 2}), ShapeError);
}

TEST(TTest, HandCase) {
  const auto r = one_tailed_t_test(Vec{10, 20, 30}, Vec{6, 18, 27});
  const double t = 3.0 * std::sqrt(3.0);
  EXPECT_NEAR(r.t, t, 1e-12);
  EXPECT_EQ(r.df, 2u);
  // Closed form of the upper tail for 2 degrees of freedom.
  EXPECT_NEAR(r.p, 0.5 - t / (2.0 * std::sqrt(2.0 + t * t)), 1e-12);
  EXPECT_NEAR(r.p, 0.0175, 5e-4);
}

TEST(TTest, NullAndDegenerate) {
  const auto same = one_tailed_t_test(Vec{1, 2, 3}, Vec{1, 2, 3});
  EXPECT_EQ(same.t, 0.0);
  EXPECT_EQ(same.p, 0.5);
  EXPECT_FALSE(same.degenerate);
  const auto shift = one_tailed_t_test(Vec{5, 6, 7}, Vec{3, 4, 5});
  EXPECT_TRUE(shift.degenerate);
  EXPECT_EQ(shift.p, 0.0);
  EXPECT_THROW(one_tailed_t_test(Vec{1}, Vec{0}), DataError);
  EXPECT_THROW(one_tailed_t_test(Vec{1, 2}, Vec{0}), ShapeError);
}

TEST(Report, IdenticalSeedsAverageToThemselves) {
  const auto m = sample_metrics(1);
  const auto r = build_report("2ft-white", 20, {sample_metrics(1), sample_metrics(2), sample_metrics(3)});
  EXPECT_EQ(r.per_seed.size(), 3u);
  EXPECT_DOUBLE_EQ(r.mean.avg_rank_before, m.avg_rank_before);
  EXPECT_DOUBLE_EQ(*r.mean.avg_rank_after, *m.avg_rank_after);
  EXPECT_DOUBLE_EQ(*r.mean.semantic_similarity, *m.semantic_similarity);
  EXPECT_DOUBLE_EQ(*r.mean.rmse_after, *m.rmse_after);
  const auto j = to_json(r);
  EXPECT_EQ(j["seeds"], nlohmann::json::array({1, 2, 3}));
  EXPECT_TRUE(j["pooled_p_value"].is_null());
  EXPECT_THROW(build_report("x", 20, {}), DataError);
}

TEST(Report, RangesAreEnforced) {
  auto bad = sample_metrics(1);
  bad.appear_after = 1.5;
  EXPECT_THROW(build_report("x", 20, {bad}), RangeError);
  bad = sample_metrics(1);
  bad.rank_ratio_before = 0.0;
  EXPECT_THROW(build_report("x", 20, {bad}), RangeError);
  bad = sample_metrics(1);
  bad.promotion_success_rate = -0.1;
  EXPECT_THROW(build_report("x", 20, {bad}), RangeError);
}

TEST(Report, MissingAfterFieldsStayNull) {
  auto m = sample_metrics(1);
  m.avg_rank_after.reset();
  const auto j = to_json(build_report("none", 20, {m, sample_metrics(2)}));
  EXPECT_TRUE(j["mean"]["avg_predicted_rank_after"].is_null());
  EXPECT_FALSE(j["mean"]["appear_at_k_after"].is_null());
}

TEST(Report, PooledTestUsesAllPairs) {
  const Vec before{10, 20, 30}, after{6, 18, 27};
  const auto r = build_report("x", 20, {sample_metrics(1)}, before, after);
  ASSERT_TRUE(r.pooled_p_value);
  EXPECT_NEAR(*r.pooled_p_value, one_tailed_t_test(before, after).p, 0.0);
}
