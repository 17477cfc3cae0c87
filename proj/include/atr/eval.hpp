#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/recommender.hpp"

namespace atr {

// ---------------------------------------------------------------------------
// Ranking metrics

/// Mean rank over every (user, target) pair.
template <RecommenderModel M>
double avg_predicted_rank(const M& m, std::span<const std::size_t> targets, std::span<const std::size_t> users,
                          const TextEmbeddings& text_embs) {
  if (targets.empty() || users.empty()) throw DataError("avg_predicted_rank over an empty set");
  if (!m.is_frozen()) throw ContractError("evaluation requires a frozen model");
  const ItemTable t = m.item_table(text_embs);
  double s = 0.0;
  for (auto u : users) {
    const Vec row = m.score_row(u, t);
    for (auto i : targets) s += static_cast<double>(rank_in_row(row, i));
  }
  return s / static_cast<double>(targets.size() * users.size());
}

/// Number of targets inside one user's top-K.
inline std::size_t targets_in_top_k(std::span<const double> row, std::span<const std::size_t> targets,
                                    std::size_t k) {
  const auto top = top_k_in_row(row, k);
  std::size_t c = 0;
  for (auto i : top)
    if (std::find(targets.begin(), targets.end(), i) != targets.end()) ++c;
  return c;
}

/// sum_u |targets ∩ top_K(u)| / (K |users|)
template <RecommenderModel M>
double appear_at_k(const M& m, std::span<const std::size_t> targets, std::span<const std::size_t> users,
                   std::size_t k, const TextEmbeddings& text_embs) {
  if (k < 1) throw ConfigError("Appear@K needs K >= 1");
  if (users.empty()) throw DataError("Appear@K over an empty user set");
  const ItemTable t = m.item_table(text_embs);
  std::size_t hits = 0;
  for (auto u : users) hits += targets_in_top_k(m.score_row(u, t), targets, k);
  return static_cast<double>(hits) / static_cast<double>(k * users.size());
}

inline double rank_ratio(double avg_rank, std::size_t num_candidates) {
  if (num_candidates == 0 || !(avg_rank >= 1.0) || avg_rank > static_cast<double>(num_candidates))
    throw RangeError("average rank must lie in [1, number of candidates]");
  return avg_rank / static_cast<double>(num_candidates);
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine of vectors with different dimensions");
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw UndefinedSimilarityError("zero vector");
  return dot(a, b) / (na * nb);
}

/// Fraction of aligned pairs whose score strictly increased.
inline double promotion_success_rate(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw ShapeError("before/after scores are not aligned");
  if (before.empty()) throw DataError("promotion success over zero pairs");
  std::size_t up = 0;
  for (std::size_t k = 0; k < before.size(); ++k) up += after[k] > before[k];
  return static_cast<double>(up) / static_cast<double>(before.size());
}

// ---------------------------------------------------------------------------
// One-tailed paired t-test (alternative: after < before)

struct TTestResult {
  double t = 0.0;
  double p = 0.5;
  std::size_t df = 0;
  bool degenerate = false;
};

inline TTestResult one_tailed_t_test(std::span<const double> before, std::span<const double> after) {
  if (before.size() != after.size()) throw ShapeError("paired samples differ in length");
  const std::size_t n = before.size();
  if (n < 2) throw DataError("t-test needs at least 2 paired samples");
  double mean = 0.0;
  for (std::size_t k = 0; k < n; ++k) mean += before[k] - after[k];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = before[k] - after[k] - mean;
    ss += d * d;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  TTestResult r;
  r.df = n - 1;
  if (sd == 0.0) {
    if (mean == 0.0) return r;
    r.degenerate = true;
    r.t = mean > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
    r.p = mean > 0 ? 0.0 : 1.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(static_cast<double>(n)));
  r.p = boost::math::cdf(boost::math::complement(boost::math::students_t(static_cast<double>(r.df)), r.t));
  return r;
}

// ---------------------------------------------------------------------------
// Reports

struct SeedMetrics {
  std::uint64_t seed = 0;
  std::size_t num_candidates = 0;
  double avg_rank_before = 0.0;
  double rank_ratio_before = 0.0;
  double appear_before = 0.0;
  std::optional<double> rmse_before;
  double perplexity_original = 0.0;

  // Present only when an attack ran.
  std::optional<double> avg_rank_after;
  std::optional<double> rank_ratio_after;
  std::optional<double> appear_after;
  std::optional<double> promotion_success_rate;
  std::optional<double> semantic_similarity;
  std::optional<double> perplexity_rewritten;
  std::optional<double> rmse_after;
  std::optional<double> t_statistic;
  std::optional<double> p_value;
  std::optional<bool> degenerate;
};

struct EvalReport {
  std::string mode;
  std::size_t k = 20;
  std::vector<SeedMetrics> per_seed;
  SeedMetrics mean;
  // Paired test over (seed, target) average ranks pooled across seeds.
  std::optional<double> pooled_t_statistic;
  std::optional<double> pooled_p_value;
};

namespace detail {

inline void put(nlohmann::json& j, const char* key, const std::optional<double>& v) {
  j[key] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json seed_json(const SeedMetrics& m, bool with_seed) {
  nlohmann::json j;
  if (with_seed) j["seed"] = m.seed;
  j["num_candidates"] = m.num_candidates;
  j["avg_predicted_rank_before"] = m.avg_rank_before;
  j["rank_ratio_before"] = m.rank_ratio_before;
  j["appear_at_k_before"] = m.appear_before;
  put(j, "rmse_overall_before", m.rmse_before);
  j["perplexity_original"] = m.perplexity_original;
  put(j, "avg_predicted_rank_after", m.avg_rank_after);
  put(j, "rank_ratio_after", m.rank_ratio_after);
  put(j, "appear_at_k_after", m.appear_after);
  put(j, "promotion_success_rate", m.promotion_success_rate);
  put(j, "semantic_similarity", m.semantic_similarity);
  put(j, "perplexity_rewritten", m.perplexity_rewritten);
  put(j, "rmse_overall_after", m.rmse_after);
  put(j, "t_statistic", m.t_statistic);
  put(j, "p_value", m.p_value);
  j["degenerate"] = m.degenerate ? nlohmann::json(*m.degenerate) : nlohmann::json(nullptr);
  return j;
}

inline std::optional<double> mean_of(const std::vector<SeedMetrics>& v, std::optional<double> SeedMetrics::*f) {
  double s = 0.0;
  for (const auto& m : v) {
    if (!(m.*f)) return std::nullopt;
    s += *(m.*f);
  }
  return s / static_cast<double>(v.size());
}

inline double mean_of(const std::vector<SeedMetrics>& v, double SeedMetrics::*f) {
  double s = 0.0;
  for (const auto& m : v) s += m.*f;
  return s / static_cast<double>(v.size());
}

}  // namespace detail

/// Checks the declared ranges of every populated field.
inline void validate_report(const EvalReport& r) {
  auto check_seed = [&](const SeedMetrics& m) {
    auto in = [](double x, double lo, double hi) { return x >= lo && x <= hi; };
    const double k = static_cast<double>(r.k);
    if (!in(m.rank_ratio_before, 0.0, 1.0) || m.rank_ratio_before <= 0.0)
      throw RangeError("rank_ratio_before outside (0,1]");
    if (!in(m.appear_before, 0.0, 1.0)) throw RangeError("appear_at_k_before outside [0,1]");
    if (m.rank_ratio_after && (!in(*m.rank_ratio_after, 0.0, 1.0) || *m.rank_ratio_after <= 0.0))
      throw RangeError("rank_ratio_after outside (0,1]");
    if (m.appear_after && !in(*m.appear_after, 0.0, 1.0)) throw RangeError("appear_at_k_after outside [0,1]");
    if (m.promotion_success_rate && !in(*m.promotion_success_rate, 0.0, 1.0))
      throw RangeError("promotion_success_rate outside [0,1]");
    if (m.semantic_similarity && !in(*m.semantic_similarity, -1.0 - 1e-12, 1.0 + 1e-12))
      throw RangeError("semantic similarity outside [-1,1]");
    (void)k;
  };
  for (const auto& m : r.per_seed) check_seed(m);
  if (!r.per_seed.empty()) check_seed(r.mean);
}

/// Aggregates per-seed metrics into a report with per-field means.
inline EvalReport build_report(std::string mode, std::size_t k, std::vector<SeedMetrics> per_seed,
                               std::span<const double> pooled_before = {},
                               std::span<const double> pooled_after = {}) {
  if (per_seed.empty()) throw DataError("report has no seed results");
  EvalReport r;
  r.mode = std::move(mode);
  r.k = k;
  r.per_seed = std::move(per_seed);
  using detail::mean_of;
  auto& m = r.mean;
  const auto& v = r.per_seed;
  m.seed = 0;
  m.num_candidates = v.front().num_candidates;
  m.avg_rank_before = mean_of(v, &SeedMetrics::avg_rank_before);
  m.rank_ratio_before = mean_of(v, &SeedMetrics::rank_ratio_before);
  m.appear_before = mean_of(v, &SeedMetrics::appear_before);
  m.rmse_before = mean_of(v, &SeedMetrics::rmse_before);
  m.perplexity_original = mean_of(v, &SeedMetrics::perplexity_original);
  m.avg_rank_after = mean_of(v, &SeedMetrics::avg_rank_after);
  m.rank_ratio_after = mean_of(v, &SeedMetrics::rank_ratio_after);
  m.appear_after = mean_of(v, &SeedMetrics::appear_after);
  m.promotion_success_rate = mean_of(v, &SeedMetrics::promotion_success_rate);
  m.semantic_similarity = mean_of(v, &SeedMetrics::semantic_similarity);
  m.perplexity_rewritten = mean_of(v, &SeedMetrics::perplexity_rewritten);
  m.rmse_after = mean_of(v, &SeedMetrics::rmse_after);
  m.t_statistic = mean_of(v, &SeedMetrics::t_statistic);
  m.p_value = mean_of(v, &SeedMetrics::p_value);
  if (pooled_before.size() >= 2 && pooled_before.size() == pooled_after.size()) {
    const auto tt = one_tailed_t_test(pooled_before, pooled_after);
    r.pooled_t_statistic = tt.t;
    r.pooled_p_value = tt.p;
  }
  validate_report(r);
  return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["mode"] = r.mode;
  j["k"] = r.k;
  j["seeds"] = nlohmann::json::array();
  for (const auto& m : r.per_seed) j["seeds"].push_back(m.seed);
  j["per_seed"] = nlohmann::json::array();
  for (const auto& m : r.per_seed) j["per_seed"].push_back(detail::seed_json(m, true));
  j["mean"] = detail::seed_json(r.mean, false);
  detail::put(j, "pooled_t_statistic", r.pooled_t_statistic);
  detail::put(j, "pooled_p_value", r.pooled_p_value);
  return j;
}

}  // namespace atr
