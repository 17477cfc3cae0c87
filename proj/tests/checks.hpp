#pragma once

// Finite-difference gradient checks and brute-force oracles. Shared by the
// unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "atr/atr.hpp"

namespace checks {

using atr::Rng;
using atr::Vec;

struct GradCheck {
  std::string name;
  std::size_t coords = 0;
  double max_rel = 0.0;
  bool ok = true;
};

inline constexpr double kEps = 1e-5;
inline constexpr double kTol = 1e-4;
// Below this magnitude the error is measured against the floor instead.
inline constexpr double kFloor = 1e-6;

/// Central differences at up to n coordinates of theta. Coordinates with a
/// non-zero analytic gradient are preferred so the check is not dominated by
/// trivially-zero entries.
template <class F>
GradCheck fd_check(std::string name, std::span<double> theta, std::span<const double> analytic, F&& f, Rng& rng,
                   std::size_t n = 100) {
  GradCheck r{std::move(name)};
  std::vector<std::size_t> nz, zero;
  for (std::size_t j = 0; j < theta.size(); ++j) (analytic[j] != 0.0 ? nz : zero).push_back(j);
  std::shuffle(nz.begin(), nz.end(), rng);
  std::shuffle(zero.begin(), zero.end(), rng);
  std::vector<std::size_t> pick(nz.begin(), nz.begin() + static_cast<std::ptrdiff_t>(std::min(n, nz.size())));
  for (std::size_t k = 0; pick.size() < n && k < zero.size(); ++k) pick.push_back(zero[k]);
  for (auto j : pick) {
    const double saved = theta[j];
    theta[j] = saved + kEps;
    const double fp = f();
    theta[j] = saved - kEps;
    const double fm = f();
    theta[j] = saved;
    const double num = (fp - fm) / (2.0 * kEps);
    const double scale = std::max({std::abs(analytic[j]), std::abs(num), kFloor});
    r.max_rel = std::max(r.max_rel, std::abs(analytic[j] - num) / scale);
    ++r.coords;
  }
  r.ok = r.max_rel < kTol;
  return r;
}

inline Vec random_vec(Rng& rng, std::size_t n, double sd = 1.0) {
  Vec v(n);
  for (auto& x : v) x = atr::normal(rng, 0.0, sd);
  return v;
}

inline atr::TextEmbeddings random_embs(Rng& rng, std::size_t items, std::size_t d) {
  atr::TextEmbeddings e;
  for (std::size_t i = 0; i < items; ++i) e.push_back(random_vec(rng, d, 0.5));
  return e;
}

inline atr::TinyLM random_lm(std::uint64_t seed, std::size_t vocab = 30, std::size_t dim = 6, std::size_t ctx = 4,
                             std::size_t hidden = 10) {
  atr::TinyLM lm(atr::LmShape{vocab, dim, ctx, hidden}, seed);
  // Larger output weights than the init so the softmax is not nearly flat.
  Rng rng = atr::derive_rng(seed, 77);
  for (auto& x : lm.mutable_params().w2.data()) x = atr::normal(rng, 0.0, 0.5);
  for (auto& x : lm.mutable_params().b1) x = atr::normal(rng, 0.0, 0.1);
  for (auto& x : lm.mutable_params().b2) x = atr::normal(rng, 0.0, 0.1);
  return lm;
}

inline atr::Tokens random_tokens(Rng& rng, std::size_t vocab, std::size_t n) {
  atr::Tokens t(n);
  for (auto& x : t) x = static_cast<atr::TokenId>(atr::kNumReserved + atr::uniform_index(rng, vocab - atr::kNumReserved));
  return t;
}

inline atr::ConventionalRec random_conventional(std::uint64_t seed, std::size_t users, std::size_t items,
                                                std::size_t k, std::size_t d) {
  auto m = atr::make_conventional(users, items, k, d, 3.0, seed, 0.5);
  Rng rng = atr::derive_rng(seed, 78);
  for (auto& x : m.mutable_params().user_bias) x = atr::normal(rng, 0.0, 0.3);
  for (auto& x : m.mutable_params().item_bias) x = atr::normal(rng, 0.0, 0.3);
  return m;
}

// ---------------------------------------------------------------------------
// Gradient suite

inline std::vector<GradCheck> lm_gradient_checks(std::uint64_t seed) {
  atr::TinyLM lm = random_lm(seed);
  Rng rng = atr::derive_rng(seed, 1);
  std::vector<atr::Window> batch;
  for (int d = 0; d < 3; ++d) {
    auto w = atr::framed_windows(random_tokens(rng, lm.shape().vocab, 7), lm.context());
    batch.insert(batch.end(), w.begin(), w.end());
  }
  const auto lg = atr::lm_loss_and_grad(lm, batch);
  std::vector<GradCheck> out;
  auto params = lm.mutable_params().tensors();
  auto grads = lg.grad.tensors();
  for (std::size_t k = 0; k < params.size(); ++k)
    out.push_back(fd_check("tinylm." + params[k].first, params[k].second, grads[k].second,
                           [&] { return atr::lm_loss(lm, batch); }, rng));
  return out;
}

inline std::vector<GradCheck> conventional_gradient_checks(std::uint64_t seed) {
  const std::size_t users = 30, items = 25, k = 4, d = 6;
  auto m = random_conventional(seed, users, items, k, d);
  Rng rng = atr::derive_rng(seed, 2);
  const auto embs = random_embs(rng, items, d);
  std::vector<atr::Interaction> batch;
  for (int n = 0; n < 60; ++n)
    batch.push_back({atr::uniform_index(rng, users), atr::uniform_index(rng, items),
                     1.0 + 4.0 * atr::uniform01(rng), 0});
  atr::RecTrainConfig cfg;
  cfg.reg_user = 0.03;
  cfg.reg_item = 0.05;
  cfg.reg_user_bias = 0.02;
  cfg.reg_item_bias = 0.04;
  cfg.reg_text = 0.01;
  atr::ConventionalParams g;
  atr::conventional_objective(m, batch, embs, cfg, &g);
  std::vector<GradCheck> out;
  auto params = m.mutable_params().tensors();
  auto grads = g.tensors();
  for (std::size_t j = 0; j < params.size(); ++j)
    out.push_back(fd_check("conventional." + params[j].first, params[j].second, grads[j].second,
                           [&] { return atr::conventional_objective(m, batch, embs, cfg); }, rng));
  return out;
}

inline std::vector<GradCheck> sequential_gradient_checks(std::uint64_t seed) {
  const std::size_t items = 40, k = 5, d = 6;
  auto m = atr::make_sequential(items, k, d, 3, 0.4, seed, 0.5);
  Rng rng = atr::derive_rng(seed, 3);
  const auto embs = random_embs(rng, items, d);
  std::vector<atr::SequenceCase> batch;
  for (int n = 0; n < 30; ++n) {
    atr::SequenceCase c;
    const std::size_t len = 1 + atr::uniform_index(rng, 5);
    for (std::size_t j = 0; j < len; ++j) c.context.push_back(atr::uniform_index(rng, items));
    c.positive = atr::uniform_index(rng, items);
    c.negative = atr::uniform_index(rng, items);
    batch.push_back(c);
  }
  atr::RecTrainConfig cfg;
  cfg.reg_item = 0.02;
  cfg.reg_text = 0.01;
  atr::SequentialParams g;
  atr::sequential_objective(m, batch, embs, cfg, &g);
  std::vector<GradCheck> out;
  auto params = m.mutable_params().tensors();
  auto grads = g.tensors();
  for (std::size_t j = 0; j < params.size(); ++j)
    out.push_back(fd_check("sequential." + params[j].first, params[j].second, grads[j].second,
                           [&] { return atr::sequential_objective(m, batch, embs, cfg); }, rng));

  // Score-distillation objective used for sequential surrogates.
  std::vector<atr::SurrogateRecord> recs;
  for (int n = 0; n < 30; ++n) {
    atr::SurrogateRecord r;
    const std::size_t len = 1 + atr::uniform_index(rng, 5);
    for (std::size_t j = 0; j < len; ++j) r.context.push_back(atr::uniform_index(rng, items));
    r.item = atr::uniform_index(rng, items);
    r.score = atr::uniform01(rng);
    recs.push_back(r);
  }
  atr::sequential_distill_objective(m, recs, embs, cfg, &g);
  params = m.mutable_params().tensors();
  grads = g.tensors();
  for (std::size_t j = 0; j < params.size(); ++j)
    out.push_back(fd_check("sequential_distill." + params[j].first, params[j].second, grads[j].second,
                           [&] { return atr::sequential_distill_objective(m, recs, embs, cfg); }, rng));
  return out;
}

/// lambda * L_promotion(score(u, i, E^T_i(LM))) w.r.t. every LM tensor.
inline std::vector<GradCheck> promotion_chain_checks(std::uint64_t seed, atr::TargetEmbedding mode) {
  atr::TinyLM lm = random_lm(seed);
  const atr::TinyLM enc_lm = random_lm(seed + 1000);
  const atr::TextEncoder enc = atr::TextEncoder::from_lm(enc_lm);
  const std::size_t users = 20, items = 15;
  auto rec = random_conventional(seed, users, items, 4, lm.shape().dim);
  rec.freeze();
  Rng rng = atr::derive_rng(seed, 4);
  const auto embs = random_embs(rng, items, lm.shape().dim);
  std::vector<atr::TargetText> targets;
  for (std::size_t i : {2u, 7u, 11u})
    targets.push_back(atr::make_target_text(i, random_tokens(rng, lm.shape().vocab, 9), 0.4));
  std::vector<std::size_t> us(users);
  std::iota(us.begin(), us.end(), 0);
  const auto rmax = atr::rmax_refresh(rec, us, embs);
  const double margin = 0.3, lambda = 0.7;
  atr::LmGrad g = lm.zero_grad();
  atr::promotion_objective(lm, rec, enc, targets, us, rmax, margin, lambda, mode, &g);
  const std::string tag = mode == atr::TargetEmbedding::kExpected ? "promotion_expected." : "promotion_direct.";
  std::vector<GradCheck> out;
  auto params = lm.mutable_params().tensors();
  auto grads = g.tensors();
  for (std::size_t j = 0; j < params.size(); ++j) {
    // The direct embedding only depends on the embedding table.
    if (mode == atr::TargetEmbedding::kDirect && params[j].first != "embedding") continue;
    out.push_back(fd_check(tag + params[j].first, params[j].second, grads[j].second,
                           [&] { return atr::promotion_objective(lm, rec, enc, targets, us, rmax, margin, lambda, mode); },
                           rng));
  }
  return out;
}

inline std::vector<GradCheck> gradient_suite(std::uint64_t seed = 11) {
  std::vector<GradCheck> all;
  for (auto&& part : {lm_gradient_checks(seed), conventional_gradient_checks(seed), sequential_gradient_checks(seed),
                      promotion_chain_checks(seed, atr::TargetEmbedding::kExpected),
                      promotion_chain_checks(seed, atr::TargetEmbedding::kDirect)})
    all.insert(all.end(), part.begin(), part.end());
  return all;
}

// ---------------------------------------------------------------------------
// Brute-force oracles

struct OracleResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t mismatches = 0;
  double max_err = 0.0;
  bool ok() const { return instances >= 100 && mismatches == 0; }
};

/// Items ordered by descending score, ties by ascending id, via a full sort.
inline std::vector<std::size_t> oracle_order(const Vec& scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

/// Scores quantised to a coarse grid so ties are common.
inline Vec tied_scores(Rng& rng, std::size_t n) {
  Vec s(n);
  for (auto& x : s) x = static_cast<double>(atr::uniform_index(rng, 6)) * 0.5;
  return s;
}

inline OracleResult oracle_promotion_loss(std::uint64_t seed, std::size_t instances = 200) {
  OracleResult r{"promotion_loss"};
  Rng rng = atr::derive_rng(seed, 20);
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t users = 1 + atr::uniform_index(rng, 6), items = 2 + atr::uniform_index(rng, 8);
    const std::size_t g = 1 + atr::uniform_index(rng, items);
    const double margin = atr::uniform01(rng);
    std::vector<Vec> full;
    for (std::size_t u = 0; u < users; ++u) full.push_back(atr::uniform_index(rng, 2) ? tied_scores(rng, items) : random_vec(rng, items));
    const auto tg = atr::sample_without_replacement(rng, items, g);
    atr::Matrix sc(users, g);
    Vec rmax(users);
    double want = 0.0;
    for (std::size_t u = 0; u < users; ++u) {
      rmax[u] = full[u][oracle_order(full[u]).front()];
      for (std::size_t i = 0; i < g; ++i) {
        sc(u, i) = full[u][tg[i]];
        want += std::max(0.0, rmax[u] - full[u][tg[i]] + margin);
      }
    }
    const auto got = atr::promotion_loss(sc, rmax, margin);
    const double err = std::abs(got.loss - want);
    r.max_err = std::max(r.max_err, err);
    if (err > 1e-10 * std::max(1.0, std::abs(want))) ++r.mismatches;
    ++r.instances;
  }
  return r;
}

inline OracleResult oracle_rank_topk(std::uint64_t seed, std::size_t instances = 200) {
  OracleResult r{"rank_of/top_k"};
  Rng rng = atr::derive_rng(seed, 21);
  for (std::size_t t = 0; t < instances; ++t) {
    // Half the instances go through a frozen model, half through raw rows.
    const bool via_model = t % 2 == 1;
    const std::size_t items = 2 + atr::uniform_index(rng, 12);
    Vec row;
    std::size_t user = 0;
    atr::ConventionalRec m;
    atr::TextEmbeddings embs;
    if (via_model) {
      m = random_conventional(seed * 1000 + t, 3, items, 3, 4);
      m.freeze();
      embs = random_embs(rng, items, 4);
      user = atr::uniform_index(rng, 3);
      for (std::size_t i = 0; i < items; ++i) row.push_back(m.score(user, i, embs[i]));
    } else {
      row = tied_scores(rng, items);
    }
    const auto order = oracle_order(row);
    bool bad = false;
    for (std::size_t i = 0; i < items; ++i) {
      const std::size_t want = static_cast<std::size_t>(std::find(order.begin(), order.end(), i) - order.begin()) + 1;
      const std::size_t got = via_model ? atr::rank_of(m, user, i, embs) : atr::rank_in_row(row, i);
      bad |= want != got;
    }
    const std::size_t k = 1 + atr::uniform_index(rng, items);
    const auto got_top = via_model ? atr::top_k(m, user, k, embs) : atr::top_k_in_row(row, k);
    bad |= got_top != std::vector<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    r.mismatches += bad;
    ++r.instances;
  }
  return r;
}

inline OracleResult oracle_appear_at_k(std::uint64_t seed, std::size_t instances = 150) {
  OracleResult r{"appear_at_k"};
  Rng rng = atr::derive_rng(seed, 22);
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t users = 1 + atr::uniform_index(rng, 8), items = 3 + atr::uniform_index(rng, 12);
    auto m = random_conventional(seed * 7000 + t, users, items, 3, 4);
    m.freeze();
    const auto embs = random_embs(rng, items, 4);
    const auto targets = atr::sample_without_replacement(rng, items, 1 + atr::uniform_index(rng, items));
    std::vector<std::size_t> us = atr::sample_without_replacement(rng, users, 1 + atr::uniform_index(rng, users));
    const std::size_t k = 1 + atr::uniform_index(rng, items);
    std::size_t hits = 0;
    for (auto u : us) {
      Vec row;
      for (std::size_t i = 0; i < items; ++i) row.push_back(m.score(u, i, embs[i]));
      const auto order = oracle_order(row);
      for (std::size_t j = 0; j < k; ++j)
        hits += std::count(targets.begin(), targets.end(), order[j]) > 0;
    }
    const double want = static_cast<double>(hits) / static_cast<double>(k * us.size());
    const double got = atr::appear_at_k(m, targets, us, k, embs);
    r.max_err = std::max(r.max_err, std::abs(got - want));
    r.mismatches += got != want;
    ++r.instances;
  }
  return r;
}

inline OracleResult oracle_surrogate_loss(std::uint64_t seed, std::size_t instances = 150) {
  OracleResult r{"surrogate_loss"};
  Rng rng = atr::derive_rng(seed, 23);
  for (std::size_t t = 0; t < instances; ++t) {
    const std::size_t users = 1 + atr::uniform_index(rng, 6), items = 2 + atr::uniform_index(rng, 10), d = 3;
    const auto m = random_conventional(seed * 9000 + t, users, items, 2, d);
    const auto embs = random_embs(rng, items, d);
    atr::SurrogateTrainSet x;
    x.num_users = users;
    for (std::size_t n = 0, cnt = 1 + atr::uniform_index(rng, 20); n < cnt; ++n)
      x.records.push_back({atr::uniform_index(rng, users), {}, atr::uniform_index(rng, items), 1.0 + 4.0 * atr::uniform01(rng)});
    // Oracle prediction written out from the parameters.
    const auto& p = m.params();
    long double want = 0.0L;
    for (const auto& rec : x.records) {
      long double s = p.global_bias + p.user_bias[rec.user] + p.item_bias[rec.item];
      for (std::size_t a = 0; a < m.factors(); ++a) {
        long double w = 0.0L;
        for (std::size_t b = 0; b < d; ++b) w += p.text_proj(a, b) * embs[rec.item][b];
        s += p.user_emb(rec.user, a) * (p.item_emb(rec.item, a) + w);
      }
      want += (rec.score - s) * (rec.score - s);
    }
    const double got = atr::surrogate_loss(m, x, embs);
    const double err = std::abs(got - static_cast<double>(want));
    r.max_err = std::max(r.max_err, err);
    r.mismatches += err > 1e-10 * std::max(1.0, static_cast<double>(want));
    ++r.instances;
  }
  return r;
}

/// Independent forward pass in long double.
inline long double oracle_log_prob(const atr::TinyLM& lm, const atr::Tokens& ctx, atr::TokenId next) {
  const auto& p = lm.params();
  const std::size_t d = lm.shape().dim, h = lm.shape().hidden, v = lm.shape().vocab;
  std::vector<long double> x;
  for (auto t : ctx)
    for (std::size_t j = 0; j < d; ++j) x.push_back(p.embedding(t, j));
  std::vector<long double> hid(h);
  for (std::size_t a = 0; a < h; ++a) {
    long double s = p.b1[a];
    for (std::size_t j = 0; j < x.size(); ++j) s += p.w1(a, j) * x[j];
    hid[a] = std::tanh(s);
  }
  std::vector<long double> z(v);
  long double mx = -1e300L;
  for (std::size_t t = 0; t < v; ++t) {
    long double s = p.b2[t];
    for (std::size_t a = 0; a < h; ++a) s += p.w2(t, a) * hid[a];
    z[t] = s;
    mx = std::max(mx, s);
  }
  long double se = 0.0L;
  for (auto s : z) se += std::exp(s - mx);
  return z[next] - mx - std::log(se);
}

inline OracleResult oracle_perplexity(std::uint64_t seed, std::size_t instances = 120) {
  OracleResult r{"perplexity"};
  Rng rng = atr::derive_rng(seed, 24);
  for (std::size_t t = 0; t < instances; ++t) {
    const auto lm = random_lm(seed * 31 + t, 12 + atr::uniform_index(rng, 10), 3, 2 + atr::uniform_index(rng, 3), 5);
    const auto toks = random_tokens(rng, lm.shape().vocab, lm.context() + 1 + atr::uniform_index(rng, 10));
    long double nll = 0.0L;
    std::size_t n = 0;
    for (std::size_t j = lm.context(); j < toks.size(); ++j, ++n)
      nll -= oracle_log_prob(lm, atr::Tokens(toks.begin() + static_cast<std::ptrdiff_t>(j - lm.context()),
                                             toks.begin() + static_cast<std::ptrdiff_t>(j)),
                             toks[j]);
    const double want = static_cast<double>(std::exp(nll / static_cast<long double>(n)));
    const double got = atr::perplexity(lm, toks);
    const double err = std::abs(got - want) / want;
    r.max_err = std::max(r.max_err, err);
    r.mismatches += err > 1e-10;
    ++r.instances;
  }
  return r;
}

inline std::vector<OracleResult> oracle_suite(std::uint64_t seed = 5) {
  return {oracle_promotion_loss(seed), oracle_rank_topk(seed), oracle_appear_at_k(seed), oracle_surrogate_loss(seed),
          oracle_perplexity(seed)};
}

}  // namespace checks
