#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/recommender.hpp"
#include "atr/textenc.hpp"

namespace atr {

/// How a target's text embedding is formed from the LM during Phase 2.
///  - kExpected: the kept prefix plus, at every later position, the LM's
///    next-token distribution averaged through the recommender's encoder
///    table. Gradients reach every LM tensor.
///  - kDirect: mean of the LM's own embedding rows over the description.
///    Gradients reach only the embedding rows of the description's tokens.
enum class TargetEmbedding { kExpected, kDirect };

struct AttackConfig {
  double lambda = 1.0;
  double margin = 0.01;
  double user_sample_frac = 0.1;
  std::size_t target_batch = 16;
  std::size_t phase1_epochs = 10;
  std::size_t phase2_epochs = 2;
  double lr = 1e-5;
  double phase2_lr = 0.0;  // <= 0 means "same as lr"
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;

  double target_fraction = 0.01;
  std::size_t num_targets = 0;  // > 0 overrides target_fraction
  double prompt_fraction = 0.5;
  TargetEmbedding target_embedding = TargetEmbedding::kExpected;
  bool early_stop = true;
  DecodeConfig decode{100, 100, DecodeConfig::Strategy::kTopK, 5, 1.0, 0};

  double effective_phase2_lr() const { return phase2_lr > 0.0 ? phase2_lr : lr; }

  void validate() const {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
    if (!(user_sample_frac > 0.0 && user_sample_frac <= 1.0))
      throw ConfigError("user_sample_frac must be in (0,1]");
    if (!(target_fraction > 0.0 && target_fraction <= 1.0))
      throw ConfigError("target_fraction must be in (0,1]");
    if (target_batch < 1) throw ConfigError("target_batch must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(prompt_fraction > 0.0 && prompt_fraction < 1.0))
      throw ConfigError("prompt_fraction must be in (0,1)");
    decode.validate();
  }
};

struct TargetSet {
  std::vector<std::size_t> items;

  TargetSet() = default;
  TargetSet(std::vector<std::size_t> ids, std::size_t num_items) : items(std::move(ids)) {
    if (items.empty()) throw ConfigError("target set must be non-empty");
    for (auto i : items)
      if (i >= num_items) throw ConfigError("target item " + std::to_string(i) + " not in catalog");
  }
  std::size_t size() const noexcept { return items.size(); }
  bool contains(std::size_t i) const { return std::find(items.begin(), items.end(), i) != items.end(); }
};

/// Random targets: `num_targets` if set, else ceil(fraction * |I|) (at least 1).
inline TargetSet select_targets(std::size_t num_items, const AttackConfig& cfg) {
  std::size_t n = cfg.num_targets;
  if (n == 0)
    n = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(cfg.target_fraction * static_cast<double>(num_items) - 1e-9)));
  if (n > num_items) throw ConfigError("more targets than items");
  Rng rng = derive_rng(cfg.seed, 0x7a6);
  auto ids = sample_without_replacement(rng, num_items, n);
  std::sort(ids.begin(), ids.end());
  return TargetSet(std::move(ids), num_items);
}

// ---------------------------------------------------------------------------
// R^u_max cache

struct RmaxCache {
  std::vector<std::size_t> users;
  Vec rmax;
  std::size_t epoch_stamp = 0;

  double at(std::size_t user) const {
    auto it = std::lower_bound(users.begin(), users.end(), user);
    if (it == users.end() || *it != user) throw ShapeError("R_max cache has no entry for user " + std::to_string(user));
    return rmax[static_cast<std::size_t>(it - users.begin())];
  }
};

/// Exact full-scan maximum score per user over every item.
template <RecommenderModel M>
RmaxCache rmax_refresh(const M& rec, std::vector<std::size_t> users, const TextEmbeddings& text_embs,
                       std::size_t epoch = 0) {
  if (!rec.is_frozen()) throw ContractError("R_max refresh requires a frozen recommender");
  std::sort(users.begin(), users.end());
  users.erase(std::unique(users.begin(), users.end()), users.end());
  const ItemTable t = rec.item_table(text_embs);
  RmaxCache c{users, Vec(users.size()), epoch};
  for (std::size_t k = 0; k < users.size(); ++k) {
    const Vec row = rec.score_row(users[k], t);
    c.rmax[k] = *std::max_element(row.begin(), row.end());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Rank promotion loss: sum_u sum_i max(R^u_max - score(u,i) + margin, 0)

struct PromotionResult {
  double loss = 0.0;
  Matrix dscores;  // d loss / d score(u,i); -1 on active hinges, else 0
};

/// `scores` is |U'| x |G'|; `rmax[r]` belongs to row r.
inline PromotionResult promotion_loss(const Matrix& scores, std::span<const double> rmax, double margin) {
  if (rmax.size() != scores.rows())
    throw ShapeError("R_max has " + std::to_string(rmax.size()) + " entries for " +
                     std::to_string(scores.rows()) + " users");
  PromotionResult r{0.0, Matrix(scores.rows(), scores.cols())};
  for (std::size_t u = 0; u < scores.rows(); ++u)
    for (std::size_t i = 0; i < scores.cols(); ++i) {
      if (!std::isfinite(scores(u, i))) throw RangeError("non-finite score in promotion loss");
      const double h = rmax[u] - scores(u, i) + margin;
      if (h > 0.0) {
        r.loss += h;
        r.dscores(u, i) = -1.0;
      }
    }
  return r;
}

// ---------------------------------------------------------------------------
// Target text embeddings from the LM

struct TargetText {
  std::size_t item = 0;
  Tokens tokens;
  std::size_t prefix = 0;  // tokens kept verbatim at rewrite time
};

inline std::size_t prefix_length(std::size_t n, double fraction) {
  if (n == 0) return 0;
  const auto p = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  return std::clamp<std::size_t>(p, 1, n);
}

inline TargetText make_target_text(std::size_t item, Tokens tokens, double prompt_fraction) {
  if (tokens.empty()) throw EmptyTextError("target " + std::to_string(item) + " has no description");
  const std::size_t p = prefix_length(tokens.size(), prompt_fraction);
  return {item, std::move(tokens), p};
}

/// Forward pass of the LM-dependent target embedding, kept for backprop.
struct TargetEmbeddingPass {
  TextEmbedding embedding;
  std::vector<Window> windows;           // expected mode: one per rewritten position
  std::vector<LmActivation> activations;
  std::vector<Vec> probs;
};

inline TargetEmbeddingPass target_embedding_forward(const TinyLM& lm, const TextEncoder& enc,
                                                    const TargetText& t, TargetEmbedding mode) {
  TargetEmbeddingPass pass;
  if (mode == TargetEmbedding::kDirect) {
    pass.embedding = embed_text(lm, t.tokens);
    return pass;
  }
  if (enc.table().rows() != lm.shape().vocab) throw ShapeError("encoder table and LM vocab differ");
  const std::size_t n = t.tokens.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  pass.embedding.assign(enc.dim(), 0.0);
  for (std::size_t j = 0; j < t.prefix; ++j) axpy(inv_n, enc.table().row(t.tokens[j]), pass.embedding);
  auto windows = framed_windows(t.tokens, lm.context());
  for (std::size_t j = t.prefix; j < n; ++j) {
    LmActivation act;
    lm.forward(std::span<const TokenId>(windows[j].data(), lm.context()), act);
    Vec p = softmax(act.logits);
    for (std::size_t tok = 0; tok < p.size(); ++tok)
      if (p[tok] > 0.0) axpy(inv_n * p[tok], enc.table().row(tok), pass.embedding);
    pass.windows.push_back(std::move(windows[j]));
    pass.activations.push_back(std::move(act));
    pass.probs.push_back(std::move(p));
  }
  return pass;
}

inline void target_embedding_backward(const TinyLM& lm, const TextEncoder& enc, const TargetText& t,
                                      TargetEmbedding mode, const TargetEmbeddingPass& pass,
                                      std::span<const double> d_emb, LmGrad& grad) {
  if (mode == TargetEmbedding::kDirect) {
    embed_text_backward(t.tokens, d_emb, grad);
    return;
  }
  const double inv_n = 1.0 / static_cast<double>(t.tokens.size());
  const Vec s = matvec(enc.table(), d_emb);  // s[tok] = Enc[tok] . dL/de
  Vec dz(s.size());
  for (std::size_t k = 0; k < pass.windows.size(); ++k) {
    const Vec& p = pass.probs[k];
    double mean = 0.0;
    for (std::size_t tok = 0; tok < p.size(); ++tok) mean += p[tok] * s[tok];
    for (std::size_t tok = 0; tok < p.size(); ++tok) dz[tok] = inv_n * p[tok] * (s[tok] - mean);
    lm.backward(std::span<const TokenId>(pass.windows[k].data(), lm.context()), pass.activations[k], dz, grad);
  }
}

// ---------------------------------------------------------------------------
// Joint objective

struct LossBreakdown {
  double text_gen_loss = 0.0;
  double promotion_loss = 0.0;
  double total = 0.0;
};

/// lambda * L_promotion over users x targets with E^T from the LM, and its
/// gradient w.r.t. the LM parameters (accumulated into `grad` if given).
template <RecommenderModel M>
double promotion_objective(const TinyLM& lm, const M& rec, const TextEncoder& enc,
                           std::span<const TargetText> targets, std::span<const std::size_t> users,
                           const RmaxCache& rmax, double margin, double lambda, TargetEmbedding mode,
                           LmGrad* grad = nullptr) {
  std::vector<TargetEmbeddingPass> passes;
  passes.reserve(targets.size());
  for (const auto& t : targets) passes.push_back(target_embedding_forward(lm, enc, t, mode));
  Matrix scores(users.size(), targets.size());
  Vec rm(users.size());
  for (std::size_t u = 0; u < users.size(); ++u) {
    rm[u] = rmax.at(users[u]);
    for (std::size_t i = 0; i < targets.size(); ++i)
      scores(u, i) = rec.score(users[u], targets[i].item, passes[i].embedding);
  }
  const PromotionResult pr = promotion_loss(scores, rm, margin);
  if (grad && lambda != 0.0) {
    for (std::size_t i = 0; i < targets.size(); ++i) {
      Vec d_emb(enc.dim(), 0.0);
      bool any = false;
      for (std::size_t u = 0; u < users.size(); ++u) {
        if (pr.dscores(u, i) == 0.0) continue;
        any = true;
        axpy(lambda * pr.dscores(u, i), rec.score_grad_text(users[u], targets[i].item, passes[i].embedding), d_emb);
      }
      if (any) target_embedding_backward(lm, enc, targets[i], mode, passes[i], d_emb, *grad);
    }
  }
  return lambda * pr.loss;
}

namespace detail {

inline void add_scaled(LmGrad& dst, const LmGrad& src, double alpha) {
  auto d = dst.tensors();
  auto s = src.tensors();
  for (std::size_t k = 0; k < d.size(); ++k) axpy(alpha, s[k].second, d[k].second);
}

}  // namespace detail

/// One SGD update of the LM on L_text-gen + lambda * L_promotion. The
/// recommender is only read.
template <RecommenderModel M>
LossBreakdown joint_step(TinyLM& lm, const M& rec, const TextEncoder& enc,
                         const std::vector<Window>& text_batch, std::span<const TargetText> targets,
                         std::span<const std::size_t> users, const RmaxCache& rmax,
                         const AttackConfig& cfg) {
  if (!rec.is_frozen()) throw ContractError("joint_step requires a frozen recommender");
  LossAndGrad lg = lm_loss_and_grad(lm, text_batch);
  LmGrad pgrad = lm.zero_grad();
  const double weighted = promotion_objective(lm, rec, enc, targets, users, rmax, cfg.margin, cfg.lambda,
                                              cfg.target_embedding, &pgrad);
  LossBreakdown b;
  b.text_gen_loss = lg.loss;
  b.promotion_loss = cfg.lambda > 0.0 ? weighted / cfg.lambda
                                      : promotion_objective(lm, rec, enc, targets, users, rmax, cfg.margin,
                                                            1.0, cfg.target_embedding);
  b.total = b.text_gen_loss + cfg.lambda * b.promotion_loss;
  detail::add_scaled(lg.grad, pgrad, 1.0);
  lm.sgd_step(lg.grad, cfg.effective_phase2_lr());
  return b;
}

// ---------------------------------------------------------------------------
// Phases

struct EpochRecord {
  std::size_t epoch = 0;
  double text_gen_loss = 0.0;
  double promotion_loss = 0.0;
  double total = 0.0;
  double val_promotion_loss = std::numeric_limits<double>::quiet_NaN();
};

struct PhaseLog {
  std::vector<EpochRecord> epochs;
  bool early_stopped = false;
};

/// Domain adaptation: next-token training on every item description.
inline PhaseLog phase1_finetune(TinyLM& lm, const std::vector<Tokens>& descriptions, const AttackConfig& cfg) {
  if (descriptions.empty()) throw ConfigError("phase 1 needs a non-empty description corpus");
  PhaseLog log;
  Rng rng = derive_rng(cfg.seed, 0x9a1);
  std::vector<std::size_t> order(descriptions.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      std::vector<Window> batch;
      for (std::size_t k = b; k < std::min(order.size(), b + cfg.batch_size); ++k) {
        auto w = framed_windows(descriptions[order[k]], lm.context());
        batch.insert(batch.end(), w.begin(), w.end());
      }
      if (batch.empty()) continue;
      auto lg = lm_loss_and_grad(lm, batch);
      total += lg.loss * static_cast<double>(batch.size());
      count += batch.size();
      lm.sgd_step(lg.grad, cfg.lr);
    }
    log.epochs.push_back({epoch, count ? total / static_cast<double>(count) : 0.0, 0.0,
                          count ? total / static_cast<double>(count) : 0.0});
  }
  return log;
}

/// Rank-boosting fine-tuning. `user_pool` holds the users promotion is
/// computed over (real users in white-box mode, fake profiles against a
/// surrogate in black-box mode). R_max is refreshed once per epoch over all
/// items on `rec`.
template <RecommenderModel M>
PhaseLog phase2_finetune(TinyLM& lm, const M& rec, const TextEncoder& enc, const TextEmbeddings& item_embs,
                         const std::vector<Tokens>& corpus, const std::vector<TargetText>& targets,
                         const std::vector<std::size_t>& user_pool, const AttackConfig& cfg) {
  if (targets.empty()) throw ConfigError("phase 2 needs a non-empty target set");
  if (user_pool.empty()) throw ConfigError("phase 2 needs a non-empty user pool");
  if (!rec.is_frozen()) throw ContractError("phase 2 requires a frozen recommender");
  PhaseLog log;
  if (cfg.phase2_epochs == 0) return log;
  Rng rng = derive_rng(cfg.seed, 0x9a2);
  const auto n_users = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.user_sample_frac * static_cast<double>(user_pool.size()))));
  const std::size_t n_targets = std::min(cfg.target_batch, targets.size());

  std::vector<std::size_t> val_users;
  {
    Rng vr = derive_rng(cfg.seed, 0x9a3);
    for (auto k : sample_without_replacement(vr, user_pool.size(), n_users)) val_users.push_back(user_pool[k]);
  }
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  double prev_val = std::numeric_limits<double>::infinity();

  for (std::size_t epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
    const TinyLM snapshot = lm;
    const RmaxCache cache = rmax_refresh(rec, user_pool, item_embs, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    EpochRecord rec_log{epoch};
    std::size_t steps = 0;
    for (std::size_t b = 0; b < std::max<std::size_t>(order.size(), 1); b += cfg.batch_size) {
      std::vector<TargetText> g_batch;
      for (auto k : sample_without_replacement(rng, targets.size(), n_targets)) g_batch.push_back(targets[k]);
      std::vector<std::size_t> u_batch;
      for (auto k : sample_without_replacement(rng, user_pool.size(), n_users)) u_batch.push_back(user_pool[k]);
      // Text batch: corpus descriptions and target descriptions, 1:1.
      std::vector<Window> text;
      const std::size_t n_docs = std::min(order.size(), b + cfg.batch_size) - std::min(order.size(), b);
      for (std::size_t k = b; k < b + n_docs; ++k) {
        auto w = framed_windows(corpus[order[k]], lm.context());
        text.insert(text.end(), w.begin(), w.end());
      }
      for (std::size_t k = 0; k < std::max<std::size_t>(n_docs, 1); ++k) {
        auto w = framed_windows(targets[uniform_index(rng, targets.size())].tokens, lm.context());
        text.insert(text.end(), w.begin(), w.end());
      }
      const LossBreakdown lb = joint_step(lm, rec, enc, text, g_batch, u_batch, cache, cfg);
      rec_log.text_gen_loss += lb.text_gen_loss;
      rec_log.promotion_loss += lb.promotion_loss;
      rec_log.total += lb.total;
      ++steps;
      if (order.empty()) break;
    }
    rec_log.text_gen_loss /= static_cast<double>(steps);
    rec_log.promotion_loss /= static_cast<double>(steps);
    rec_log.total /= static_cast<double>(steps);
    rec_log.val_promotion_loss = promotion_objective(lm, rec, enc, targets, val_users, cache, cfg.margin, 1.0,
                                                     cfg.target_embedding);
    log.epochs.push_back(rec_log);
    if (cfg.early_stop && rec_log.val_promotion_loss > prev_val) {
      lm = snapshot;
      log.early_stopped = true;
      break;
    }
    prev_val = rec_log.val_promotion_loss;
  }
  return log;
}

// ---------------------------------------------------------------------------
// Rewriting

/// Prompt = first `prefix` tokens; generation fills up to the original
/// length, capped at 100 words. An empty continuation is retried greedily.
inline Tokens rewrite_description(const TinyLM& lm, const TargetText& t, DecodeConfig decode) {
  Tokens prompt{kBos};
  prompt.insert(prompt.end(), t.tokens.begin(), t.tokens.begin() + static_cast<std::ptrdiff_t>(t.prefix));
  const std::size_t budget = std::min(t.tokens.size(), kMaxDescriptionWords);
  decode.max_new_tokens = budget > t.prefix ? budget - t.prefix : 0;
  decode.min_new_tokens = std::min(decode.min_new_tokens, decode.max_new_tokens);
  Tokens out(t.tokens.begin(), t.tokens.begin() + static_cast<std::ptrdiff_t>(t.prefix));
  if (decode.max_new_tokens == 0) return out;
  Tokens gen = generate(lm, prompt, decode);
  if (gen.empty()) {
    decode.strategy = DecodeConfig::Strategy::kGreedy;
    gen = generate(lm, prompt, decode);
  }
  if (gen.empty()) throw GenerationError("empty continuation after greedy retry", std::to_string(t.item));
  out.insert(out.end(), gen.begin(), gen.end());
  return truncate_description(out);
}

struct RewriteResult {
  std::size_t item_id = 0;
  Tokens original;
  Tokens rewritten;
  std::vector<std::size_t> eval_users;
  Vec score_before;
  Vec score_after;
  double rank_before = 0.0;
  double rank_after = 0.0;
};

template <RecommenderModel M>
std::vector<RewriteResult> score_rewrites(const M& rec, const ItemTextCache& cache,
                                          const std::vector<TargetText>& targets,
                                          const std::vector<Tokens>& rewrites,
                                          const std::vector<std::size_t>& eval_users) {
  if (rewrites.size() != targets.size()) throw ShapeError("one rewrite per target required");
  ItemTextCache after = cache;
  for (std::size_t k = 0; k < targets.size(); ++k) after.set_description(targets[k].item, rewrites[k]);
  const ItemTable before_t = rec.item_table(cache.embeddings());
  const ItemTable after_t = rec.item_table(after.embeddings());
  std::vector<RewriteResult> out(targets.size());
  for (std::size_t k = 0; k < targets.size(); ++k) {
    out[k].item_id = targets[k].item;
    out[k].original = targets[k].tokens;
    out[k].rewritten = rewrites[k];
    out[k].eval_users = eval_users;
  }
  for (auto u : eval_users) {
    const Vec rb = rec.score_row(u, before_t);
    const Vec ra = rec.score_row(u, after_t);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto i = targets[k].item;
      out[k].score_before.push_back(rb[i]);
      out[k].score_after.push_back(ra[i]);
      out[k].rank_before += static_cast<double>(rank_in_row(rb, i));
      out[k].rank_after += static_cast<double>(rank_in_row(ra, i));
    }
  }
  if (!eval_users.empty())
    for (auto& r : out) {
      r.rank_before /= static_cast<double>(eval_users.size());
      r.rank_after /= static_cast<double>(eval_users.size());
    }
  return out;
}

/// Rewrites every target and records scores/ranks on `eval_users`, with all
/// other items keeping their cached embeddings.
template <RecommenderModel M>
std::vector<RewriteResult> rewrite_targets(const TinyLM& lm, const M& rec, const ItemTextCache& cache,
                                           const std::vector<TargetText>& targets,
                                           const std::vector<std::size_t>& eval_users,
                                           const AttackConfig& cfg) {
  std::vector<Tokens> rewrites;
  for (const auto& t : targets) {
    DecodeConfig d = cfg.decode;
    d.seed = derive_rng(cfg.seed, 0x4e3, t.item)();
    rewrites.push_back(rewrite_description(lm, t, d));
  }
  return score_rewrites(rec, cache, targets, rewrites, eval_users);
}

}  // namespace atr
