#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atr/corpus.hpp"
#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/textenc.hpp"

namespace atr {

using TextEmbeddings = std::vector<TextEmbedding>;

/// Per-item text embeddings; an item is re-embedded only when its
/// description changes.
class ItemTextCache {
 public:
  ItemTextCache() = default;
  ItemTextCache(const TextEncoder& enc, std::vector<Tokens> descriptions) : enc_(&enc) {
    for (auto& d : descriptions) {
      hashes_.push_back(hash_tokens(d));
      embs_.push_back(enc.embed(d));
      descs_.push_back(std::move(d));
    }
  }

  /// Returns true when the embedding had to be recomputed.
  bool set_description(std::size_t item, Tokens desc) {
    if (item >= descs_.size()) throw IndexError("item " + std::to_string(item));
    const auto h = hash_tokens(desc);
    if (h == hashes_[item] && desc == descs_[item]) return false;
    embs_[item] = enc_->embed(desc);
    hashes_[item] = h;
    descs_[item] = std::move(desc);
    ++recomputations_;
    return true;
  }

  const TextEmbeddings& embeddings() const noexcept { return embs_; }
  const std::vector<Tokens>& descriptions() const noexcept { return descs_; }
  std::size_t recomputations() const noexcept { return recomputations_; }

 private:
  static std::uint64_t hash_tokens(const Tokens& t) {
    Fnv1a h;
    h.update(t.data(), t.size() * sizeof(TokenId));
    return h.digest();
  }

  const TextEncoder* enc_ = nullptr;
  std::vector<Tokens> descs_;
  std::vector<std::uint64_t> hashes_;
  TextEmbeddings embs_;
  std::size_t recomputations_ = 0;
};

/// Precomputed per-item scoring vectors for one set of text embeddings.
struct ItemTable {
  Matrix vectors;  // |I| x k
  Vec offsets;     // |I|
};

struct ScoreRow {
  std::size_t user_id = 0;
  Vec scores;
};

/// (item, rating) pairs describing a user the model was not trained on.
struct RatedItem {
  std::size_t item = 0;
  double rating = 0.0;
};

struct RecTrainConfig {
  std::size_t epochs = 100;
  double lr = 0.5;
  std::size_t batch_size = 32;
  double reg_user = 5e-5;
  double reg_item = 2e-4;
  double reg_user_bias = 1e-5;
  double reg_item_bias = 1e-2;
  double reg_text = 1e-6;
  std::size_t patience = 5;
  std::uint64_t seed = 1;
  double init_std = 0.1;
};

// ---------------------------------------------------------------------------
// Ranking primitives over a full score row

/// 1 + #{j : s_j > s_i} + #{j < i : s_j == s_i}
inline std::size_t rank_in_row(std::span<const double> scores, std::size_t item) {
  if (item >= scores.size()) throw IndexError("item " + std::to_string(item));
  const double s = scores[item];
  std::size_t r = 1;
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (scores[j] > s || (scores[j] == s && j < item)) ++r;
  return r;
}

/// K items by descending score, ties by ascending id.
inline std::vector<std::size_t> top_k_in_row(std::span<const double> scores, std::size_t k) {
  if (k < 1 || k > scores.size())
    throw ConfigError("top-K requires 1 <= K <= |I| (K=" + std::to_string(k) + ")");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  idx.resize(k);
  return idx;
}

// ---------------------------------------------------------------------------
// ConventionalRec: b + b_u + b_i + E^U_u . (E^I_i + W e)

struct ConventionalParams {
  double global_bias = 0.0;
  Vec user_bias;
  Vec item_bias;
  Matrix user_emb;  // |U| x k
  Matrix item_emb;  // |I| x k
  Matrix text_proj; // k x d

  ConventionalParams() = default;
  ConventionalParams(std::size_t users, std::size_t items, std::size_t k, std::size_t d)
      : user_bias(users, 0.0), item_bias(items, 0.0), user_emb(users, k), item_emb(items, k),
        text_proj(k, d) {}

  std::vector<std::pair<std::string, std::span<double>>> tensors() {
    return {{"global_bias", {&global_bias, 1}}, {"user_bias", user_bias},
            {"item_bias", item_bias},           {"user_emb", user_emb.data()},
            {"item_emb", item_emb.data()},      {"text_proj", text_proj.data()}};
  }
  std::vector<std::pair<std::string, std::span<const double>>> tensors() const {
    return {{"global_bias", {&global_bias, 1}}, {"user_bias", user_bias},
            {"item_bias", item_bias},           {"user_emb", user_emb.data()},
            {"item_emb", item_emb.data()},      {"text_proj", text_proj.data()}};
  }
  bool operator==(const ConventionalParams&) const = default;
};

class ConventionalRec {
 public:
  static constexpr const char* kFamily = "conventional";
  using Params = ConventionalParams;

  ConventionalRec() = default;
  ConventionalRec(std::size_t users, std::size_t items, std::size_t factors, std::size_t text_dim)
      : p_(users, items, factors, text_dim) {}
  explicit ConventionalRec(Params p, bool frozen = false) : p_(std::move(p)), frozen_(frozen) {}

  std::size_t num_users() const noexcept { return p_.user_bias.size(); }
  std::size_t num_items() const noexcept { return p_.item_bias.size(); }
  std::size_t factors() const noexcept { return p_.text_proj.rows(); }
  std::size_t text_dim() const noexcept { return p_.text_proj.cols(); }

  const Params& params() const noexcept { return p_; }
  Params& mutable_params() {
    if (frozen_) throw FrozenModelError("parameters are immutable after freeze()");
    return p_;
  }
  void freeze() noexcept { frozen_ = true; }
  bool is_frozen() const noexcept { return frozen_; }

  double score(std::size_t u, std::size_t i, std::span<const double> text_emb) const {
    check(u, i, text_emb);
    const Vec wt = matvec(p_.text_proj, text_emb);
    double s = p_.global_bias + p_.user_bias[u] + p_.item_bias[i];
    const auto pu = p_.user_emb.row(u);
    const auto qi = p_.item_emb.row(i);
    for (std::size_t k = 0; k < pu.size(); ++k) s += pu[k] * (qi[k] + wt[k]);
    return s;
  }

  /// d score(u,i,e) / d e
  Vec score_grad_text(std::size_t u, std::size_t i, std::span<const double> text_emb) const {
    check(u, i, text_emb);
    return matvec_t(p_.text_proj, p_.user_emb.row(u));
  }

  ItemTable item_table(const TextEmbeddings& text_embs) const {
    if (text_embs.size() != num_items()) throw ShapeError("one text embedding per item required");
    ItemTable t{Matrix(num_items(), factors()), Vec(num_items())};
    for (std::size_t i = 0; i < num_items(); ++i) {
      const Vec wt = matvec(p_.text_proj, text_embs[i]);
      auto row = t.vectors.row(i);
      const auto qi = p_.item_emb.row(i);
      for (std::size_t k = 0; k < row.size(); ++k) row[k] = qi[k] + wt[k];
      t.offsets[i] = p_.global_bias + p_.item_bias[i];
    }
    return t;
  }

  Vec score_row(std::size_t u, const ItemTable& t) const {
    if (u >= num_users()) throw IndexError("user " + std::to_string(u));
    return score_row_for(p_.user_bias[u], p_.user_emb.row(u), t);
  }

  static Vec score_row_for(double user_bias, std::span<const double> user_vec, const ItemTable& t) {
    Vec s(t.offsets.size());
    for (std::size_t i = 0; i < s.size(); ++i)
      s[i] = t.offsets[i] + user_bias + dot(user_vec, t.vectors.row(i));
    return s;
  }

  /// Ridge fold-in of an unseen user from rated items, shrunk toward the
  /// average trained user. Returns (bias, vector).
  std::pair<double, Vec> fold_in(std::span<const RatedItem> profile, const ItemTable& t,
                                 double reg = 1.0) const {
    const std::size_t k = factors();
    Vec prior(k + 1, 0.0);
    for (std::size_t u = 0; u < num_users(); ++u) {
      prior[0] += p_.user_bias[u];
      axpy(1.0, p_.user_emb.row(u), std::span<double>(prior).subspan(1));
    }
    if (num_users() > 0)
      for (auto& x : prior) x /= static_cast<double>(num_users());
    Matrix a(k + 1, k + 1);
    Vec rhs(k + 1);
    for (std::size_t j = 0; j <= k; ++j) {
      a(j, j) = reg;
      rhs[j] = reg * prior[j];
    }
    Vec phi(k + 1);
    for (const auto& r : profile) {
      if (r.item >= num_items()) throw IndexError("item " + std::to_string(r.item));
      phi[0] = 1.0;
      const auto v = t.vectors.row(r.item);
      std::copy(v.begin(), v.end(), phi.begin() + 1);
      const double y = r.rating - t.offsets[r.item];
      for (std::size_t a1 = 0; a1 <= k; ++a1) {
        rhs[a1] += phi[a1] * y;
        for (std::size_t a2 = 0; a2 <= k; ++a2) a(a1, a2) += phi[a1] * phi[a2];
      }
    }
    Vec x = solve_spd(std::move(a), std::move(rhs));
    return {x[0], Vec(x.begin() + 1, x.end())};
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& [name, t] : p_.tensors()) h.update(t);
    return h.hex();
  }

 private:
  void check(std::size_t u, std::size_t i, std::span<const double> e) const {
    if (u >= num_users()) throw IndexError("user " + std::to_string(u));
    if (i >= num_items()) throw IndexError("item " + std::to_string(i));
    if (e.size() != text_dim()) throw ShapeError("text embedding dimension mismatch");
  }

  Params p_;
  bool frozen_ = false;
};

/// Squared-error objective with L2 penalties, and its gradient.
///   J = (1/2n) sum (r - score)^2 + (1/2) sum_g reg_g ||theta_g||^2
inline double conventional_objective(const ConventionalRec& m, std::span<const Interaction> batch,
                                     const TextEmbeddings& text_embs, const RecTrainConfig& cfg,
                                     ConventionalParams* grad = nullptr) {
  const auto& p = m.params();
  const std::size_t k = m.factors();
  if (grad) *grad = ConventionalParams(m.num_users(), m.num_items(), k, m.text_dim());
  const double scale = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& x : batch) {
    const auto& e = text_embs.at(x.item_id);
    const double err = m.score(x.user_id, x.item_id, e) - x.rating;
    loss += 0.5 * err * err * scale;
    if (!grad) continue;
    const double g = err * scale;
    grad->global_bias += g;
    grad->user_bias[x.user_id] += g;
    grad->item_bias[x.item_id] += g;
    const Vec wt = matvec(p.text_proj, e);
    const auto pu = p.user_emb.row(x.user_id);
    const auto qi = p.item_emb.row(x.item_id);
    auto gu = grad->user_emb.row(x.user_id);
    auto gi = grad->item_emb.row(x.item_id);
    for (std::size_t a = 0; a < k; ++a) {
      gu[a] += g * (qi[a] + wt[a]);
      gi[a] += g * pu[a];
      axpy(g * pu[a], e, grad->text_proj.row(a));
    }
  }
  auto penalty = [&](std::span<const double> t, double reg, auto grad_of) {
    double s = 0.0;
    for (std::size_t j = 0; j < t.size(); ++j) s += 0.5 * reg * t[j] * t[j];
    if (grad) axpy(reg, t, grad_of(*grad));
    return s;
  };
  using G = ConventionalParams;
  loss += penalty(p.user_bias, cfg.reg_user_bias, [](G& g) { return std::span<double>(g.user_bias); });
  loss += penalty(p.item_bias, cfg.reg_item_bias, [](G& g) { return std::span<double>(g.item_bias); });
  loss += penalty(p.user_emb.data(), cfg.reg_user, [](G& g) { return std::span<double>(g.user_emb.data()); });
  loss += penalty(p.item_emb.data(), cfg.reg_item, [](G& g) { return std::span<double>(g.item_emb.data()); });
  loss += penalty(p.text_proj.data(), cfg.reg_text, [](G& g) { return std::span<double>(g.text_proj.data()); });
  return loss;
}

// ---------------------------------------------------------------------------
// SequentialRec: sigmoid(state_u . ((1 - a) E^I_i + a W e)),
// state_u = mean representation of the last n interacted items.

struct SequentialParams {
  Matrix item_emb;   // |I| x k
  Matrix text_proj;  // k x d

  SequentialParams() = default;
  SequentialParams(std::size_t items, std::size_t k, std::size_t d)
      : item_emb(items, k), text_proj(k, d) {}

  std::vector<std::pair<std::string, std::span<double>>> tensors() {
    return {{"item_emb", item_emb.data()}, {"text_proj", text_proj.data()}};
  }
  std::vector<std::pair<std::string, std::span<const double>>> tensors() const {
    return {{"item_emb", item_emb.data()}, {"text_proj", text_proj.data()}};
  }
  bool operator==(const SequentialParams&) const = default;
};

class SequentialRec {
 public:
  static constexpr const char* kFamily = "sequential";
  using Params = SequentialParams;

  SequentialRec() = default;
  SequentialRec(std::size_t items, std::size_t factors, std::size_t text_dim, std::size_t window,
                double alpha)
      : p_(items, factors, text_dim), window_(window), alpha_(alpha) {
    validate();
  }
  SequentialRec(Params p, std::size_t window, double alpha)
      : p_(std::move(p)), window_(window), alpha_(alpha) {
    validate();
  }

  std::size_t num_items() const noexcept { return p_.item_emb.rows(); }
  std::size_t factors() const noexcept { return p_.item_emb.cols(); }
  std::size_t text_dim() const noexcept { return p_.text_proj.cols(); }
  std::size_t window() const noexcept { return window_; }
  double alpha() const noexcept { return alpha_; }
  std::size_t num_users() const noexcept { return states_.rows(); }

  const Params& params() const noexcept { return p_; }
  Params& mutable_params() {
    if (frozen_) throw FrozenModelError("parameters are immutable after freeze()");
    return p_;
  }
  bool is_frozen() const noexcept { return frozen_; }

  /// Freezes parameters and caches one state per known user history.
  void freeze(const std::vector<std::vector<std::size_t>>& histories, const TextEmbeddings& text_embs) {
    frozen_ = true;
    const ItemTable t = item_table(text_embs);
    histories_ = histories;
    states_ = Matrix(histories.size(), factors());
    for (std::size_t u = 0; u < histories.size(); ++u) {
      const Vec s = state_of(histories[u], t);
      std::copy(s.begin(), s.end(), states_.row(u).begin());
    }
  }
  const std::vector<std::vector<std::size_t>>& histories() const noexcept { return histories_; }

  Vec item_rep(std::size_t i, std::span<const double> text_emb) const {
    const Vec wt = matvec(p_.text_proj, text_emb);
    Vec r(factors());
    const auto qi = p_.item_emb.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = (1.0 - alpha_) * qi[k] + alpha_ * wt[k];
    return r;
  }

  ItemTable item_table(const TextEmbeddings& text_embs) const {
    if (text_embs.size() != num_items()) throw ShapeError("one text embedding per item required");
    ItemTable t{Matrix(num_items(), factors()), Vec(num_items(), 0.0)};
    for (std::size_t i = 0; i < num_items(); ++i) {
      const Vec r = item_rep(i, text_embs[i]);
      std::copy(r.begin(), r.end(), t.vectors.row(i).begin());
    }
    return t;
  }

  /// Mean representation of the last `window` items of a profile. An empty
  /// profile maps to the zero state.
  Vec state_of(std::span<const std::size_t> profile, const ItemTable& t) const {
    Vec s(factors(), 0.0);
    const std::size_t n = std::min(window_, profile.size());
    for (std::size_t j = profile.size() - n; j < profile.size(); ++j) {
      if (profile[j] >= num_items()) throw IndexError("item " + std::to_string(profile[j]));
      axpy(1.0 / static_cast<double>(n), t.vectors.row(profile[j]), s);
    }
    return s;
  }

  double score(std::size_t u, std::size_t i, std::span<const double> text_emb) const {
    check(u, i, text_emb);
    return sigmoid(dot(states_.row(u), item_rep(i, text_emb)));
  }

  Vec score_grad_text(std::size_t u, std::size_t i, std::span<const double> text_emb) const {
    check(u, i, text_emb);
    const double s = sigmoid(dot(states_.row(u), item_rep(i, text_emb)));
    Vec g = matvec_t(p_.text_proj, states_.row(u));
    for (auto& x : g) x *= s * (1.0 - s) * alpha_;
    return g;
  }

  Vec score_row(std::size_t u, const ItemTable& t) const {
    if (u >= num_users()) throw IndexError("user " + std::to_string(u));
    return score_row_for(states_.row(u), t);
  }

  static Vec score_row_for(std::span<const double> state, const ItemTable& t) {
    Vec s(t.offsets.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = sigmoid(dot(state, t.vectors.row(i)));
    return s;
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& [name, t] : p_.tensors()) h.update(t);
    return h.hex();
  }

 private:
  void validate() const {
    if (!(alpha_ >= 0.0 && alpha_ <= 1.0)) throw ConfigError("alpha must be in [0,1]");
    if (window_ == 0) throw ConfigError("sequence window must be >= 1");
  }
  void check(std::size_t u, std::size_t i, std::span<const double> e) const {
    if (u >= num_users()) throw IndexError("user " + std::to_string(u));
    if (i >= num_items()) throw IndexError("item " + std::to_string(i));
    if (e.size() != text_dim()) throw ShapeError("text embedding dimension mismatch");
  }

  Params p_;
  std::size_t window_ = 5;
  double alpha_ = 0.5;
  bool frozen_ = false;
  Matrix states_;
  std::vector<std::vector<std::size_t>> histories_;
};

/// One next-item training case: context items, positive and sampled negative.
struct SequenceCase {
  std::vector<std::size_t> context;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

/// Logistic next-item objective with L2 penalties, and its gradient.
///   J = (1/n) sum [-log s(z+) - log s(-z-)] + (reg/2) ||theta||^2
inline double sequential_objective(const SequentialRec& m, std::span<const SequenceCase> batch,
                                   const TextEmbeddings& text_embs, const RecTrainConfig& cfg,
                                   SequentialParams* grad = nullptr) {
  const auto& p = m.params();
  const std::size_t k = m.factors();
  const double a = m.alpha();
  if (grad) *grad = SequentialParams(m.num_items(), k, m.text_dim());
  const double scale = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& c : batch) {
    if (c.context.empty()) throw ShapeError("sequence case with empty context");
    const std::size_t n = std::min(m.window(), c.context.size());
    Vec state(k, 0.0);
    for (std::size_t j = c.context.size() - n; j < c.context.size(); ++j)
      axpy(1.0 / static_cast<double>(n), m.item_rep(c.context[j], text_embs.at(c.context[j])), state);
    Vec dstate(k, 0.0);
    for (auto [item, label] : {std::pair{c.positive, 1.0}, std::pair{c.negative, 0.0}}) {
      const auto& e = text_embs.at(item);
      const Vec rep = m.item_rep(item, e);
      const double z = dot(state, rep);
      loss += (label > 0.5 ? -std::log(sigmoid(z)) : -std::log(sigmoid(-z))) * scale;
      if (!grad) continue;
      const double g = (sigmoid(z) - label) * scale;
      axpy(g, rep, dstate);
      for (std::size_t q = 0; q < k; ++q) {
        grad->item_emb(item, q) += g * state[q] * (1.0 - a);
        axpy(g * state[q] * a, e, grad->text_proj.row(q));
      }
    }
    if (!grad) continue;
    for (std::size_t j = c.context.size() - n; j < c.context.size(); ++j) {
      const std::size_t item = c.context[j];
      const auto& e = text_embs.at(item);
      for (std::size_t q = 0; q < k; ++q) {
        const double g = dstate[q] / static_cast<double>(n);
        grad->item_emb(item, q) += g * (1.0 - a);
        axpy(g * a, e, grad->text_proj.row(q));
      }
    }
  }
  for (double x : p.item_emb.data()) loss += 0.5 * cfg.reg_item * x * x;
  for (double x : p.text_proj.data()) loss += 0.5 * cfg.reg_text * x * x;
  if (grad) {
    axpy(cfg.reg_item, p.item_emb.data(), grad->item_emb.data());
    axpy(cfg.reg_text, p.text_proj.data(), grad->text_proj.data());
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Generic model surface used by the attack and evaluation code.

template <class M>
concept RecommenderModel = requires(const M& m, std::size_t u, std::size_t i,
                                    std::span<const double> e, const TextEmbeddings& embs,
                                    const ItemTable& t) {
  { m.num_users() } -> std::convertible_to<std::size_t>;
  { m.num_items() } -> std::convertible_to<std::size_t>;
  { m.text_dim() } -> std::convertible_to<std::size_t>;
  { m.is_frozen() } -> std::convertible_to<bool>;
  { m.score(u, i, e) } -> std::convertible_to<double>;
  { m.score_grad_text(u, i, e) } -> std::convertible_to<Vec>;
  { m.item_table(embs) } -> std::same_as<ItemTable>;
  { m.score_row(u, t) } -> std::convertible_to<Vec>;
  { m.fingerprint() } -> std::convertible_to<std::string>;
};

template <RecommenderModel M>
ScoreRow score_row(const M& m, std::size_t u, const TextEmbeddings& text_embs) {
  return {u, m.score_row(u, m.item_table(text_embs))};
}

template <RecommenderModel M>
std::size_t rank_of(const M& m, std::size_t u, std::size_t i, const TextEmbeddings& text_embs) {
  if (!m.is_frozen()) throw ContractError("rank_of requires a frozen model");
  return rank_in_row(m.score_row(u, m.item_table(text_embs)), i);
}

template <RecommenderModel M>
std::vector<std::size_t> top_k(const M& m, std::size_t u, std::size_t k,
                               const TextEmbeddings& text_embs) {
  if (!m.is_frozen()) throw ContractError("top_k requires a frozen model");
  return top_k_in_row(m.score_row(u, m.item_table(text_embs)), k);
}

inline double rmse(const ConventionalRec& m, std::span<const Interaction> split,
                   const TextEmbeddings& text_embs) {
  if (split.empty()) throw DataError("rmse over an empty split");
  const ItemTable t = m.item_table(text_embs);
  double s = 0.0;
  for (const auto& x : split) {
    if (x.user_id >= m.num_users() || x.item_id >= m.num_items()) throw IndexError("rmse: id out of range");
    const double pred = m.params().user_bias[x.user_id] + t.offsets[x.item_id] +
                        dot(m.params().user_emb.row(x.user_id), t.vectors.row(x.item_id));
    s += (pred - x.rating) * (pred - x.rating);
  }
  return std::sqrt(s / static_cast<double>(split.size()));
}

// ---------------------------------------------------------------------------
// Training

namespace detail {

template <class P>
void sgd_apply(P& params, const P& grad, double lr) {
  auto dst = params.tensors();
  auto src = grad.tensors();
  for (std::size_t k = 0; k < dst.size(); ++k) axpy(-lr, src[k].second, dst[k].second);
}

}  // namespace detail

inline ConventionalRec make_conventional(std::size_t users, std::size_t items, std::size_t factors,
                                         std::size_t text_dim, double init_mean, std::uint64_t seed,
                                         double init_std = 0.1) {
  ConventionalRec m(users, items, factors, text_dim);
  auto& p = m.mutable_params();
  Rng rng = derive_rng(seed, 0xc0);
  p.global_bias = init_mean;
  for (auto& x : p.user_emb.data()) x = normal(rng, 0.0, init_std);
  for (auto& x : p.item_emb.data()) x = normal(rng, 0.0, init_std);
  for (auto& x : p.text_proj.data()) x = normal(rng, 0.0, init_std);
  return m;
}

struct TrainLog {
  std::vector<double> train_loss;
  std::vector<double> val_metric;
  std::size_t best_epoch = 0;
};

/// Mini-batch SGD on the squared-error objective, early stopping on
/// validation RMSE (best epoch restored), then freeze.
inline TrainLog train_rec(ConventionalRec& m, std::span<const Interaction> train,
                          std::span<const Interaction> val, const TextEmbeddings& text_embs,
                          const RecTrainConfig& cfg) {
  if (m.is_frozen()) throw FrozenModelError("cannot train a frozen model");
  if (train.empty()) throw ConfigError("empty training split");
  std::vector<Interaction> data(train.begin(), train.end());
  Rng rng = derive_rng(cfg.seed, 0x7a1);
  TrainLog log;
  double best = std::numeric_limits<double>::infinity();
  ConventionalParams best_params = m.params();
  std::size_t since_best = 0;
  ConventionalParams grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(data.begin(), data.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < data.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(data.size(), b + cfg.batch_size);
      std::span<const Interaction> batch(data.data() + b, e - b);
      total += conventional_objective(m, batch, text_embs, cfg, &grad) * static_cast<double>(e - b);
      detail::sgd_apply(m.mutable_params(), grad, cfg.lr);
    }
    log.train_loss.push_back(total / static_cast<double>(data.size()));
    const double v = val.empty() ? log.train_loss.back() : rmse(m, val, text_embs);
    log.val_metric.push_back(v);
    if (v < best) {
      best = v;
      best_params = m.params();
      log.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  m.mutable_params() = best_params;
  m.freeze();
  return log;
}

/// Next-item cases from per-user sequences: each position t >= 1 predicts
/// item t from the items before it, against one uniformly sampled negative.
inline std::vector<SequenceCase> sequence_cases(const std::vector<std::vector<std::size_t>>& seqs,
                                                std::size_t num_items, std::size_t window, Rng& rng) {
  std::vector<SequenceCase> out;
  for (const auto& s : seqs)
    for (std::size_t t = 1; t < s.size(); ++t) {
      SequenceCase c;
      const std::size_t from = t > window ? t - window : 0;
      c.context.assign(s.begin() + static_cast<std::ptrdiff_t>(from), s.begin() + static_cast<std::ptrdiff_t>(t));
      c.positive = s[t];
      do c.negative = uniform_index(rng, num_items);
      while (c.negative == c.positive && num_items > 1);
      out.push_back(std::move(c));
    }
  return out;
}

inline SequentialRec make_sequential(std::size_t items, std::size_t factors, std::size_t text_dim,
                                     std::size_t window, double alpha, std::uint64_t seed,
                                     double init_std = 0.1) {
  SequentialRec m(items, factors, text_dim, window, alpha);
  auto& p = m.mutable_params();
  Rng rng = derive_rng(seed, 0x5e0);
  for (auto& x : p.item_emb.data()) x = normal(rng, 0.0, init_std);
  for (auto& x : p.text_proj.data()) x = normal(rng, 0.0, init_std);
  return m;
}

/// Trains on train-split sequences with validation cases built from the
/// validation interactions, then freezes with train histories as user state.
inline TrainLog train_rec(SequentialRec& m, const Dataset& ds, const TextEmbeddings& text_embs,
                          const RecTrainConfig& cfg) {
  if (m.is_frozen()) throw FrozenModelError("cannot train a frozen model");
  const auto train_seqs = ds.user_sequences(ds.splits.train);
  Rng rng = derive_rng(cfg.seed, 0x5ea);
  auto cases = sequence_cases(train_seqs, m.num_items(), m.window(), rng);
  if (cases.empty()) throw ConfigError("empty training split");

  std::vector<SequenceCase> val_cases;
  for (auto k : ds.splits.val) {
    const auto& x = ds.interactions[k];
    std::vector<std::size_t> ctx;
    for (auto tk : ds.splits.train) {
      const auto& y = ds.interactions[tk];
      if (y.user_id == x.user_id && y.timestamp < x.timestamp) ctx.push_back(y.item_id);
    }
    if (ctx.empty()) continue;
    if (ctx.size() > m.window()) ctx.erase(ctx.begin(), ctx.end() - static_cast<std::ptrdiff_t>(m.window()));
    SequenceCase c{ctx, x.item_id, 0};
    do c.negative = uniform_index(rng, m.num_items());
    while (c.negative == c.positive && m.num_items() > 1);
    val_cases.push_back(std::move(c));
  }

  TrainLog log;
  double best = std::numeric_limits<double>::infinity();
  SequentialParams best_params = m.params();
  std::size_t since_best = 0;
  SequentialParams grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(cases.begin(), cases.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < cases.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(cases.size(), b + cfg.batch_size);
      std::span<const SequenceCase> batch(cases.data() + b, e - b);
      total += sequential_objective(m, batch, text_embs, cfg, &grad) * static_cast<double>(e - b);
      detail::sgd_apply(m.mutable_params(), grad, cfg.lr);
    }
    log.train_loss.push_back(total / static_cast<double>(cases.size()));
    const double v = val_cases.empty() ? log.train_loss.back()
                                       : sequential_objective(m, val_cases, text_embs, cfg);
    log.val_metric.push_back(v);
    if (v < best) {
      best = v;
      best_params = m.params();
      log.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  m.mutable_params() = best_params;
  m.freeze(train_seqs, text_embs);
  return log;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_rec(const std::filesystem::path& path, const ConventionalRec& m) {
  nlohmann::json j;
  j["format"] = "atr-conventional";
  j["version"] = 1;
  j["shape"] = {{"users", m.num_users()}, {"items", m.num_items()}, {"factors", m.factors()},
                {"text_dim", m.text_dim()}};
  j["frozen"] = m.is_frozen();
  for (const auto& [name, t] : m.params().tensors())
    j["params"][name] = std::vector<double>(t.begin(), t.end());
  std::ofstream(path) << j.dump() << '\n';
}

inline void save_rec(const std::filesystem::path& path, const SequentialRec& m) {
  nlohmann::json j;
  j["format"] = "atr-sequential";
  j["version"] = 1;
  j["shape"] = {{"items", m.num_items()}, {"factors", m.factors()}, {"text_dim", m.text_dim()},
                {"window", m.window()}, {"alpha", m.alpha()}};
  j["frozen"] = m.is_frozen();
  j["histories"] = m.histories();
  for (const auto& [name, t] : m.params().tensors())
    j["params"][name] = std::vector<double>(t.begin(), t.end());
  std::ofstream(path) << j.dump() << '\n';
}

namespace detail {

inline nlohmann::json read_checkpoint(const std::filesystem::path& path, const char* format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, e.what());
  }
  if (j.value("format", "") != format || j.value("version", 0) != 1)
    throw DataError(std::string("expected a ") + format + " checkpoint");
  return j;
}

template <class P>
void fill_tensors(P& p, const nlohmann::json& j) {
  for (auto& [name, t] : p.tensors()) {
    const auto v = j.at("params").at(name).template get<std::vector<double>>();
    if (v.size() != t.size()) throw ShapeError("checkpoint tensor '" + name + "' has wrong size");
    std::copy(v.begin(), v.end(), t.begin());
  }
}

}  // namespace detail

inline ConventionalRec load_conventional(const std::filesystem::path& path) {
  const auto j = detail::read_checkpoint(path, "atr-conventional");
  try {
    const auto& s = j.at("shape");
    ConventionalParams p(s.at("users").get<std::size_t>(), s.at("items").get<std::size_t>(),
                         s.at("factors").get<std::size_t>(), s.at("text_dim").get<std::size_t>());
    detail::fill_tensors(p, j);
    return ConventionalRec(std::move(p), j.value("frozen", false));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

inline SequentialRec load_sequential(const std::filesystem::path& path, const TextEmbeddings& text_embs) {
  const auto j = detail::read_checkpoint(path, "atr-sequential");
  try {
    const auto& s = j.at("shape");
    SequentialParams p(s.at("items").get<std::size_t>(), s.at("factors").get<std::size_t>(),
                       s.at("text_dim").get<std::size_t>());
    detail::fill_tensors(p, j);
    SequentialRec m(std::move(p), s.at("window").get<std::size_t>(), s.at("alpha").get<double>());
    if (j.value("frozen", false))
      m.freeze(j.at("histories").get<std::vector<std::vector<std::size_t>>>(), text_embs);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace atr
