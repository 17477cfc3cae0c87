#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/recommender.hpp"

namespace atr {

// ---------------------------------------------------------------------------
// Query-only access to a deployed recommender

enum class Access { kTopK, kRank, kScore };

struct AccessLog {
  std::vector<Access> events;

  std::size_t count(Access a) const {
    return static_cast<std::size_t>(std::count(events.begin(), events.end(), a));
  }
  std::size_t size() const noexcept { return events.size(); }
};

struct ScoredItem {
  std::size_t item = 0;
  double score = 0.0;
};

/// Wraps a frozen model so that callers can only issue top-K, rank and score
/// queries. Every query is logged. Unseen users are described by a profile:
/// rated items for the conventional family, an item sequence for the
/// sequential family.
template <RecommenderModel M>
class BlackBox {
 public:
  static constexpr bool kSequential = std::is_same_v<M, SequentialRec>;

  BlackBox(const M& model, const ItemTextCache& items, double fold_in_reg = 1.0)
      : model_(&model), table_(model.item_table(items.embeddings())), fold_in_reg_(fold_in_reg) {
    if (!model.is_frozen()) throw ContractError("black box must wrap a frozen model");
  }

  std::size_t num_items() const noexcept { return table_.offsets.size(); }
  const AccessLog& log() const noexcept { return log_; }

  std::vector<std::size_t> top_k(std::size_t user, std::size_t k) {
    log_.events.push_back(Access::kTopK);
    return top_k_in_row(model_->score_row(user, table_), k);
  }

  std::size_t rank_of(std::size_t user, std::size_t item) {
    log_.events.push_back(Access::kRank);
    return rank_in_row(model_->score_row(user, table_), item);
  }

  /// Top-K (with scores) for an unseen user given by an item sequence.
  std::vector<ScoredItem> top_k_for_profile(std::span<const std::size_t> profile, std::size_t k)
    requires std::is_same_v<M, SequentialRec>
  {
    log_.events.push_back(Access::kTopK);
    const Vec row = M::score_row_for(model_->state_of(profile, table_), table_);
    std::vector<ScoredItem> out;
    for (auto i : top_k_in_row(row, k)) out.push_back({i, row[i]});
    return out;
  }

  /// Scores of `items` for an unseen user given by rated items.
  Vec scores_for_profile(std::span<const RatedItem> profile, std::span<const std::size_t> items)
    requires std::is_same_v<M, ConventionalRec>
  {
    log_.events.push_back(Access::kScore);
    const auto [bias, vec] = model_->fold_in(profile, table_, fold_in_reg_);
    Vec out;
    for (auto i : items) {
      if (i >= num_items()) throw IndexError("item " + std::to_string(i));
      out.push_back(table_.offsets[i] + bias + dot(vec, table_.vectors.row(i)));
    }
    return out;
  }

 private:
  const M* model_;
  ItemTable table_;
  double fold_in_reg_;
  AccessLog log_;
};

// ---------------------------------------------------------------------------
// Fake profiles and distillation data

struct FakeProfile {
  std::size_t fake_user = 0;
  std::vector<std::size_t> items;
  Vec ratings;  // empty for sequential profiles
};

/// One distillation tuple: the black-box score of `item` for fake user
/// `user`, whose profile at query time was `context` (sequential family only).
struct SurrogateRecord {
  std::size_t user = 0;
  std::vector<std::size_t> context;
  std::size_t item = 0;
  double score = 0.0;
};

struct SurrogateTrainSet {
  std::size_t num_users = 0;
  std::vector<FakeProfile> profiles;
  std::vector<SurrogateRecord> records;
};

/// Autoregressive data generation: each profile starts with a random item,
/// then repeatedly appends an item drawn uniformly from the top-K returned
/// for the current profile, until it holds N items. The returned top-K
/// scores are kept as distillation records.
template <RecommenderModel M>
SurrogateTrainSet gen_fake_profiles_adg(BlackBox<M>& bb, std::size_t num_profiles, std::size_t n,
                                        std::size_t k, std::uint64_t seed) {
  if constexpr (!BlackBox<M>::kSequential) {
    throw TypeMismatchError("ADG needs a sequential recommender");
  } else {
    if (k < 1) throw ConfigError("ADG needs K >= 1");
    if (n < 1) throw ConfigError("ADG needs N >= 1");
    SurrogateTrainSet out;
    out.num_users = num_profiles;
    for (std::size_t z = 0; z < num_profiles; ++z) {
      Rng rng = derive_rng(seed, 0xad6, z);
      FakeProfile p{z, {uniform_index(rng, bb.num_items())}, {}};
      while (p.items.size() < n) {
        const auto top = bb.top_k_for_profile(p.items, k);
        for (const auto& s : top) out.records.push_back({z, p.items, s.item, s.score});
        p.items.push_back(top[uniform_index(rng, top.size())].item);
      }
      out.profiles.push_back(std::move(p));
    }
    return out;
  }
}

/// Random injection collection: each fake user rates N random items with
/// uniform integer ratings, then N random query items are scored by the
/// black box.
template <RecommenderModel M>
SurrogateTrainSet gen_fake_profiles_ric(BlackBox<M>& bb, std::size_t num_profiles, std::size_t n,
                                        std::uint64_t seed) {
  if constexpr (BlackBox<M>::kSequential) {
    throw TypeMismatchError("RIC needs a conventional recommender");
  } else {
    if (n > bb.num_items()) throw ConfigError("RIC: N exceeds the number of items");
    SurrogateTrainSet out;
    out.num_users = num_profiles;
    for (std::size_t z = 0; z < num_profiles; ++z) {
      Rng rng = derive_rng(seed, 0x41c, z);
      FakeProfile p{z, sample_without_replacement(rng, bb.num_items(), n), {}};
      std::vector<RatedItem> rated;
      for (auto i : p.items) {
        p.ratings.push_back(static_cast<double>(1 + uniform_index(rng, 5)));
        rated.push_back({i, p.ratings.back()});
      }
      const auto queries = sample_without_replacement(rng, bb.num_items(), n);
      const Vec scores = bb.scores_for_profile(rated, queries);
      for (std::size_t q = 0; q < queries.size(); ++q) out.records.push_back({z, {}, queries[q], scores[q]});
      out.profiles.push_back(std::move(p));
    }
    return out;
  }
}

// ---------------------------------------------------------------------------
// Surrogate loss and training

/// sum_k (target_k - pred_k)^2
inline double surrogate_loss(std::span<const double> targets, std::span<const double> preds) {
  if (targets.size() != preds.size()) throw ShapeError("surrogate loss over misaligned scores");
  double s = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) s += (targets[k] - preds[k]) * (targets[k] - preds[k]);
  return s;
}

namespace detail {

inline double seq_record_logit(const SequentialRec& m, const SurrogateRecord& r, const TextEmbeddings& embs,
                               Vec* state_out = nullptr) {
  const std::size_t k = m.factors();
  const std::size_t n = std::min(m.window(), r.context.size());
  Vec state(k, 0.0);
  for (std::size_t j = r.context.size() - n; j < r.context.size(); ++j)
    axpy(1.0 / static_cast<double>(n), m.item_rep(r.context[j], embs.at(r.context[j])), state);
  const double z = dot(state, m.item_rep(r.item, embs.at(r.item)));
  if (state_out) *state_out = std::move(state);
  return z;
}

}  // namespace detail

inline Vec surrogate_predictions(const ConventionalRec& s, const SurrogateTrainSet& x, const TextEmbeddings& embs) {
  Vec out;
  for (const auto& r : x.records) out.push_back(s.score(r.user, r.item, embs.at(r.item)));
  return out;
}

inline Vec surrogate_predictions(const SequentialRec& s, const SurrogateTrainSet& x, const TextEmbeddings& embs) {
  Vec out;
  for (const auto& r : x.records) out.push_back(sigmoid(detail::seq_record_logit(s, r, embs)));
  return out;
}

template <class M>
double surrogate_loss(const M& s, const SurrogateTrainSet& x, const TextEmbeddings& embs) {
  Vec y;
  for (const auto& r : x.records) y.push_back(r.score);
  return surrogate_loss(y, surrogate_predictions(s, x, embs));
}

/// Score-matching objective for a sequential surrogate:
///   J = (1/2n) sum (sigmoid(z) - y)^2 + L2 penalties
inline double sequential_distill_objective(const SequentialRec& m, std::span<const SurrogateRecord> batch,
                                           const TextEmbeddings& embs, const RecTrainConfig& cfg,
                                           SequentialParams* grad = nullptr) {
  const auto& p = m.params();
  const std::size_t k = m.factors();
  const double a = m.alpha();
  if (grad) *grad = SequentialParams(m.num_items(), k, m.text_dim());
  const double scale = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (const auto& r : batch) {
    if (r.context.empty()) throw ShapeError("distillation record with empty context");
    Vec state;
    const double z = detail::seq_record_logit(m, r, embs, &state);
    const double s = sigmoid(z);
    loss += 0.5 * (s - r.score) * (s - r.score) * scale;
    if (!grad) continue;
    const double g = (s - r.score) * s * (1.0 - s) * scale;
    const auto& ei = embs.at(r.item);
    const Vec rep = m.item_rep(r.item, ei);
    for (std::size_t q = 0; q < k; ++q) {
      grad->item_emb(r.item, q) += g * state[q] * (1.0 - a);
      axpy(g * state[q] * a, ei, grad->text_proj.row(q));
    }
    const std::size_t n = std::min(m.window(), r.context.size());
    for (std::size_t j = r.context.size() - n; j < r.context.size(); ++j) {
      const std::size_t item = r.context[j];
      const auto& e = embs.at(item);
      for (std::size_t q = 0; q < k; ++q) {
        const double gq = g * rep[q] / static_cast<double>(n);
        grad->item_emb(item, q) += gq * (1.0 - a);
        axpy(gq * a, e, grad->text_proj.row(q));
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

struct SurrogateTrainResult {
  TrainLog log;
  double final_loss = 0.0;  // surrogate_loss on the training tuples
};

namespace detail {

/// Deterministic 90/10 split of the records for early stopping.
inline void holdout(std::size_t n, std::uint64_t seed, std::vector<std::size_t>& train,
                    std::vector<std::size_t>& val) {
  Rng rng = derive_rng(seed, 0x5a7);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t nv = n >= 10 ? n / 10 : 0;
  val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(nv));
  train.assign(idx.begin() + static_cast<std::ptrdiff_t>(nv), idx.end());
}

}  // namespace detail

/// Conventional surrogate: one user per fake profile, fitted to the
/// black-box scores by squared error.
inline SurrogateTrainResult train_surrogate(ConventionalRec& s, const SurrogateTrainSet& x,
                                            const TextEmbeddings& embs, const RecTrainConfig& cfg) {
  if (x.records.empty()) throw DataError("empty surrogate training set");
  std::vector<std::size_t> tr, va;
  detail::holdout(x.records.size(), cfg.seed, tr, va);
  auto as_interactions = [&](const std::vector<std::size_t>& idx) {
    std::vector<Interaction> out;
    for (auto k : idx) out.push_back({x.records[k].user, x.records[k].item, x.records[k].score, 0});
    return out;
  };
  SurrogateTrainResult r;
  r.log = train_rec(s, as_interactions(tr), as_interactions(va), embs, cfg);
  r.final_loss = surrogate_loss(s, x, embs);
  return r;
}

/// Sequential surrogate fitted to the returned top-K scores; frozen with the
/// full fake profiles as user histories.
inline SurrogateTrainResult train_surrogate(SequentialRec& s, const SurrogateTrainSet& x,
                                            const TextEmbeddings& embs, const RecTrainConfig& cfg) {
  if (x.records.empty()) throw DataError("empty surrogate training set");
  if (s.is_frozen()) throw FrozenModelError("cannot train a frozen model");
  std::vector<std::size_t> tr, va;
  detail::holdout(x.records.size(), cfg.seed, tr, va);
  std::vector<SurrogateRecord> train, val;
  for (auto k : tr) train.push_back(x.records[k]);
  for (auto k : va) val.push_back(x.records[k]);
  Rng rng = derive_rng(cfg.seed, 0x5a8);
  SurrogateTrainResult r;
  double best = std::numeric_limits<double>::infinity();
  SequentialParams best_params = s.params();
  std::size_t since_best = 0;
  SequentialParams grad;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    double total = 0.0;
    for (std::size_t b = 0; b < train.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(train.size(), b + cfg.batch_size);
      std::span<const SurrogateRecord> batch(train.data() + b, e - b);
      total += sequential_distill_objective(s, batch, embs, cfg, &grad) * static_cast<double>(e - b);
      detail::sgd_apply(s.mutable_params(), grad, cfg.lr);
    }
    r.log.train_loss.push_back(total / static_cast<double>(train.size()));
    const double v = val.empty() ? r.log.train_loss.back() : sequential_distill_objective(s, val, embs, cfg);
    r.log.val_metric.push_back(v);
    if (v < best) {
      best = v;
      best_params = s.params();
      r.log.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  s.mutable_params() = best_params;
  std::vector<std::vector<std::size_t>> histories;
  for (const auto& p : x.profiles) histories.push_back(p.items);
  s.freeze(histories, embs);
  r.final_loss = surrogate_loss(s, x, embs);
  return r;
}

// ---------------------------------------------------------------------------
// Fidelity

struct FidelityReport {
  std::string family;
  std::string metric;          // "rmse" or "appear@50"
  double blackbox_value = 0.0;
  double surrogate_value = 0.0;
  double relative_change = 0.0;  // |surrogate - blackbox| / blackbox
};

inline double relative_change(double reference, double value) {
  if (reference == 0.0) return value == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return std::abs(value - reference) / std::abs(reference);
}

/// RMSE on `probe` when each probe user is known to `m` only through a
/// ridge fold-in of that user's `history` ratings.
inline double fold_in_rmse(const ConventionalRec& m, std::span<const Interaction> history,
                           std::span<const Interaction> probe, const TextEmbeddings& embs, double fold_in_reg) {
  if (probe.empty()) throw DataError("empty probe split");
  const ItemTable t = m.item_table(embs);
  std::map<std::size_t, std::vector<RatedItem>> per_user;
  for (const auto& x : history) per_user[x.user_id].push_back({x.item_id, x.rating});
  std::map<std::size_t, std::pair<double, Vec>> folded;
  double se = 0.0;
  for (const auto& x : probe) {
    if (x.item_id >= m.num_items()) throw IndexError("item " + std::to_string(x.item_id));
    auto it = folded.find(x.user_id);
    if (it == folded.end()) it = folded.emplace(x.user_id, m.fold_in(per_user[x.user_id], t, fold_in_reg)).first;
    const double pred = t.offsets[x.item_id] + it->second.first + dot(it->second.second, t.vectors.row(x.item_id));
    se += (pred - x.rating) * (pred - x.rating);
  }
  return std::sqrt(se / static_cast<double>(probe.size()));
}

/// Conventional family: probe-split RMSE of the black box and of the
/// surrogate, with probe users folded into both models the same way.
inline FidelityReport surrogate_fidelity(const ConventionalRec& blackbox, const ConventionalRec& surrogate,
                                         std::span<const Interaction> history, std::span<const Interaction> probe,
                                         const TextEmbeddings& embs, double fold_in_reg = 1.0) {
  if (!blackbox.is_frozen() || !surrogate.is_frozen()) throw ContractError("fidelity needs frozen models");
  FidelityReport r{"conventional", "rmse", fold_in_rmse(blackbox, history, probe, embs, fold_in_reg),
                   fold_in_rmse(surrogate, history, probe, embs, fold_in_reg), 0.0};
  r.relative_change = relative_change(r.blackbox_value, r.surrogate_value);
  return r;
}

/// Sequential family: Appear@50 of `targets` for the black-box users, with
/// the surrogate scoring the same histories.
inline FidelityReport surrogate_fidelity(const SequentialRec& blackbox, const SequentialRec& surrogate,
                                         std::span<const std::size_t> targets, const TextEmbeddings& embs,
                                         std::size_t k = 50) {
  if (!blackbox.is_frozen() || !surrogate.is_frozen()) throw ContractError("fidelity needs frozen models");
  const std::size_t kk = std::min(k, blackbox.num_items());
  const ItemTable tb = blackbox.item_table(embs);
  const ItemTable ts = surrogate.item_table(embs);
  std::size_t hb = 0, hs = 0, users = 0;
  auto hits = [&](const Vec& row) {
    std::size_t c = 0;
    for (auto i : top_k_in_row(row, kk))
      if (std::find(targets.begin(), targets.end(), i) != targets.end()) ++c;
    return c;
  };
  for (std::size_t u = 0; u < blackbox.num_users(); ++u) {
    const auto& h = blackbox.histories()[u];
    if (h.empty()) continue;
    ++users;
    hb += hits(blackbox.score_row(u, tb));
    hs += hits(SequentialRec::score_row_for(surrogate.state_of(h, ts), ts));
  }
  if (users == 0) throw DataError("no user histories to probe");
  const double denom = static_cast<double>(kk * users);
  FidelityReport r{"sequential", "appear@" + std::to_string(k), static_cast<double>(hb) / denom,
                   static_cast<double>(hs) / denom, 0.0};
  r.relative_change = relative_change(r.blackbox_value, r.surrogate_value);
  return r;
}

/// Cross-family comparisons are rejected.
template <RecommenderModel A, RecommenderModel B, class... Rest>
  requires(!std::is_same_v<A, B>)
FidelityReport surrogate_fidelity(const A&, const B&, Rest&&...) {
  throw TypeMismatchError("surrogate family differs from the black box");
}

inline nlohmann::json to_json(const FidelityReport& r) {
  return {{"family", r.family},
          {"metric", r.metric},
          {"blackbox", r.blackbox_value},
          {"surrogate", r.surrogate_value},
          {"relative_change", r.relative_change}};
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_surrogate_data(const SurrogateTrainSet& x, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream prof(dir / "profiles.jsonl");
  for (const auto& p : x.profiles) {
    nlohmann::json j{{"fake_user", p.fake_user}, {"items", p.items}};
    if (!p.ratings.empty()) j["ratings"] = p.ratings;
    prof << j.dump() << '\n';
  }
  std::ofstream rec(dir / "surrogate_train.jsonl");
  for (const auto& r : x.records) {
    nlohmann::json j{{"user", r.user}, {"item", r.item}, {"score", r.score}};
    if (!r.context.empty()) j["context"] = r.context;
    rec << j.dump() << '\n';
  }
}

inline SurrogateTrainSet load_surrogate_data(const std::filesystem::path& dir) {
  SurrogateTrainSet x;
  auto read = [&](const char* name, auto&& fn) {
    std::ifstream in(dir / name);
    if (!in) throw DataError("missing " + (dir / name).string());
    std::string line;
    std::size_t no = 0;
    while (std::getline(in, line)) {
      ++no;
      if (line.empty()) continue;
      try {
        fn(nlohmann::json::parse(line));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(no, e.what());
      }
    }
  };
  read("profiles.jsonl", [&](const nlohmann::json& j) {
    FakeProfile p;
    p.fake_user = j.at("fake_user").get<std::size_t>();
    p.items = j.at("items").get<std::vector<std::size_t>>();
    if (j.contains("ratings")) p.ratings = j.at("ratings").get<Vec>();
    x.profiles.push_back(std::move(p));
  });
  read("surrogate_train.jsonl", [&](const nlohmann::json& j) {
    SurrogateRecord r;
    r.user = j.at("user").get<std::size_t>();
    r.item = j.at("item").get<std::size_t>();
    r.score = j.at("score").get<double>();
    if (j.contains("context")) r.context = j.at("context").get<std::vector<std::size_t>>();
    x.records.push_back(std::move(r));
  });
  x.num_users = x.profiles.size();
  return x;
}

}  // namespace atr
