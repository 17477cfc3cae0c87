#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "atr/error.hpp"
#include "atr/numeric.hpp"

namespace atr {

using Words = std::vector<std::string>;

inline constexpr std::size_t kMaxDescriptionWords = 100;

/// Lowercase, drop punctuation, split on whitespace.
inline Words normalize_words(std::string_view text) {
  Words out;
  std::string cur;
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
    } else if (std::ispunct(c)) {
      continue;
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string join_words(const Words& w) {
  std::string s;
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (k) s.push_back(' ');
    s += w[k];
  }
  return s;
}

template <class T>
std::vector<T> truncate_description(const std::vector<T>& tokens,
                                    std::size_t max_words = kMaxDescriptionWords) {
  return {tokens.begin(), tokens.begin() + std::min(tokens.size(), max_words)};
}

struct Item {
  std::size_t item_id = 0;
  Words title;
  Words description;
};

struct Interaction {
  std::size_t user_id = 0;
  std::size_t item_id = 0;
  double rating = 0.0;
  std::int64_t timestamp = 0;
};

struct Splits {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

struct Dataset {
  std::size_t num_users = 0;
  std::vector<Item> items;
  std::vector<Interaction> interactions;
  Splits splits;

  std::size_t num_items() const { return items.size(); }

  std::vector<Interaction> subset(const std::vector<std::size_t>& idx) const {
    std::vector<Interaction> out;
    out.reserve(idx.size());
    for (auto k : idx) out.push_back(interactions.at(k));
    return out;
  }
  std::vector<Interaction> train() const { return subset(splits.train); }
  std::vector<Interaction> val() const { return subset(splits.val); }
  std::vector<Interaction> test() const { return subset(splits.test); }

  /// Per-user interactions from `idx`, ordered by (timestamp, item id).
  std::vector<std::vector<std::size_t>> user_sequences(const std::vector<std::size_t>& idx) const {
    std::vector<std::vector<const Interaction*>> tmp(num_users);
    for (auto k : idx) tmp[interactions[k].user_id].push_back(&interactions[k]);
    std::vector<std::vector<std::size_t>> out(num_users);
    for (std::size_t u = 0; u < num_users; ++u) {
      std::stable_sort(tmp[u].begin(), tmp[u].end(), [](auto* a, auto* b) {
        return a->timestamp != b->timestamp ? a->timestamp < b->timestamp : a->item_id < b->item_id;
      });
      for (auto* x : tmp[u]) out[u].push_back(x->item_id);
    }
    return out;
  }

  std::vector<Words> descriptions() const {
    std::vector<Words> out;
    out.reserve(items.size());
    for (const auto& it : items) out.push_back(it.description);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic corpus

struct SynthConfig {
  std::size_t num_users = 500;
  std::size_t num_items = 300;
  std::size_t interactions_per_user = 40;
  std::size_t vocab_size = 240;  // generic (non-phrase) words
  std::size_t num_quality_phrases = 16;
  double phrase_effect_scale = 12.0;
  double noise_std = 0.7;
  std::uint64_t seed = 7;

  std::size_t num_genres = 4;
  std::size_t latent_dim = 4;
  std::size_t min_desc_words = 30;
  std::size_t max_desc_words = 60;
  double max_phrase_density = 0.16;

  void validate() const {
    if (num_users == 0 || num_items == 0 || interactions_per_user == 0 || vocab_size == 0 ||
        num_quality_phrases == 0 || num_genres == 0 || latent_dim == 0)
      throw ConfigError("synthetic counts must be positive");
    if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
    if (!(phrase_effect_scale >= 0.0)) throw ConfigError("phrase_effect_scale must be >= 0");
    if (interactions_per_user > num_items)
      throw ConfigError("interactions_per_user exceeds num_items");
    if (min_desc_words == 0 || min_desc_words > max_desc_words)
      throw ConfigError("description length range invalid");
    if (max_desc_words > kMaxDescriptionWords)
      throw ConfigError("max_desc_words exceeds the 100-word cap");
    if (vocab_size < num_genres) throw ConfigError("vocab_size smaller than num_genres");
    if (!(max_phrase_density >= 0.0 && max_phrase_density < 1.0))
      throw ConfigError("max_phrase_density must be in [0,1)");
  }
};

/// Hidden generator state kept next to a synthetic dataset for diagnostics.
struct SynthTruth {
  std::vector<std::string> phrase_words;
  std::vector<double> phrase_weights;
  std::vector<std::size_t> item_genre;
  std::vector<double> item_text_effect;
};

namespace detail {

inline std::string pseudo_word(std::size_t k, std::string_view prefix = "") {
  static constexpr std::string_view cons = "bdfgklmnprstvz";
  static constexpr std::string_view vow = "aeiou";
  const std::size_t base = cons.size() * vow.size();
  std::string w(prefix);
  std::size_t x = k;
  for (int s = 0; s < 2 || x > 0; ++s) {
    const std::size_t d = x % base;
    x /= base;
    w.push_back(cons[d / vow.size()]);
    w.push_back(vow[d % vow.size()]);
  }
  return w;
}

}  // namespace detail

/// Genre-templated descriptions with planted quality phrases whose hidden
/// weights add to ratings in proportion to their share of the description.
inline Dataset generate_synthetic(const SynthConfig& cfg, SynthTruth* truth = nullptr) {
  cfg.validate();
  Rng rng = derive_rng(cfg.seed, 0x5e7);

  Words generic(cfg.vocab_size);
  for (std::size_t k = 0; k < cfg.vocab_size; ++k) generic[k] = detail::pseudo_word(k);
  Words phrases(cfg.num_quality_phrases);
  Vec phrase_w(cfg.num_quality_phrases);
  for (std::size_t k = 0; k < cfg.num_quality_phrases; ++k) {
    phrases[k] = detail::pseudo_word(k, "x");
    phrase_w[k] = 0.5 + uniform01(rng);
  }

  // Each genre owns a block of words; a quarter of the vocabulary is shared.
  const std::size_t shared = std::max<std::size_t>(1, cfg.vocab_size / 4);
  const std::size_t per_genre = std::max<std::size_t>(1, (cfg.vocab_size - shared) / cfg.num_genres);
  auto genre_word = [&](std::size_t g, Rng& r) {
    if (uniform01(r) < 0.3) return uniform_index(r, shared);
    // Zipf-like within the genre block.
    const double u = uniform01(r);
    const auto k = static_cast<std::size_t>(std::floor(per_genre * u * u));
    return std::min(cfg.vocab_size - 1, shared + g * per_genre + std::min(k, per_genre - 1));
  };
  // Sparse genre-specific successor table gives the LM learnable structure.
  std::vector<std::vector<std::array<std::size_t, 3>>> succ(
      cfg.num_genres, std::vector<std::array<std::size_t, 3>>(cfg.vocab_size));
  for (std::size_t g = 0; g < cfg.num_genres; ++g)
    for (std::size_t w = 0; w < cfg.vocab_size; ++w)
      for (auto& s : succ[g][w]) s = genre_word(g, rng);

  Matrix genre_centroid(cfg.num_genres, cfg.latent_dim);
  for (auto& x : genre_centroid.data()) x = normal(rng, 0.0, 0.8);

  Dataset ds;
  ds.num_users = cfg.num_users;
  ds.items.resize(cfg.num_items);
  std::vector<std::size_t> item_genre(cfg.num_items);
  Vec text_effect(cfg.num_items), item_bias(cfg.num_items);
  Matrix item_q(cfg.num_items, cfg.latent_dim);
  for (std::size_t i = 0; i < cfg.num_items; ++i) {
    Rng ir = derive_rng(cfg.seed, 0x17e, i);
    const std::size_t g = uniform_index(ir, cfg.num_genres);
    item_genre[i] = g;
    const std::size_t len =
        cfg.min_desc_words + uniform_index(ir, cfg.max_desc_words - cfg.min_desc_words + 1);
    const double density = cfg.max_phrase_density * uniform01(ir);
    Words desc;
    double weight_sum = 0.0;
    std::optional<std::size_t> prev;
    for (std::size_t p = 0; p < len; ++p) {
      if (uniform01(ir) < density) {
        const std::size_t q = uniform_index(ir, cfg.num_quality_phrases);
        desc.push_back(phrases[q]);
        weight_sum += phrase_w[q];
        prev.reset();
        continue;
      }
      std::size_t w;
      if (prev && uniform01(ir) < 0.7) {
        w = succ[g][*prev][uniform_index(ir, 3)];
      } else {
        w = genre_word(g, ir);
      }
      desc.push_back(generic[w]);
      prev = w;
    }
    ds.items[i].item_id = i;
    ds.items[i].description = std::move(desc);
    text_effect[i] = cfg.phrase_effect_scale * weight_sum / static_cast<double>(len);
    item_bias[i] = normal(ir, 0.0, 0.3);
    for (std::size_t k = 0; k < cfg.latent_dim; ++k)
      item_q(i, k) = genre_centroid(g, k) + normal(ir, 0.0, 0.3);
  }
  // Center the text effect so the overall rating level stays near 3.5.
  const double mean_effect =
      std::accumulate(text_effect.begin(), text_effect.end(), 0.0) / cfg.num_items;

  std::int64_t clock = 0;
  for (std::size_t u = 0; u < cfg.num_users; ++u) {
    Rng ur = derive_rng(cfg.seed, 0x05e, u);
    Vec pu(cfg.latent_dim);
    for (auto& x : pu) x = normal(ur, 0.0, 0.5);
    const double bu = normal(ur, 0.0, 0.3);
    const auto chosen = sample_without_replacement(ur, cfg.num_items, cfg.interactions_per_user);
    for (auto i : chosen) {
      const double r = 3.5 + bu + item_bias[i] + dot(pu, item_q.row(i)) +
                       (text_effect[i] - mean_effect) + normal(ur, 0.0, 1.0) * cfg.noise_std;
      ds.interactions.push_back({u, i, std::clamp(r, 1.0, 5.0), clock++});
    }
  }
  if (truth) {
    truth->phrase_words = phrases;
    truth->phrase_weights = phrase_w;
    truth->item_genre = item_genre;
    truth->item_text_effect = text_effect;
  }
  return ds;
}

// ---------------------------------------------------------------------------
// JSONL ingestion

struct IngestOptions {
  std::size_t min_user_interactions = 10;
  std::size_t min_desc_words = 50;
  std::size_t min_item_interactions = 1;
  std::size_t max_desc_words = kMaxDescriptionWords;
};

inline Dataset ingest_jsonl(const std::filesystem::path& path, const IngestOptions& opt = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());

  struct Raw {
    std::string user, item;
    double rating;
    std::int64_t ts;
  };
  std::vector<Raw> rows;
  std::map<std::string, Words> desc_by_item;
  std::vector<std::string> item_order;

  auto key_of = [](const nlohmann::json& v, std::size_t line, const char* field) -> std::string {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
    throw ParseError(line, std::string("field '") + field + "' must be a string or integer");
  };

  std::string text;
  std::size_t line_no = 0;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(line_no, e.what());
    }
    for (const char* f : {"user", "item", "rating", "ts", "description"})
      if (!j.is_object() || !j.contains(f))
        throw ParseError(line_no, std::string("missing field '") + f + "'");
    if (!j["rating"].is_number()) throw ParseError(line_no, "rating must be a number");
    if (!j["ts"].is_number_integer()) throw ParseError(line_no, "ts must be an integer");
    if (!j["description"].is_string()) throw ParseError(line_no, "description must be a string");
    Raw r{key_of(j["user"], line_no, "user"), key_of(j["item"], line_no, "item"),
          j["rating"].get<double>(), j["ts"].get<std::int64_t>()};
    if (!(r.rating >= 1.0 && r.rating <= 5.0)) throw ParseError(line_no, "rating outside [1,5]");
    if (!desc_by_item.count(r.item)) {
      desc_by_item[r.item] = normalize_words(j["description"].get<std::string>());
      item_order.push_back(r.item);
    }
    rows.push_back(std::move(r));
  }

  std::set<std::string> dead_items, dead_users;
  for (const auto& [item, words] : desc_by_item)
    if (words.size() < opt.min_desc_words) dead_items.insert(item);

  // Fixed point: dropping items can push users under the threshold and back.
  for (bool changed = true; changed;) {
    changed = false;
    std::map<std::string, std::size_t> ucount, icount;
    for (const auto& r : rows) {
      if (dead_items.count(r.item) || dead_users.count(r.user)) continue;
      ++ucount[r.user];
      ++icount[r.item];
    }
    for (const auto& r : rows) {
      if (dead_items.count(r.item) || dead_users.count(r.user)) continue;
      if (ucount[r.user] < opt.min_user_interactions) {
        dead_users.insert(r.user);
        changed = true;
      }
      if (icount[r.item] < opt.min_item_interactions) {
        dead_items.insert(r.item);
        changed = true;
      }
    }
  }

  Dataset ds;
  std::map<std::string, std::size_t> uid, iid;
  for (const auto& item : item_order) {
    if (dead_items.count(item)) continue;
    bool used = false;
    for (const auto& r : rows)
      if (r.item == item && !dead_users.count(r.user)) {
        used = true;
        break;
      }
    if (!used) continue;
    const std::size_t id = ds.items.size();
    iid[item] = id;
    ds.items.push_back({id, {}, truncate_description(desc_by_item[item], opt.max_desc_words)});
  }
  for (const auto& r : rows) {
    if (dead_users.count(r.user) || !iid.count(r.item)) continue;
    auto [it, fresh] = uid.try_emplace(r.user, uid.size());
    ds.interactions.push_back({it->second, iid[r.item], r.rating, r.ts});
  }
  ds.num_users = uid.size();
  if (ds.interactions.empty()) throw EmptyDatasetError("no interactions survive filtering");
  ds.splits.train.resize(ds.interactions.size());
  std::iota(ds.splits.train.begin(), ds.splits.train.end(), 0);
  return ds;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitRatios {
  double train = 0.81;
  double val = 0.09;
  double test = 0.10;
};

/// Random per-interaction split: val and test get floor(n * ratio), train
/// takes the remainder.
inline Dataset split(Dataset ds, const SplitRatios& ratios, std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.val >= 0 && ratios.test >= 0))
    throw ConfigError("split ratios must be non-negative with positive train share");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");
  const std::size_t n = ds.interactions.size();
  auto take = [n](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_val = take(ratios.val), n_test = take(ratios.test);
  const std::size_t n_train = n - n_val - n_test;

  Rng rng = derive_rng(seed, 0x5b17);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Splits s;
  s.train.assign(perm.begin(), perm.begin() + n_train);
  s.val.assign(perm.begin() + n_train, perm.begin() + n_train + n_val);
  s.test.assign(perm.begin() + n_train + n_val, perm.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  ds.splits = std::move(s);
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: items.jsonl, interactions.jsonl, splits.json

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "items.jsonl");
    for (const auto& it : ds.items)
      out << nlohmann::json{{"item_id", it.item_id},
                            {"title", join_words(it.title)},
                            {"description", join_words(it.description)}}
                 .dump()
          << '\n';
  }
  {
    std::ofstream out(dir / "interactions.jsonl");
    for (const auto& x : ds.interactions)
      out << nlohmann::json{{"user", x.user_id}, {"item", x.item_id}, {"rating", x.rating},
                            {"ts", x.timestamp}}
                 .dump()
          << '\n';
  }
  std::ofstream(dir / "splits.json") << nlohmann::json{{"num_users", ds.num_users},
                                                       {"train", ds.splits.train},
                                                       {"val", ds.splits.val},
                                                       {"test", ds.splits.test}}
                                            .dump()
                                     << '\n';
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  auto open = [&](const char* name) {
    std::ifstream in(dir / name);
    if (!in) throw DataError("missing dataset file " + (dir / name).string());
    return in;
  };
  std::string line;
  std::size_t n = 0;
  {
    auto in = open("items.jsonl");
    while (std::getline(in, line)) {
      ++n;
      try {
        auto j = nlohmann::json::parse(line);
        Item it;
        it.item_id = j.at("item_id").get<std::size_t>();
        it.title = normalize_words(j.value("title", std::string{}));
        it.description = normalize_words(j.at("description").get<std::string>());
        if (it.item_id != ds.items.size()) throw ParseError(n, "item ids must be dense and ordered");
        ds.items.push_back(std::move(it));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(n, e.what());
      }
    }
  }
  n = 0;
  {
    auto in = open("interactions.jsonl");
    while (std::getline(in, line)) {
      ++n;
      try {
        auto j = nlohmann::json::parse(line);
        ds.interactions.push_back({j.at("user").get<std::size_t>(), j.at("item").get<std::size_t>(),
                                   j.at("rating").get<double>(), j.at("ts").get<std::int64_t>()});
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(n, e.what());
      }
    }
  }
  {
    auto in = open("splits.json");
    nlohmann::json j;
    try {
      in >> j;
      ds.num_users = j.at("num_users").get<std::size_t>();
      ds.splits.train = j.at("train").get<std::vector<std::size_t>>();
      ds.splits.val = j.at("val").get<std::vector<std::size_t>>();
      ds.splits.test = j.at("test").get<std::vector<std::size_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(1, std::string("splits.json: ") + e.what());
    }
  }
  for (const auto& x : ds.interactions)
    if (x.user_id >= ds.num_users || x.item_id >= ds.items.size())
      throw DataError("interaction references an unknown user or item");
  return ds;
}

}  // namespace atr
