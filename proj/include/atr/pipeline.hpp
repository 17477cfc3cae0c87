#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "atr/attack2ft.hpp"
#include "atr/blackbox.hpp"
#include "atr/corpus.hpp"
#include "atr/error.hpp"
#include "atr/eval.hpp"
#include "atr/icl.hpp"
#include "atr/numeric.hpp"
#include "atr/recommender.hpp"
#include "atr/textenc.hpp"

namespace atr {

NLOHMANN_JSON_SERIALIZE_ENUM(TargetEmbedding, {{TargetEmbedding::kExpected, "expected"},
                                               {TargetEmbedding::kDirect, "direct"}})

// ---------------------------------------------------------------------------
// Experiment configuration

struct LmConfig {
  std::size_t dim = 32;
  std::size_t context = 8;
  std::size_t hidden = 64;
  double heldout_fraction = 0.1;  // descriptions kept out of Phase 1 for perplexity
};

struct RecConfig {
  std::string family = "conventional";  // conventional | sequential
  std::size_t factors = 8;
  std::size_t window = 5;
  double alpha = 0.5;
  RecTrainConfig train;
};

struct SurrogateConfig {
  std::size_t num_profiles = 500;
  std::size_t profile_length = 50;
  std::size_t adg_top_k = 10;
  double blackbox_fold_in_reg = 5.0;  // cold-start prior of the deployed model toward the mean user
  double fidelity_fold_in_reg = 0.1;  // probe-split fold-in for both models
  double lambda = 0.24;                // promotion weight against the surrogate
  RecTrainConfig train{300, 0.8, 32, 1e-5, 1e-3, 1e-5, 1e-2, 1e-6, 10, 1, 0.1};
};

struct IclConfig {
  std::size_t k = 5;
  std::string generator = "prompt-cache";  // prompt-cache | tiny-lm | http
  double cache_weight = 0.5;
  bool zero_shot_comparator = true;
  std::size_t http_timeout_s = 60;
  PromptText prompt;
};

struct ExperimentConfig {
  std::optional<SynthConfig> synthetic;
  std::optional<std::string> jsonl;
  IngestOptions ingest;
  SplitRatios split;
  LmConfig lm;
  RecConfig rec;
  std::string mode = "2ft-white";  // none | 2ft-white | 2ft-black | icl
  std::string ablation = "both";   // both | phase1_only | phase2_only
  bool run_ablations = false;
  AttackConfig attack;
  SurrogateConfig surrogate;
  IclConfig icl;
  std::size_t eval_k = 20;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs/default";

  ExperimentConfig() {
    attack.lambda = 0.008;
    attack.lr = 2.0;
    attack.phase2_lr = 2.0;
  }

  void validate() const {
    if (synthetic.has_value() == jsonl.has_value())
      throw ConfigError("dataset needs exactly one source: \"synthetic\" or \"jsonl\"");
    if (synthetic) synthetic->validate();
    if (seeds.empty()) throw ConfigError("seeds must be non-empty");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
      throw ConfigError("seeds must be distinct");
    if (output_dir.empty()) throw ConfigError("output_dir must be set");
    static const std::set<std::string> modes{"none", "2ft-white", "2ft-black", "icl"};
    static const std::set<std::string> ablations{"both", "phase1_only", "phase2_only"};
    if (!modes.count(mode)) throw ConfigError("unknown attack mode \"" + mode + "\"");
    if (!ablations.count(ablation)) throw ConfigError("unknown ablation \"" + ablation + "\"");
    if (rec.family != "conventional" && rec.family != "sequential")
      throw ConfigError("unknown recommender family \"" + rec.family + "\"");
    if (lm.dim == 0 || lm.context == 0 || lm.hidden == 0) throw ConfigError("LM sizes must be positive");
    if (!(lm.heldout_fraction >= 0.0 && lm.heldout_fraction < 1.0))
      throw ConfigError("heldout_fraction must be in [0,1)");
    if (rec.factors == 0) throw ConfigError("factors must be positive");
    if (eval_k < 1) throw ConfigError("eval k must be >= 1");
    if (mode == "2ft-black" && (surrogate.num_profiles == 0 || surrogate.profile_length == 0))
      throw ConfigError("surrogate needs profiles");
    static const std::set<std::string> gens{"prompt-cache", "tiny-lm", "http"};
    if (!gens.count(icl.generator)) throw ConfigError("unknown generator \"" + icl.generator + "\"");
    if (!(icl.cache_weight >= 0.0 && icl.cache_weight <= 1.0)) throw ConfigError("cache_weight must be in [0,1]");
    icl.prompt.validate();
    attack.validate();
  }
};

namespace detail {

/// Reads fields from a JSON object and rejects keys nobody asked for.
class JsonIn {
 public:
  JsonIn(nlohmann::json j, std::string where) : j_(std::move(j)), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  void operator()(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class F>
  void section(const char* key, F&& f) {
    seen_.insert(key);
    JsonIn sub(j_.contains(key) ? j_.at(key) : nlohmann::json::object(), where_ + "." + key);
    f(sub);
    sub.finish();
  }

  bool has(const char* key) const { return j_.contains(key); }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key " + where_ + "." + k);
  }

 private:
  nlohmann::json j_;
  std::string where_;
  std::set<std::string> seen_;
};

class JsonOut {
 public:
  explicit JsonOut(nlohmann::json& j) : j_(j) {}
  template <class T>
  void operator()(const char* key, const T& v) {
    j_[key] = v;
  }
  template <class F>
  void section(const char* key, F&& f) {
    nlohmann::json sub = nlohmann::json::object();
    JsonOut o(sub);
    f(o);
    j_[key] = std::move(sub);
  }

 private:
  nlohmann::json& j_;
};

template <class V, class C>
void visit_synth(V& v, C& c) {
  v("num_users", c.num_users);
  v("num_items", c.num_items);
  v("interactions_per_user", c.interactions_per_user);
  v("vocab_size", c.vocab_size);
  v("num_quality_phrases", c.num_quality_phrases);
  v("phrase_effect_scale", c.phrase_effect_scale);
  v("noise_std", c.noise_std);
  v("seed", c.seed);
  v("num_genres", c.num_genres);
  v("latent_dim", c.latent_dim);
  v("min_desc_words", c.min_desc_words);
  v("max_desc_words", c.max_desc_words);
  v("max_phrase_density", c.max_phrase_density);
}

template <class V, class C>
void visit_rec_train(V& v, C& c) {
  v("epochs", c.epochs);
  v("lr", c.lr);
  v("batch_size", c.batch_size);
  v("reg_user", c.reg_user);
  v("reg_item", c.reg_item);
  v("reg_user_bias", c.reg_user_bias);
  v("reg_item_bias", c.reg_item_bias);
  v("reg_text", c.reg_text);
  v("patience", c.patience);
  v("init_std", c.init_std);
}

template <class V, class C>
void visit_decode(V& v, C& c) {
  std::string strategy = c.strategy == DecodeConfig::Strategy::kGreedy ? "greedy" : "top-k";
  v("strategy", strategy);
  v("k", c.k);
  v("temperature", c.temperature);
  v("min_new_tokens", c.min_new_tokens);
  if constexpr (!std::is_const_v<C>) {
    if (strategy == "greedy") c.strategy = DecodeConfig::Strategy::kGreedy;
    else if (strategy == "top-k") c.strategy = DecodeConfig::Strategy::kTopK;
    else throw ConfigError("decode.strategy must be \"greedy\" or \"top-k\"");
  }
}

template <class V, class C>
void visit_prompt(V& v, C& c) {
  v("system_message", c.system_message);
  v("task_instruction", c.task_instruction);
  v("style_clause", c.style_clause);
  v("relevance_clause", c.relevance_clause);
  v("original_label", c.original_label);
  v("rewritten_label", c.rewritten_label);
}

template <class V, class C>
void visit_config(V& v, C& c) {
  v.section("dataset", [&](auto& d) {
    if constexpr (std::is_const_v<C>) {
      if (c.synthetic) d.section("synthetic", [&](auto& s) { visit_synth(s, *c.synthetic); });
      if (c.jsonl) d("jsonl", *c.jsonl);
    } else {
      if (d.has("synthetic")) {
        c.synthetic = SynthConfig{};
        d.section("synthetic", [&](auto& s) { visit_synth(s, *c.synthetic); });
      }
      if (d.has("jsonl")) {
        c.jsonl = std::string{};
        d("jsonl", *c.jsonl);
      }
    }
    d.section("ingest", [&](auto& s) {
      s("min_user_interactions", c.ingest.min_user_interactions);
      s("min_desc_words", c.ingest.min_desc_words);
      s("min_item_interactions", c.ingest.min_item_interactions);
      s("max_desc_words", c.ingest.max_desc_words);
    });
    d.section("split", [&](auto& s) {
      s("train", c.split.train);
      s("val", c.split.val);
      s("test", c.split.test);
    });
  });
  v.section("lm", [&](auto& s) {
    s("dim", c.lm.dim);
    s("context", c.lm.context);
    s("hidden", c.lm.hidden);
    s("heldout_fraction", c.lm.heldout_fraction);
  });
  v.section("recommender", [&](auto& s) {
    s("family", c.rec.family);
    s("factors", c.rec.factors);
    s("window", c.rec.window);
    s("alpha", c.rec.alpha);
    s.section("train", [&](auto& t) { visit_rec_train(t, c.rec.train); });
  });
  v.section("attack", [&](auto& s) {
    s("mode", c.mode);
    s("ablation", c.ablation);
    s("run_ablations", c.run_ablations);
    s("lambda", c.attack.lambda);
    s("margin", c.attack.margin);
    s("user_sample_frac", c.attack.user_sample_frac);
    s("target_batch", c.attack.target_batch);
    s("phase1_epochs", c.attack.phase1_epochs);
    s("phase2_epochs", c.attack.phase2_epochs);
    s("lr", c.attack.lr);
    s("phase2_lr", c.attack.phase2_lr);
    s("batch_size", c.attack.batch_size);
    s("target_fraction", c.attack.target_fraction);
    s("num_targets", c.attack.num_targets);
    s("prompt_fraction", c.attack.prompt_fraction);
    s("target_embedding", c.attack.target_embedding);
    s("early_stop", c.attack.early_stop);
    s.section("decode", [&](auto& t) { visit_decode(t, c.attack.decode); });
  });
  v.section("surrogate", [&](auto& s) {
    s("num_profiles", c.surrogate.num_profiles);
    s("profile_length", c.surrogate.profile_length);
    s("adg_top_k", c.surrogate.adg_top_k);
    s("blackbox_fold_in_reg", c.surrogate.blackbox_fold_in_reg);
    s("fidelity_fold_in_reg", c.surrogate.fidelity_fold_in_reg);
    s("lambda", c.surrogate.lambda);
    s.section("train", [&](auto& t) { visit_rec_train(t, c.surrogate.train); });
  });
  v.section("icl", [&](auto& s) {
    s("k", c.icl.k);
    s("generator", c.icl.generator);
    s("cache_weight", c.icl.cache_weight);
    s("zero_shot_comparator", c.icl.zero_shot_comparator);
    s("http_timeout_s", c.icl.http_timeout_s);
    s.section("prompt", [&](auto& t) { visit_prompt(t, c.icl.prompt); });
  });
  v.section("eval", [&](auto& s) { s("k", c.eval_k); });
  v("seeds", c.seeds);
  v("output_dir", c.output_dir);
}

/// "a.b.c=value": value is parsed as JSON when possible, else taken as a string.
inline void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &j;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t k = 0; k + 1 < parts.size(); ++k) {
    if (!node->is_object()) throw ConfigError("override path crosses a non-object: " + path);
    node = &(*node)[parts[k]];
    if (node->is_null()) *node = nlohmann::json::object();
  }
  if (!node->is_object()) throw ConfigError("override path crosses a non-object: " + path);
  (*node)[parts.back()] = std::move(value);
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::JsonIn in(j, "config");
  detail::visit_config(in, c);
  in.finish();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  detail::JsonOut out(j);
  detail::visit_config(out, c);
  return j;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(e.byte, path.string() + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  for (const auto& o : overrides) detail::apply_override(j, o);
  return config_from_json(j);
}

// ---------------------------------------------------------------------------
// Stages

enum class Stage { kGenData, kTrainRec, kBuildSurrogate, kAttack2ft, kAttackIcl, kEvaluate };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::kGenData,   Stage::kTrainRec,  Stage::kBuildSurrogate,
                                    Stage::kAttack2ft, Stage::kAttackIcl, Stage::kEvaluate};
  return s;
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTrainRec: return "train-rec";
    case Stage::kBuildSurrogate: return "build-surrogate";
    case Stage::kAttack2ft: return "attack-2ft";
    case Stage::kAttackIcl: return "attack-icl";
    case Stage::kEvaluate: return "evaluate";
  }
  return "?";
}

inline Stage stage_from_name(const std::string& n) {
  for (auto s : all_stages())
    if (stage_name(s) == n) return s;
  throw ConfigError("unknown stage \"" + n + "\"");
}

inline bool stage_applies(const ExperimentConfig& c, Stage s) {
  switch (s) {
    case Stage::kBuildSurrogate: return c.mode == "2ft-black";
    case Stage::kAttack2ft: return c.mode != "none";
    case Stage::kAttackIcl: return c.mode == "icl";
    default: return true;
  }
}

/// Rewrite sets produced for this config, main variant first.
inline std::vector<std::string> rewrite_variants(const ExperimentConfig& c) {
  if (c.mode == "none") return {};
  if (c.mode == "icl") {
    std::vector<std::string> v{"icl"};
    if (c.icl.zero_shot_comparator) v.push_back("icl_zero_shot");
    v.push_back("both");
    return v;
  }
  std::vector<std::string> v{c.ablation};
  if (c.run_ablations)
    for (const char* a : {"both", "phase2_only", "phase1_only"})
      if (a != c.ablation) v.push_back(a);
  return v;
}

inline std::vector<std::string> twoft_variants(const ExperimentConfig& c) {
  if (c.mode == "icl") return {"both"};
  std::vector<std::string> out;
  for (const auto& v : rewrite_variants(c))
    if (v.rfind("icl", 0) != 0) out.push_back(v);
  return out;
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp);
    out << text;
  }
  std::filesystem::rename(tmp, path);
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline void require_artifact(const std::filesystem::path& p, Stage producer) {
  if (!std::filesystem::exists(p))
    throw DataError("missing artifact " + p.string() + " (produced by stage " + stage_name(producer) + ")");
}

inline std::string seed_dir_name(std::uint64_t s) { return "seed-" + std::to_string(s); }

}  // namespace detail

/// Everything derived from the stored dataset of one seed.
struct SeedData {
  Dataset ds;
  Vocabulary vocab;
  std::vector<Tokens> descs;
  std::vector<std::size_t> targets;
  std::vector<std::size_t> users;
};

class Pipeline {
 public:
  explicit Pipeline(ExperimentConfig cfg, std::ostream* log = &std::clog) : cfg_(std::move(cfg)), log_(log) {
    cfg_.validate();
    root_ = cfg_.output_dir;
    nlohmann::json j = to_json(cfg_);
    config_text_ = j.dump(2);
    // Where a run is written does not change what it computes.
    j.erase("output_dir");
    config_hash_ = hash_text(j.dump());
  }

  const ExperimentConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path seed_dir(std::uint64_t s) const { return root_ / detail::seed_dir_name(s); }
  std::filesystem::path report_path() const { return root_ / "report.json"; }

  /// Runs every applicable stage that is not yet complete, then the report.
  nlohmann::json run_all() {
    for (auto s : cfg_.seeds)
      for (auto st : all_stages())
        if (stage_applies(cfg_, st) && !is_done(s, st)) run_stage(st, s);
    return report();
  }

  /// Runs one stage for every seed. Earlier applicable stages must be done.
  void run_stage_all_seeds(Stage st) {
    for (auto s : cfg_.seeds) run_stage(st, s);
  }

  void run_stage(Stage st, std::uint64_t seed) {
    open_progress();
    if (!stage_applies(cfg_, st)) {
      say(detail::seed_dir_name(seed) + ": " + stage_name(st) + " does not apply to mode " + cfg_.mode);
      return;
    }
    for (auto prev : all_stages()) {
      if (prev == st) break;
      if (stage_applies(cfg_, prev) && !is_done(seed, prev))
        throw ContractError("stage " + stage_name(st) + " needs " + stage_name(prev) + " for seed " +
                            std::to_string(seed));
    }
    say(detail::seed_dir_name(seed) + ": " + stage_name(st));
    const auto d = seed_dir(seed);
    std::filesystem::create_directories(d);
    switch (st) {
      case Stage::kGenData: gen_data(seed, d); break;
      case Stage::kTrainRec: train_rec_stage(seed, d); break;
      case Stage::kBuildSurrogate: build_surrogate(seed, d); break;
      case Stage::kAttack2ft: attack_2ft(seed, d); break;
      case Stage::kAttackIcl: attack_icl(seed, d); break;
      case Stage::kEvaluate: evaluate(seed, d); break;
    }
    mark_done(seed, st);
  }

  bool is_done(std::uint64_t seed, Stage st) {
    open_progress();
    const auto key = detail::seed_dir_name(seed);
    if (!progress_["done"].contains(key)) return false;
    for (const auto& s : progress_["done"][key])
      if (s.get<std::string>() == stage_name(st)) return true;
    return false;
  }

  /// Aggregates per-seed metrics into report.json and ranks.csv.
  nlohmann::json report() {
    open_progress();
    for (auto s : cfg_.seeds)
      if (!is_done(s, Stage::kEvaluate))
        throw ContractError("report needs evaluate for seed " + std::to_string(s));
    say("report");
    std::vector<nlohmann::json> per_seed;
    for (auto s : cfg_.seeds) per_seed.push_back(read_json_file(seed_dir(s) / "metrics.json"));
    nlohmann::json out = build_full_report(per_seed);
    detail::write_json(report_path(), out);
    std::string csv = "seed,variant,item,rank_before,rank_after,score_gain,cosine,perplexity_original,perplexity_rewritten\n";
    for (auto s : cfg_.seeds) {
      std::ifstream in(seed_dir(s) / "ranks.csv");
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) csv += std::to_string(s) + "," + line + "\n";
    }
    detail::write_text(root_ / "ranks.csv", csv);
    return out;
  }

 private:
  void say(const std::string& msg) const {
    if (log_) *log_ << "[atr] " << msg << std::endl;
  }

  // ---- progress marker -----------------------------------------------------

  void open_progress() {
    if (progress_loaded_) return;
    std::filesystem::create_directories(root_);
    const auto p = root_ / "progress.json";
    if (std::filesystem::exists(p)) {
      progress_ = read_json_file(p);
      if (progress_.value("config_hash", "") != config_hash_)
        throw ConfigError("output directory " + root_.string() +
                          " holds a run with a different config; choose another output_dir");
    } else {
      progress_ = {{"config_hash", config_hash_}, {"done", nlohmann::json::object()}};
      detail::write_text(root_ / "config.resolved.json", config_text_ + "\n");
      detail::write_json(p, progress_);
    }
    progress_loaded_ = true;
  }

  void mark_done(std::uint64_t seed, Stage st) {
    auto& list = progress_["done"][detail::seed_dir_name(seed)];
    if (!list.is_array()) list = nlohmann::json::array();
    list.push_back(stage_name(st));
    detail::write_json(root_ / "progress.json", progress_);
  }

  // ---- shared loaders ------------------------------------------------------

  AttackConfig attack_cfg(std::uint64_t seed) const {
    AttackConfig a = cfg_.attack;
    a.seed = seed;
    return a;
  }

  SeedData load_seed_data(std::uint64_t seed, const std::filesystem::path& d) const {
    detail::require_artifact(d / "data", Stage::kGenData);
    SeedData sd;
    sd.ds = load_dataset(d / "data");
    sd.vocab = Vocabulary::build(sd.ds.descriptions());
    for (const auto& w : sd.ds.descriptions()) sd.descs.push_back(sd.vocab.encode(w));
    sd.targets = select_targets(sd.ds.num_items(), attack_cfg(seed)).items;
    sd.users.resize(sd.ds.num_users);
    std::iota(sd.users.begin(), sd.users.end(), 0);
    return sd;
  }

  TinyLM load_lm_checked(const std::filesystem::path& p, Stage producer) const {
    detail::require_artifact(p, producer);
    return load_lm(p).first;
  }

  /// Calls f with the recommender stored at `p`.
  template <class F>
  auto with_rec(const std::filesystem::path& p, const TextEmbeddings& embs, F&& f) const {
    detail::require_artifact(p, Stage::kTrainRec);
    if (cfg_.rec.family == "conventional") return f(load_conventional(p));
    return f(load_sequential(p, embs));
  }

  std::vector<Tokens> load_rewrites(const std::filesystem::path& p, const SeedData& sd, Stage producer) const {
    detail::require_artifact(p, producer);
    std::ifstream in(p);
    std::map<std::size_t, Tokens> by_item;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      try {
        const auto j = nlohmann::json::parse(line);
        by_item[j.at("item").get<std::size_t>()] = sd.vocab.encode(normalize_words(j.at("rewritten").get<std::string>()));
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(n, p.string() + ": " + e.what());
      }
    }
    std::vector<Tokens> out;
    for (auto t : sd.targets) {
      auto it = by_item.find(t);
      if (it == by_item.end()) throw DataError(p.string() + " lacks target " + std::to_string(t));
      out.push_back(it->second);
    }
    return out;
  }

  void save_rewrites(const std::filesystem::path& p, const SeedData& sd, const std::vector<Tokens>& rewrites) const {
    std::string text;
    for (std::size_t k = 0; k < sd.targets.size(); ++k) {
      nlohmann::json j{{"item", sd.targets[k]},
                       {"original", join_words(sd.vocab.decode(sd.descs[sd.targets[k]]))},
                       {"rewritten", join_words(sd.vocab.decode(rewrites[k]))}};
      text += j.dump() + "\n";
    }
    detail::write_text(p, text);
  }

  std::vector<TargetText> target_texts(const SeedData& sd) const {
    std::vector<TargetText> out;
    for (auto t : sd.targets) out.push_back(make_target_text(t, sd.descs[t], cfg_.attack.prompt_fraction));
    return out;
  }

  /// Items whose descriptions are kept out of Phase 1. Targets always stay in.
  std::vector<std::size_t> heldout_items(std::uint64_t seed, const SeedData& sd) const {
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < sd.ds.num_items(); ++i)
      if (std::find(sd.targets.begin(), sd.targets.end(), i) == sd.targets.end()) pool.push_back(i);
    const auto n = static_cast<std::size_t>(std::floor(cfg_.lm.heldout_fraction * static_cast<double>(pool.size())));
    Rng rng = derive_rng(seed, 0x4e1);
    std::vector<std::size_t> out;
    for (auto k : sample_without_replacement(rng, pool.size(), n)) out.push_back(pool[k]);
    std::sort(out.begin(), out.end());
    return out;
  }

  // ---- stages --------------------------------------------------------------

  void gen_data(std::uint64_t seed, const std::filesystem::path& d) const {
    Dataset ds = cfg_.synthetic ? generate_synthetic(*cfg_.synthetic) : ingest_jsonl(*cfg_.jsonl, cfg_.ingest);
    ds = split(std::move(ds), cfg_.split, seed);
    save_dataset(ds, d / "data");
  }

  void train_rec_stage(std::uint64_t seed, const std::filesystem::path& d) const {
    const SeedData sd = load_seed_data(seed, d);
    const TinyLM base(LmShape{sd.vocab.size(), cfg_.lm.dim, cfg_.lm.context, cfg_.lm.hidden}, seed);
    save_lm(d / "lm_base.json", base, sd.vocab);
    const TextEncoder enc = TextEncoder::from_lm(base);
    const ItemTextCache cache(enc, sd.descs);
    RecTrainConfig rc = cfg_.rec.train;
    rc.seed = seed;
    nlohmann::json log;
    if (cfg_.rec.family == "conventional") {
      double mean = 0.0;
      for (auto k : sd.ds.splits.train) mean += sd.ds.interactions[k].rating;
      mean /= static_cast<double>(std::max<std::size_t>(1, sd.ds.splits.train.size()));
      auto m = make_conventional(sd.ds.num_users, sd.ds.num_items(), cfg_.rec.factors, cfg_.lm.dim, mean, seed,
                                 rc.init_std);
      const auto tl = train_rec(m, sd.ds.train(), sd.ds.val(), cache.embeddings(), rc);
      log = {{"train_loss", tl.train_loss}, {"val_rmse", tl.val_metric}, {"best_epoch", tl.best_epoch}};
      save_rec(d / "rec.json", m);
      log["fingerprint"] = m.fingerprint();
    } else {
      auto m = make_sequential(sd.ds.num_items(), cfg_.rec.factors, cfg_.lm.dim, cfg_.rec.window, cfg_.rec.alpha,
                               seed, rc.init_std);
      const auto tl = train_rec(m, sd.ds, cache.embeddings(), rc);
      log = {{"train_loss", tl.train_loss}, {"val_loss", tl.val_metric}, {"best_epoch", tl.best_epoch}};
      save_rec(d / "rec.json", m);
      log["fingerprint"] = m.fingerprint();
    }
    detail::write_json(d / "rec_log.json", log);

    // Phase 1 does not look at the recommender, so its LM is trained once
    // here and shared by every attack variant and by the perplexity metrics.
    const auto held = heldout_items(seed, sd);
    std::vector<Tokens> train_descs, held_descs;
    for (std::size_t i = 0; i < sd.descs.size(); ++i)
      (std::binary_search(held.begin(), held.end(), i) ? held_descs : train_descs).push_back(sd.descs[i]);
    TinyLM lm1 = base;
    const auto pl = phase1_finetune(lm1, train_descs, attack_cfg(seed));
    save_lm(d / "lm_phase1.json", lm1, sd.vocab);
    nlohmann::json lj{{"heldout_items", held.size()}};
    std::vector<double> nll;
    for (const auto& e : pl.epochs) nll.push_back(e.text_gen_loss);
    lj["phase1_nll"] = nll;
    if (!held_descs.empty()) {
      lj["heldout_perplexity_base"] = corpus_perplexity(base, held_descs);
      lj["heldout_perplexity_phase1"] = corpus_perplexity(lm1, held_descs);
    }
    detail::write_json(d / "lm_eval.json", lj);
  }

  static double corpus_perplexity(const TinyLM& lm, const std::vector<Tokens>& descs) {
    std::vector<Window> w;
    for (const auto& t : descs) {
      auto f = framed_windows(t, lm.context());
      w.insert(w.end(), f.begin(), f.end());
    }
    return std::exp(lm_loss(lm, w));
  }

  void build_surrogate(std::uint64_t seed, const std::filesystem::path& d) const {
    const SeedData sd = load_seed_data(seed, d);
    const TinyLM base = load_lm_checked(d / "lm_base.json", Stage::kTrainRec);
    const TextEncoder enc = TextEncoder::from_lm(base);
    const ItemTextCache cache(enc, sd.descs);
    RecTrainConfig rc = cfg_.surrogate.train;
    rc.seed = seed;
    const auto& sc = cfg_.surrogate;
    with_rec(d / "rec.json", cache.embeddings(), [&](const auto& bbm) {
      using M = std::decay_t<decltype(bbm)>;
      BlackBox<M> bb(bbm, cache, sc.blackbox_fold_in_reg);
      SurrogateTrainSet x;
      if constexpr (BlackBox<M>::kSequential)
        x = gen_fake_profiles_adg(bb, sc.num_profiles, sc.profile_length, sc.adg_top_k, seed);
      else
        x = gen_fake_profiles_ric(bb, sc.num_profiles, sc.profile_length, seed);
      save_surrogate_data(x, d / "surrogate");
      nlohmann::json j;
      j["queries"] = {{"top_k", bb.log().count(Access::kTopK)},
                      {"rank", bb.log().count(Access::kRank)},
                      {"score", bb.log().count(Access::kScore)}};
      const std::uint64_t sur_seed = seed + 100;
      if constexpr (BlackBox<M>::kSequential) {
        auto sur = make_sequential(bbm.num_items(), cfg_.rec.factors, cfg_.lm.dim, cfg_.rec.window, cfg_.rec.alpha,
                                   sur_seed, rc.init_std);
        const auto tr = train_surrogate(sur, x, cache.embeddings(), rc);
        j["final_loss"] = tr.final_loss;
        save_rec(d / "surrogate.json", sur);
        j["fidelity"] = to_json(surrogate_fidelity(bbm, sur, sd.targets, cache.embeddings(), 50));
      } else {
        double mean = 0.0;
        for (const auto& r : x.records) mean += r.score;
        mean /= static_cast<double>(x.records.size());
        auto sur = make_conventional(x.num_users, bbm.num_items(), cfg_.rec.factors, cfg_.lm.dim, mean, sur_seed,
                                     rc.init_std);
        const auto tr = train_surrogate(sur, x, cache.embeddings(), rc);
        j["final_loss"] = tr.final_loss;
        save_rec(d / "surrogate.json", sur);
        j["fidelity"] = to_json(surrogate_fidelity(bbm, sur, sd.ds.train(), sd.ds.test(), cache.embeddings(),
                                                   sc.fidelity_fold_in_reg));
      }
      detail::write_json(d / "surrogate_log.json", j);
      return 0;
    });
  }

  void attack_2ft(std::uint64_t seed, const std::filesystem::path& d) const {
    const SeedData sd = load_seed_data(seed, d);
    const TinyLM base = load_lm_checked(d / "lm_base.json", Stage::kTrainRec);
    const TinyLM lm1 = load_lm_checked(d / "lm_phase1.json", Stage::kTrainRec);
    const TextEncoder enc = TextEncoder::from_lm(base);
    const ItemTextCache cache(enc, sd.descs);
    const auto targets = target_texts(sd);
    const bool black = cfg_.mode == "2ft-black";
    AttackConfig ac = attack_cfg(seed);
    if (black) ac.lambda = cfg_.surrogate.lambda;
    // In black-box mode only the surrogate is loaded; the deployed model's
    // checkpoint is never opened here.
    const auto rec_path = black ? d / "surrogate.json" : d / "rec.json";
    if (black) detail::require_artifact(rec_path, Stage::kBuildSurrogate);
    nlohmann::json logs = nlohmann::json::object();
    with_rec(rec_path, cache.embeddings(), [&](const auto& rec) {
      std::vector<std::size_t> pool(rec.num_users());
      std::iota(pool.begin(), pool.end(), 0);
      for (const auto& variant : twoft_variants(cfg_)) {
        TinyLM lm = variant == "phase2_only" ? base : lm1;
        if (variant != "phase1_only") {
          const auto pl = phase2_finetune(lm, rec, enc, cache.embeddings(), sd.descs, targets, pool, ac);
          nlohmann::json ep = nlohmann::json::array();
          for (const auto& e : pl.epochs)
            ep.push_back({{"epoch", e.epoch},
                          {"text_gen_loss", e.text_gen_loss},
                          {"promotion_loss", e.promotion_loss},
                          {"val_promotion_loss", e.val_promotion_loss}});
          logs[variant] = {{"epochs", ep}, {"early_stopped", pl.early_stopped}};
        }
        std::vector<Tokens> rw;
        for (const auto& t : targets) {
          DecodeConfig dc = ac.decode;
          dc.seed = derive_rng(seed, 0x4e3, t.item)();
          rw.push_back(rewrite_description(lm, t, dc));
        }
        save_rewrites(d / ("rewrites_" + variant + ".jsonl"), sd, rw);
      }
      return 0;
    });
    detail::write_json(d / "attack_log.json", logs);
  }

  std::unique_ptr<TextGenerator> make_generator(const TinyLM& lm, const Vocabulary& vocab) const {
    if (cfg_.icl.generator == "tiny-lm") return std::make_unique<TinyLmGenerator>(lm, vocab);
    if (cfg_.icl.generator == "http")
      return std::make_unique<SerializedGenerator>(std::make_shared<HttpGenerator>(
          HttpGenerator::from_env(std::chrono::seconds(cfg_.icl.http_timeout_s))));
    return std::make_unique<PromptCacheGenerator>(lm, vocab, cfg_.icl.cache_weight, cfg_.icl.prompt.rewritten_label);
  }

  void attack_icl(std::uint64_t seed, const std::filesystem::path& d) const {
    const SeedData sd = load_seed_data(seed, d);
    const TinyLM lm1 = load_lm_checked(d / "lm_phase1.json", Stage::kTrainRec);
    const auto pool_rw = load_rewrites(d / "rewrites_both.jsonl", sd, Stage::kAttack2ft);
    std::vector<std::pair<std::size_t, RewritePair>> pairs;
    for (std::size_t k = 0; k < sd.targets.size(); ++k)
      pairs.push_back({sd.targets[k],
                       {join_words(sd.vocab.decode(sd.descs[sd.targets[k]])), join_words(sd.vocab.decode(pool_rw[k]))}});
    const FewShotPool pool(std::move(pairs));
    const auto gen = make_generator(lm1, sd.vocab);
    const auto targets = target_texts(sd);
    std::vector<std::pair<std::string, std::size_t>> runs{{"icl", cfg_.icl.k}};
    if (cfg_.icl.zero_shot_comparator) runs.push_back({"icl_zero_shot", 0});
    for (const auto& [variant, k] : runs) {
      std::vector<Tokens> rw;
      std::string prompts;
      for (const auto& t : targets) {
        // Examples never include the target's own rewrite.
        const auto ex = sample_examples(pool, k, seed, t.item, t.item);
        const auto p = build_prompt(cfg_.icl.prompt, ex, join_words(sd.vocab.decode(t.tokens)), t.prefix);
        const std::string text = p.render();
        DecodeConfig dc = cfg_.attack.decode;
        dc.seed = derive_rng(seed, 0x4e3, t.item)();
        const std::size_t budget = std::min(t.tokens.size(), kMaxDescriptionWords);
        dc.max_new_tokens = budget > t.prefix ? budget - t.prefix : 0;
        dc.min_new_tokens = std::min(dc.min_new_tokens, dc.max_new_tokens);
        Words words = normalize_words(p.prefill);
        if (dc.max_new_tokens > 0) {
          const Words g = rewrite_via_generator(*gen, text, dc);
          words.insert(words.end(), g.begin(), g.end());
        }
        rw.push_back(sd.vocab.encode(truncate_description(words)));
        prompts += nlohmann::json{{"item", t.item}, {"prompt_hash", hash_text(text)}, {"prompt", text}}.dump() + "\n";
      }
      save_rewrites(d / ("rewrites_" + variant + ".jsonl"), sd, rw);
      detail::write_text(d / ("prompts_" + variant + ".jsonl"), prompts);
    }
  }

  void evaluate(std::uint64_t seed, const std::filesystem::path& d) const {
    const SeedData sd = load_seed_data(seed, d);
    const TinyLM base = load_lm_checked(d / "lm_base.json", Stage::kTrainRec);
    const TinyLM evaluator = load_lm_checked(d / "lm_phase1.json", Stage::kTrainRec);
    const TextEncoder enc = TextEncoder::from_lm(base);
    const ItemTextCache cache(enc, sd.descs);
    const auto tt = target_texts(sd);
    nlohmann::json out;
    out["seed"] = seed;
    out["targets"] = sd.targets;
    out["lm"] = read_json_file(d / "lm_eval.json");
    out["lm"].erase("phase1_nll");
    if (cfg_.mode == "2ft-black") out["surrogate"] = read_json_file(d / "surrogate_log.json");
    std::string csv = "variant,item,rank_before,rank_after,score_gain,cosine,perplexity_original,perplexity_rewritten\n";
    with_rec(d / "rec.json", cache.embeddings(), [&](const auto& m) {
      SeedMetrics base_m;
      base_m.seed = seed;
      base_m.num_candidates = sd.ds.num_items();
      base_m.avg_rank_before = avg_predicted_rank(m, sd.targets, sd.users, cache.embeddings());
      base_m.rank_ratio_before = rank_ratio(base_m.avg_rank_before, base_m.num_candidates);
      base_m.appear_before = appear_at_k(m, sd.targets, sd.users, cfg_.eval_k, cache.embeddings());
      if constexpr (std::is_same_v<std::decay_t<decltype(m)>, ConventionalRec>)
        base_m.rmse_before = rmse(m, sd.ds.test(), cache.embeddings());
      Vec ppl_orig;
      for (auto t : sd.targets) ppl_orig.push_back(description_perplexity(evaluator, sd.descs[t]));
      base_m.perplexity_original = mean(ppl_orig);
      out["rec_fingerprint"] = m.fingerprint();
      out["rec_fingerprint_trained"] = read_json_file(d / "rec_log.json").at("fingerprint");

      nlohmann::json variants = nlohmann::json::object();
      nlohmann::json per_target = nlohmann::json::object();
      variants["original"] = detail::seed_json(base_m, true);
      for (const auto& v : rewrite_variants(cfg_)) {
        const Stage producer = v.rfind("icl", 0) == 0 ? Stage::kAttackIcl : Stage::kAttack2ft;
        const auto rw = load_rewrites(d / ("rewrites_" + v + ".jsonl"), sd, producer);
        const auto rr = score_rewrites(m, cache, tt, rw, sd.users);
        ItemTextCache after = cache;
        for (std::size_t k = 0; k < tt.size(); ++k) after.set_description(tt[k].item, rw[k]);
        SeedMetrics sm = base_m;
        Vec rb, ra, sb, sa, cos, ppl, gain;
        for (std::size_t k = 0; k < rr.size(); ++k) {
          const auto& r = rr[k];
          rb.push_back(r.rank_before);
          ra.push_back(r.rank_after);
          sb.insert(sb.end(), r.score_before.begin(), r.score_before.end());
          sa.insert(sa.end(), r.score_after.begin(), r.score_after.end());
          double g = 0.0;
          for (std::size_t u = 0; u < r.score_before.size(); ++u) g += r.score_after[u] - r.score_before[u];
          gain.push_back(g / static_cast<double>(r.score_before.size()));
          cos.push_back(cosine_similarity(enc.embed(r.original), enc.embed(r.rewritten)));
          ppl.push_back(description_perplexity(evaluator, r.rewritten));
          std::ostringstream row;
          row.precision(17);
          row << v << ',' << r.item_id << ',' << r.rank_before << ',' << r.rank_after << ',' << gain.back() << ','
              << cos.back() << ',' << ppl_orig[k] << ',' << ppl.back() << '\n';
          csv += row.str();
        }
        sm.avg_rank_after = avg_predicted_rank(m, sd.targets, sd.users, after.embeddings());
        sm.rank_ratio_after = rank_ratio(*sm.avg_rank_after, sm.num_candidates);
        sm.appear_after = appear_at_k(m, sd.targets, sd.users, cfg_.eval_k, after.embeddings());
        if constexpr (std::is_same_v<std::decay_t<decltype(m)>, ConventionalRec>)
          sm.rmse_after = rmse(m, sd.ds.test(), after.embeddings());
        sm.promotion_success_rate = promotion_success_rate(sb, sa);
        sm.semantic_similarity = mean(cos);
        sm.perplexity_rewritten = mean(ppl);
        if (rb.size() >= 2) {
          const auto tr = one_tailed_t_test(rb, ra);
          sm.t_statistic = tr.t;
          sm.p_value = tr.p;
          sm.degenerate = tr.degenerate;
        }
        variants[v] = detail::seed_json(sm, true);
        per_target[v] = {{"rank_before", rb}, {"rank_after", ra}, {"score_gain", gain}, {"cosine", cos}};
      }
      if (m.fingerprint() != out["rec_fingerprint"].get<std::string>())
        throw ContractError("recommender parameters changed during evaluation");
      out["variants"] = variants;
      out["per_target"] = per_target;
      return 0;
    });
    detail::write_json(d / "metrics.json", out);
    detail::write_text(d / "ranks.csv", csv);
  }

  // ---- report --------------------------------------------------------------

  static SeedMetrics seed_metrics_from_json(const nlohmann::json& j) {
    SeedMetrics m;
    auto opt = [&](const char* k) -> std::optional<double> {
      if (!j.contains(k) || j.at(k).is_null()) return std::nullopt;
      return j.at(k).get<double>();
    };
    m.seed = j.at("seed").get<std::uint64_t>();
    m.num_candidates = j.at("num_candidates").get<std::size_t>();
    m.avg_rank_before = j.at("avg_predicted_rank_before").get<double>();
    m.rank_ratio_before = j.at("rank_ratio_before").get<double>();
    m.appear_before = j.at("appear_at_k_before").get<double>();
    m.rmse_before = opt("rmse_overall_before");
    m.perplexity_original = j.at("perplexity_original").get<double>();
    m.avg_rank_after = opt("avg_predicted_rank_after");
    m.rank_ratio_after = opt("rank_ratio_after");
    m.appear_after = opt("appear_at_k_after");
    m.promotion_success_rate = opt("promotion_success_rate");
    m.semantic_similarity = opt("semantic_similarity");
    m.perplexity_rewritten = opt("perplexity_rewritten");
    m.rmse_after = opt("rmse_overall_after");
    m.t_statistic = opt("t_statistic");
    m.p_value = opt("p_value");
    if (j.contains("degenerate") && !j.at("degenerate").is_null()) m.degenerate = j.at("degenerate").get<bool>();
    return m;
  }

  static Vec pooled(const std::vector<nlohmann::json>& seeds, const std::string& variant, const char* field) {
    Vec out;
    for (const auto& s : seeds) {
      const auto v = s.at("per_target").at(variant).at(field).get<Vec>();
      out.insert(out.end(), v.begin(), v.end());
    }
    return out;
  }

  nlohmann::json build_full_report(const std::vector<nlohmann::json>& seeds) const {
    nlohmann::json out;
    out["mode"] = cfg_.mode;
    out["recommender"] = cfg_.rec.family;
    out["k"] = cfg_.eval_k;
    out["seeds"] = cfg_.seeds;
    out["config_hash"] = config_hash_;
    auto variant_report = [&](const std::string& v) {
      std::vector<SeedMetrics> per;
      for (const auto& s : seeds) per.push_back(seed_metrics_from_json(s.at("variants").at(v)));
      if (v == "original") return to_json(build_report(v, cfg_.eval_k, per));
      const Vec rb = pooled(seeds, v, "rank_before"), ra = pooled(seeds, v, "rank_after");
      return to_json(build_report(v, cfg_.eval_k, per, rb, ra));
    };
    out["original"] = variant_report("original");
    const auto variants = rewrite_variants(cfg_);
    out["variants"] = nlohmann::json::object();
    for (const auto& v : variants) out["variants"][v] = variant_report(v);
    if (!variants.empty()) out["main_variant"] = variants.front();

    // Pooled one-tailed comparisons over (seed, target) pairs.
    nlohmann::json cmp = nlohmann::json::array();
    auto has = [&](const char* v) { return std::find(variants.begin(), variants.end(), v) != variants.end(); };
    auto compare = [&](const std::string& better, const std::string& worse, const char* field, bool higher) {
      const Vec b = pooled(seeds, better, field), w = pooled(seeds, worse, field);
      // H1: `better` is lower (ranks) or higher (gains) than `worse`.
      const auto tr = higher ? one_tailed_t_test(b, w) : one_tailed_t_test(w, b);
      cmp.push_back({{"better", better},
                     {"worse", worse},
                     {"metric", field},
                     {"n", b.size()},
                     {"mean_better", mean(b)},
                     {"mean_worse", mean(w)},
                     {"t_statistic", tr.t},
                     {"p_value", tr.p}});
    };
    if (has("both") && has("phase2_only")) compare("both", "phase2_only", "rank_after", false);
    if (has("phase2_only") && has("phase1_only")) compare("phase2_only", "phase1_only", "rank_after", false);
    if (has("icl") && has("icl_zero_shot")) compare("icl", "icl_zero_shot", "score_gain", true);
    if (has("icl") && has("both")) compare("both", "icl", "rank_after", false);
    out["comparisons"] = cmp;

    nlohmann::json lm = nlohmann::json::array();
    for (const auto& s : seeds) {
      nlohmann::json e{{"seed", s.at("seed")}};
      e.update(s.at("lm"));
      lm.push_back(std::move(e));
    }
    out["language_model"] = lm;
    if (cfg_.mode == "2ft-black") {
      nlohmann::json f = nlohmann::json::array();
      double change = 0.0;
      for (const auto& s : seeds) {
        f.push_back({{"seed", s.at("seed")}, {"fidelity", s.at("surrogate").at("fidelity")},
                     {"queries", s.at("surrogate").at("queries")}});
        change += s.at("surrogate").at("fidelity").at("relative_change").get<double>();
      }
      out["surrogate"] = {{"per_seed", f}, {"mean_relative_change", change / static_cast<double>(seeds.size())}};
    }
    nlohmann::json fp = nlohmann::json::array();
    for (const auto& s : seeds)
      fp.push_back({{"seed", s.at("seed")}, {"trained", s.at("rec_fingerprint_trained")},
                    {"evaluated", s.at("rec_fingerprint")}});
    out["rec_fingerprints"] = fp;
    return out;
  }

  ExperimentConfig cfg_;
  std::ostream* log_;
  std::filesystem::path root_;
  std::string config_text_;
  std::string config_hash_;
  nlohmann::json progress_;
  bool progress_loaded_ = false;
};

}  // namespace atr
