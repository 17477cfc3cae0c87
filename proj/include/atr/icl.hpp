#pragma once

#include <chrono>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "atr/corpus.hpp"
#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/textenc.hpp"

namespace atr {

// ---------------------------------------------------------------------------
// Prompt structure

struct RewritePair {
  std::string original;
  std::string rewritten;
};

struct PromptText {
  std::string system_message =
      "You are a copywriter for an online catalogue. You edit product descriptions so they read "
      "well to shoppers while staying accurate about the product.";
  std::string task_instruction = "Rewrite the product description given below.";
  std::string style_clause = "Write in the same style as the example rewrites shown above.";
  std::string relevance_clause =
      "Keep the rewrite about the same product as the original and do not add facts that it does not state.";
  std::string original_label = "Original description:";
  std::string rewritten_label = "Rewritten description:";

  void validate() const {
    if (system_message.empty() || task_instruction.empty()) throw ConfigError("prompt text sections must be non-empty");
    if (style_clause.empty() || relevance_clause.empty()) throw ConfigError("both constraint clauses are required");
    if (original_label.empty() || rewritten_label.empty()) throw ConfigError("example labels must be non-empty");
  }
};

struct PromptTemplate {
  PromptText text;
  std::vector<RewritePair> examples;
  std::string target_description;
  // Leading words of the target placed after the final label, so the
  // generator continues from the original opening.
  std::string prefill;

  /// Pure: same fields give byte-identical text. Order is system, examples, task.
  std::string render() const {
    std::string s = text.system_message + "\n\n";
    for (std::size_t k = 0; k < examples.size(); ++k) {
      s += "Example " + std::to_string(k + 1) + "\n";
      s += text.original_label + " " + examples[k].original + "\n";
      s += text.rewritten_label + " " + examples[k].rewritten + "\n\n";
    }
    s += text.task_instruction + "\n";
    s += "- " + text.style_clause + "\n";
    s += "- " + text.relevance_clause + "\n\n";
    s += text.original_label + " " + target_description + "\n";
    s += text.rewritten_label;
    if (!prefill.empty()) s += " " + prefill;
    return s;
  }
};

class FewShotPool {
 public:
  explicit FewShotPool(std::vector<std::pair<std::size_t, RewritePair>> pairs) : pairs_(std::move(pairs)) {
    if (pairs_.empty()) throw DataError("few-shot pool is empty");
    std::set<std::string> seen;
    for (const auto& [item, p] : pairs_)
      if (!seen.insert(p.original).second) throw DataError("few-shot pool has duplicate originals");
  }

  std::size_t size() const { return pairs_.size(); }
  const std::vector<std::pair<std::size_t, RewritePair>>& pairs() const { return pairs_; }

 private:
  std::vector<std::pair<std::size_t, RewritePair>> pairs_;  // (source item, pair)
};

inline constexpr std::size_t kNoItem = static_cast<std::size_t>(-1);

/// k distinct pairs, uniform without replacement, fixed per (seed, item).
/// Pairs harvested from `exclude_item` itself are left out of the draw.
inline std::vector<RewritePair> sample_examples(const FewShotPool& pool, std::size_t k, std::uint64_t seed,
                                                std::size_t item, std::size_t exclude_item = kNoItem) {
  std::vector<std::size_t> eligible;
  for (std::size_t j = 0; j < pool.size(); ++j)
    if (pool.pairs()[j].first != exclude_item || exclude_item == kNoItem) eligible.push_back(j);
  if (k > eligible.size())
    throw ConfigError("asked for " + std::to_string(k) + " examples from a pool of " +
                      std::to_string(eligible.size()));
  Rng rng = derive_rng(seed, 0x1c1, item);
  std::vector<RewritePair> out;
  for (auto j : sample_without_replacement(rng, eligible.size(), k)) out.push_back(pool.pairs()[eligible[j]].second);
  return out;
}

inline PromptTemplate build_prompt(const PromptText& text, std::vector<RewritePair> examples,
                                   const std::string& target_description, std::size_t prefill_words = 0) {
  text.validate();
  const Words w = normalize_words(target_description);
  if (w.empty()) throw DataError("target description is empty");
  PromptTemplate p;
  p.text = text;
  p.examples = std::move(examples);
  p.target_description = target_description;
  p.prefill = join_words(Words(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(std::min(prefill_words, w.size()))));
  return p;
}

// ---------------------------------------------------------------------------
// Generators

class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  /// Continuation text for the prompt. Throws on failure.
  virtual std::string generate(const std::string& prompt, const DecodeConfig& cfg) const = 0;
  virtual std::string name() const = 0;
};

/// Returns a fixed text regardless of the prompt.
class EchoGenerator : public TextGenerator {
 public:
  explicit EchoGenerator(std::string text) : text_(std::move(text)) {}
  std::string generate(const std::string&, const DecodeConfig&) const override { return text_; }
  std::string name() const override { return "echo"; }

 private:
  std::string text_;
};

namespace detail {

/// In-vocabulary tokens of a prompt; words the vocabulary lacks are dropped.
inline Tokens known_tokens(const Vocabulary& vocab, const std::string& prompt) {
  Tokens out{kBos};
  for (const auto& w : normalize_words(prompt))
    if (vocab.contains(w)) out.push_back(vocab.id(w));
  return out;
}

}  // namespace detail

/// Tiny LM conditioned on the last window of in-vocabulary prompt tokens.
class TinyLmGenerator : public TextGenerator {
 public:
  TinyLmGenerator(const TinyLM& lm, const Vocabulary& vocab) : lm_(lm), vocab_(vocab) {}

  std::string generate(const std::string& prompt, const DecodeConfig& cfg) const override {
    const Tokens out = atr::generate(lm_, detail::known_tokens(vocab_, prompt), cfg);
    return join_words(vocab_.decode(out));
  }
  std::string name() const override { return "tiny-lm"; }

 private:
  const TinyLM& lm_;
  const Vocabulary& vocab_;
};

/// Tiny LM mixed with a copy cache over the prompt:
///   p(t) = (1-beta) p_lm(t | window) + beta p_cache(t | prev)
/// p_cache follows the bigram successors of the previous token in the cached
/// text, or its unigram distribution when the previous token has none. The
/// cached text is either the whole prompt or only the lines that start with
/// `segment_label` (the part after the label). This gives the small model a
/// way to pick up wording from the prompt, which is what few-shot examples
/// rely on.
class PromptCacheGenerator : public TextGenerator {
 public:
  PromptCacheGenerator(const TinyLM& lm, const Vocabulary& vocab, double beta, std::string segment_label = "")
      : lm_(lm), vocab_(vocab), beta_(beta), label_(std::move(segment_label)) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw ConfigError("cache weight must lie in [0,1]");
  }

  std::string generate(const std::string& prompt, const DecodeConfig& cfg) const override {
    cfg.validate();
    Tokens seq = detail::known_tokens(vocab_, prompt);
    const std::size_t v = lm_.shape().vocab;
    std::unordered_map<TokenId, std::map<TokenId, double>> next;
    Vec unigram(v, 0.0);
    double total = 0.0;
    for (const auto& seg : cached_segments(prompt)) {
      for (std::size_t k = 0; k < seg.size(); ++k) {
        unigram[seg[k]] += 1.0;
        total += 1.0;
        if (k + 1 < seg.size()) next[seg[k]][seg[k + 1]] += 1.0;
      }
    }
    Rng rng = derive_rng(cfg.seed, 0x6e4);
    Tokens out;
    for (std::size_t s = 0; s < cfg.max_new_tokens; ++s) {
      Vec p = softmax(lm_.logits(detail::last_context(seq, lm_.context())));
      if (total > 0.0) {
        Vec cache(v, 0.0);
        auto it = next.find(seq.back());
        if (it != next.end()) {
          double n = 0.0;
          for (const auto& [t, c] : it->second) n += c;
          for (const auto& [t, c] : it->second) cache[t] = c / n;
        } else {
          for (std::size_t t = 0; t < v; ++t) cache[t] = unigram[t] / total;
        }
        for (std::size_t t = 0; t < v; ++t) p[t] = (1.0 - beta_) * p[t] + beta_ * cache[t];
      }
      for (auto& x : p) x = std::log(std::max(x, 1e-300));
      const TokenId t = detail::pick_token(p, cfg, rng, out.size() >= cfg.min_new_tokens);
      if (t == kEos) break;
      seq.push_back(t);
      out.push_back(t);
    }
    return join_words(vocab_.decode(out));
  }
  std::string name() const override { return "prompt-cache"; }

 private:
  std::vector<Tokens> cached_segments(const std::string& prompt) const {
    std::vector<Tokens> out;
    auto known = [&](std::string_view text) {
      Tokens t;
      for (const auto& w : normalize_words(text))
        if (vocab_.contains(w)) t.push_back(vocab_.id(w));
      return t;
    };
    if (label_.empty()) {
      out.push_back(known(prompt));
      return out;
    }
    std::size_t pos = 0;
    while (pos <= prompt.size()) {
      std::size_t end = prompt.find('\n', pos);
      if (end == std::string::npos) end = prompt.size();
      const std::string_view line(prompt.data() + pos, end - pos);
      if (line.substr(0, label_.size()) == label_) out.push_back(known(line.substr(label_.size())));
      pos = end + 1;
    }
    return out;
  }

  const TinyLM& lm_;
  const Vocabulary& vocab_;
  double beta_;
  std::string label_;
};

/// Plain-HTTP text service. POSTs {"prompt", "max_new_tokens", "temperature",
/// "top_k", "seed"} as JSON and reads the "text" field of the reply.
class HttpGenerator : public TextGenerator {
 public:
  HttpGenerator(std::string base_url, std::string path, std::string token, std::chrono::seconds timeout)
      : base_url_(std::move(base_url)), path_(std::move(path)), token_(std::move(token)), timeout_(timeout) {
    if (base_url_.rfind("http://", 0) != 0) throw ConfigError("generator URL must start with http://");
  }

  /// Reads ATR_GENERATOR_URL (required) and ATR_GENERATOR_TOKEN (optional).
  static HttpGenerator from_env(std::chrono::seconds timeout = std::chrono::seconds(60)) {
    const char* url = std::getenv("ATR_GENERATOR_URL");
    if (!url || !*url) throw ConfigError("ATR_GENERATOR_URL is not set");
    const char* tok = std::getenv("ATR_GENERATOR_TOKEN");
    std::string u = url, path = "/generate";
    const auto slash = u.find('/', 7);
    if (slash != std::string::npos) path = u.substr(slash), u = u.substr(0, slash);
    return HttpGenerator(u, path, tok ? tok : "", timeout);
  }

  std::string generate(const std::string& prompt, const DecodeConfig& cfg) const override {
    httplib::Client cli(base_url_);
    cli.set_connection_timeout(timeout_);
    cli.set_read_timeout(timeout_);
    if (!token_.empty()) cli.set_bearer_token_auth(token_);
    const nlohmann::json body{{"prompt", prompt},
                              {"max_new_tokens", cfg.max_new_tokens},
                              {"temperature", cfg.temperature},
                              {"top_k", cfg.strategy == DecodeConfig::Strategy::kGreedy ? 1 : cfg.k},
                              {"seed", cfg.seed}};
    auto res = cli.Post(path_, body.dump(), "application/json");
    if (!res) throw std::runtime_error("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw std::runtime_error("service returned HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body).at("text").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(std::string("malformed service reply: ") + e.what());
    }
  }
  std::string name() const override { return "http"; }

 private:
  std::string base_url_, path_, token_;
  std::chrono::seconds timeout_;
};

/// Lets several callers share one generator; requests run one at a time.
class SerializedGenerator : public TextGenerator {
 public:
  explicit SerializedGenerator(std::shared_ptr<const TextGenerator> inner) : inner_(std::move(inner)) {
    if (!inner_) throw ConfigError("null generator");
  }
  std::string generate(const std::string& prompt, const DecodeConfig& cfg) const override {
    std::lock_guard<std::mutex> lock(mu_);
    return inner_->generate(prompt, cfg);
  }
  std::string name() const override { return inner_->name(); }

 private:
  std::shared_ptr<const TextGenerator> inner_;
  mutable std::mutex mu_;
};

/// Generator output as normalized words, capped at 100.
inline Words rewrite_via_generator(const TextGenerator& g, const std::string& prompt, const DecodeConfig& cfg) {
  std::string text;
  try {
    text = g.generate(prompt, cfg);
  } catch (const std::exception& e) {
    throw GenerationError(e.what(), hash_text(prompt));
  }
  return truncate_description(normalize_words(text));
}

}  // namespace atr
