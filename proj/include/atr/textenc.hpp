#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "atr/corpus.hpp"
#include "atr/error.hpp"
#include "atr/numeric.hpp"

namespace atr {

using TokenId = std::uint32_t;
using Tokens = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kBos = 2;
inline constexpr TokenId kEos = 3;
inline constexpr std::size_t kNumReserved = 4;

class Vocabulary {
 public:
  Vocabulary() : words_{"<pad>", "<unk>", "<bos>", "<eos>"} {
    for (std::size_t k = 0; k < words_.size(); ++k) ids_[words_[k]] = static_cast<TokenId>(k);
  }

  /// Vocabulary over all words in `corpus`, in order of first appearance.
  static Vocabulary build(const std::vector<Words>& corpus) {
    Vocabulary v;
    for (const auto& doc : corpus)
      for (const auto& w : doc) v.add(w);
    return v;
  }

  static Vocabulary from_words(const std::vector<std::string>& words) {
    if (words.size() < kNumReserved) throw ShapeError("vocabulary missing reserved ids");
    Vocabulary v;
    for (std::size_t k = kNumReserved; k < words.size(); ++k) {
      if (v.contains(words[k])) throw ShapeError("duplicate vocabulary entry '" + words[k] + "'");
      v.add(words[k]);
    }
    return v;
  }

  TokenId add(const std::string& w) {
    auto [it, fresh] = ids_.try_emplace(w, static_cast<TokenId>(words_.size()));
    if (fresh) words_.push_back(w);
    return it->second;
  }

  bool contains(const std::string& w) const { return ids_.count(w) != 0; }
  std::size_t size() const noexcept { return words_.size(); }
  const std::vector<std::string>& words() const noexcept { return words_; }

  TokenId id(const std::string& w) const {
    auto it = ids_.find(w);
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& word(TokenId t) const {
    if (t >= words_.size()) throw IndexError("token id " + std::to_string(t));
    return words_[t];
  }

  Tokens encode(const Words& ws) const {
    Tokens out;
    out.reserve(ws.size());
    for (const auto& w : ws) out.push_back(id(w));
    return out;
  }

  /// Words for content tokens; reserved ids are dropped.
  Words decode(const Tokens& ts) const {
    Words out;
    for (auto t : ts)
      if (t >= kNumReserved) out.push_back(word(t));
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, TokenId> ids_;
};

inline Tokens tokenize(const Vocabulary& vocab, std::string_view text) {
  return vocab.encode(normalize_words(text));
}

// ---------------------------------------------------------------------------
// TinyLM: fixed-window feedforward causal language model
//
//   x      = concat(E[ctx_1], ..., E[ctx_c])        (c*d)
//   hidden = tanh(W1 x + b1)                         (h)
//   logits = W2 hidden + b2                          (|V|)

struct LmShape {
  std::size_t vocab = 0;
  std::size_t dim = 32;
  std::size_t context = 8;
  std::size_t hidden = 64;

  bool operator==(const LmShape&) const = default;
};

struct LmParams {
  Matrix embedding;  // |V| x d
  Matrix w1;         // h x (c*d)
  Vec b1;            // h
  Matrix w2;         // |V| x h
  Vec b2;            // |V|

  explicit LmParams(const LmShape& s = {})
      : embedding(s.vocab, s.dim),
        w1(s.hidden, s.context * s.dim),
        b1(s.hidden, 0.0),
        w2(s.vocab, s.hidden),
        b2(s.vocab, 0.0) {}

  std::vector<std::pair<std::string, std::span<double>>> tensors() {
    return {{"embedding", embedding.data()}, {"w1", w1.data()}, {"b1", b1},
            {"w2", w2.data()}, {"b2", b2}};
  }
  std::vector<std::pair<std::string, std::span<const double>>> tensors() const {
    return {{"embedding", embedding.data()}, {"w1", w1.data()}, {"b1", b1},
            {"w2", w2.data()}, {"b2", b2}};
  }
  bool operator==(const LmParams&) const = default;
};

using LmGrad = LmParams;

struct LmActivation {
  Vec x;
  Vec hidden;
  Vec logits;
};

class TinyLM {
 public:
  TinyLM() = default;

  TinyLM(const LmShape& shape, std::uint64_t seed) : shape_(shape), params_(shape) {
    if (shape.vocab < kNumReserved || shape.dim == 0 || shape.context == 0 || shape.hidden == 0)
      throw ConfigError("invalid TinyLM shape");
    Rng rng = derive_rng(seed, 0x11a);
    const double se = 1.0 / std::sqrt(static_cast<double>(shape.dim));
    const double s1 = 1.0 / std::sqrt(static_cast<double>(shape.context * shape.dim));
    const double s2 = 0.1 / std::sqrt(static_cast<double>(shape.hidden));
    for (auto& x : params_.embedding.data()) x = normal(rng, 0.0, se);
    for (auto& x : params_.w1.data()) x = normal(rng, 0.0, s1);
    for (auto& x : params_.w2.data()) x = normal(rng, 0.0, s2);
  }

  TinyLM(const LmShape& shape, LmParams params) : shape_(shape), params_(std::move(params)) {
    check_shapes();
  }

  const LmShape& shape() const noexcept { return shape_; }
  const LmParams& params() const noexcept { return params_; }
  LmParams& mutable_params() noexcept { return params_; }
  std::size_t context() const noexcept { return shape_.context; }

  LmGrad zero_grad() const { return LmGrad(shape_); }

  void forward(std::span<const TokenId> ctx, LmActivation& act) const {
    if (ctx.size() != shape_.context) throw ShapeError("context length != c");
    const std::size_t d = shape_.dim;
    act.x.assign(shape_.context * d, 0.0);
    for (std::size_t k = 0; k < ctx.size(); ++k) {
      if (ctx[k] >= shape_.vocab) throw IndexError("token id out of vocabulary");
      auto row = params_.embedding.row(ctx[k]);
      std::copy(row.begin(), row.end(), act.x.begin() + k * d);
    }
    act.hidden = matvec(params_.w1, act.x);
    for (std::size_t j = 0; j < act.hidden.size(); ++j)
      act.hidden[j] = std::tanh(act.hidden[j] + params_.b1[j]);
    act.logits = matvec(params_.w2, act.hidden);
    for (std::size_t t = 0; t < act.logits.size(); ++t) act.logits[t] += params_.b2[t];
  }

  Vec logits(std::span<const TokenId> ctx) const {
    LmActivation act;
    forward(ctx, act);
    return std::move(act.logits);
  }

  /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(logits).
  void backward(std::span<const TokenId> ctx, const LmActivation& act,
                std::span<const double> dlogits, LmGrad& grad) const {
    const std::size_t d = shape_.dim;
    for (std::size_t t = 0; t < shape_.vocab; ++t) {
      const double g = dlogits[t];
      if (g == 0.0) continue;
      grad.b2[t] += g;
      axpy(g, act.hidden, grad.w2.row(t));
    }
    Vec dh = matvec_t(params_.w2, dlogits);
    for (std::size_t j = 0; j < dh.size(); ++j) dh[j] *= 1.0 - act.hidden[j] * act.hidden[j];
    for (std::size_t j = 0; j < dh.size(); ++j) {
      grad.b1[j] += dh[j];
      axpy(dh[j], act.x, grad.w1.row(j));
    }
    const Vec dx = matvec_t(params_.w1, dh);
    for (std::size_t k = 0; k < ctx.size(); ++k)
      axpy(1.0, std::span<const double>(dx).subspan(k * d, d), grad.embedding.row(ctx[k]));
  }

  /// params -= lr * grad; the model must stay finite.
  void sgd_step(const LmGrad& grad, double lr) {
    auto dst = params_.tensors();
    auto src = grad.tensors();
    for (std::size_t k = 0; k < dst.size(); ++k) axpy(-lr, src[k].second, dst[k].second);
    for (const auto& [name, t] : params_.tensors())
      if (!all_finite(t)) throw RangeError("non-finite TinyLM parameter in " + name);
  }

  std::string fingerprint() const {
    Fnv1a h;
    for (const auto& [name, t] : params_.tensors()) h.update(t);
    return h.hex();
  }

 private:
  void check_shapes() const {
    const LmParams ref(shape_);
    if (params_.embedding.rows() != ref.embedding.rows() ||
        params_.embedding.cols() != ref.embedding.cols() || params_.w1.rows() != ref.w1.rows() ||
        params_.w1.cols() != ref.w1.cols() || params_.b1.size() != ref.b1.size() ||
        params_.w2.rows() != ref.w2.rows() || params_.w2.cols() != ref.w2.cols() ||
        params_.b2.size() != ref.b2.size())
      throw ShapeError("TinyLM parameters inconsistent with shape");
  }

  LmShape shape_;
  LmParams params_;
};

inline Vec softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  Vec p(logits.size());
  double s = 0.0;
  for (std::size_t t = 0; t < p.size(); ++t) s += (p[t] = std::exp(logits[t] - mx));
  for (auto& x : p) x /= s;
  return p;
}

inline double log_softmax_at(std::span<const double> logits, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double s = 0.0;
  for (double z : logits) s += std::exp(z - mx);
  return logits[target] - mx - std::log(s);
}

/// One training example: c context tokens followed by the target token.
using Window = std::vector<TokenId>;

/// Sliding windows over PAD...PAD BOS tokens EOS, one per content token plus
/// the closing EOS.
inline std::vector<Window> framed_windows(std::span<const TokenId> tokens, std::size_t context) {
  Tokens framed(context - 1, kPad);
  framed.push_back(kBos);
  framed.insert(framed.end(), tokens.begin(), tokens.end());
  framed.push_back(kEos);
  std::vector<Window> out;
  for (std::size_t j = context; j < framed.size(); ++j)
    out.emplace_back(framed.begin() + (j - context), framed.begin() + j + 1);
  return out;
}

struct LossAndGrad {
  double loss = 0.0;
  LmGrad grad;
};

/// Mean next-token negative log-likelihood and its gradient.
inline LossAndGrad lm_loss_and_grad(const TinyLM& lm, const std::vector<Window>& batch) {
  const std::size_t c = lm.context();
  LossAndGrad out{0.0, lm.zero_grad()};
  if (batch.empty()) return out;
  const double scale = 1.0 / static_cast<double>(batch.size());
  LmActivation act;
  for (const auto& w : batch) {
    if (w.size() != c + 1) throw ShapeError("window must hold c context tokens + 1 target");
    std::span<const TokenId> ctx(w.data(), c);
    lm.forward(ctx, act);
    const TokenId target = w[c];
    if (target >= lm.shape().vocab) throw IndexError("target token out of vocabulary");
    out.loss -= log_softmax_at(act.logits, target) * scale;
    Vec dlogits = softmax(act.logits);
    dlogits[target] -= 1.0;
    for (auto& g : dlogits) g *= scale;
    lm.backward(ctx, act, dlogits, out.grad);
  }
  return out;
}

inline double lm_loss(const TinyLM& lm, const std::vector<Window>& batch) {
  const std::size_t c = lm.context();
  if (batch.empty()) return 0.0;
  double loss = 0.0;
  LmActivation act;
  for (const auto& w : batch) {
    if (w.size() != c + 1) throw ShapeError("window must hold c context tokens + 1 target");
    lm.forward(std::span<const TokenId>(w.data(), c), act);
    loss -= log_softmax_at(act.logits, w[c]);
  }
  return loss / static_cast<double>(batch.size());
}

/// exp(mean NLL) over every next-token prediction inside `tokens`.
inline double perplexity(const TinyLM& lm, std::span<const TokenId> tokens) {
  const std::size_t c = lm.context();
  if (tokens.size() < c + 1)
    throw ShapeError("perplexity needs at least c+1 tokens, got " + std::to_string(tokens.size()));
  std::vector<Window> windows;
  for (std::size_t j = c; j < tokens.size(); ++j)
    windows.emplace_back(tokens.begin() + (j - c), tokens.begin() + j + 1);
  return std::exp(lm_loss(lm, windows));
}

/// Perplexity of a description framed with BOS/EOS (predicts every content
/// token and the final EOS).
inline double description_perplexity(const TinyLM& lm, std::span<const TokenId> desc) {
  Tokens framed(lm.context() - 1, kPad);
  framed.push_back(kBos);
  framed.insert(framed.end(), desc.begin(), desc.end());
  framed.push_back(kEos);
  return perplexity(lm, framed);
}

// ---------------------------------------------------------------------------
// Text embedding: mean of token embedding rows

using TextEmbedding = Vec;

inline TextEmbedding mean_pool(const Matrix& table, std::span<const TokenId> tokens) {
  TextEmbedding e(table.cols(), 0.0);
  std::size_t n = 0;
  for (auto t : tokens) {
    if (t == kPad) continue;
    if (t >= table.rows()) throw IndexError("token id out of embedding table");
    axpy(1.0, table.row(t), e);
    ++n;
  }
  if (n == 0) throw EmptyTextError("cannot embed an empty description");
  for (auto& x : e) x /= static_cast<double>(n);
  return e;
}

inline TextEmbedding embed_text(const TinyLM& lm, std::span<const TokenId> tokens) {
  return mean_pool(lm.params().embedding, tokens);
}

/// Accumulates d(loss)/d(embedding) for embed_text given d(loss)/d(E^T).
inline void embed_text_backward(std::span<const TokenId> tokens, std::span<const double> d_emb,
                                LmGrad& grad) {
  std::size_t n = 0;
  for (auto t : tokens) n += t != kPad;
  if (n == 0) throw EmptyTextError("cannot embed an empty description");
  for (auto t : tokens)
    if (t != kPad) axpy(1.0 / static_cast<double>(n), d_emb, grad.embedding.row(t));
}

/// Frozen mean-pooling encoder: a snapshot of an LM's embedding table. This is
/// what a recommender uses to embed item descriptions.
class TextEncoder {
 public:
  TextEncoder() = default;
  explicit TextEncoder(Matrix table) : table_(std::move(table)) {}
  static TextEncoder from_lm(const TinyLM& lm) { return TextEncoder(lm.params().embedding); }

  TextEmbedding embed(std::span<const TokenId> tokens) const { return mean_pool(table_, tokens); }
  const Matrix& table() const noexcept { return table_; }
  std::size_t dim() const noexcept { return table_.cols(); }
  std::string fingerprint() const {
    Fnv1a h;
    h.update(table_.data());
    return h.hex();
  }

 private:
  Matrix table_;
};

// ---------------------------------------------------------------------------
// Decoding

struct DecodeConfig {
  enum class Strategy { kGreedy, kTopK };
  std::size_t max_new_tokens = 100;
  std::size_t min_new_tokens = 0;  // EOS is suppressed until this many tokens exist
  Strategy strategy = Strategy::kGreedy;
  std::size_t k = 1;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (k < 1) throw ConfigError("top-k requires k >= 1");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
    if (min_new_tokens > max_new_tokens) throw ConfigError("min_new_tokens exceeds max_new_tokens");
  }
};

namespace detail {

inline Tokens last_context(const Tokens& seq, std::size_t c) {
  Tokens ctx(c, kPad);
  const std::size_t n = std::min(c, seq.size());
  std::copy(seq.end() - static_cast<std::ptrdiff_t>(n), seq.end(), ctx.end() - static_cast<std::ptrdiff_t>(n));
  return ctx;
}

/// Picks the next token from per-token scores (log-domain). PAD, UNK and BOS
/// are never emitted.
inline TokenId pick_token(std::span<const double> scores, const DecodeConfig& cfg, Rng& rng,
                          bool allow_eos = true) {
  auto allowed = [&](std::size_t t) { return (allow_eos && t == kEos) || t >= kNumReserved; };
  std::vector<std::size_t> order;
  for (std::size_t t = 0; t < scores.size(); ++t)
    if (allowed(t)) order.push_back(t);
  const std::size_t keep =
      cfg.strategy == DecodeConfig::Strategy::kGreedy ? 1 : std::min(cfg.k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
                    });
  if (keep == 1) return static_cast<TokenId>(order[0]);
  Vec w(keep);
  for (std::size_t j = 0; j < keep; ++j) w[j] = scores[order[j]] / cfg.temperature;
  const Vec p = softmax(w);
  double u = uniform01(rng), acc = 0.0;
  for (std::size_t j = 0; j < keep; ++j) {
    acc += p[j];
    if (u < acc) return static_cast<TokenId>(order[j]);
  }
  return static_cast<TokenId>(order[keep - 1]);
}

}  // namespace detail

/// Appends up to max_new_tokens to the prompt; stops at EOS (not included).
/// Returns only the newly generated tokens.
inline Tokens generate(const TinyLM& lm, const Tokens& prompt, const DecodeConfig& cfg) {
  cfg.validate();
  if (prompt.empty()) throw ShapeError("generate needs a non-empty prompt");
  Rng rng = derive_rng(cfg.seed, 0x6e4);
  Tokens seq = prompt, out;
  for (std::size_t s = 0; s < cfg.max_new_tokens; ++s) {
    const Vec z = lm.logits(detail::last_context(seq, lm.context()));
    const TokenId t = detail::pick_token(z, cfg, rng, out.size() >= cfg.min_new_tokens);
    if (t == kEos) break;
    seq.push_back(t);
    out.push_back(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints (JSON: vocabulary, shapes, flat parameter arrays)

inline constexpr int kLmCheckpointVersion = 1;

inline void save_lm(const std::filesystem::path& path, const TinyLM& lm, const Vocabulary& vocab) {
  if (vocab.size() != lm.shape().vocab) throw ShapeError("vocabulary size != LM vocab");
  nlohmann::json j;
  j["format"] = "atr-tinylm";
  j["version"] = kLmCheckpointVersion;
  j["vocab"] = vocab.words();
  const auto& s = lm.shape();
  j["shape"] = {{"vocab", s.vocab}, {"dim", s.dim}, {"context", s.context}, {"hidden", s.hidden}};
  for (const auto& [name, t] : lm.params().tensors())
    j["params"][name] = std::vector<double>(t.begin(), t.end());
  std::ofstream(path) << j.dump() << '\n';
}

inline std::pair<TinyLM, Vocabulary> load_lm(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open LM checkpoint " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(1, e.what());
  }
  if (j.value("format", "") != "atr-tinylm" || j.value("version", 0) != kLmCheckpointVersion)
    throw DataError("unsupported LM checkpoint format");
  try {
    LmShape s{j.at("shape").at("vocab").get<std::size_t>(), j.at("shape").at("dim").get<std::size_t>(),
              j.at("shape").at("context").get<std::size_t>(),
              j.at("shape").at("hidden").get<std::size_t>()};
    auto vocab = Vocabulary::from_words(j.at("vocab").get<std::vector<std::string>>());
    if (vocab.size() != s.vocab) throw ShapeError("checkpoint vocabulary size != shape.vocab");
    LmParams p(s);
    for (auto& [name, t] : p.tensors()) {
      const auto v = j.at("params").at(name).get<std::vector<double>>();
      if (v.size() != t.size()) throw ShapeError("checkpoint tensor '" + name + "' has wrong size");
      std::copy(v.begin(), v.end(), t.begin());
    }
    return {TinyLM(s, std::move(p)), std::move(vocab)};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed LM checkpoint: ") + e.what());
  }
}

}  // namespace atr
