#pragma once

// Count-based n-gram language model with add-alpha smoothing and backoff to
// shorter contexts, plus a hashed n-gram context embedding. Stands in for
// proxy, source, reference and human models at desk scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

struct ToyLmConfig {
  std::size_t order = 2;  // n of the n-gram; contexts hold order-1 tokens
  double alpha = 0.1;
  std::size_t embed_dim = 32;
  std::size_t embed_window = 3;  // suffix lengths 1..embed_window feed the embedding
  double recency = 0.5;          // weight ratio between suffix length j+1 and j
  std::uint64_t embed_seed = 0;
};

class ToyLm final : public LmProvider {
 public:
  static ToyLm train(std::span<const TokenSequence> corpus, std::size_t vocab_size, ToyLmConfig cfg) {
    if (corpus.empty()) throw ConfigError("toy LM training corpus is empty");
    if (cfg.order < 1) throw ConfigError("toy LM order must be at least 1");
    if (!(cfg.alpha > 0.0)) throw ConfigError("toy LM smoothing alpha must be positive");
    if (cfg.embed_dim < 1) throw ConfigError("toy LM embedding dimension must be positive");
    if (vocab_size < 2) throw ConfigError("vocabulary needs at least 2 tokens");

    ToyLm lm;
    lm.cfg_ = cfg;
    lm.vocab_size_ = vocab_size;
    lm.levels_.resize(cfg.order);
    std::vector<std::unordered_map<std::string, std::unordered_map<TokenId, std::uint64_t>>> raw(cfg.order);
    std::uint64_t corpus_hash = 0;
    std::uint64_t tokens = 0;

    for (const auto& seq : corpus) {
      for (TokenId t : seq.ids) {
        if (t >= vocab_size) throw DataError("training token outside vocabulary");
      }
      corpus_hash = detail::hash_combine(corpus_hash, detail::hash_ids(seq.bos_id, seq.ids));
      std::vector<TokenId> padded;
      padded.reserve(seq.ids.size() + 1);
      padded.push_back(seq.bos_id);
      padded.insert(padded.end(), seq.ids.begin(), seq.ids.end());
      for (std::size_t pos = 1; pos < padded.size(); ++pos) {
        const TokenId next = padded[pos];
        ++tokens;
        for (std::size_t n = 0; n < cfg.order && n <= pos; ++n) {
          auto ctx = std::span(padded).subspan(pos - n, n);
          ++raw[n][key(ctx)][next];
        }
      }
    }
    if (tokens == 0) throw ConfigError("toy LM training corpus has no tokens");

    for (std::size_t n = 0; n < cfg.order; ++n) {
      auto& level = lm.levels_[n];
      level.reserve(raw[n].size());
      for (auto& [k, counts] : raw[n]) {
        Counts c;
        c.entries.assign(counts.begin(), counts.end());
        std::sort(c.entries.begin(), c.entries.end());
        for (const auto& e : c.entries) c.total += e.second;
        level.emplace(k, std::move(c));
      }
    }

    std::ostringstream fp;
    fp << "toy:V=" << vocab_size << ";order=" << cfg.order << ";alpha=" << cfg.alpha
       << ";d=" << cfg.embed_dim << ";window=" << cfg.embed_window << ";recency=" << cfg.recency
       << ";seed=" << cfg.embed_seed << ";corpus=" << std::hex << corpus_hash;
    lm.fingerprint_ = fp.str();
    return lm;
  }

  const ToyLmConfig& config() const noexcept { return cfg_; }
  std::size_t vocab_size() const override { return vocab_size_; }
  std::size_t embed_dim() const override { return cfg_.embed_dim; }
  std::string fingerprint() const override { return fingerprint_; }

  // P(. | context), context given with BOS first. Backs off to the longest
  // suffix of at most order-1 tokens that was seen in training.
  ProbDist next_dist(std::span<const TokenId> context) const {
    const Counts* found = nullptr;
    std::size_t n = std::min(cfg_.order - 1, context.size());
    for (;; --n) {
      auto it = levels_[n].find(key(context.subspan(context.size() - n, n)));
      if (it != levels_[n].end() && it->second.total > 0) {
        found = &it->second;
        break;
      }
      if (n == 0) break;
    }
    const double total = found ? static_cast<double>(found->total) : 0.0;
    const double denom = total + cfg_.alpha * static_cast<double>(vocab_size_);
    std::vector<double> p(vocab_size_, cfg_.alpha / denom);
    if (found) {
      for (const auto& [id, c] : found->entries) p[id] = (static_cast<double>(c) + cfg_.alpha) / denom;
    }
    return ProbDist::dense(std::move(p));
  }

  // Hashed bag of context suffixes: suffix of length j contributes a
  // pseudo-random unit vector weighted by recency^(j-1). Contexts that agree
  // on their last embed_window tokens map to the same point, and sharing a
  // longer suffix brings two contexts closer.
  std::vector<float> embed(std::span<const TokenId> context) const {
    std::vector<double> acc(cfg_.embed_dim, 0.0);
    const std::size_t m = std::min(cfg_.embed_window, context.size());
    double weight = 1.0;
    std::vector<double> u(cfg_.embed_dim);
    for (std::size_t j = 1; j <= m; ++j) {
      auto suffix = context.subspan(context.size() - j, j);
      std::uint64_t state = detail::hash_ids(cfg_.embed_seed * 0x100000001b3ULL + j, suffix);
      double norm = 0.0;
      for (std::size_t i = 0; i < cfg_.embed_dim; i += 2) {
        // Box-Muller pair.
        const double u1 = 1.0 - detail::unit_uniform(state = detail::splitmix64(state));
        const double u2 = detail::unit_uniform(state = detail::splitmix64(state));
        const double r = std::sqrt(-2.0 * std::log(u1));
        u[i] = r * std::cos(2.0 * M_PI * u2);
        if (i + 1 < cfg_.embed_dim) u[i + 1] = r * std::sin(2.0 * M_PI * u2);
      }
      for (double x : u) norm += x * x;
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < cfg_.embed_dim; ++i) acc[i] += weight * u[i] / norm;
      weight *= cfg_.recency;
    }
    return {acc.begin(), acc.end()};
  }

  std::vector<LmStep> steps(const TokenSequence& seq) const override {
    seq.validate(vocab_size_);
    std::vector<TokenId> ctx;
    ctx.reserve(seq.size() + 1);
    ctx.push_back(seq.bos_id);
    std::vector<LmStep> out;
    out.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      out.push_back({embed(ctx), next_dist(ctx)});
      ctx.push_back(seq.ids[i]);
    }
    return out;
  }

  std::vector<std::vector<float>> window_embeddings(const TokenSequence& seq,
                                                    std::size_t window) const override {
    std::vector<TokenId> ctx;
    ctx.reserve(seq.size() + 1);
    ctx.push_back(seq.bos_id);
    std::vector<std::vector<float>> out;
    out.reserve(seq.size());
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const std::size_t w = std::min(window, ctx.size());
      out.push_back(embed(std::span(ctx).subspan(ctx.size() - w, w)));
      ctx.push_back(seq.ids[i]);
    }
    return out;
  }

  // Ancestral sampling of `length` tokens after an optional prompt.
  TokenSequence sample(std::size_t length, TokenId bos_id, std::mt19937_64& rng,
                       std::span<const TokenId> prompt = {}) const {
    TokenSequence seq;
    seq.bos_id = bos_id;
    seq.prompt_len = prompt.size();
    seq.ids.assign(prompt.begin(), prompt.end());
    std::vector<TokenId> ctx{bos_id};
    ctx.insert(ctx.end(), prompt.begin(), prompt.end());
    for (std::size_t i = 0; i < length; ++i) {
      const TokenId t = sample_token(next_dist(ctx), detail::unit_uniform(rng()));
      seq.ids.push_back(t);
      ctx.push_back(t);
    }
    return seq;
  }

 private:
  struct Counts {
    std::uint64_t total = 0;
    std::vector<std::pair<TokenId, std::uint64_t>> entries;
  };

  static std::string key(std::span<const TokenId> ids) {
    return {reinterpret_cast<const char*>(ids.data()), ids.size_bytes()};
  }

  ToyLmConfig cfg_;
  std::size_t vocab_size_ = 0;
  std::vector<std::unordered_map<std::string, Counts>> levels_;  // indexed by context length
  std::string fingerprint_;
};

}  // namespace knnproxy
