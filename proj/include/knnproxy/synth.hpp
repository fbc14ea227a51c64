#pragma once

// Seeded synthetic benchmark with a controlled proxy/source gap.
//
// Every toy model is trained on a corpus sampled from a hidden Markov
// generator whose logits are a shared "base language" plus a model-specific
// style perturbation, sharpened or flattened by a temperature. The source
// model emits the LLM-class texts and the datastore corpus, a differently
// styled model emits the human-class texts, and the proxy is a third,
// mismatched model.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"
#include "knnproxy/toy_lm.hpp"

namespace knnproxy {

struct StyleSpec {
  std::uint64_t style_seed = 1;
  double style_strength = 1.0;
  double temperature = 1.0;
  std::size_t context = 2;  // generator conditions on this many previous tokens
  double topic_strength = 0.0;  // context-free per-token bias, shifts unigram frequencies

  friend bool operator==(const StyleSpec&, const StyleSpec&) = default;
};

struct ToyModelSpec {
  StyleSpec style;
  ToyLmConfig lm;
  std::size_t training_tokens = 100000;

  bool same_as(const ToyModelSpec& o) const {
    return style == o.style && lm.order == o.lm.order && lm.alpha == o.lm.alpha &&
           training_tokens == o.training_tokens;
  }
};

struct SynthBenchConfig {
  std::size_t vocab_size = 40;  // including the BOS token
  std::uint64_t base_seed = 7;
  double base_scale = 2.0;
  ToyModelSpec source{{11, 1.0, 0.85, 2}, {3, 0.05, 16, 3, 0.5, 101}, 150000};
  ToyModelSpec human{{23, 1.0, 1.0, 2}, {3, 0.05, 16, 3, 0.5, 202}, 150000};
  ToyModelSpec proxy{{37, 1.0, 1.0, 2}, {2, 0.1, 16, 3, 0.5, 303}, 150000};
  std::size_t texts_per_class = 500;
  std::size_t text_length = 32;
  std::size_t datastore_tokens = 10000;
  std::size_t document_length = 200;
  std::uint64_t seed = 1;
  bool allow_identical_source_proxy = false;  // the no-gap control

  void validate() const {
    if (vocab_size < 3) throw ConfigError("synthetic vocabulary needs at least 3 tokens");
    if (text_length < 1 || document_length < 2) throw ConfigError("synthetic texts are too short");
    if (texts_per_class < 1) throw ConfigError("texts_per_class must be positive");
    if (!allow_identical_source_proxy && source.same_as(proxy)) {
      throw ConfigError("source and proxy specs are identical; there is no gap to align");
    }
  }
};

// Hidden generator over tokens 1..V-1 (token 0 is BOS and never emitted).
class StyleGenerator {
 public:
  StyleGenerator(std::size_t vocab_size, std::uint64_t base_seed, double base_scale, StyleSpec style)
      : vocab_size_(vocab_size), base_seed_(base_seed), base_scale_(base_scale), style_(style) {}

  ProbDist next_dist(std::span<const TokenId> context) const {
    const std::size_t n = std::min(style_.context, context.size());
    auto ctx = context.subspan(context.size() - n, n);
    const std::uint64_t hb = detail::hash_ids(base_seed_, ctx);
    const std::uint64_t hs = detail::hash_ids(style_.style_seed, ctx);
    const std::uint64_t ht = detail::hash_combine(style_.style_seed, 0x70c1c);
    std::vector<double> logit(vocab_size_, -std::numeric_limits<double>::infinity());
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 1; v < vocab_size_; ++v) {
      double z = base_scale_ * gaussian(hb, v) + style_.style_strength * gaussian(hs, v);
      if (style_.topic_strength != 0.0) z += style_.topic_strength * gaussian(ht, v);
      logit[v] = z / style_.temperature;
      top = std::max(top, logit[v]);
    }
    std::vector<double> p(vocab_size_, 0.0);
    double total = 0.0;
    for (std::size_t v = 1; v < vocab_size_; ++v) total += (p[v] = std::exp(logit[v] - top));
    for (double& x : p) x /= total;
    return ProbDist::dense(std::move(p));
  }

  std::vector<TokenSequence> sample_corpus(std::size_t tokens, std::size_t doc_length, std::mt19937_64& rng) const {
    std::vector<TokenSequence> docs;
    std::size_t produced = 0;
    while (produced < tokens) {
      TokenSequence seq;
      seq.bos_id = 0;
      std::vector<TokenId> ctx{0};
      const std::size_t len = std::min(doc_length, tokens - produced);
      for (std::size_t i = 0; i < len; ++i) {
        const TokenId t = sample_token(next_dist(ctx), detail::unit_uniform(rng()));
        seq.ids.push_back(t);
        ctx.push_back(t);
      }
      produced += len;
      docs.push_back(std::move(seq));
    }
    return docs;
  }

 private:
  static double gaussian(std::uint64_t h, std::size_t v) {
    const std::uint64_t a = detail::splitmix64(h ^ (v * 0x9e3779b97f4a7c15ULL));
    const std::uint64_t b = detail::splitmix64(a);
    const double u1 = 1.0 - detail::unit_uniform(a);
    const double u2 = detail::unit_uniform(b);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  std::size_t vocab_size_;
  std::uint64_t base_seed_;
  double base_scale_;
  StyleSpec style_;
};

inline Vocabulary synthetic_vocabulary(std::size_t vocab_size) {
  std::vector<std::string> toks{"<bos>"};
  for (std::size_t i = 1; i < vocab_size; ++i) toks.push_back("w" + std::to_string(i));
  return Vocabulary(std::move(toks));
}

inline ToyLm train_toy_model(const SynthBenchConfig& cfg, const ToyModelSpec& spec, std::uint64_t salt) {
  StyleGenerator gen(cfg.vocab_size, cfg.base_seed, cfg.base_scale, spec.style);
  std::mt19937_64 rng(detail::hash_combine(cfg.seed, salt ^ spec.style.style_seed));
  const auto corpus = gen.sample_corpus(spec.training_tokens, cfg.document_length, rng);
  return ToyLm::train(corpus, cfg.vocab_size, spec.lm);
}

struct SynthBenchmark {
  Vocabulary vocab;
  TokenId bos_id = 0;
  ToyLm source;
  ToyLm human;
  ToyLm proxy;
  std::vector<TokenSequence> human_texts;
  std::vector<TokenSequence> llm_texts;
  std::vector<TokenSequence> datastore_corpus;
};

inline std::vector<TokenSequence> sample_texts(const ToyLm& lm, std::size_t count, std::size_t length,
                                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(lm.sample(length, 0, rng));
  return out;
}

// Models share one training salt, so identical specs yield identical models.
inline SynthBenchmark synth_benchmark(const SynthBenchConfig& cfg) {
  cfg.validate();
  SynthBenchmark b{synthetic_vocabulary(cfg.vocab_size),
                   0,
                   train_toy_model(cfg, cfg.source, 0x51),
                   train_toy_model(cfg, cfg.human, 0x51),
                   train_toy_model(cfg, cfg.proxy, 0x51),
                   {},
                   {},
                   {}};
  b.llm_texts = sample_texts(b.source, cfg.texts_per_class, cfg.text_length, detail::hash_combine(cfg.seed, 0x61));
  b.human_texts = sample_texts(b.human, cfg.texts_per_class, cfg.text_length, detail::hash_combine(cfg.seed, 0x62));
  const std::size_t docs = (cfg.datastore_tokens + cfg.document_length - 1) / cfg.document_length;
  b.datastore_corpus = sample_texts(b.source, docs, cfg.document_length, detail::hash_combine(cfg.seed, 0x63));
  return b;
}

}  // namespace knnproxy
