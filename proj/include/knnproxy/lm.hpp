#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "knnproxy/core.hpp"

namespace knnproxy {

// What a language model contributes at one position: the context
// representation used as a retrieval query and its next-token distribution.
struct LmStep {
  std::vector<float> embedding;
  ProbDist dist;
};

// Source of per-position context embeddings and next-token distributions.
// Implementations are immutable once constructed and safe to query from
// several threads.
class LmProvider {
 public:
  virtual ~LmProvider() = default;

  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t embed_dim() const = 0;
  virtual std::string fingerprint() const = 0;

  // One step per position of seq.ids; step i is conditioned on
  // [bos, ids[0..i)].
  virtual std::vector<LmStep> steps(const TokenSequence& seq) const = 0;

  // Datastore keys: the embedding of the last `window` tokens of each
  // position's context. Providers that cannot re-embed an arbitrary window
  // return their full-context embeddings.
  virtual std::vector<std::vector<float>> window_embeddings(const TokenSequence& seq,
                                                            std::size_t window) const {
    (void)window;
    auto s = steps(seq);
    std::vector<std::vector<float>> out;
    out.reserve(s.size());
    for (auto& step : s) out.push_back(std::move(step.embedding));
    return out;
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

inline std::uint64_t hash_ids(std::uint64_t seed, std::span<const TokenId> ids) {
  std::uint64_t h = splitmix64(seed ^ ids.size());
  for (TokenId t : ids) h = hash_combine(h, t);
  return h;
}

// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline double unit_uniform(std::uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

}  // namespace detail

// Inverse-CDF draw from a distribution given a uniform u in [0, 1).
inline TokenId sample_token(const ProbDist& d, double u) {
  double acc = 0.0;
  TokenId last = 0;
  TokenId chosen = 0;
  bool found = false;
  d.for_each([&](TokenId id, double p) {
    if (found || p <= 0.0) return;
    acc += p;
    last = id;
    if (u < acc) {
      chosen = id;
      found = true;
    }
  });
  return found ? chosen : last;
}

}  // namespace knnproxy
