#pragma once

// Mixture of proxies: a labelled sentence-embedding store routes each text
// to one domain expert by kNN majority vote, and alignment then runs against
// that expert's datastore.
//
// Routing feature files ("KNPR1") carry precomputed sentence embeddings:
// magic, u32 d, u64 count, then per record u32 label and d f32 values,
// trailing u32 CRC32 of everything after the magic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knnproxy/align.hpp"
#include "knnproxy/binary_io.hpp"
#include "knnproxy/datastore.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/index.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<float> embed(std::string_view text) const = 0;
};

// Signed feature hashing of character n-grams over the space-padded text,
// L2-normalised. Text without any n-gram embeds to the zero vector.
class HashedNgramEmbedder final : public SentenceEmbedder {
 public:
  explicit HashedNgramEmbedder(std::size_t dim = 256, std::size_t n_min = 3, std::size_t n_max = 5,
                               std::uint64_t seed = 0)
      : dim_(dim), n_min_(n_min), n_max_(n_max), seed_(seed) {
    if (dim == 0) throw ConfigError("embedding dimension must be positive");
    if (n_min < 1 || n_max < n_min) throw ConfigError("n-gram range must satisfy 1 <= n_min <= n_max");
  }

  std::size_t dim() const override { return dim_; }

  std::vector<float> embed(std::string_view text) const override {
    const std::string padded = " " + std::string(text) + " ";
    std::vector<double> acc(dim_, 0.0);
    for (std::size_t n = n_min_; n <= n_max_; ++n) {
      for (std::size_t i = 0; i + n <= padded.size(); ++i) {
        std::uint64_t h = detail::hash_combine(seed_, n);
        for (std::size_t j = i; j < i + n; ++j) h = detail::hash_combine(h, static_cast<unsigned char>(padded[j]));
        acc[h % dim_] += (h >> 63) != 0 ? -1.0 : 1.0;
      }
    }
    double norm = 0.0;
    for (double x : acc) norm += x * x;
    norm = std::sqrt(norm);
    std::vector<float> out(dim_, 0.0f);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
    }
    return out;
  }

 private:
  std::size_t dim_;
  std::size_t n_min_;
  std::size_t n_max_;
  std::uint64_t seed_;
};

struct LabeledSentence {
  std::string text;
  std::size_t label = 0;  // expert index in [0, M)
};

// Labels are stored as the index's values.
struct RoutingStore {
  VectorIndex index;
  std::size_t expert_count = 0;
  std::size_t k_r = 15;

  std::size_t size() const noexcept { return index.size(); }
};

struct RouterDecision {
  std::vector<double> scores;  // vote share per expert
  std::size_t chosen = 0;
};

inline RoutingStore build_routing_store(std::vector<float> embeddings, std::size_t dim,
                                        std::span<const std::size_t> labels, std::size_t expert_count,
                                        std::size_t k_r = 15) {
  if (expert_count < 1) throw ConfigError("routing needs at least one expert");
  if (k_r < 1) throw ConfigError("k_r must be at least 1");
  std::vector<std::size_t> per(expert_count, 0);
  std::vector<TokenId> values;
  values.reserve(labels.size());
  for (std::size_t z : labels) {
    if (z >= expert_count) throw DataError("routing label " + std::to_string(z) + " outside expert range");
    ++per[z];
    values.push_back(static_cast<TokenId>(z));
  }
  for (std::size_t m = 0; m < expert_count; ++m) {
    if (per[m] == 0) throw DataError("build error: domain " + std::to_string(m) + " has no sentences");
  }
  if (labels.size() < k_r) throw ConfigError("routing store is smaller than k_r");
  RoutingStore store;
  store.index = VectorIndex::build(std::move(embeddings), dim, std::move(values));
  store.expert_count = expert_count;
  store.k_r = k_r;
  return store;
}

inline RoutingStore build_routing_store(std::span<const LabeledSentence> sentences, const SentenceEmbedder& embedder,
                                        std::size_t expert_count, std::size_t k_r = 15) {
  const std::size_t dim = embedder.dim();
  std::vector<float> keys;
  keys.reserve(sentences.size() * dim);
  std::vector<std::size_t> labels;
  labels.reserve(sentences.size());
  for (const auto& s : sentences) {
    const auto e = embedder.embed(s.text);
    keys.insert(keys.end(), e.begin(), e.end());
    labels.push_back(s.label);
  }
  return build_routing_store(std::move(keys), dim, labels, expert_count, k_r);
}

// omega_m = share of the k_r nearest stored sentences labelled m; the chosen
// expert is the first maximiser.
inline RouterDecision route(const RoutingStore& store, std::span<const float> text_embedding, std::size_t k_r) {
  if (k_r < 1 || k_r > store.size()) throw ConfigError("k_r must lie in [1, routing store size]");
  const NeighborSet nbrs = store.index.search(text_embedding, k_r);
  RouterDecision d;
  d.scores.assign(store.expert_count, 0.0);
  for (TokenId z : nbrs.next_tokens) d.scores[z] += 1.0;
  for (double& w : d.scores) w /= static_cast<double>(k_r);
  d.chosen = static_cast<std::size_t>(std::max_element(d.scores.begin(), d.scores.end()) - d.scores.begin());
  return d;
}

inline RouterDecision route(const RoutingStore& store, std::span<const float> text_embedding) {
  return route(store, text_embedding, store.k_r);
}

struct RoutedAlignment {
  RouterDecision decision;
  AlignedSequence aligned;
};

// experts[m] is the datastore of expert m; one routing decision per text.
inline RoutedAlignment route_and_align(std::span<const Datastore* const> experts, const RoutingStore& store,
                                       std::span<const float> text_embedding, const LmProvider& provider,
                                       const TokenSequence& seq, const RetrievalParams& params,
                                       const LambdaConfig& lambda) {
  if (experts.size() < store.expert_count) throw ConfigError("an expert in the routing store has no datastore");
  for (std::size_t m = 0; m < store.expert_count; ++m) {
    if (experts[m] == nullptr) throw ConfigError("expert " + std::to_string(m) + " has no datastore");
  }
  RoutedAlignment out;
  out.decision = route(store, text_embedding);
  out.aligned = align_sequence(provider, *experts[out.decision.chosen], seq, params, lambda);
  return out;
}

inline constexpr std::string_view kRoutingMagic = "KNPR1";

inline void write_routing_file(const std::filesystem::path& path, std::span<const float> embeddings, std::size_t dim,
                               std::span<const std::size_t> labels) {
  if (dim == 0 || embeddings.size() != labels.size() * dim) throw DimensionError("embeddings are not count x d");
  io::Writer w(path);
  w.magic(kRoutingMagic);
  w.begin_payload();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
  w.put<std::uint64_t>(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(labels[i]));
    w.put_array(embeddings.subspan(i * dim, dim));
  }
  w.finish();
}

struct RoutingFile {
  std::size_t dim = 0;
  std::vector<float> embeddings;  // count x dim
  std::vector<std::size_t> labels;
};

inline RoutingFile read_routing_file(const std::filesystem::path& path) {
  io::MappedFile file(path);
  io::Reader r(file.bytes());
  r.expect_magic(kRoutingMagic);
  const std::size_t payload = r.position();
  r.verify_crc(payload);
  RoutingFile out;
  out.dim = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();
  if (out.dim == 0) throw FormatError("routing file has zero embedding width");
  if (count > r.remaining() / (4 + 4 * out.dim)) throw FormatError("file truncated");
  out.embeddings.reserve(count * out.dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    out.labels.push_back(r.get<std::uint32_t>());
    const auto e = r.get_array<float>(out.dim);
    out.embeddings.insert(out.embeddings.end(), e.begin(), e.end());
  }
  if (r.remaining() != 4) throw FormatError("trailing bytes after routing records");
  return out;
}

}  // namespace knnproxy
