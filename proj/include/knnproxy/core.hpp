#pragma once

// Domain types shared by every part of the engine: vocabularies, token
// sequences and next-token distributions over a vocabulary.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knnproxy/error.hpp"

namespace knnproxy {

using TokenId = std::uint32_t;

inline constexpr double kSimplexTolerance = 1e-6;

class Vocabulary {
 public:
  Vocabulary() = default;

  explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 2) throw ConfigError("vocabulary needs at least 2 tokens");
    index_.reserve(tokens_.size());
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
        throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  TokenId id_of(const std::string& tok) const {
    auto it = index_.find(tok);
    if (it == index_.end()) throw DataError("token '" + tok + "' not in vocabulary");
    return it->second;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// A tokenized text. Position i (0-based) is predicted from the context
// [bos, ids[0], ..., ids[i-1]]; the first prompt_len positions are context
// only and never scored.
struct TokenSequence {
  std::vector<TokenId> ids;
  TokenId bos_id = 0;
  std::size_t prompt_len = 0;

  std::size_t size() const noexcept { return ids.size(); }
  std::size_t scored_length() const noexcept {
    return ids.size() > prompt_len ? ids.size() - prompt_len : 0;
  }

  // Context preceding position `pos`, BOS included.
  std::vector<TokenId> context(std::size_t pos) const {
    std::vector<TokenId> ctx;
    ctx.reserve(pos + 1);
    ctx.push_back(bos_id);
    ctx.insert(ctx.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(pos));
    return ctx;
  }

  void validate(std::size_t vocab_size) const {
    if (prompt_len > ids.size()) throw DataError("prompt_len exceeds sequence length");
    if (scored_length() < 1) throw DataError("sequence has no scored tokens");
    if (bos_id >= vocab_size) throw DataError("bos id outside vocabulary");
    for (TokenId t : ids) {
      if (t >= vocab_size) throw DataError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
};

// Per scored position natural-log likelihoods.
struct LogLikSequence {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
};

// Next-token distribution. Dense distributions hold one entry per vocabulary
// id; sparse ones hold (id, mass) pairs sorted by id with unique ids.
class ProbDist {
 public:
  using Entry = std::pair<TokenId, double>;

  ProbDist() = default;

  static ProbDist dense(std::vector<double> probs) {
    ProbDist d;
    d.vocab_size_ = probs.size();
    d.dense_ = std::move(probs);
    d.sparse_flag_ = false;
    return d;
  }

  // Duplicate ids are merged by summation.
  static ProbDist sparse(std::size_t vocab_size, std::vector<Entry> entries) {
    std::sort(entries.begin(), entries.end(),
              [](const Entry& a, const Entry& b) { return a.first < b.first; });
    std::vector<Entry> merged;
    merged.reserve(entries.size());
    for (const auto& e : entries) {
      if (e.first >= vocab_size) throw DimensionError("sparse id outside vocabulary");
      if (!merged.empty() && merged.back().first == e.first) {
        merged.back().second += e.second;
      } else {
        merged.push_back(e);
      }
    }
    ProbDist d;
    d.vocab_size_ = vocab_size;
    d.sparse_ = std::move(merged);
    d.sparse_flag_ = true;
    return d;
  }

  static ProbDist uniform(std::size_t vocab_size) {
    return dense(std::vector<double>(vocab_size, 1.0 / static_cast<double>(vocab_size)));
  }

  static ProbDist point_mass(std::size_t vocab_size, TokenId id) {
    return sparse(vocab_size, {{id, 1.0}});
  }

  bool is_sparse() const noexcept { return sparse_flag_; }
  std::size_t vocab_size() const noexcept { return vocab_size_; }

  double prob(TokenId id) const {
    if (!sparse_flag_) return id < dense_.size() ? dense_[id] : 0.0;
    auto it = std::lower_bound(sparse_.begin(), sparse_.end(), id,
                               [](const Entry& e, TokenId v) { return e.first < v; });
    return (it != sparse_.end() && it->first == id) ? it->second : 0.0;
  }
  double operator[](TokenId id) const { return prob(id); }

  // Calls f(id, mass) for every stored entry, in ascending id order.
  template <typename F>
  void for_each(F&& f) const {
    if (sparse_flag_) {
      for (const auto& [id, p] : sparse_) f(id, p);
    } else {
      for (std::size_t i = 0; i < dense_.size(); ++i) f(static_cast<TokenId>(i), dense_[i]);
    }
  }

  std::vector<TokenId> support() const {
    std::vector<TokenId> s;
    for_each([&](TokenId id, double p) {
      if (p > 0.0) s.push_back(id);
    });
    return s;
  }

  std::vector<double> to_dense() const {
    if (!sparse_flag_) return dense_;
    std::vector<double> out(vocab_size_, 0.0);
    for (const auto& [id, p] : sparse_) out[id] = p;
    return out;
  }

  ProbDist as_sparse() const {
    if (sparse_flag_) return *this;
    std::vector<Entry> entries;
    for (std::size_t i = 0; i < dense_.size(); ++i) {
      if (dense_[i] != 0.0) entries.emplace_back(static_cast<TokenId>(i), dense_[i]);
    }
    return sparse(vocab_size_, std::move(entries));
  }

  std::span<const double> dense_values() const noexcept { return dense_; }
  std::span<const Entry> sparse_entries() const noexcept { return sparse_; }

  friend bool operator==(const ProbDist& a, const ProbDist& b) {
    return a.vocab_size_ == b.vocab_size_ && a.sparse_flag_ == b.sparse_flag_ &&
           a.dense_ == b.dense_ && a.sparse_ == b.sparse_;
  }

 private:
  std::size_t vocab_size_ = 0;
  bool sparse_flag_ = false;
  std::vector<double> dense_;
  std::vector<Entry> sparse_;
};

inline bool normalize_check(const ProbDist& d) {
  if (d.vocab_size() == 0) return false;
  double total = 0.0;
  bool ok = true;
  d.for_each([&](TokenId, double p) {
    if (!(p >= 0.0) || !std::isfinite(p)) ok = false;
    total += p;
  });
  return ok && std::abs(total - 1.0) <= kSimplexTolerance;
}

// w * a + (1 - w) * b. Sparse inputs on both sides stay sparse; otherwise the
// result is dense.
inline ProbDist mix(const ProbDist& a, const ProbDist& b, double w) {
  if (a.vocab_size() != b.vocab_size()) {
    throw DimensionError("mix over vocabularies of size " + std::to_string(a.vocab_size()) +
                         " and " + std::to_string(b.vocab_size()));
  }
  if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("mix weight must lie in [0, 1]");
  if (w == 1.0) return a;
  if (w == 0.0) return b;
  const double u = 1.0 - w;

  if (a.is_sparse() && b.is_sparse()) {
    std::vector<ProbDist::Entry> out;
    auto ea = a.sparse_entries();
    auto eb = b.sparse_entries();
    std::size_t i = 0, j = 0;
    while (i < ea.size() || j < eb.size()) {
      if (j == eb.size() || (i < ea.size() && ea[i].first < eb[j].first)) {
        out.emplace_back(ea[i].first, w * ea[i].second + u * 0.0);
        ++i;
      } else if (i == ea.size() || eb[j].first < ea[i].first) {
        out.emplace_back(eb[j].first, w * 0.0 + u * eb[j].second);
        ++j;
      } else {
        out.emplace_back(ea[i].first, w * ea[i].second + u * eb[j].second);
        ++i;
        ++j;
      }
    }
    return ProbDist::sparse(a.vocab_size(), std::move(out));
  }

  std::vector<double> out(a.vocab_size());
  if (!a.is_sparse() && !b.is_sparse()) {
    auto da = a.dense_values();
    auto db = b.dense_values();
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = w * da[v] + u * db[v];
  } else if (a.is_sparse()) {
    auto db = b.dense_values();
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = w * 0.0 + u * db[v];
    for (const auto& [id, p] : a.sparse_entries()) out[id] = w * p + u * db[id];
  } else {
    auto da = a.dense_values();
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = w * da[v] + u * 0.0;
    for (const auto& [id, p] : b.sparse_entries()) out[id] = w * da[id] + u * p;
  }
  return ProbDist::dense(std::move(out));
}

}  // namespace knnproxy
