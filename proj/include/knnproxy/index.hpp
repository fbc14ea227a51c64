#pragma once

// Nearest-neighbour search over datastore keys under true L2 distance.
//
// Two modes share one result contract: neighbours ordered by ascending
// distance, ties broken by ascending row id. Exact mode scans every row;
// approximate mode scans the inverted lists of the n_probe closest k-means
// centroids. brute_force_search is the reference oracle for both.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnproxy/binary_io.hpp"
#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"

namespace knnproxy {

enum class IndexMode : std::uint8_t { exact = 0, approximate = 1 };

struct IvfParams {
  std::size_t list_count = 0;  // 0: round(sqrt(N))
  std::size_t n_probe = 72;
  std::size_t kmeans_iterations = 12;
  std::size_t train_points_per_list = 64;
  std::uint64_t seed = 0x6b6e6e70;
};

struct NeighborSet {
  std::vector<std::size_t> indices;
  std::vector<double> distances;  // true L2, ascending
  std::vector<TokenId> next_tokens;

  std::size_t size() const noexcept { return indices.size(); }
  bool empty() const noexcept { return indices.empty(); }

  // The first k neighbours, still ranked.
  NeighborSet prefix(std::size_t k) const {
    k = std::min(k, size());
    NeighborSet out;
    out.indices.assign(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(k));
    out.distances.assign(distances.begin(), distances.begin() + static_cast<std::ptrdiff_t>(k));
    out.next_tokens.assign(next_tokens.begin(), next_tokens.begin() + static_cast<std::ptrdiff_t>(k));
    return out;
  }
};

namespace detail {

// Squared L2 with eight independent float lanes so the loop vectorises
// without reassociation flags; the final fold is in double.
inline double squared_l2(const float* a, const float* b, std::size_t d) {
  float lane[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  const std::size_t body = d - d % 8;
  for (std::size_t i = 0; i < body; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) {
      const float t = a[i + l] - b[i + l];
      lane[l] += t * t;
    }
  }
  double acc = 0.0;
  for (std::size_t i = body; i < d; ++i) {
    const double t = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += t * t;
  }
  for (float l : lane) acc += static_cast<double>(l);
  return acc;
}

struct Candidate {
  double sq;
  std::size_t row;
};

inline bool candidate_less(const Candidate& x, const Candidate& y) {
  return x.sq < y.sq || (x.sq == y.sq && x.row < y.row);
}

inline NeighborSet to_neighbor_set(std::span<const Candidate> ranked, std::span<const TokenId> values) {
  NeighborSet out;
  out.indices.reserve(ranked.size());
  out.distances.reserve(ranked.size());
  out.next_tokens.reserve(ranked.size());
  for (const auto& c : ranked) {
    out.indices.push_back(c.row);
    out.distances.push_back(std::sqrt(c.sq));
    out.next_tokens.push_back(values[c.row]);
  }
  return out;
}

// Keeps the k smallest candidates (by distance, then row) and sorts them.
// Keeps the k smallest candidates in candidate_less order. A histogram over
// the distance range first discards every bucket above the one holding the
// k-th value; bucketing is monotone in sq, so no top-k member is lost.
inline void select_top_k(std::vector<Candidate>& cands, std::size_t k) {
  if (k < cands.size()) {
    double lo = cands[0].sq, hi = cands[0].sq;
    for (const auto& c : cands) {
      lo = std::min(lo, c.sq);
      hi = std::max(hi, c.sq);
    }
    constexpr std::size_t kBuckets = 1024;
    const double scale = static_cast<double>(kBuckets - 1) / (hi - lo);
    if (hi > lo && std::isfinite(scale)) {
      auto bucket = [&](double sq) {
        return std::min(kBuckets - 1, static_cast<std::size_t>((sq - lo) * scale));
      };
      std::array<std::size_t, kBuckets> count{};
      for (const auto& c : cands) ++count[bucket(c.sq)];
      std::size_t cut = 0;
      for (std::size_t seen = 0; cut < kBuckets; ++cut) {
        seen += count[cut];
        if (seen >= k) break;
      }
      std::size_t kept = 0;
      for (const auto& c : cands) {
        if (bucket(c.sq) <= cut) cands[kept++] = c;
      }
      cands.resize(kept);
    }
    std::nth_element(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(k), cands.end(),
                     candidate_less);
    cands.resize(std::min(k, cands.size()));
  }
  std::sort(cands.begin(), cands.end(), candidate_less);
}

inline void check_query(std::size_t rows, std::size_t dim, std::span<const float> query, std::size_t k) {
  if (rows == 0) throw RequestError("search on an empty index");
  if (query.size() != dim) {
    throw DimensionError("query has dimension " + std::to_string(query.size()) + ", index has " +
                         std::to_string(dim));
  }
  for (float x : query) {
    if (!std::isfinite(x)) throw RequestError("query contains a non-finite value");
  }
  if (k < 1) throw RequestError("k must be at least 1");
  if (k > rows) {
    throw RequestError("k=" + std::to_string(k) + " exceeds index size " + std::to_string(rows));
  }
}

}  // namespace detail

// Reference search: full sort of every row. Used as the correctness oracle.
inline NeighborSet brute_force_search(std::span<const float> keys, std::size_t dim,
                                      std::span<const TokenId> values, std::span<const float> query,
                                      std::size_t k) {
  if (dim == 0 || keys.size() % dim != 0) throw DimensionError("key matrix is not N x d");
  const std::size_t rows = keys.size() / dim;
  if (values.size() != rows) throw DimensionError("values length differs from key rows");
  detail::check_query(rows, dim, query, k);
  std::vector<detail::Candidate> all(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    all[r] = {detail::squared_l2(query.data(), keys.data() + r * dim, dim), r};
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const detail::Candidate& a, const detail::Candidate& b) { return a.sq < b.sq; });
  return detail::to_neighbor_set(std::span(all).first(k), values);
}

class VectorIndex {
 public:
  VectorIndex() = default;

  // keys is row-major N x dim.
  static VectorIndex build(std::vector<float> keys, std::size_t dim, std::vector<TokenId> values,
                           IndexMode mode = IndexMode::exact, IvfParams ivf = {}) {
    if (dim == 0) throw DimensionError("key dimension must be positive");
    if (keys.empty()) throw DataError("cannot build an index from zero keys");
    if (keys.size() % dim != 0) throw DimensionError("key buffer is not a multiple of the dimension");
    const std::size_t rows = keys.size() / dim;
    if (values.size() != rows) throw DimensionError("values length differs from key rows");
    for (float x : keys) {
      if (!std::isfinite(x)) throw DataError("validation error: non-finite value in keys");
    }
    VectorIndex idx;
    idx.dim_ = dim;
    idx.keys_ = std::move(keys);
    idx.values_ = std::move(values);
    idx.mode_ = mode;
    idx.ivf_ = ivf;
    if (mode == IndexMode::approximate) idx.train_partition();
    return idx;
  }

  std::size_t size() const noexcept { return values_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  IndexMode mode() const noexcept { return mode_; }
  std::span<const float> keys() const noexcept { return keys_; }
  std::span<const TokenId> values() const noexcept { return values_; }
  std::span<const float> row(std::size_t r) const { return std::span(keys_).subspan(r * dim_, dim_); }
  std::size_t list_count() const noexcept { return centroids_.size() / std::max<std::size_t>(dim_, 1); }
  std::size_t n_probe() const noexcept { return ivf_.n_probe; }
  void set_n_probe(std::size_t n) { ivf_.n_probe = std::max<std::size_t>(n, 1); }

  NeighborSet search(std::span<const float> query, std::size_t k) const {
    detail::check_query(size(), dim_, query, k);
    return mode_ == IndexMode::exact ? search_exact(query, k) : search_ivf(query, k);
  }

 private:
  NeighborSet search_exact(std::span<const float> q, std::size_t k) const {
    const std::size_t rows = size();
    std::vector<detail::Candidate> cands(rows);
    const float* base = keys_.data();
    for (std::size_t r = 0; r < rows; ++r) {
      cands[r] = {detail::squared_l2(q.data(), base + r * dim_, dim_), r};
    }
    detail::select_top_k(cands, k);
    return detail::to_neighbor_set(cands, values_);
  }

  NeighborSet search_ivf(std::span<const float> q, std::size_t k) const {
    const std::size_t lists = list_count();
    std::vector<detail::Candidate> order(lists);
    for (std::size_t c = 0; c < lists; ++c) {
      order[c] = {detail::squared_l2(q.data(), centroids_.data() + c * dim_, dim_), c};
    }
    std::sort(order.begin(), order.end(), detail::candidate_less);

    std::vector<detail::Candidate> cands;
    std::size_t probed = 0;
    // Probe at least n_probe lists, and keep going until k candidates exist.
    while (probed < lists && (probed < ivf_.n_probe || cands.size() < k)) {
      for (std::size_t r : lists_[order[probed].row]) {
        cands.push_back({detail::squared_l2(q.data(), keys_.data() + r * dim_, dim_), r});
      }
      ++probed;
    }
    detail::select_top_k(cands, k);
    return detail::to_neighbor_set(cands, values_);
  }

  void train_partition() {
    const std::size_t rows = size();
    std::size_t lists = ivf_.list_count;
    if (lists == 0) lists = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(rows))));
    lists = std::clamp<std::size_t>(lists, 1, rows);

    std::mt19937_64 rng(ivf_.seed);
    std::vector<std::size_t> perm(rows);
    for (std::size_t i = 0; i < rows; ++i) perm[i] = i;
    std::shuffle(perm.begin(), perm.end(), rng);
    const std::size_t train = std::min(rows, std::max(lists, lists * ivf_.train_points_per_list));

    centroids_.assign(lists * dim_, 0.0f);
    for (std::size_t c = 0; c < lists; ++c) {
      std::copy_n(keys_.data() + perm[c] * dim_, dim_, centroids_.data() + c * dim_);
    }

    std::vector<std::size_t> assign(train, 0);
    std::vector<double> sums(lists * dim_);
    std::vector<std::size_t> counts(lists);
    for (std::size_t it = 0; it < ivf_.kmeans_iterations; ++it) {
      for (std::size_t t = 0; t < train; ++t) assign[t] = nearest_centroid(row(perm[t]).data());
      std::fill(sums.begin(), sums.end(), 0.0);
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t t = 0; t < train; ++t) {
        const float* x = keys_.data() + perm[t] * dim_;
        double* s = sums.data() + assign[t] * dim_;
        for (std::size_t j = 0; j < dim_; ++j) s[j] += x[j];
        ++counts[assign[t]];
      }
      for (std::size_t c = 0; c < lists; ++c) {
        if (counts[c] == 0) {
          // Empty cluster: reseed from a training point.
          std::copy_n(keys_.data() + perm[rng() % train] * dim_, dim_, centroids_.data() + c * dim_);
          continue;
        }
        for (std::size_t j = 0; j < dim_; ++j) {
          centroids_[c * dim_ + j] = static_cast<float>(sums[c * dim_ + j] / static_cast<double>(counts[c]));
        }
      }
    }

    lists_.assign(lists, {});
    for (std::size_t r = 0; r < rows; ++r) lists_[nearest_centroid(row(r).data())].push_back(r);
  }

  std::size_t nearest_centroid(const float* x) const {
    const std::size_t lists = list_count();
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < lists; ++c) {
      const double d = detail::squared_l2(x, centroids_.data() + c * dim_, dim_);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    return best;
  }

  std::size_t dim_ = 0;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
  IndexMode mode_ = IndexMode::exact;
  IvfParams ivf_;
  std::vector<float> centroids_;
  std::vector<std::vector<std::size_t>> lists_;
};

inline constexpr std::string_view kIndexMagic = "KNPX1";

// Layout: magic, u8 mode, u32 d, u64 N, N*d f32 keys, N u32 values, u32 CRC
// of everything between the magic and the CRC.
inline void save_index(const VectorIndex& index, const std::filesystem::path& path) {
  io::Writer w(path);
  w.magic(kIndexMagic);
  w.begin_payload();
  w.put<std::uint8_t>(static_cast<std::uint8_t>(index.mode()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(index.dim()));
  w.put<std::uint64_t>(index.size());
  w.put_array(index.keys());
  w.put_array(index.values());
  w.finish();
}

// Approximate-mode partitions are retrained deterministically from the keys.
inline VectorIndex load_index(const std::filesystem::path& path, IvfParams ivf = {}) {
  io::MappedFile file(path);
  io::Reader r(file.bytes());
  r.expect_magic(kIndexMagic);
  const std::size_t payload_begin = r.position();
  r.verify_crc(payload_begin);
  const auto mode_byte = r.get<std::uint8_t>();
  if (mode_byte > 1) throw FormatError("unknown index mode " + std::to_string(mode_byte));
  const auto dim = r.get<std::uint32_t>();
  const auto rows = r.get<std::uint64_t>();
  if (dim == 0) throw FormatError("zero key dimension");
  if (rows == 0 || rows > r.remaining() / (static_cast<std::uint64_t>(dim) * 4 + 4)) {
    throw FormatError("row count inconsistent with file size");
  }
  auto keys = r.get_array<float>(rows * dim);
  auto values = r.get_array<std::uint32_t>(rows);
  if (r.remaining() != 4) throw FormatError("trailing bytes after values");
  return VectorIndex::build(std::move(keys), dim, std::move(values), static_cast<IndexMode>(mode_byte), ivf);
}

}  // namespace knnproxy
