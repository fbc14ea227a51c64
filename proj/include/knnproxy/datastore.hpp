#pragma once

// The (context embedding -> successor token) memory built from a
// source-reflective corpus.
//
// On disk a datastore is an index file (KNPX1) plus a JSON sidecar named
// "<path>.meta.json" holding the build metadata.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/index.hpp"
#include "knnproxy/lm.hpp"
#include "knnproxy/parallel.hpp"

namespace knnproxy {

struct BuildConfig {
  std::size_t window = 32;
  std::size_t stride = 1;
  std::optional<std::size_t> max_entries;
  std::uint64_t seed = 0;  // reservoir sampling when max_entries caps N
  IndexMode mode = IndexMode::exact;
  IvfParams ivf;
  std::size_t threads = 1;
};

struct DatastoreMeta {
  std::size_t window = 0;
  std::size_t stride = 1;
  std::size_t vocab_size = 0;
  std::size_t entries = 0;
  std::uint64_t seed = 0;
  std::string provider_fingerprint;
  std::string corpus_fingerprint;

  friend bool operator==(const DatastoreMeta&, const DatastoreMeta&) = default;
};

struct Datastore {
  VectorIndex index;
  DatastoreMeta meta;

  std::size_t size() const noexcept { return index.size(); }
  std::size_t dim() const noexcept { return index.dim(); }
};

inline std::string corpus_fingerprint(std::span<const TokenSequence> corpus) {
  std::uint64_t h = 0;
  for (const auto& seq : corpus) h = detail::hash_combine(h, detail::hash_ids(seq.bos_id, seq.ids));
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Emits one entry per window position p = 1, 1 + stride, ... < T of every
// sequence: key = embedding of the last `window` tokens of [bos, ids[0..p)],
// value = ids[p]. Windows at the left edge keep whatever prefix exists.
inline Datastore build_datastore(std::span<const TokenSequence> corpus, const LmProvider& provider,
                                 const BuildConfig& cfg) {
  if (cfg.window < 1) throw ConfigError("window must be at least 1");
  if (cfg.stride < 1) throw ConfigError("stride must be at least 1");
  if (cfg.max_entries && *cfg.max_entries < 1) throw ConfigError("max_entries must be positive");
  if (corpus.empty()) throw DataError("datastore corpus is empty");

  struct Slot {
    std::size_t seq;
    std::size_t pos;
  };
  std::vector<Slot> chosen;
  std::size_t seen = 0;
  std::mt19937_64 rng(cfg.seed);
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    for (TokenId t : corpus[s].ids) {
      if (t >= provider.vocab_size()) throw DataError("corpus token outside provider vocabulary");
    }
    for (std::size_t p = 1; p < corpus[s].size(); p += cfg.stride) {
      ++seen;
      if (!cfg.max_entries || chosen.size() < *cfg.max_entries) {
        chosen.push_back({s, p});
      } else {
        // Algorithm R: keep the new window with probability cap / seen.
        const std::uint64_t j = rng() % seen;
        if (j < *cfg.max_entries) chosen[j] = {s, p};
      }
    }
  }
  if (chosen.empty()) throw DataError("empty datastore: every corpus sequence is shorter than 2 tokens");
  std::sort(chosen.begin(), chosen.end(),
            [](const Slot& a, const Slot& b) { return a.seq < b.seq || (a.seq == b.seq && a.pos < b.pos); });

  // Group the selected positions per sequence so each document is embedded once.
  std::vector<std::size_t> first(corpus.size() + 1, chosen.size());
  for (std::size_t i = chosen.size(); i-- > 0;) first[chosen[i].seq] = i;
  for (std::size_t s = corpus.size(); s-- > 0;) first[s] = std::min(first[s], first[s + 1]);

  const std::size_t dim = provider.embed_dim();
  std::vector<float> keys(chosen.size() * dim);
  std::vector<TokenId> values(chosen.size());
  parallel_for(corpus.size(), cfg.threads, [&](std::size_t s) {
    if (first[s] == first[s + 1]) return;
    const auto emb = provider.window_embeddings(corpus[s], cfg.window);
    for (std::size_t i = first[s]; i < first[s + 1]; ++i) {
      const auto& e = emb.at(chosen[i].pos);
      if (e.size() != dim) throw DimensionError("provider embedding width changed");
      std::copy(e.begin(), e.end(), keys.begin() + static_cast<std::ptrdiff_t>(i * dim));
      values[i] = corpus[s].ids[chosen[i].pos];
    }
  });

  Datastore ds;
  ds.meta.window = cfg.window;
  ds.meta.stride = cfg.stride;
  ds.meta.vocab_size = provider.vocab_size();
  ds.meta.entries = chosen.size();
  ds.meta.seed = cfg.seed;
  ds.meta.provider_fingerprint = provider.fingerprint();
  ds.meta.corpus_fingerprint = corpus_fingerprint(corpus);
  ds.index = VectorIndex::build(std::move(keys), dim, std::move(values), cfg.mode, cfg.ivf);
  return ds;
}

inline std::filesystem::path meta_path(const std::filesystem::path& path) {
  return path.string() + ".meta.json";
}

inline void save_datastore(const Datastore& ds, const std::filesystem::path& path) {
  save_index(ds.index, path);
  nlohmann::json j = {
      {"window", ds.meta.window},
      {"stride", ds.meta.stride},
      {"vocab_size", ds.meta.vocab_size},
      {"entries", ds.meta.entries},
      {"seed", ds.meta.seed},
      {"provider_fingerprint", ds.meta.provider_fingerprint},
      {"corpus_fingerprint", ds.meta.corpus_fingerprint},
  };
  std::ofstream out(meta_path(path));
  out << j.dump(2) << '\n';
  if (!out) throw DataError("cannot write '" + meta_path(path).string() + "'");
}

// A provider fingerprint that differs from the one recorded at build time is
// reported through `warn` but does not fail the load.
inline Datastore load_datastore(const std::filesystem::path& path, const LmProvider* provider = nullptr,
                                const std::function<void(const std::string&)>& warn = {},
                                IvfParams ivf = {}) {
  Datastore ds;
  ds.index = load_index(path, ivf);
  std::ifstream in(meta_path(path));
  if (!in) throw DataError("missing datastore metadata '" + meta_path(path).string() + "'");
  try {
    const auto j = nlohmann::json::parse(in);
    ds.meta.window = j.at("window").get<std::size_t>();
    ds.meta.stride = j.at("stride").get<std::size_t>();
    ds.meta.vocab_size = j.at("vocab_size").get<std::size_t>();
    ds.meta.entries = j.at("entries").get<std::size_t>();
    ds.meta.seed = j.at("seed").get<std::uint64_t>();
    ds.meta.provider_fingerprint = j.at("provider_fingerprint").get<std::string>();
    ds.meta.corpus_fingerprint = j.at("corpus_fingerprint").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("datastore metadata: ") + e.what());
  }
  if (ds.meta.entries != ds.index.size()) throw FormatError("metadata entry count differs from index");
  for (TokenId v : ds.index.values()) {
    if (v >= ds.meta.vocab_size) throw FormatError("stored token outside vocabulary");
  }
  if (provider != nullptr) {
    if (provider->vocab_size() != ds.meta.vocab_size) {
      throw DataError("datastore vocabulary (" + std::to_string(ds.meta.vocab_size) +
                      ") differs from provider vocabulary (" + std::to_string(provider->vocab_size()) + ")");
    }
    if (provider->fingerprint() != ds.meta.provider_fingerprint && warn) {
      warn("datastore was built with provider '" + ds.meta.provider_fingerprint + "', now using '" +
           provider->fingerprint() + "'");
    }
  }
  return ds;
}

}  // namespace knnproxy
