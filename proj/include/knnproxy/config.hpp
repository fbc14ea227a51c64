#pragma once

// One JSON run configuration shared by every CLI subcommand. Parsing rejects
// unknown keys; to_json emits the fully resolved form, which parses back to
// the same configuration.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knnproxy/align.hpp"
#include "knnproxy/datastore.hpp"
#include "knnproxy/detect.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/eval.hpp"
#include "knnproxy/index.hpp"

namespace knnproxy {

struct ProviderConfig {
  std::string kind = "toy";  // toy | file | http
  // toy: whitespace-tokenised training corpus, one document per line
  std::string corpus;
  std::size_t order = 3;
  double alpha = 0.1;
  std::size_t embed_dim = 32;
  std::size_t embed_window = 3;
  double recency = 0.5;
  std::uint64_t embed_seed = 0;
  // file: KNPF1 feature file
  std::string features;
  TokenId bos_id = 0;
  // http: base URL; the bearer token is read from KNNPROXY_LM_TOKEN only
  std::string url;
  int layer = -1;
};

struct DatastoreConfig {
  std::string path;
  std::string corpus;  // build-datastore input, same format as the toy corpus
  std::size_t window = 32;
  std::size_t stride = 1;
  std::optional<std::size_t> max_entries;
  std::string mode = "exact";  // exact | approximate
  std::size_t lists = 0;       // 0 = round(sqrt(N))
  std::size_t n_probe = 72;
};

struct RouterConfig {
  std::string registry;
  std::size_t k_r = 15;
  std::size_t embed_dim = 256;
};

struct BenchConfig {
  std::size_t texts_per_class = 500;
  std::size_t text_length = 32;
  std::size_t datastore_tokens = 10000;
};

struct SweepConfig {
  std::string axis = "tau";
  std::vector<double> values;  // empty = the axis default grid
};

struct RunConfig {
  ProviderConfig provider;
  std::optional<ProviderConfig> reference;  // defaults to the proxy
  DatastoreConfig datastore;
  RetrievalParams retrieval;
  LambdaConfig lambda;
  DetectorConfig detector;
  RouterConfig router;
  BenchConfig bench;
  BoundExperimentConfig bound;
  std::size_t bound_replications = 20;
  SweepConfig sweep;
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0 = logical cores
  std::string log_level = "info";

  std::size_t resolved_threads() const { return threads == 0 ? default_thread_count() : threads; }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!ok.contains(k)) throw ConfigError("unknown config key '" + where + (where.empty() ? "" : ".") + k + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

template <typename T>
void read(const json& j, const char* key, std::optional<T>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v);
  out = v;
}

template <typename T>
json opt(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

inline ProviderConfig provider_from_json(const json& j, const std::string& where) {
  check_keys(j, where,
             {"kind", "corpus", "order", "alpha", "embed_dim", "embed_window", "recency", "embed_seed", "features",
              "bos_id", "url", "layer"});
  ProviderConfig p;
  read(j, "kind", p.kind);
  read(j, "corpus", p.corpus);
  read(j, "order", p.order);
  read(j, "alpha", p.alpha);
  read(j, "embed_dim", p.embed_dim);
  read(j, "embed_window", p.embed_window);
  read(j, "recency", p.recency);
  read(j, "embed_seed", p.embed_seed);
  read(j, "features", p.features);
  read(j, "bos_id", p.bos_id);
  read(j, "url", p.url);
  read(j, "layer", p.layer);
  if (p.kind != "toy" && p.kind != "file" && p.kind != "http") {
    throw ConfigError("provider kind must be toy, file or http");
  }
  return p;
}

inline json provider_to_json(const ProviderConfig& p) {
  return {{"kind", p.kind},         {"corpus", p.corpus},     {"order", p.order},
          {"alpha", p.alpha},       {"embed_dim", p.embed_dim}, {"embed_window", p.embed_window},
          {"recency", p.recency},   {"embed_seed", p.embed_seed}, {"features", p.features},
          {"bos_id", p.bos_id},     {"url", p.url},           {"layer", p.layer}};
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  detail::check_keys(j, "",
                     {"provider", "reference", "datastore", "retrieval", "lambda", "detector", "router", "bench",
                      "bound", "sweep", "seed", "threads", "log_level"});
  RunConfig c;
  if (j.contains("provider")) c.provider = detail::provider_from_json(j["provider"], "provider");
  if (j.contains("reference") && !j["reference"].is_null()) {
    c.reference = detail::provider_from_json(j["reference"], "reference");
  }
  if (j.contains("datastore")) {
    const auto& s = j["datastore"];
    detail::check_keys(s, "datastore",
                       {"path", "corpus", "window", "stride", "max_entries", "mode", "lists", "n_probe"});
    read(s, "path", c.datastore.path);
    read(s, "corpus", c.datastore.corpus);
    read(s, "window", c.datastore.window);
    read(s, "stride", c.datastore.stride);
    read(s, "max_entries", c.datastore.max_entries);
    read(s, "mode", c.datastore.mode);
    read(s, "lists", c.datastore.lists);
    read(s, "n_probe", c.datastore.n_probe);
    if (c.datastore.mode != "exact" && c.datastore.mode != "approximate") {
      throw ConfigError("datastore.mode must be exact or approximate");
    }
  }
  if (j.contains("retrieval")) {
    const auto& s = j["retrieval"];
    detail::check_keys(s, "retrieval", {"mode", "k", "tau", "k_candidates", "tau_candidates", "c", "keep_weights"});
    std::string mode = "adaptive";
    read(s, "mode", mode);
    if (mode != "adaptive" && mode != "fixed") throw ConfigError("retrieval.mode must be adaptive or fixed");
    c.retrieval.mode = mode == "fixed" ? SelectionMode::fixed : SelectionMode::adaptive;
    read(s, "k", c.retrieval.k);
    read(s, "tau", c.retrieval.tau);
    read(s, "k_candidates", c.retrieval.k_candidates);
    read(s, "tau_candidates", c.retrieval.tau_candidates);
    read(s, "c", c.retrieval.c);
    read(s, "keep_weights", c.retrieval.keep_weights);
  }
  if (j.contains("lambda")) {
    const auto& s = j["lambda"];
    detail::check_keys(s, "lambda", {"mode", "value"});
    std::string mode = "adaptive";
    read(s, "mode", mode);
    if (mode != "adaptive" && mode != "fixed") throw ConfigError("lambda.mode must be adaptive or fixed");
    c.lambda.mode = mode == "fixed" ? LambdaMode::fixed : LambdaMode::adaptive;
    read(s, "value", c.lambda.value);
  }
  if (j.contains("detector")) {
    const auto& s = j["detector"];
    detail::check_keys(s, "detector", {"kind", "gamma", "epsilon", "threshold", "polarity"});
    std::string kind = to_string(c.detector.kind);
    read(s, "kind", kind);
    c.detector.kind = parse_detector_kind(kind);
    read(s, "gamma", c.detector.gamma);
    read(s, "epsilon", c.detector.epsilon);
    read(s, "threshold", c.detector.threshold);
    std::optional<std::string> pol;
    read(s, "polarity", pol);
    if (pol) {
      if (*pol == "higher_is_llm") c.detector.polarity = Polarity::higher_is_llm;
      else if (*pol == "lower_is_llm") c.detector.polarity = Polarity::lower_is_llm;
      else throw ConfigError("detector.polarity must be higher_is_llm or lower_is_llm");
    }
  }
  if (j.contains("router")) {
    const auto& s = j["router"];
    detail::check_keys(s, "router", {"registry", "k_r", "embed_dim"});
    read(s, "registry", c.router.registry);
    read(s, "k_r", c.router.k_r);
    read(s, "embed_dim", c.router.embed_dim);
  }
  if (j.contains("bench")) {
    const auto& s = j["bench"];
    detail::check_keys(s, "bench", {"texts_per_class", "text_length", "datastore_tokens"});
    read(s, "texts_per_class", c.bench.texts_per_class);
    read(s, "text_length", c.bench.text_length);
    read(s, "datastore_tokens", c.bench.datastore_tokens);
  }
  if (j.contains("bound")) {
    const auto& s = j["bound"];
    detail::check_keys(s, "bound",
                       {"dim", "vocab_size", "datastore_size", "queries", "delta", "k", "tau", "weight_scale",
                        "bound_scale", "replications"});
    read(s, "dim", c.bound.dim);
    read(s, "vocab_size", c.bound.vocab_size);
    read(s, "datastore_size", c.bound.datastore_size);
    read(s, "queries", c.bound.queries);
    read(s, "delta", c.bound.delta);
    read(s, "k", c.bound.k);
    read(s, "tau", c.bound.tau);
    read(s, "weight_scale", c.bound.weight_scale);
    read(s, "bound_scale", c.bound.bound_scale);
    read(s, "replications", c.bound_replications);
  }
  if (j.contains("sweep")) {
    const auto& s = j["sweep"];
    detail::check_keys(s, "sweep", {"axis", "values"});
    read(s, "axis", c.sweep.axis);
    read(s, "values", c.sweep.values);
    parse_sweep_axis(c.sweep.axis);
  }
  read(j, "seed", c.seed);
  read(j, "threads", c.threads);
  read(j, "log_level", c.log_level);
  if (c.log_level != "info" && c.log_level != "debug" && c.log_level != "warn") {
    throw ConfigError("log_level must be warn, info or debug");
  }
  return c;
}

inline nlohmann::json config_to_json(const RunConfig& c) {
  using detail::opt;
  nlohmann::json j;
  j["provider"] = detail::provider_to_json(c.provider);
  j["reference"] = c.reference ? detail::provider_to_json(*c.reference) : nlohmann::json(nullptr);
  j["datastore"] = {{"path", c.datastore.path},       {"corpus", c.datastore.corpus},
                    {"window", c.datastore.window},   {"stride", c.datastore.stride},
                    {"max_entries", opt(c.datastore.max_entries)}, {"mode", c.datastore.mode},
                    {"lists", c.datastore.lists},     {"n_probe", c.datastore.n_probe}};
  j["retrieval"] = {{"mode", c.retrieval.mode == SelectionMode::fixed ? "fixed" : "adaptive"},
                    {"k", c.retrieval.k},
                    {"tau", c.retrieval.tau},
                    {"k_candidates", c.retrieval.k_candidates},
                    {"tau_candidates", c.retrieval.tau_candidates},
                    {"c", c.retrieval.c},
                    {"keep_weights", c.retrieval.keep_weights}};
  j["lambda"] = {{"mode", c.lambda.mode == LambdaMode::fixed ? "fixed" : "adaptive"}, {"value", c.lambda.value}};
  nlohmann::json pol = nullptr;
  if (c.detector.polarity) pol = *c.detector.polarity == Polarity::higher_is_llm ? "higher_is_llm" : "lower_is_llm";
  j["detector"] = {{"kind", to_string(c.detector.kind)},
                   {"gamma", opt(c.detector.gamma)},
                   {"epsilon", c.detector.epsilon},
                   {"threshold", opt(c.detector.threshold)},
                   {"polarity", pol}};
  j["router"] = {{"registry", c.router.registry}, {"k_r", c.router.k_r}, {"embed_dim", c.router.embed_dim}};
  j["bench"] = {{"texts_per_class", c.bench.texts_per_class},
                {"text_length", c.bench.text_length},
                {"datastore_tokens", c.bench.datastore_tokens}};
  j["bound"] = {{"dim", c.bound.dim},
                {"vocab_size", c.bound.vocab_size},
                {"datastore_size", c.bound.datastore_size},
                {"queries", c.bound.queries},
                {"delta", c.bound.delta},
                {"k", c.bound.k},
                {"tau", c.bound.tau},
                {"weight_scale", c.bound.weight_scale},
                {"bound_scale", c.bound.bound_scale},
                {"replications", c.bound_replications}};
  j["sweep"] = {{"axis", c.sweep.axis}, {"values", c.sweep.values}};
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["log_level"] = c.log_level;
  return j;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

// Every config key with a one-line description, for --help.
inline const char* config_reference() {
  return R"(Config keys (JSON; flags override file values):
  provider.kind            toy | file | http
  provider.corpus          toy: training corpus, one whitespace-tokenised document per line
  provider.order           toy: n-gram order (default 3)
  provider.alpha           toy: additive smoothing (default 0.1)
  provider.embed_dim       toy: embedding width (default 32)
  provider.embed_window    toy: tokens mixed into an embedding (default 3)
  provider.recency         toy: geometric weight of older tokens (default 0.5)
  provider.embed_seed      toy: embedding hash seed (default 0)
  provider.features        file: KNPF1 feature file
  provider.bos_id          file: BOS token id (default 0)
  provider.url             http: base URL (or KNNPROXY_LM_URL)
  provider.layer           http: hidden layer for embeddings (default -1 = last)
  reference                same shape as provider; Fast-DetectGPT/Binoculars reference (default: the proxy)
  datastore.path           index file; metadata lives in <path>.meta.json
  datastore.corpus         build-datastore input corpus
  datastore.window         context window W (default 32)
  datastore.stride         window stride (default 1)
  datastore.max_entries    reservoir cap on N (default none)
  datastore.mode           exact | approximate (default exact)
  datastore.lists          approximate: inverted lists (default 0 = round(sqrt N))
  datastore.n_probe        approximate: lists probed per query (default 72)
  retrieval.mode           adaptive | fixed (default adaptive)
  retrieval.k              fixed-mode k (default 256)
  retrieval.tau            fixed-mode temperature (default 5)
  retrieval.k_candidates   adaptive grid (default 16..1024, powers of two)
  retrieval.tau_candidates adaptive grid (default 0.1 0.5 1 5 10 50)
  retrieval.c              surrogate coefficient on r_eff (default 1)
  retrieval.keep_weights   record per-neighbour weights in debug diagnostics
  lambda.mode              adaptive | fixed (default adaptive)
  lambda.value             fixed-mode proxy weight (default 0.1)
  detector.kind            likelihood | fast_detect | binoculars
  detector.gamma           clip bound, null disables clipping (default -7.5)
  detector.epsilon         probability floor (default 1e-10)
  detector.threshold       decision threshold, null = scores only
  detector.polarity        higher_is_llm | lower_is_llm (default per detector)
  router.registry          expert registry JSON
  router.k_r               routing vote size (default 15)
  router.embed_dim         hashed n-gram sentence embedding width (default 256)
  bench.texts_per_class    synthetic texts per class (default 500)
  bench.text_length        tokens per synthetic text (default 32)
  bench.datastore_tokens   synthetic datastore corpus size (default 10000)
  bound.dim, bound.vocab_size, bound.datastore_size, bound.queries, bound.delta,
  bound.k, bound.tau, bound.weight_scale, bound.bound_scale, bound.replications
                           retrieval error bound experiment
  sweep.axis               tau | k | lambda | gamma | corpus-size
  sweep.values             axis values (default: a built-in grid per axis)
  seed                     master seed (or KNNPROXY_SEED; default 1)
  threads                  worker threads (default 0 = logical cores)
  log_level                warn | info | debug (default info)
)";
}

}  // namespace knnproxy
