// knnproxy command-line tool.
//
// Exit codes: 0 ok, 2 configuration error, 3 data or format error,
// 4 degenerate score. Results go to --out (default stdout); structured
// JSON-lines logs go to stderr.

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "knnproxy/knnproxy.hpp"

namespace kp = knnproxy;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum class Level { warn = 0, info = 1, debug = 2 };

class Log {
 public:
  void set_level(const std::string& s) { level_ = s == "debug" ? Level::debug : s == "warn" ? Level::warn : Level::info; }
  bool enabled(Level l) const { return l <= level_; }

  void emit(Level l, const std::string& event, json fields = json::object()) const {
    if (!enabled(l)) return;
    json j = {{"level", l == Level::warn ? "warn" : l == Level::info ? "info" : "debug"}, {"event", event}};
    for (auto& [k, v] : fields.items()) j[k] = v;
    std::cerr << j.dump() << '\n';
  }
  void error(int code, const std::string& msg) const {
    std::cerr << json{{"level", "error"}, {"event", "error"}, {"exit_code", code}, {"message", msg}}.dump() << '\n';
  }

 private:
  Level level_ = Level::info;
};

Log g_log;

// Results sink: a file when --out is given, stdout otherwise.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw kp::DataError("cannot write '" + path + "'");
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }
  void line(const json& j) { stream() << j.dump() << '\n'; }

 private:
  std::ofstream file_;
};

// Every flag is optional and, when given, overrides the config file.
struct Flags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::string> log_level;

  std::optional<std::string> provider_kind, provider_corpus, features, url;
  std::optional<std::size_t> order, embed_dim;
  std::optional<std::string> datastore, datastore_corpus, index_mode;
  std::optional<std::size_t> window, stride, max_entries, n_probe;
  std::optional<std::string> retrieval_mode, lambda_mode, detector;
  std::optional<std::size_t> k;
  std::optional<double> tau, c, lambda, gamma, epsilon, threshold;
  bool no_clip = false;
  std::optional<std::string> registry;
  std::optional<std::size_t> k_r;
  std::optional<std::size_t> texts_per_class, text_length, datastore_tokens;
  std::optional<double> delta;
  std::optional<std::size_t> replications, queries;
  std::optional<std::string> axis;
  std::vector<double> values;

  std::string input;
  bool baseline = false;
  bool no_align = false;
  std::string roc_csv, table_csv, report, export_dir;
  std::string format = "csv";
};

kp::RunConfig resolve_config(const Flags& f) {
  kp::RunConfig c = f.config_path.empty() ? kp::RunConfig{} : kp::load_config(f.config_path);
  if (const char* s = std::getenv("KNNPROXY_SEED")) {
    try {
      c.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw kp::ConfigError("KNNPROXY_SEED is not an unsigned integer");
    }
  }
  if (f.seed) c.seed = *f.seed;
  if (f.threads) c.threads = *f.threads;
  if (f.log_level) c.log_level = *f.log_level;
  if (f.provider_kind) c.provider.kind = *f.provider_kind;
  if (f.provider_corpus) c.provider.corpus = *f.provider_corpus;
  if (f.features) c.provider.features = *f.features;
  if (f.url) c.provider.url = *f.url;
  if (f.order) c.provider.order = *f.order;
  if (f.embed_dim) c.provider.embed_dim = *f.embed_dim;
  if (f.datastore) c.datastore.path = *f.datastore;
  if (f.datastore_corpus) c.datastore.corpus = *f.datastore_corpus;
  if (f.index_mode) c.datastore.mode = *f.index_mode;
  if (f.window) c.datastore.window = *f.window;
  if (f.stride) c.datastore.stride = *f.stride;
  if (f.max_entries) c.datastore.max_entries = *f.max_entries;
  if (f.n_probe) c.datastore.n_probe = *f.n_probe;
  if (f.retrieval_mode) c.retrieval.mode = *f.retrieval_mode == "fixed" ? kp::SelectionMode::fixed : kp::SelectionMode::adaptive;
  if (f.k) {
    c.retrieval.k = *f.k;
    c.retrieval.mode = kp::SelectionMode::fixed;
  }
  if (f.tau) {
    c.retrieval.tau = *f.tau;
    c.retrieval.mode = kp::SelectionMode::fixed;
  }
  if (f.c) c.retrieval.c = *f.c;
  if (f.lambda_mode) c.lambda.mode = *f.lambda_mode == "fixed" ? kp::LambdaMode::fixed : kp::LambdaMode::adaptive;
  if (f.lambda) {
    c.lambda.value = *f.lambda;
    c.lambda.mode = kp::LambdaMode::fixed;
  }
  if (f.detector) c.detector.kind = kp::parse_detector_kind(*f.detector);
  if (f.gamma) c.detector.gamma = *f.gamma;
  if (f.no_clip) c.detector.gamma.reset();
  if (f.epsilon) c.detector.epsilon = *f.epsilon;
  if (f.threshold) c.detector.threshold = *f.threshold;
  if (f.registry) c.router.registry = *f.registry;
  if (f.k_r) c.router.k_r = *f.k_r;
  if (f.texts_per_class) c.bench.texts_per_class = *f.texts_per_class;
  if (f.text_length) c.bench.text_length = *f.text_length;
  if (f.datastore_tokens) c.bench.datastore_tokens = *f.datastore_tokens;
  if (f.delta) c.bound.delta = *f.delta;
  if (f.replications) c.bound_replications = *f.replications;
  if (f.queries) c.bound.queries = *f.queries;
  if (f.axis) c.sweep.axis = *f.axis;
  if (!f.values.empty()) c.sweep.values = f.values;
  // Round-trip through the schema so flag values get the same validation.
  return kp::config_from_json(kp::config_to_json(c));
}

// ---------------------------------------------------------------------------
// Providers and inputs

struct Provider {
  std::unique_ptr<kp::LmProvider> lm;
  std::optional<kp::Vocabulary> vocab;  // toy only
  const kp::FeatureFile* file = nullptr;
  kp::TokenId bos_id = 0;
};

Provider make_provider(const kp::ProviderConfig& pc) {
  Provider p;
  if (pc.kind == "toy") {
    if (pc.corpus.empty()) throw kp::ConfigError("toy provider needs provider.corpus");
    auto corpus = kp::load_text_corpus(pc.corpus);
    kp::ToyLmConfig cfg{pc.order, pc.alpha, pc.embed_dim, pc.embed_window, pc.recency, pc.embed_seed};
    p.lm = std::make_unique<kp::ToyLm>(kp::ToyLm::train(corpus.docs, corpus.vocab.size(), cfg));
    p.bos_id = corpus.vocab.id_of(kp::kBosToken);
    p.vocab = std::move(corpus.vocab);
  } else if (pc.kind == "file") {
    if (pc.features.empty()) throw kp::ConfigError("file provider needs provider.features");
    auto f = std::make_unique<kp::FeatureFile>(pc.features, pc.bos_id);
    p.file = f.get();
    p.lm = std::move(f);
    p.bos_id = pc.bos_id;
  } else {
    kp::HttpProviderConfig hc;
    hc.url = pc.url;
    if (hc.url.empty()) {
      if (const char* u = std::getenv("KNNPROXY_LM_URL")) hc.url = u;
    }
    if (hc.url.empty()) throw kp::ConfigError("http provider needs provider.url or KNNPROXY_LM_URL");
    if (const char* t = std::getenv("KNNPROXY_LM_TOKEN")) hc.token = t;
    hc.layer = pc.layer;
    p.lm = std::make_unique<kp::HttpProvider>(hc);
    p.bos_id = pc.bos_id;
  }
  g_log.emit(Level::info, "provider_ready",
             {{"kind", pc.kind}, {"fingerprint", p.lm->fingerprint()}, {"vocab_size", p.lm->vocab_size()},
              {"embed_dim", p.lm->embed_dim()}});
  return p;
}

kp::TokenSequence to_sequence(const Provider& p, const kp::InputRecord& r) {
  kp::TokenSequence seq;
  if (r.token_ids) {
    seq.ids = *r.token_ids;
    seq.bos_id = p.bos_id;
  } else {
    if (!p.vocab) throw kp::ConfigError("record '" + r.id + "' has only text; this provider needs token_ids");
    seq = kp::tokenize(*p.vocab, *r.text);
  }
  seq.prompt_len = r.prompt_len;
  seq.validate(p.lm->vocab_size());
  return seq;
}

struct Inputs {
  std::vector<kp::InputRecord> records;
  std::vector<kp::TokenSequence> seqs;
};

// --input records, or every sequence of the feature file when omitted.
Inputs load_inputs(const Provider& p, const std::string& path) {
  Inputs in;
  if (path.empty()) {
    if (p.file == nullptr) throw kp::ConfigError("--input is required unless the provider is a feature file");
    for (std::size_t i = 0; i < p.file->sequence_count(); ++i) {
      in.records.push_back({std::to_string(i), std::nullopt, p.file->sequence(i).ids, p.file->sequence(i).prompt_len,
                            std::nullopt, std::nullopt});
      in.seqs.push_back(p.file->sequence(i));
    }
    return in;
  }
  in.records = kp::read_jsonl_inputs(path);
  for (const auto& r : in.records) in.seqs.push_back(to_sequence(p, r));
  return in;
}

std::vector<kp::TokenSequence> load_datastore_corpus(const Provider& p, const std::string& path) {
  if (path.empty()) {
    if (p.file == nullptr) throw kp::ConfigError("build-datastore needs datastore.corpus (--corpus)");
    return p.file->sequences();
  }
  if (fs::path(path).extension() == ".jsonl") return load_inputs(p, path).seqs;
  if (!p.vocab) throw kp::ConfigError("a plain-text corpus needs the toy provider; use JSON-lines token_ids");
  std::vector<kp::TokenSequence> out;
  for (const auto& line : kp::read_lines(path)) out.push_back(kp::tokenize(*p.vocab, line));
  return out;
}

kp::Datastore open_datastore(const std::string& path, const kp::LmProvider& lm, const kp::RunConfig& c) {
  if (path.empty()) throw kp::ConfigError("datastore.path (--datastore) is required");
  kp::IvfParams ivf;
  ivf.n_probe = c.datastore.n_probe;
  ivf.list_count = c.datastore.lists;
  ivf.seed = c.seed;
  auto ds = kp::load_datastore(path, &lm, [](const std::string& w) { g_log.emit(Level::warn, "fingerprint_mismatch", {{"message", w}}); }, ivf);
  if (ds.dim() != lm.embed_dim()) throw kp::DataError("datastore key width differs from provider embedding width");
  g_log.emit(Level::info, "datastore_loaded", {{"path", path}, {"entries", ds.size()}, {"window", ds.meta.window}});
  return ds;
}

json diagnostics_summary(const kp::AlignedSequence& a) {
  if (a.diagnostics.empty()) return nullptr;
  double k = 0, tau = 0, lambda = 0, keff = 0, reff = 0;
  for (const auto& d : a.diagnostics) {
    k += static_cast<double>(d.k);
    tau += d.tau;
    lambda += d.lambda;
    keff += d.k_eff;
    reff += d.r_eff;
  }
  const double n = static_cast<double>(a.diagnostics.size());
  return {{"mean_k", k / n}, {"mean_tau", tau / n}, {"mean_lambda", lambda / n}, {"mean_k_eff", keff / n},
          {"mean_r_eff", reff / n}};
}

void log_token_diagnostics(const std::string& id, const kp::AlignedSequence& a) {
  if (!g_log.enabled(Level::debug)) return;
  json rows = json::array();
  for (std::size_t i = 0; i < a.size(); ++i) {
    json r = {{"token", a.observed[i]}, {"loglik", a.loglik[i]}};
    if (i < a.diagnostics.size()) {
      const auto& d = a.diagnostics[i];
      r.update({{"k", d.k}, {"tau", d.tau}, {"lambda", d.lambda}, {"k_eff", d.k_eff}, {"r_eff", d.r_eff}, {"u", d.u}});
      if (!d.weights.empty()) r["weights"] = d.weights;
    }
    rows.push_back(std::move(r));
  }
  g_log.emit(Level::debug, "token_diagnostics", {{"id", id}, {"tokens", rows}});
}

kp::RetrievalParams retrieval_for(const kp::RunConfig& c, const kp::Datastore& ds) {
  kp::RetrievalParams p = c.retrieval;
  if (p.k_max() > ds.size()) {
    throw kp::ConfigError("datastore holds " + std::to_string(ds.size()) + " entries, fewer than k_max=" +
                          std::to_string(p.k_max()));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_build_datastore(const kp::RunConfig& c, const Flags& f) {
  if (c.datastore.path.empty()) throw kp::ConfigError("datastore.path (--datastore) is required");
  const auto p = make_provider(c.provider);
  const auto corpus = load_datastore_corpus(p, c.datastore.corpus);
  kp::BuildConfig b;
  b.window = c.datastore.window;
  b.stride = c.datastore.stride;
  b.max_entries = c.datastore.max_entries;
  b.seed = c.seed;
  b.mode = c.datastore.mode == "approximate" ? kp::IndexMode::approximate : kp::IndexMode::exact;
  b.ivf.n_probe = c.datastore.n_probe;
  b.ivf.list_count = c.datastore.lists;
  b.ivf.seed = c.seed;
  b.threads = c.resolved_threads();
  const auto ds = kp::build_datastore(corpus, *p.lm, b);
  kp::save_datastore(ds, c.datastore.path);
  Output out(f.out);
  out.line({{"datastore", c.datastore.path},
            {"entries", ds.size()},
            {"dim", ds.dim()},
            {"window", ds.meta.window},
            {"stride", ds.meta.stride},
            {"vocab_size", ds.meta.vocab_size},
            {"provider_fingerprint", ds.meta.provider_fingerprint},
            {"corpus_fingerprint", ds.meta.corpus_fingerprint}});
  return 0;
}

int cmd_score(const kp::RunConfig& c, const Flags& f) {
  const auto p = make_provider(c.provider);
  const auto ds = open_datastore(c.datastore.path, *p.lm, c);
  const auto params = retrieval_for(c, ds);
  const auto in = load_inputs(p, f.input);
  std::vector<kp::AlignedSequence> aligned(in.seqs.size());
  kp::parallel_for(in.seqs.size(), c.resolved_threads(), [&](std::size_t i) {
    aligned[i] = kp::align_sequence(*p.lm, ds, in.seqs[i], params, c.lambda);
  });
  Output out(f.out);
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    const auto ll = kp::aligned_loglik(aligned[i], c.detector.epsilon).second;
    out.line({{"id", in.records[i].id},
              {"n_tokens", aligned[i].size()},
              {"mean_loglik", kp::clip_and_mean(ll, std::nullopt)},
              {"loglik", ll.values},
              {"diagnostics_summary", diagnostics_summary(aligned[i])}});
    log_token_diagnostics(in.records[i].id, aligned[i]);
  }
  return 0;
}

int cmd_detect(const kp::RunConfig& c, const Flags& f) {
  const auto p = make_provider(c.provider);
  std::optional<Provider> ref_holder;
  if (c.reference) ref_holder = make_provider(*c.reference);
  const kp::LmProvider& ref = ref_holder ? *ref_holder->lm : *p.lm;
  if (ref.vocab_size() != p.lm->vocab_size()) throw kp::DataError("reference and proxy vocabularies differ");

  std::optional<kp::Datastore> ds;
  kp::RetrievalParams params = c.retrieval;
  if (!f.baseline) {
    ds = open_datastore(c.datastore.path, *p.lm, c);
    params = retrieval_for(c, *ds);
  }
  const auto in = load_inputs(p, f.input);
  struct Row {
    kp::DetectionResult result;
    kp::AlignedSequence aligned;
  };
  std::vector<Row> rows(in.seqs.size());
  kp::parallel_for(in.seqs.size(), c.resolved_threads(), [&](std::size_t i) {
    const auto steps = p.lm->steps(in.seqs[i]);
    const auto ref_steps = ref_holder ? ref.steps(in.seqs[i]) : std::vector<kp::LmStep>{};
    const auto reference = kp::reference_dists(ref_holder ? ref_steps : steps, in.seqs[i]);
    rows[i].aligned = f.baseline ? kp::proxy_only(steps, in.seqs[i])
                                 : kp::align_steps(steps, *ds, in.seqs[i], params, c.lambda);
    rows[i].result = kp::detect(rows[i].aligned, reference, c.detector);
  });
  Output out(f.out);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i].result;
    out.line({{"id", in.records[i].id},
              {"detector", kp::to_string(c.detector.kind)},
              {"score", r.score},
              {"label", r.label ? json(kp::to_string(*r.label)) : json(nullptr)},
              {"n_tokens", rows[i].aligned.size()},
              {"diagnostics_summary", diagnostics_summary(rows[i].aligned)}});
    log_token_diagnostics(in.records[i].id, rows[i].aligned);
  }
  return 0;
}

// Registry: {"experts": {name: {"datastore": path, "label": int}}, "routing":
// {"sentences": jsonl} or {"features": KNPR1 file}}. Relative paths resolve
// against the registry's directory.
struct Registry {
  std::vector<std::string> names;  // indexed by label
  std::vector<std::string> datastores;
  std::string sentences;
  std::string features;
};

Registry load_registry(const std::string& path, bool need_routing) {
  if (path.empty()) throw kp::ConfigError("router.registry (--registry) is required");
  std::ifstream in(path);
  if (!in) throw kp::ConfigError("cannot read registry '" + path + "'");
  const fs::path base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return p.empty() || fs::path(p).is_absolute() ? p : (base / p).string(); };
  Registry r;
  try {
    const auto j = json::parse(in);
    kp::detail::check_keys(j, "registry", {"experts", "routing"});
    const auto& ex = j.at("experts");
    if (!ex.is_object() || ex.empty()) throw kp::ConfigError("registry needs a non-empty experts object");
    std::map<std::size_t, std::pair<std::string, std::string>> by_label;
    std::size_t next = 0;
    for (const auto& [name, e] : ex.items()) {
      kp::detail::check_keys(e, "experts." + name, {"datastore", "label"});
      const std::size_t label = e.contains("label") ? e["label"].get<std::size_t>() : next;
      ++next;
      if (!by_label.emplace(label, std::pair{name, resolve(e.at("datastore").get<std::string>())}).second) {
        throw kp::ConfigError("duplicate expert label " + std::to_string(label));
      }
    }
    for (const auto& [label, v] : by_label) {
      if (label != r.names.size()) throw kp::ConfigError("expert labels must be 0..M-1");
      r.names.push_back(v.first);
      r.datastores.push_back(v.second);
    }
    if (j.contains("routing")) {
      const auto& ro = j["routing"];
      kp::detail::check_keys(ro, "routing", {"sentences", "features"});
      if (ro.contains("sentences")) r.sentences = resolve(ro["sentences"].get<std::string>());
      if (ro.contains("features")) r.features = resolve(ro["features"].get<std::string>());
    }
  } catch (const json::exception& e) {
    throw kp::ConfigError("registry '" + path + "': " + e.what());
  }
  if (need_routing && r.sentences.empty() && r.features.empty()) {
    throw kp::ConfigError("registry needs routing.sentences or routing.features");
  }
  return r;
}

std::size_t label_index(const Registry& r, const std::string& label) {
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    if (r.names[i] == label) return i;
  }
  try {
    std::size_t pos = 0;
    const auto v = std::stoull(label, &pos);
    if (pos == label.size() && v < r.names.size()) return v;
  } catch (const std::exception&) {
  }
  throw kp::DataError("unknown expert label '" + label + "'");
}

int cmd_route(const kp::RunConfig& c, const Flags& f) {
  const auto reg = load_registry(c.router.registry, true);
  const std::size_t m = reg.names.size();
  const kp::HashedNgramEmbedder embedder(c.router.embed_dim);
  std::optional<kp::RoutingStore> store;
  bool file_embeddings = false;
  if (!reg.features.empty()) {
    auto rf = kp::read_routing_file(reg.features);
    store = kp::build_routing_store(std::move(rf.embeddings), rf.dim, rf.labels, m, c.router.k_r);
    file_embeddings = true;
  } else {
    std::vector<kp::LabeledSentence> sentences;
    for (const auto& r : kp::read_jsonl_inputs(reg.sentences)) {
      if (!r.text || !r.label) throw kp::DataError("routing sentences need \"text\" and \"label\"");
      sentences.push_back({*r.text, label_index(reg, *r.label)});
    }
    store = kp::build_routing_store(sentences, embedder, m, c.router.k_r);
  }
  g_log.emit(Level::info, "routing_store_ready", {{"entries", store->size()}, {"experts", m}, {"k_r", store->k_r}});

  std::optional<Provider> p;
  std::vector<kp::Datastore> stores;
  if (!f.no_align) {
    p = make_provider(c.provider);
    for (const auto& path : reg.datastores) stores.push_back(open_datastore(path, *p->lm, c));
  }
  if (f.input.empty()) throw kp::ConfigError("--input is required");
  const auto records = kp::read_jsonl_inputs(f.input);

  struct Row {
    kp::RouterDecision decision;
    std::optional<kp::DetectionResult> result;
    std::size_t n_tokens = 0;
  };
  std::vector<Row> rows(records.size());
  kp::parallel_for(records.size(), c.resolved_threads(), [&](std::size_t i) {
    const auto& r = records[i];
    std::vector<float> e;
    if (r.embedding) e = *r.embedding;
    else if (file_embeddings) throw kp::DataError("record '" + r.id + "' needs an \"embedding\" for this routing store");
    else if (r.text) e = embedder.embed(*r.text);
    else throw kp::DataError("record '" + r.id + "' has no text to embed");
    rows[i].decision = kp::route(*store, e);
    if (p) {
      const auto seq = to_sequence(*p, r);
      const auto& ds = stores[rows[i].decision.chosen];
      const auto steps = p->lm->steps(seq);
      const auto aln = kp::align_steps(steps, ds, seq, retrieval_for(c, ds), c.lambda);
      rows[i].result = kp::detect(aln, kp::reference_dists(steps, seq), c.detector);
      rows[i].n_tokens = aln.size();
    }
  });
  Output out(f.out);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json scores = json::object();
    for (std::size_t e = 0; e < m; ++e) scores[reg.names[e]] = rows[i].decision.scores[e];
    json line = {{"id", records[i].id}, {"expert", reg.names[rows[i].decision.chosen]}, {"routing_scores", scores}};
    if (rows[i].result) {
      line["detector"] = kp::to_string(c.detector.kind);
      line["score"] = rows[i].result->score;
      line["label"] = rows[i].result->label ? json(kp::to_string(*rows[i].result->label)) : json(nullptr);
      line["n_tokens"] = rows[i].n_tokens;
    }
    out.line(line);
  }
  return 0;
}

int cmd_attribute(const kp::RunConfig& c, const Flags& f) {
  const auto reg = load_registry(c.router.registry, false);
  if (reg.names.size() < 2) throw kp::ConfigError("attribution needs at least two experts");
  const auto p = make_provider(c.provider);
  std::vector<kp::Datastore> stores;
  for (const auto& path : reg.datastores) stores.push_back(open_datastore(path, *p.lm, c));
  std::vector<kp::AttributionExpert> experts;
  kp::RetrievalParams params = c.retrieval;
  for (std::size_t e = 0; e < reg.names.size(); ++e) {
    experts.push_back({reg.names[e], p.lm.get(), &stores[e]});
    params = retrieval_for(c, stores[e]);
  }
  const auto in = load_inputs(p, f.input);
  std::vector<kp::AttributionResult> results(in.seqs.size());
  kp::parallel_for(in.seqs.size(), c.resolved_threads(), [&](std::size_t i) {
    results[i] = kp::attribute(in.seqs[i], experts, params, c.lambda, c.detector);
  });
  Output out(f.out);
  std::vector<std::size_t> truth, pred;
  for (std::size_t i = 0; i < results.size(); ++i) {
    json scores = json::object();
    for (std::size_t e = 0; e < experts.size(); ++e) scores[experts[e].name] = results[i].scores[e];
    out.line({{"id", in.records[i].id}, {"predicted", results[i].name}, {"scores", scores}});
    if (in.records[i].label) {
      truth.push_back(label_index(reg, *in.records[i].label));
      pred.push_back(results[i].index);
    }
  }
  if (!f.report.empty()) {
    if (truth.size() != results.size()) throw kp::DataError("--report needs a label on every input record");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) ok += truth[i] == pred[i];
    const auto conf = kp::confusion(truth, pred, reg.names.size());
    std::ofstream rep(f.report);
    rep << json{{"accuracy", static_cast<double>(ok) / static_cast<double>(truth.size())},
                {"names", reg.names},
                {"confusion", conf}}
               .dump(2)
        << '\n';
    if (!rep) throw kp::DataError("cannot write '" + f.report + "'");
  }
  return 0;
}

kp::DetectionBenchConfig bench_config(const kp::RunConfig& c) {
  kp::DetectionBenchConfig b;
  b.synth.seed = c.seed;
  b.synth.texts_per_class = c.bench.texts_per_class;
  b.synth.text_length = c.bench.text_length;
  b.synth.datastore_tokens = c.bench.datastore_tokens;
  b.build.window = c.datastore.window;
  b.build.stride = c.datastore.stride;
  b.build.max_entries = c.datastore.max_entries;
  b.build.seed = c.seed;
  b.build.mode = c.datastore.mode == "approximate" ? kp::IndexMode::approximate : kp::IndexMode::exact;
  b.build.ivf.n_probe = c.datastore.n_probe;
  b.build.ivf.list_count = c.datastore.lists;
  b.build.ivf.seed = c.seed;
  b.retrieval = c.retrieval;
  b.lambda = c.lambda;
  b.detector = c.detector;
  b.threads = c.resolved_threads();
  return b;
}

// Shortest text that parses back to the same double.
std::string num(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return {buf, r.ptr};
}

json outcome_json(const kp::DetectorOutcome& o) {
  return {{"auroc_aligned", o.auroc_aligned},
          {"auroc_unaligned", o.auroc_unaligned},
          {"f1_aligned", o.f1_aligned.f1},
          {"f1_threshold_aligned", o.f1_aligned.threshold},
          {"f1_unaligned", o.f1_unaligned.f1},
          {"f1_threshold_unaligned", o.f1_unaligned.threshold}};
}

void write_roc_csv(const std::string& path, const kp::DetectionBenchReport& r) {
  std::ofstream csv(path);
  csv << "detector,mode,threshold,fpr,tpr\n";
  for (const auto& o : r.detectors) {
    for (const auto* mode : {"aligned", "unaligned"}) {
      const auto& pts = std::string(mode) == "aligned" ? o.roc_aligned : o.roc_unaligned;
      for (const auto& pt : pts) {
        csv << kp::to_string(o.kind) << ',' << mode << ',' << num(pt.threshold) << ',' << num(pt.fpr) << ',' << num(pt.tpr)
            << '\n';
      }
    }
  }
  if (!csv) throw kp::DataError("cannot write '" + path + "'");
}

void export_benchmark(const fs::path& dir, const kp::SynthBenchmark& b, std::uint64_t seed) {
  fs::create_directories(dir);
  auto write_jsonl = [&](const std::string& name, const std::vector<kp::TokenSequence>& texts, const char* label) {
    std::ofstream o(dir / name);
    for (std::size_t i = 0; i < texts.size(); ++i) {
      o << json{{"id", std::string(label) + "-" + std::to_string(i)}, {"text", kp::render_text(b.vocab, texts[i])},
                {"label", label}}
               .dump()
        << '\n';
    }
  };
  auto write_lines = [&](const std::string& name, const std::vector<kp::TokenSequence>& texts) {
    std::ofstream o(dir / name);
    for (const auto& t : texts) o << kp::render_text(b.vocab, t) << '\n';
  };
  write_jsonl("llm.jsonl", b.llm_texts, "llm");
  write_jsonl("human.jsonl", b.human_texts, "human");
  write_lines("datastore_corpus.txt", b.datastore_corpus);
  // A corpus sampled from the synthetic proxy, for training a toy provider.
  write_lines("proxy_corpus.txt", kp::sample_texts(b.proxy, b.datastore_corpus.size(), b.datastore_corpus.empty()
                                                                                          ? 1
                                                                                          : b.datastore_corpus[0].size(),
                                                   kp::detail::hash_combine(seed, 0x70)));
}

int cmd_bench(const kp::RunConfig& c, const Flags& f) {
  const auto cfg = bench_config(c);
  const auto b = kp::synth_benchmark(cfg.synth);
  kp::BuildConfig build = cfg.build;
  build.threads = cfg.threads;
  const auto ds = kp::build_datastore(b.datastore_corpus, b.proxy, build);
  const auto r = kp::run_detection_bench(b, ds, cfg);
  json det = json::object();
  for (const auto& o : r.detectors) det[kp::to_string(o.kind)] = outcome_json(o);
  Output out(f.out);
  out.stream() << json{{"seed", c.seed},
                       {"texts_per_class", cfg.synth.texts_per_class},
                       {"text_length", cfg.synth.text_length},
                       {"datastore_entries", r.datastore_entries},
                       {"detectors", det}}
                      .dump(2)
               << '\n';
  if (!f.roc_csv.empty()) write_roc_csv(f.roc_csv, r);
  if (!f.export_dir.empty()) export_benchmark(f.export_dir, b, c.seed);
  return 0;
}

int cmd_validate_bound(const kp::RunConfig& c, const Flags& f) {
  if (c.bound_replications < 1) throw kp::ConfigError("bound.replications must be at least 1");
  std::vector<kp::BoundReport> reps(c.bound_replications);
  kp::parallel_for(reps.size(), c.resolved_threads(), [&](std::size_t i) {
    kp::BoundExperimentConfig b = c.bound;
    b.seed = kp::detail::hash_combine(c.seed, i);
    reps[i] = kp::validate_bound(b);
  });
  json rows = json::array();
  double worst = 0.0;
  for (std::size_t i = 0; i < reps.size(); ++i) {
    const auto& r = reps[i];
    worst = std::max(worst, r.violation_rate);
    rows.push_back({{"replication", i},
                    {"certified_lipschitz", r.certified_lipschitz},
                    {"queries", r.queries},
                    {"violations", r.violations},
                    {"violation_rate", r.violation_rate},
                    {"mean_l1", r.mean_l1},
                    {"mean_bound", r.mean_bound},
                    {"mean_r_eff", r.mean_r_eff},
                    {"mean_k_eff", r.mean_k_eff}});
  }
  Output out(f.out);
  out.stream() << json{{"delta", c.bound.delta},
                       {"replications", rows},
                       {"max_violation_rate", worst},
                       {"holds_in_every_replication", worst <= c.bound.delta}}
                      .dump(2)
               << '\n';
  if (!f.table_csv.empty()) {
    std::ofstream csv(f.table_csv);
    csv << "replication,certified_lipschitz,violation_rate,mean_l1,mean_bound\n";
    for (std::size_t i = 0; i < reps.size(); ++i) {
      csv << i << ',' << num(reps[i].certified_lipschitz) << ',' << num(reps[i].violation_rate) << ','
          << num(reps[i].mean_l1) << ',' << num(reps[i].mean_bound) << '\n';
    }
  }
  return worst <= c.bound.delta ? 0 : 4;
}

std::vector<double> default_sweep_values(kp::SweepAxis axis) {
  switch (axis) {
    case kp::SweepAxis::tau: return {0.1, 0.5, 1, 5, 10, 50};
    case kp::SweepAxis::k: return {16, 32, 64, 128, 256, 512, 1024};
    case kp::SweepAxis::lambda: return {0, 0.1, 0.3, 0.5, 0.7, 0.9, 1};
    case kp::SweepAxis::gamma: return {-2.5, -5, -7.5, -10, -15};
    case kp::SweepAxis::corpus_size: return {1000, 3000, 10000};
  }
  return {};
}

int cmd_sweep(const kp::RunConfig& c, const Flags& f) {
  const auto axis = kp::parse_sweep_axis(c.sweep.axis);
  const auto values = c.sweep.values.empty() ? default_sweep_values(axis) : c.sweep.values;
  auto cfg = bench_config(c);
  if (axis == kp::SweepAxis::corpus_size) {
    // Enough windows for the largest cap: each document of length L yields L - 1.
    const double top = *std::max_element(values.begin(), values.end());
    const double len = static_cast<double>(cfg.synth.document_length);
    const auto need = static_cast<std::size_t>(std::ceil(top * len / (len - 1.0))) + cfg.synth.document_length;
    cfg.synth.datastore_tokens = std::max(cfg.synth.datastore_tokens, need);
  }
  const auto rows = kp::run_sweep(cfg, axis, values);
  Output out(f.out);
  if (f.format == "json") {
    json table = json::array();
    for (const auto& r : rows) {
      json det = json::object();
      for (const auto& o : r.report.detectors) det[kp::to_string(o.kind)] = outcome_json(o);
      table.push_back({{"value", r.value}, {"datastore_entries", r.report.datastore_entries}, {"detectors", det}});
    }
    out.stream() << json{{"axis", kp::to_string(axis)}, {"rows", table}}.dump(2) << '\n';
    return 0;
  }
  auto& os = out.stream();
  os << "axis,value,detector,datastore_entries,auroc_aligned,auroc_unaligned,f1_aligned\n";
  for (const auto& r : rows) {
    for (const auto& o : r.report.detectors) {
      os << kp::to_string(axis) << ',' << num(r.value) << ',' << kp::to_string(o.kind) << ','
         << r.report.datastore_entries << ',' << num(o.auroc_aligned) << ',' << num(o.auroc_unaligned) << ','
         << num(o.f1_aligned.f1) << '\n';
    }
  }
  return 0;
}

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  sub->add_option("--out", f.out, "output file (default stdout)");
  sub->add_option("--seed", f.seed, "master seed (overrides KNNPROXY_SEED)");
  sub->add_option("--threads", f.threads, "worker threads, 0 = logical cores");
  sub->add_option("--log-level", f.log_level, "warn | info | debug");
}

void add_provider(CLI::App* sub, Flags& f) {
  sub->add_option("--provider", f.provider_kind, "toy | file | http");
  sub->add_option("--lm-corpus", f.provider_corpus, "toy provider training corpus");
  sub->add_option("--features", f.features, "KNPF1 feature file for the file provider");
  sub->add_option("--lm-url", f.url, "base URL for the http provider");
  sub->add_option("--order", f.order, "toy n-gram order");
  sub->add_option("--embed-dim", f.embed_dim, "toy embedding width");
}

void add_alignment(CLI::App* sub, Flags& f) {
  sub->add_option("--datastore", f.datastore, "datastore index path");
  sub->add_option("--retrieval", f.retrieval_mode, "adaptive | fixed");
  sub->add_option("--k", f.k, "fixed neighbour count (implies --retrieval fixed)");
  sub->add_option("--tau", f.tau, "fixed temperature (implies --retrieval fixed)");
  sub->add_option("--c", f.c, "surrogate coefficient on r_eff");
  sub->add_option("--lambda-mode", f.lambda_mode, "adaptive | fixed");
  sub->add_option("--lambda", f.lambda, "fixed proxy weight (implies --lambda-mode fixed)");
  sub->add_option("--n-probe", f.n_probe, "lists probed per query in approximate mode");
}

void add_detector(CLI::App* sub, Flags& f) {
  sub->add_option("--detector", f.detector, "likelihood | fast_detect | binoculars");
  sub->add_option("--gamma", f.gamma, "clip bound on token log-likelihoods");
  sub->add_flag("--no-clip", f.no_clip, "disable clipping");
  sub->add_option("--epsilon", f.epsilon, "probability floor");
  sub->add_option("--threshold", f.threshold, "decision threshold");
}

void add_bench(CLI::App* sub, Flags& f) {
  sub->add_option("--texts-per-class", f.texts_per_class, "synthetic texts per class");
  sub->add_option("--text-length", f.text_length, "tokens per synthetic text");
  sub->add_option("--datastore-tokens", f.datastore_tokens, "synthetic datastore corpus size");
  sub->add_option("--window", f.window, "datastore context window");
  sub->add_option("--max-entries", f.max_entries, "reservoir cap on datastore entries");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Retrieval-aligned proxy scoring for zero-shot LLM-text detection"};
  app.require_subcommand(1);
  app.footer(kp::config_reference());
  Flags f;

  auto* build = app.add_subcommand("build-datastore", "embed a corpus and write a datastore");
  add_common(build, f);
  add_provider(build, f);
  build->add_option("--datastore", f.datastore, "output index path");
  build->add_option("--corpus", f.datastore_corpus, "corpus: text lines or JSON-lines token_ids");
  build->add_option("--window", f.window, "context window W");
  build->add_option("--stride", f.stride, "window stride");
  build->add_option("--max-entries", f.max_entries, "reservoir cap on entries");
  build->add_option("--index", f.index_mode, "exact | approximate");
  build->add_option("--n-probe", f.n_probe, "lists probed per query in approximate mode");

  auto* score = app.add_subcommand("score", "aligned per-token log-likelihoods");
  add_common(score, f);
  add_provider(score, f);
  add_alignment(score, f);
  score->add_option("--input", f.input, "JSON-lines texts");
  score->add_option("--epsilon", f.epsilon, "probability floor");

  auto* detect = app.add_subcommand("detect", "detector scores and labels");
  add_common(detect, f);
  add_provider(detect, f);
  add_alignment(detect, f);
  add_detector(detect, f);
  detect->add_option("--input", f.input, "JSON-lines texts");
  detect->add_flag("--baseline", f.baseline, "score with the raw proxy, no retrieval");

  auto* route = app.add_subcommand("route", "route texts to domain experts, then align and detect");
  add_common(route, f);
  add_provider(route, f);
  add_alignment(route, f);
  add_detector(route, f);
  route->add_option("--registry", f.registry, "expert registry JSON");
  route->add_option("--k-r", f.k_r, "routing vote size");
  route->add_option("--input", f.input, "JSON-lines texts");
  route->add_flag("--no-align", f.no_align, "only report routing decisions");

  auto* attribute = app.add_subcommand("attribute", "closed-set source attribution");
  add_common(attribute, f);
  add_provider(attribute, f);
  add_alignment(attribute, f);
  attribute->add_option("--gamma", f.gamma, "clip bound");
  attribute->add_flag("--no-clip", f.no_clip, "disable clipping");
  attribute->add_option("--registry", f.registry, "candidate registry JSON");
  attribute->add_option("--input", f.input, "JSON-lines texts, optional \"label\"");
  attribute->add_option("--report", f.report, "accuracy and confusion JSON (needs labels)");

  auto* bench = app.add_subcommand("bench", "synthetic detection benchmark");
  add_common(bench, f);
  add_alignment(bench, f);
  add_detector(bench, f);
  add_bench(bench, f);
  bench->add_option("--roc-csv", f.roc_csv, "write ROC points as CSV");
  bench->add_option("--export-dir", f.export_dir, "write the generated texts and corpora");

  auto* bound = app.add_subcommand("validate-bound", "empirical check of the retrieval error bound");
  add_common(bound, f);
  bound->add_option("--delta", f.delta, "failure probability");
  bound->add_option("--replications", f.replications, "independent seeded replications");
  bound->add_option("--queries", f.queries, "queries per replication");
  bound->add_option("--csv", f.table_csv, "per-replication CSV");

  auto* sweep = app.add_subcommand("sweep", "vary one hyperparameter and tabulate AUROC");
  add_common(sweep, f);
  add_alignment(sweep, f);
  add_detector(sweep, f);
  add_bench(sweep, f);
  sweep->add_option("--axis", f.axis, "tau | k | lambda | gamma | corpus-size");
  sweep->add_option("--values", f.values, "axis values, comma-separated or repeated")->delimiter(',');
  sweep->add_option("--format", f.format, "csv | json")->check(CLI::IsMember({"csv", "json"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(kp::ExitCode::config);
  }

  try {
    const auto cfg = resolve_config(f);
    g_log.set_level(cfg.log_level);
    g_log.emit(Level::info, "config", {{"subcommand", app.get_subcommands().front()->get_name()},
                                       {"resolved", kp::config_to_json(cfg)}});
    if (build->parsed()) return cmd_build_datastore(cfg, f);
    if (score->parsed()) return cmd_score(cfg, f);
    if (detect->parsed()) return cmd_detect(cfg, f);
    if (route->parsed()) return cmd_route(cfg, f);
    if (attribute->parsed()) return cmd_attribute(cfg, f);
    if (bench->parsed()) return cmd_bench(cfg, f);
    if (bound->parsed()) return cmd_validate_bound(cfg, f);
    if (sweep->parsed()) return cmd_sweep(cfg, f);
  } catch (const kp::Error& e) {
    g_log.error(static_cast<int>(e.code()), e.what());
    return static_cast<int>(e.code());
  } catch (const json::exception& e) {
    g_log.error(static_cast<int>(kp::ExitCode::data), e.what());
    return static_cast<int>(kp::ExitCode::data);
  } catch (const std::exception& e) {
    g_log.error(static_cast<int>(kp::ExitCode::data), e.what());
    return static_cast<int>(kp::ExitCode::data);
  }
  return 0;
}
