#pragma once

// Experiment harness: scoring texts under aligned and raw proxies,
// closed-set attribution, the synthetic detection / corpus-size / clipping /
// routing / attribution benchmarks, and the empirical check of the
// retrieval error bound.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "knnproxy/align.hpp"
#include "knnproxy/core.hpp"
#include "knnproxy/datastore.hpp"
#include "knnproxy/detect.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"
#include "knnproxy/metrics.hpp"
#include "knnproxy/parallel.hpp"
#include "knnproxy/router.hpp"
#include "knnproxy/synth.hpp"

namespace knnproxy {

// Maps scores so that larger always means "more likely LLM".
inline double oriented(double score, Polarity p) { return p == Polarity::higher_is_llm ? score : -score; }

inline std::string render_text(const Vocabulary& vocab, const TokenSequence& seq) {
  std::string out;
  for (TokenId t : seq.ids) {
    if (!out.empty()) out += ' ';
    out += vocab.token(t);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring

struct ScoreRequest {
  RetrievalParams retrieval;
  LambdaConfig lambda;
  std::vector<DetectorConfig> detectors{DetectorConfig{}};
  bool include_unaligned = true;
  std::size_t threads = 1;
};

// [detector][text]
struct ScoreTable {
  std::vector<std::vector<double>> aligned;
  std::vector<std::vector<double>> unaligned;
};

// `reference` supplies the sampling distribution for Fast-DetectGPT and the
// observer side of Binoculars.
inline ScoreTable score_texts(const LmProvider& proxy, const LmProvider& reference, const Datastore& ds,
                              std::span<const TokenSequence> texts, const ScoreRequest& req) {
  for (const auto& d : req.detectors) d.validate();
  const std::size_t nd = req.detectors.size();
  ScoreTable t;
  t.aligned.assign(nd, std::vector<double>(texts.size()));
  if (req.include_unaligned) t.unaligned.assign(nd, std::vector<double>(texts.size()));
  parallel_for(texts.size(), req.threads, [&](std::size_t i) {
    const auto steps = proxy.steps(texts[i]);
    const auto ref_steps = &reference == &proxy ? std::vector<LmStep>{} : reference.steps(texts[i]);
    const auto ref = reference_dists(&reference == &proxy ? steps : ref_steps, texts[i]);
    const auto aln = align_steps(steps, ds, texts[i], req.retrieval, req.lambda);
    for (std::size_t d = 0; d < nd; ++d) t.aligned[d][i] = detect(aln, ref, req.detectors[d]).score;
    if (req.include_unaligned) {
      const auto raw = proxy_only(steps, texts[i]);
      for (std::size_t d = 0; d < nd; ++d) t.unaligned[d][i] = detect(raw, ref, req.detectors[d]).score;
    }
  });
  return t;
}

// Positives first, then negatives; scores oriented so higher means LLM.
inline LabeledScores labeled(std::span<const double> positives, std::span<const double> negatives, Polarity p) {
  LabeledScores s;
  for (double x : positives) s.add(oriented(x, p), true);
  for (double x : negatives) s.add(oriented(x, p), false);
  return s;
}

// ---------------------------------------------------------------------------
// Attribution

struct AttributionExpert {
  std::string name;
  const LmProvider* provider = nullptr;
  const Datastore* datastore = nullptr;
};

struct AttributionResult {
  std::size_t index = 0;  // into the expert list
  std::string name;
  std::vector<double> scores;  // clipped mean aligned log-likelihood per expert
};

// Argmax of the clipped mean aligned log-likelihood; equal scores resolve to
// the lexicographically smallest name.
inline AttributionResult attribute(const TokenSequence& text, std::span<const AttributionExpert> experts,
                                   const RetrievalParams& params, const LambdaConfig& lambda,
                                   const DetectorConfig& detector = {}) {
  if (experts.size() < 2) throw ConfigError("attribution needs at least two experts");
  DetectorConfig cfg = detector;
  cfg.kind = DetectorKind::likelihood;
  cfg.threshold.reset();
  AttributionResult r;
  r.scores.resize(experts.size());
  const LmProvider* cached_for = nullptr;
  std::vector<LmStep> steps;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& x = experts[e];
    if (x.provider == nullptr || x.datastore == nullptr) throw ConfigError("expert '" + x.name + "' is incomplete");
    if (x.provider != cached_for) {
      steps = x.provider->steps(text);
      cached_for = x.provider;
    }
    r.scores[e] = detect(align_steps(steps, *x.datastore, text, params, lambda), {}, cfg).score;
    if (e == 0 || r.scores[e] > r.scores[r.index] ||
        (r.scores[e] == r.scores[r.index] && x.name < experts[r.index].name)) {
      r.index = e;
    }
  }
  r.name = experts[r.index].name;
  return r;
}

// ---------------------------------------------------------------------------
// Detection benchmark

struct DetectionBenchConfig {
  SynthBenchConfig synth;
  BuildConfig build;
  RetrievalParams retrieval;
  LambdaConfig lambda;
  DetectorConfig detector;  // gamma and epsilon apply to every detector kind
  std::size_t threads = 1;
};

struct DetectorOutcome {
  DetectorKind kind = DetectorKind::likelihood;
  double auroc_aligned = 0.0;
  double auroc_unaligned = 0.0;
  F1Result f1_aligned;
  F1Result f1_unaligned;
  std::vector<RocPoint> roc_aligned;
  std::vector<RocPoint> roc_unaligned;
};

struct DetectionBenchReport {
  std::size_t datastore_entries = 0;
  std::vector<DetectorOutcome> detectors;  // likelihood, fast_detect, binoculars

  const DetectorOutcome& at(DetectorKind k) const {
    for (const auto& d : detectors) {
      if (d.kind == k) return d;
    }
    throw ConfigError("detector not in report");
  }
};

inline std::vector<DetectorConfig> all_detectors(const DetectorConfig& base) {
  std::vector<DetectorConfig> out;
  for (DetectorKind k : {DetectorKind::likelihood, DetectorKind::fast_detect, DetectorKind::binoculars}) {
    DetectorConfig c = base;
    c.kind = k;
    c.threshold.reset();
    c.polarity.reset();
    out.push_back(c);
  }
  return out;
}

inline DetectionBenchReport summarize(const ScoreTable& llm, const ScoreTable& human,
                                      std::span<const DetectorConfig> detectors) {
  DetectionBenchReport r;
  for (std::size_t d = 0; d < detectors.size(); ++d) {
    const Polarity p = detectors[d].effective_polarity();
    DetectorOutcome o;
    o.kind = detectors[d].kind;
    const auto a = labeled(llm.aligned[d], human.aligned[d], p);
    o.auroc_aligned = auroc(a);
    o.f1_aligned = f1_sweep(a);
    o.roc_aligned = roc_curve(a);
    if (!llm.unaligned.empty()) {
      const auto u = labeled(llm.unaligned[d], human.unaligned[d], p);
      o.auroc_unaligned = auroc(u);
      o.f1_unaligned = f1_sweep(u);
      o.roc_unaligned = roc_curve(u);
    }
    r.detectors.push_back(o);
  }
  return r;
}

// The proxy is also the Fast-DetectGPT / Binoculars reference model.
inline DetectionBenchReport run_detection_bench(const SynthBenchmark& b, const Datastore& ds,
                                                const DetectionBenchConfig& cfg) {
  ScoreRequest req{cfg.retrieval.clamped_to(ds.size()), cfg.lambda, all_detectors(cfg.detector), true, cfg.threads};
  const auto llm = score_texts(b.proxy, b.proxy, ds, b.llm_texts, req);
  const auto human = score_texts(b.proxy, b.proxy, ds, b.human_texts, req);
  auto r = summarize(llm, human, req.detectors);
  r.datastore_entries = ds.size();
  return r;
}

inline DetectionBenchReport run_detection_bench(const DetectionBenchConfig& cfg) {
  const auto b = synth_benchmark(cfg.synth);
  BuildConfig build = cfg.build;
  build.threads = cfg.threads;
  const auto ds = build_datastore(b.datastore_corpus, b.proxy, build);
  return run_detection_bench(b, ds, cfg);
}

// ---------------------------------------------------------------------------
// Single-axis sweeps

enum class SweepAxis { tau, k, lambda, gamma, corpus_size };

inline SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "tau") return SweepAxis::tau;
  if (s == "k") return SweepAxis::k;
  if (s == "lambda") return SweepAxis::lambda;
  if (s == "gamma") return SweepAxis::gamma;
  if (s == "corpus-size" || s == "corpus_size" || s == "N") return SweepAxis::corpus_size;
  throw ConfigError("unknown sweep axis '" + s + "'");
}

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::tau: return "tau";
    case SweepAxis::k: return "k";
    case SweepAxis::lambda: return "lambda";
    case SweepAxis::gamma: return "gamma";
    case SweepAxis::corpus_size: return "corpus-size";
  }
  return "?";
}

struct SweepRow {
  double value = 0.0;
  DetectionBenchReport report;
};

// Varies one axis of `cfg` and re-scores the same benchmark. tau and k switch
// retrieval to fixed mode, lambda switches the mixture weight to fixed mode,
// and corpus-size caps the datastore by reservoir sampling from one corpus.
inline std::vector<SweepRow> run_sweep(const DetectionBenchConfig& cfg, SweepAxis axis,
                                       std::span<const double> values) {
  if (values.empty()) throw ConfigError("sweep needs at least one value");
  const auto b = synth_benchmark(cfg.synth);
  BuildConfig build = cfg.build;
  build.threads = cfg.threads;
  std::optional<Datastore> shared;
  if (axis != SweepAxis::corpus_size) shared = build_datastore(b.datastore_corpus, b.proxy, build);
  std::vector<SweepRow> rows;
  for (double v : values) {
    DetectionBenchConfig c = cfg;
    switch (axis) {
      case SweepAxis::tau:
        c.retrieval.mode = SelectionMode::fixed;
        c.retrieval.tau = v;
        break;
      case SweepAxis::k:
        if (!(v >= 1.0)) throw ConfigError("sweep k values must be at least 1");
        c.retrieval.mode = SelectionMode::fixed;
        c.retrieval.k = static_cast<std::size_t>(v);
        c.retrieval.k_candidates = {c.retrieval.k};
        break;
      case SweepAxis::lambda:
        c.lambda.mode = LambdaMode::fixed;
        c.lambda.value = v;
        break;
      case SweepAxis::gamma:
        c.detector.gamma = v;
        break;
      case SweepAxis::corpus_size:
        if (!(v >= 1.0)) throw ConfigError("corpus sizes must be at least 1");
        break;
    }
    if (axis == SweepAxis::corpus_size) {
      BuildConfig bc = build;
      bc.max_entries = static_cast<std::size_t>(v);
      const auto ds = build_datastore(b.datastore_corpus, b.proxy, bc);
      rows.push_back({v, run_detection_bench(b, ds, c)});
    } else {
      rows.push_back({v, run_detection_bench(b, *shared, c)});
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Outlier injection for the clipping experiment

// Extends a provider's vocabulary by one reserved token that receives mass
// exp(log_mass) at every position. The base provider sees a stand-in token
// wherever the reserved one occurs.
class RareTokenProvider final : public LmProvider {
 public:
  RareTokenProvider(const LmProvider& base, double log_mass, TokenId stand_in)
      : base_(base), log_mass_(log_mass), stand_in_(stand_in) {
    if (!(log_mass < 0.0)) throw ConfigError("reserved token log-mass must be negative");
    if (stand_in >= base.vocab_size()) throw ConfigError("stand-in token outside base vocabulary");
  }

  TokenId rare_id() const noexcept { return static_cast<TokenId>(base_.vocab_size()); }
  std::size_t vocab_size() const override { return base_.vocab_size() + 1; }
  std::size_t embed_dim() const override { return base_.embed_dim(); }
  std::string fingerprint() const override { return "rare(" + base_.fingerprint() + ")"; }

  std::vector<LmStep> steps(const TokenSequence& seq) const override {
    auto out = base_.steps(mapped(seq));
    const double rho = std::exp(log_mass_);
    for (auto& s : out) {
      auto p = s.dist.to_dense();
      for (double& x : p) x *= 1.0 - rho;
      p.push_back(rho);
      s.dist = ProbDist::dense(std::move(p));
    }
    return out;
  }

  std::vector<std::vector<float>> window_embeddings(const TokenSequence& seq, std::size_t window) const override {
    return base_.window_embeddings(mapped(seq), window);
  }

 private:
  TokenSequence mapped(const TokenSequence& seq) const {
    TokenSequence m = seq;
    for (TokenId& t : m.ids) {
      if (t == rare_id()) t = stand_in_;
    }
    return m;
  }

  const LmProvider& base_;
  double log_mass_;
  TokenId stand_in_;
};

// Replaces each scored token independently with probability `rate`.
inline std::vector<TokenSequence> inject_outliers(std::span<const TokenSequence> texts, double rate, TokenId rare_id,
                                                  std::uint64_t seed) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("outlier rate must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> out(texts.begin(), texts.end());
  for (auto& t : out) {
    for (std::size_t i = t.prompt_len; i < t.size(); ++i) {
      if (detail::unit_uniform(rng()) < rate) t.ids[i] = rare_id;
    }
  }
  return out;
}

struct ClippingBenchConfig {
  DetectionBenchConfig base;
  double outlier_rate = 0.05;
  double outlier_log_mass = -40.0;
  double epsilon = 1e-30;  // low enough that the outliers' log-likelihood stays below -30
  double gamma = -7.5;
};

struct ClippingBenchReport {
  double auroc_clipped = 0.0;
  double auroc_unclipped = 0.0;
  std::size_t outliers = 0;
  double max_outlier_loglik = -std::numeric_limits<double>::infinity();
};

inline ClippingBenchReport run_clipping_bench(const ClippingBenchConfig& cfg) {
  const auto b = synth_benchmark(cfg.base.synth);
  const RareTokenProvider proxy(b.proxy, cfg.outlier_log_mass, 1);
  BuildConfig build = cfg.base.build;
  build.threads = cfg.base.threads;
  const auto ds = build_datastore(b.datastore_corpus, proxy, build);
  const auto llm = inject_outliers(b.llm_texts, cfg.outlier_rate, proxy.rare_id(),
                                   detail::hash_combine(cfg.base.synth.seed, 0x0c1));
  const auto human = inject_outliers(b.human_texts, cfg.outlier_rate, proxy.rare_id(),
                                     detail::hash_combine(cfg.base.synth.seed, 0x0c2));

  DetectorConfig clipped = cfg.base.detector;
  clipped.kind = DetectorKind::likelihood;
  clipped.epsilon = cfg.epsilon;
  clipped.gamma = cfg.gamma;
  DetectorConfig unclipped = clipped;
  unclipped.gamma.reset();

  const RetrievalParams params = cfg.base.retrieval.clamped_to(ds.size());
  ClippingBenchReport r;
  LabeledScores c, u;
  for (int cls = 0; cls < 2; ++cls) {
    const auto& texts = cls == 0 ? llm : human;
    std::vector<AlignedSequence> aligned(texts.size());
    parallel_for(texts.size(), cfg.base.threads, [&](std::size_t i) {
      aligned[i] = align_steps(proxy.steps(texts[i]), ds, texts[i], params, cfg.base.lambda);
    });
    for (std::size_t i = 0; i < texts.size(); ++i) {
      c.add(detect(aligned[i], {}, clipped).score, cls == 0);
      u.add(detect(aligned[i], {}, unclipped).score, cls == 0);
      const auto ll = aligned_loglik(aligned[i], cfg.epsilon).second;
      for (std::size_t j = 0; j < ll.size(); ++j) {
        if (aligned[i].observed[j] == proxy.rare_id()) {
          ++r.outliers;
          r.max_outlier_loglik = std::max(r.max_outlier_loglik, ll.values[j]);
        }
      }
    }
  }
  r.auroc_clipped = auroc(c);
  r.auroc_unclipped = auroc(u);
  return r;
}

// ---------------------------------------------------------------------------
// Routing benchmark

struct DomainBenchConfig {
  std::size_t domains = 4;
  std::size_t vocab_size = 40;
  std::uint64_t base_seed = 7;
  double base_scale = 2.0;
  double style_strength = 1.5;
  double topic_strength = 1.0;
  std::size_t store_texts_per_domain = 250;
  std::size_t routed_texts_per_domain = 500;
  std::size_t text_length = 32;
  std::size_t k_r = 15;
  std::size_t embed_dim = 256;
  std::uint64_t seed = 1;
};

struct DomainBenchmark {
  Vocabulary vocab;
  std::vector<LabeledSentence> store;
  std::vector<LabeledSentence> routed;
};

inline DomainBenchmark domain_benchmark(const DomainBenchConfig& cfg) {
  if (cfg.domains < 1) throw ConfigError("need at least one domain");
  DomainBenchmark b{synthetic_vocabulary(cfg.vocab_size), {}, {}};
  for (std::size_t m = 0; m < cfg.domains; ++m) {
    const StyleSpec style{detail::hash_combine(cfg.seed, 1000 + m), cfg.style_strength, 1.0, 2, cfg.topic_strength};
    const StyleGenerator gen(cfg.vocab_size, cfg.base_seed, cfg.base_scale, style);
    std::mt19937_64 rng(detail::hash_combine(cfg.seed, 0xd0 + m));
    const std::size_t n = cfg.store_texts_per_domain + cfg.routed_texts_per_domain;
    const auto docs = gen.sample_corpus(n * cfg.text_length, cfg.text_length, rng);
    for (std::size_t i = 0; i < docs.size(); ++i) {
      LabeledSentence s{render_text(b.vocab, docs[i]), m};
      (i < cfg.store_texts_per_domain ? b.store : b.routed).push_back(std::move(s));
    }
  }
  return b;
}

struct RoutingBenchReport {
  double accuracy = 0.0;
  std::size_t routed = 0;
  std::vector<std::vector<double>> confusion;
};

inline RoutingBenchReport run_routing_bench(const DomainBenchConfig& cfg) {
  const auto b = domain_benchmark(cfg);
  const HashedNgramEmbedder embedder(cfg.embed_dim);
  const auto store = build_routing_store(b.store, embedder, cfg.domains, cfg.k_r);
  std::vector<std::size_t> truth, pred;
  for (const auto& s : b.routed) {
    truth.push_back(s.label);
    pred.push_back(route(store, embedder.embed(s.text)).chosen);
  }
  RoutingBenchReport r;
  r.routed = truth.size();
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += truth[i] == pred[i];
  r.accuracy = static_cast<double>(ok) / static_cast<double>(truth.size());
  r.confusion = confusion(truth, pred, cfg.domains);
  return r;
}

// ---------------------------------------------------------------------------
// Attribution benchmark

struct AttributionBenchConfig {
  SynthBenchConfig synth;  // supplies the proxy, vocabulary and source template
  std::size_t sources = 4;
  double style_strength = 0.75;
  std::size_t texts_per_source = 200;
  std::size_t datastore_tokens = 8000;
  BuildConfig build;
  RetrievalParams retrieval;
  LambdaConfig lambda;
  DetectorConfig detector;
  std::size_t threads = 1;
};

struct AttributionBenchReport {
  double accuracy = 0.0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> confusion;
};

inline AttributionBenchReport run_attribution_bench(const AttributionBenchConfig& cfg) {
  if (cfg.sources < 2) throw ConfigError("attribution needs at least two sources");
  cfg.synth.validate();
  const ToyLm proxy = train_toy_model(cfg.synth, cfg.synth.proxy, 0x51);
  std::vector<ToyLm> sources;
  std::vector<Datastore> stores;
  AttributionBenchReport r;
  BuildConfig build = cfg.build;
  build.threads = cfg.threads;
  const std::size_t docs = (cfg.datastore_tokens + cfg.synth.document_length - 1) / cfg.synth.document_length;
  for (std::size_t m = 0; m < cfg.sources; ++m) {
    ToyModelSpec spec = cfg.synth.source;
    spec.style.style_seed = detail::hash_combine(cfg.synth.seed, 500 + m);
    spec.style.style_strength = cfg.style_strength;
    sources.push_back(train_toy_model(cfg.synth, spec, 0x51));
    const auto corpus =
        sample_texts(sources.back(), docs, cfg.synth.document_length, detail::hash_combine(cfg.synth.seed, 0xa0 + m));
    stores.push_back(build_datastore(corpus, proxy, build));
    r.names.push_back("source-" + std::to_string(m));
  }
  std::vector<AttributionExpert> experts;
  for (std::size_t m = 0; m < cfg.sources; ++m) experts.push_back({r.names[m], &proxy, &stores[m]});

  RetrievalParams params = cfg.retrieval;
  for (const auto& s : stores) params = params.clamped_to(s.size());
  std::vector<std::size_t> truth, pred;
  for (std::size_t m = 0; m < cfg.sources; ++m) {
    const auto texts = sample_texts(sources[m], cfg.texts_per_source, cfg.synth.text_length,
                                    detail::hash_combine(cfg.synth.seed, 0xb0 + m));
    std::vector<std::size_t> got(texts.size());
    parallel_for(texts.size(), cfg.threads, [&](std::size_t i) {
      got[i] = attribute(texts[i], experts, params, cfg.lambda, cfg.detector).index;
    });
    truth.insert(truth.end(), texts.size(), m);
    pred.insert(pred.end(), got.begin(), got.end());
  }
  std::size_t ok = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) ok += truth[i] == pred[i];
  r.accuracy = static_cast<double>(ok) / static_cast<double>(truth.size());
  r.confusion = confusion(truth, pred, cfg.sources);
  return r;
}

// ---------------------------------------------------------------------------
// Retrieval error bound

// Source map pi_src(.|h) = softmax(A h + b) with Gaussian keys and queries.
struct BoundExperimentConfig {
  std::size_t dim = 2;
  std::size_t vocab_size = 4;
  std::size_t datastore_size = 50000;
  std::size_t queries = 1000;
  double delta = 0.1;
  std::size_t k = 500;
  double tau = 1.0;
  double weight_scale = 1.0;  // standard deviation of the entries of A
  double bound_scale = 1.0;   // multiplies L inside the bound only
  std::uint64_t seed = 0;

  void validate() const {
    if (dim < 1 || vocab_size < 2) throw ConfigError("bound experiment needs d >= 1 and V >= 2");
    if (k < 1 || k > datastore_size) throw ConfigError("bound experiment needs 1 <= k <= N");
    if (queries < 1) throw ConfigError("bound experiment needs at least one query");
    if (!(delta > 0.0 && delta < 1.0)) throw ConfigError("delta must lie in (0, 1)");
    if (!(tau > 0.0) || !(weight_scale > 0.0) || !(bound_scale > 0.0)) {
      throw ConfigError("tau, weight_scale and bound_scale must be positive");
    }
  }
};

class SoftmaxSource {
 public:
  SoftmaxSource(std::size_t vocab, std::size_t dim, double scale, std::mt19937_64& rng) : v_(vocab), d_(dim) {
    std::normal_distribution<double> n(0.0, 1.0);
    a_.resize(v_ * d_);
    for (double& x : a_) x = scale * n(rng);
    b_.resize(v_);
    for (double& x : b_) x = n(rng);
  }

  // Certified L1-Lipschitz constant w.r.t. the Euclidean norm of h: the
  // softmax Jacobian maps z to p * (z - <p, z>), whose L1 norm is the mean
  // absolute deviation of z under p, at most (max z - min z) / 2; with
  // z = A dh that range is at most max_{u,v} |A_u - A_v|_2 |dh|_2.
  double lipschitz() const {
    double best = 0.0;
    for (std::size_t u = 0; u < v_; ++u) {
      for (std::size_t w = u + 1; w < v_; ++w) {
        double s = 0.0;
        for (std::size_t j = 0; j < d_; ++j) {
          const double t = a_[u * d_ + j] - a_[w * d_ + j];
          s += t * t;
        }
        best = std::max(best, std::sqrt(s));
      }
    }
    return best / 2.0;
  }

  std::vector<double> probs(std::span<const float> h) const {
    std::vector<double> z(v_);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t u = 0; u < v_; ++u) {
      z[u] = b_[u];
      for (std::size_t j = 0; j < d_; ++j) z[u] += a_[u * d_ + j] * static_cast<double>(h[j]);
      top = std::max(top, z[u]);
    }
    double total = 0.0;
    for (double& x : z) total += (x = std::exp(x - top));
    for (double& x : z) x /= total;
    return z;
  }

 private:
  std::size_t v_;
  std::size_t d_;
  std::vector<double> a_;
  std::vector<double> b_;
};

inline double bound_variance_term(std::size_t vocab, double delta, double k_eff) {
  const double v = static_cast<double>(vocab);
  return v * std::sqrt(std::log(2.0 * v / delta) / (2.0 * k_eff));
}

inline double bound_value(double lipschitz, double r_eff, std::size_t vocab, double delta, double k_eff) {
  return lipschitz * r_eff + bound_variance_term(vocab, delta, k_eff);
}

struct BoundSample {
  double l1 = 0.0;  // |pi_src(.|q) - pi_knn(.|q)|_1
  double r_eff = 0.0;
  double k_eff = 0.0;
};

struct BoundSamples {
  double lipschitz = 0.0;
  std::vector<BoundSample> samples;
};

// Draws the datastore (y_n ~ pi_src(.|h_n) independently) and evaluates the
// retrieval error at fresh queries. Independent of delta.
inline BoundSamples sample_bound_errors(const BoundExperimentConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  const SoftmaxSource src(cfg.vocab_size, cfg.dim, cfg.weight_scale, rng);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> keys(cfg.datastore_size * cfg.dim);
  for (float& x : keys) x = n(rng);
  std::vector<TokenId> values(cfg.datastore_size);
  for (std::size_t r = 0; r < cfg.datastore_size; ++r) {
    const auto p = src.probs(std::span<const float>(keys).subspan(r * cfg.dim, cfg.dim));
    values[r] = sample_token(ProbDist::dense(p), detail::unit_uniform(rng()));
  }
  const auto index = VectorIndex::build(std::move(keys), cfg.dim, std::move(values));

  BoundSamples out;
  out.lipschitz = src.lipschitz();
  std::vector<float> q(cfg.dim);
  for (std::size_t i = 0; i < cfg.queries; ++i) {
    for (float& x : q) x = n(rng);
    const auto nbrs = index.search(q, cfg.k);
    const auto w = retrieval_weights(nbrs, cfg.tau);
    const auto knn = knn_distribution(nbrs, w, cfg.vocab_size).to_dense();
    const auto truth = src.probs(q);
    double l1 = 0.0;
    for (std::size_t v = 0; v < cfg.vocab_size; ++v) l1 += std::abs(truth[v] - knn[v]);
    const auto st = effective_stats(w, nbrs.distances);
    out.samples.push_back({l1, st.r_eff, st.k_eff});
  }
  return out;
}

struct BoundReport {
  double certified_lipschitz = 0.0;
  std::size_t queries = 0;
  std::size_t violations = 0;
  double violation_rate = 0.0;
  double mean_l1 = 0.0;
  double mean_bound = 0.0;
  double mean_r_eff = 0.0;
  double mean_k_eff = 0.0;
};

inline BoundReport evaluate_bound(const BoundSamples& s, std::size_t vocab, double delta, double bound_scale = 1.0) {
  BoundReport r;
  r.certified_lipschitz = s.lipschitz;
  r.queries = s.samples.size();
  for (const auto& x : s.samples) {
    const double b = bound_value(bound_scale * s.lipschitz, x.r_eff, vocab, delta, x.k_eff);
    if (x.l1 > b) ++r.violations;
    r.mean_l1 += x.l1;
    r.mean_bound += b;
    r.mean_r_eff += x.r_eff;
    r.mean_k_eff += x.k_eff;
  }
  const double n = static_cast<double>(r.queries);
  r.violation_rate = static_cast<double>(r.violations) / n;
  r.mean_l1 /= n;
  r.mean_bound /= n;
  r.mean_r_eff /= n;
  r.mean_k_eff /= n;
  return r;
}

inline BoundReport validate_bound(const BoundExperimentConfig& cfg) {
  return evaluate_bound(sample_bound_errors(cfg), cfg.vocab_size, cfg.delta, cfg.bound_scale);
}

}  // namespace knnproxy
