#pragma once

// Zero-shot detector statistics over aligned distributions: mean
// log-likelihood, Fast-DetectGPT (analytic sampling discrepancy) and
// Binoculars, all with optional lower-tail clipping of token log-likelihoods.

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnproxy/align.hpp"
#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

enum class DetectorKind { likelihood, fast_detect, binoculars };
enum class Polarity { higher_is_llm, lower_is_llm };
enum class Label { human, llm };

inline Polarity default_polarity(DetectorKind kind) {
  return kind == DetectorKind::binoculars ? Polarity::lower_is_llm : Polarity::higher_is_llm;
}

inline std::string to_string(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::likelihood: return "likelihood";
    case DetectorKind::fast_detect: return "fast_detect";
    case DetectorKind::binoculars: return "binoculars";
  }
  return "?";
}

inline DetectorKind parse_detector_kind(const std::string& s) {
  if (s == "likelihood") return DetectorKind::likelihood;
  if (s == "fast_detect" || s == "fast") return DetectorKind::fast_detect;
  if (s == "binoculars") return DetectorKind::binoculars;
  throw ConfigError("unknown detector '" + s + "'");
}

inline std::string to_string(Label l) { return l == Label::llm ? "llm" : "human"; }

struct DetectorConfig {
  DetectorKind kind = DetectorKind::likelihood;
  std::optional<double> gamma = -7.5;  // nullopt disables clipping
  double epsilon = 1e-10;              // probability floor before every log
  std::optional<double> threshold;
  std::optional<Polarity> polarity;    // defaults per detector kind

  Polarity effective_polarity() const { return polarity.value_or(default_polarity(kind)); }

  void validate() const {
    if (!(epsilon > 0.0)) throw ConfigError("probability floor epsilon must be positive");
    if (gamma && !std::isfinite(*gamma)) throw ConfigError("clip bound gamma must be finite");
  }
};

struct DetectionResult {
  double score = 0.0;
  LogLikSequence raw;      // floored log-likelihoods
  LogLikSequence clipped;  // after max(., gamma)
  std::optional<Label> label;
};

inline double clip(double x, std::optional<double> gamma) { return gamma ? std::max(x, *gamma) : x; }

inline double floored_log(double p, double epsilon) { return std::log(std::max(p, epsilon)); }

// l_i = log max(pi_hat(x_i), eps); returns (sum, per-token values).
inline std::pair<double, LogLikSequence> aligned_loglik(const AlignedSequence& aln, double epsilon = 1e-10) {
  LogLikSequence ll;
  ll.values.reserve(aln.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < aln.size(); ++i) {
    const double l = floored_log(aln.dists[i].prob(aln.observed[i]), epsilon);
    ll.values.push_back(l);
    sum += l;
  }
  return {sum, std::move(ll)};
}

// (1/T) sum max(l_i, gamma); plain mean when gamma is disabled.
inline double clip_and_mean(std::span<const double> ll, std::optional<double> gamma) {
  if (ll.empty()) throw DataError("mean over an empty log-likelihood sequence");
  double sum = 0.0;
  for (double l : ll) sum += clip(l, gamma);
  return sum / static_cast<double>(ll.size());
}

inline double clip_and_mean(const LogLikSequence& ll, std::optional<double> gamma) {
  return clip_and_mean(std::span<const double>(ll.values), gamma);
}

struct ReferenceMoments {
  double mean = 0.0;      // sum over positions of E_ref[clip(log pi_hat(v))]
  double variance = 0.0;  // sum over positions of Var_ref[...]
};

// Closed-form moments of the clipped aligned log-likelihood of a text whose
// tokens are drawn independently per position from the reference model.
inline ReferenceMoments reference_moments(const AlignedSequence& aln, std::span<const ProbDist> reference,
                                          const DetectorConfig& cfg) {
  if (reference.size() != aln.size()) throw DimensionError("reference covers a different number of positions");
  ReferenceMoments m;
  std::vector<double> x;
  for (std::size_t i = 0; i < aln.size(); ++i) {
    const ProbDist& ref = reference[i];
    if (ref.vocab_size() != aln.dists[i].vocab_size()) throw DataError("vocabulary mismatch with reference model");
    const auto hat = aln.dists[i].to_dense();
    x.resize(hat.size());
    for (std::size_t v = 0; v < hat.size(); ++v) x[v] = clip(floored_log(hat[v], cfg.epsilon), cfg.gamma);
    double mu = 0.0;
    ref.for_each([&](TokenId v, double p) { mu += p * x[v]; });
    double var = 0.0;
    ref.for_each([&](TokenId v, double p) { var += p * (x[v] - mu) * (x[v] - mu); });
    m.mean += mu;
    m.variance += var;
  }
  return m;
}

// (sum clip(l_i) - mu_ref) / sigma_ref.
inline double fast_detect_score(const AlignedSequence& aln, std::span<const ProbDist> reference,
                                const DetectorConfig& cfg) {
  const auto m = reference_moments(aln, reference, cfg);
  const auto ll = aligned_loglik(aln, cfg.epsilon).second;
  double observed = 0.0;
  for (double l : ll.values) observed += clip(l, cfg.gamma);
  const double sigma = std::sqrt(m.variance);
  if (!(sigma > 1e-9)) throw DegenerateScoreError("reference variance is zero");
  return (observed - m.mean) / sigma;
}

// exp(NLL_aligned - H(pi_hat, pi_ref)). The cross-entropy term is not clipped.
inline double binoculars_score(const AlignedSequence& aln, std::span<const ProbDist> reference,
                               const DetectorConfig& cfg) {
  if (reference.size() != aln.size()) throw DimensionError("reference covers a different number of positions");
  const auto ll = aligned_loglik(aln, cfg.epsilon).second;
  const double nll = -clip_and_mean(ll, cfg.gamma);
  double h = 0.0;
  for (std::size_t i = 0; i < aln.size(); ++i) {
    const auto ref = reference[i].to_dense();
    if (ref.size() != aln.dists[i].vocab_size()) throw DataError("vocabulary mismatch with reference model");
    aln.dists[i].for_each([&](TokenId v, double p) {
      if (p > 0.0) h -= p * floored_log(ref[v], cfg.epsilon);
    });
  }
  h /= static_cast<double>(aln.size());
  return std::exp(nll - h);
}

// Scores exactly at the threshold are assigned to the LLM class.
inline Label decide(double score, double threshold, Polarity polarity) {
  const bool llm = polarity == Polarity::higher_is_llm ? score >= threshold : score <= threshold;
  return llm ? Label::llm : Label::human;
}

// Reference distributions at the scored positions of seq.
inline std::vector<ProbDist> reference_dists(std::span<const LmStep> steps, const TokenSequence& seq) {
  if (steps.size() != seq.size()) throw DimensionError("one reference step per token required");
  std::vector<ProbDist> out;
  out.reserve(seq.scored_length());
  for (std::size_t i = seq.prompt_len; i < seq.size(); ++i) out.push_back(steps[i].dist);
  return out;
}

inline DetectionResult detect(const AlignedSequence& aln, std::span<const ProbDist> reference,
                              const DetectorConfig& cfg) {
  cfg.validate();
  DetectionResult r;
  auto ll = aligned_loglik(aln, cfg.epsilon).second;
  r.clipped.values.reserve(ll.size());
  for (double l : ll.values) r.clipped.values.push_back(clip(l, cfg.gamma));
  r.raw = std::move(ll);
  switch (cfg.kind) {
    case DetectorKind::likelihood:
      r.score = clip_and_mean(r.raw, cfg.gamma);
      break;
    case DetectorKind::fast_detect:
      r.score = fast_detect_score(aln, reference, cfg);
      break;
    case DetectorKind::binoculars:
      r.score = binoculars_score(aln, reference, cfg);
      break;
  }
  if (cfg.threshold) r.label = decide(r.score, *cfg.threshold, cfg.effective_polarity());
  return r;
}

}  // namespace knnproxy
