#pragma once

// Retrieval-based proxy alignment.
//
// At each scored position the proxy's context embedding queries the
// datastore; the retrieved successor tokens, weighted by a softmax over
// negative distances, form a sparse next-token distribution that is
// interpolated with the proxy's own prediction:
//
//   alpha_j   = exp(-d_j / tau) / sum_l exp(-d_l / tau)
//   pi_knn(v) = sum_j alpha_j [y_j == v]
//   pi_hat    = lambda * pi_proxy + (1 - lambda) * pi_knn
//
// Neighbourhood quality is summarised by k_eff = 1 / sum alpha_j^2 and
// r_eff = sum alpha_j d_j, combined into the error surrogate
// U = c * r_eff + 1 / sqrt(k_eff). In adaptive mode (k, tau) minimise U over
// a candidate grid using prefixes of one top-k_max retrieval, and lambda is
// sigmoid(U - median U over the text).

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "knnproxy/core.hpp"
#include "knnproxy/datastore.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/index.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

enum class SelectionMode { fixed, adaptive };
enum class LambdaMode { fixed, adaptive };

struct RetrievalParams {
  std::size_t k = 256;
  double tau = 5.0;
  std::vector<std::size_t> k_candidates{16, 32, 64, 128, 256, 512, 1024};
  std::vector<double> tau_candidates{0.1, 0.5, 1.0, 5.0, 10.0, 50.0};
  double c = 1.0;
  SelectionMode mode = SelectionMode::adaptive;
  bool keep_weights = false;  // record alpha_j per position in the diagnostics

  std::size_t k_max() const {
    if (mode == SelectionMode::fixed) return k;
    return k_candidates.empty() ? 0 : *std::max_element(k_candidates.begin(), k_candidates.end());
  }

  void validate() const {
    if (mode == SelectionMode::fixed) {
      if (k < 1) throw ConfigError("k must be at least 1");
      if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    } else {
      if (k_candidates.empty() || tau_candidates.empty()) throw ConfigError("empty candidate grid");
      for (auto kc : k_candidates) {
        if (kc < 1) throw ConfigError("k candidates must be at least 1");
      }
      for (double t : tau_candidates) {
        if (!(t > 0.0)) throw ConfigError("tau candidates must be positive");
      }
    }
    if (!(c >= 0.0)) throw ConfigError("calibration coefficient c must be non-negative");
  }

  // Drops k values that exceed the datastore size, keeping at least the
  // smallest one clamped to n. For sweeps over small datastores.
  RetrievalParams clamped_to(std::size_t n) const {
    RetrievalParams p = *this;
    p.k = std::min(p.k, n);
    std::vector<std::size_t> ks;
    for (auto kc : k_candidates) {
      if (kc <= n) ks.push_back(kc);
    }
    if (ks.empty() && !k_candidates.empty()) {
      ks.push_back(std::min(n, *std::min_element(k_candidates.begin(), k_candidates.end())));
    }
    p.k_candidates = std::move(ks);
    return p;
  }
};

struct LambdaConfig {
  LambdaMode mode = LambdaMode::adaptive;
  double value = 0.1;  // used in fixed mode
};

struct EffectiveStats {
  double k_eff = 1.0;
  double r_eff = 0.0;
};

struct Selection {
  std::size_t k = 0;
  double tau = 0.0;
  double u = 0.0;
};

struct RetrievalDiagnostics {
  std::vector<double> weights;  // only with RetrievalParams::keep_weights
  double k_eff = 1.0;
  double r_eff = 0.0;
  double u = 0.0;
  std::size_t k = 0;
  double tau = 0.0;
  double lambda = 1.0;
};

// One record per scored position.
struct AlignedSequence {
  std::vector<ProbDist> dists;                   // pi_hat
  std::vector<TokenId> observed;                 // x_i
  std::vector<double> loglik;                    // log pi_hat(x_i), unfloored
  std::vector<RetrievalDiagnostics> diagnostics;  // empty for proxy-only sequences

  std::size_t size() const noexcept { return dists.size(); }
};

// Normalised softmax of -d/tau, evaluated with max-subtraction.
inline std::vector<double> retrieval_weights(std::span<const double> distances, double tau) {
  if (distances.empty()) throw ConfigError("retrieval weights need at least one neighbour");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  double top = -std::numeric_limits<double>::infinity();
  for (double d : distances) top = std::max(top, -d / tau);
  std::vector<double> w(distances.size());
  double total = 0.0;
  for (std::size_t j = 0; j < w.size(); ++j) total += (w[j] = std::exp(-distances[j] / tau - top));
  for (double& x : w) x /= total;
  return w;
}

inline std::vector<double> retrieval_weights(const NeighborSet& nbrs, double tau) {
  return retrieval_weights(std::span<const double>(nbrs.distances), tau);
}

// Mass of each token is the total weight of the neighbours that predicted it.
// Uses the first weights.size() neighbours.
inline ProbDist knn_distribution(const NeighborSet& nbrs, std::span<const double> weights,
                                 std::size_t vocab_size) {
  if (weights.size() > nbrs.size()) throw DimensionError("more weights than neighbours");
  std::vector<ProbDist::Entry> entries;
  entries.reserve(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) entries.emplace_back(nbrs.next_tokens[j], weights[j]);
  return ProbDist::sparse(vocab_size, std::move(entries));
}

inline EffectiveStats effective_stats(std::span<const double> weights, std::span<const double> distances) {
  if (weights.size() > distances.size()) throw DimensionError("more weights than distances");
  double sq = 0.0;
  double r = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    sq += weights[j] * weights[j];
    r += weights[j] * distances[j];
  }
  return {1.0 / sq, r};
}

namespace detail {

// Running sums over a ranked prefix for one temperature. With e_j =
// exp(-(d_j - d_0) / tau): k_eff = S1^2 / S2 and r_eff = Sd / S1. Both the
// single-retrieval grid search and the per-candidate surrogate accumulate in
// this exact order, so they agree bit for bit.
struct PrefixAccumulator {
  double s1 = 0.0;
  double s2 = 0.0;
  double sd = 0.0;

  void add(double e, double d) {
    s1 += e;
    s2 += e * e;
    sd += e * d;
  }
  EffectiveStats stats(std::size_t k) const {
    const double keff = std::clamp(s1 * s1 / s2, 1.0, static_cast<double>(k));
    return {keff, sd / s1};
  }
};

inline double surrogate_value(const EffectiveStats& st, double c) { return c * st.r_eff + 1.0 / std::sqrt(st.k_eff); }

inline double prefix_exponent(double d, double d0, double tau) { return std::exp(-(d - d0) / tau); }

}  // namespace detail

// U = c * r_eff + 1 / sqrt(k_eff) on the first k neighbours with temperature tau.
inline double surrogate(std::size_t k, double tau, const NeighborSet& ranked, double c,
                        EffectiveStats* stats_out = nullptr) {
  if (k < 1 || k > ranked.size()) throw ConfigError("surrogate prefix length out of range");
  detail::PrefixAccumulator acc;
  const double d0 = ranked.distances[0];
  for (std::size_t j = 0; j < k; ++j) acc.add(detail::prefix_exponent(ranked.distances[j], d0, tau), ranked.distances[j]);
  const auto st = acc.stats(k);
  if (stats_out != nullptr) *stats_out = st;
  return detail::surrogate_value(st, c);
}

// Exhaustive argmin of U over K x T using prefixes of one ranked retrieval.
// Ties go to the smaller k, then the smaller tau.
inline Selection select_adaptive(const NeighborSet& ranked, const RetrievalParams& params,
                                 EffectiveStats* stats_out = nullptr) {
  std::vector<std::size_t> ks = params.k_candidates;
  std::vector<double> taus = params.tau_candidates;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  std::sort(taus.begin(), taus.end());
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  if (ks.empty() || taus.empty()) throw ConfigError("empty candidate grid");
  if (ks.back() > ranked.size()) throw ConfigError("ranked list shorter than the largest k candidate");

  // table[ki][ti]
  std::vector<std::vector<EffectiveStats>> table(ks.size(), std::vector<EffectiveStats>(taus.size()));
  const double d0 = ranked.distances[0];
  for (std::size_t ti = 0; ti < taus.size(); ++ti) {
    detail::PrefixAccumulator acc;
    std::size_t ki = 0;
    for (std::size_t j = 0; j < ks.back(); ++j) {
      acc.add(detail::prefix_exponent(ranked.distances[j], d0, taus[ti]), ranked.distances[j]);
      while (ki < ks.size() && ks[ki] == j + 1) table[ki++][ti] = acc.stats(j + 1);
    }
  }

  Selection best;
  EffectiveStats best_stats;
  bool have = false;
  for (std::size_t ki = 0; ki < ks.size(); ++ki) {
    for (std::size_t ti = 0; ti < taus.size(); ++ti) {
      const double u = detail::surrogate_value(table[ki][ti], params.c);
      if (!have || u < best.u) {
        best = {ks[ki], taus[ti], u};
        best_stats = table[ki][ti];
        have = true;
      }
    }
  }
  if (stats_out != nullptr) *stats_out = best_stats;
  return best;
}

inline double median(std::vector<double> xs) {
  if (xs.empty()) throw ConfigError("median of an empty list");
  const std::size_t n = xs.size();
  std::sort(xs.begin(), xs.end());
  return n % 2 == 1 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

inline double logistic(double x) {
  const double y = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  // Keep the weight strictly inside (0, 1) even when the exponential saturates.
  return std::clamp(y, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

// lambda_i = sigmoid(U_i - median(U)).
inline std::vector<double> adaptive_lambda(std::span<const double> u_stars) {
  const double med = median({u_stars.begin(), u_stars.end()});
  std::vector<double> out(u_stars.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = logistic(u_stars[i] - med);
  return out;
}

// Aligns precomputed proxy steps. Steps cover every position of seq; only
// positions from seq.prompt_len on are scored.
inline AlignedSequence align_steps(std::span<const LmStep> steps, const Datastore& ds, const TokenSequence& seq,
                                   const RetrievalParams& params, const LambdaConfig& lambda) {
  params.validate();
  if (lambda.mode == LambdaMode::fixed && !(lambda.value >= 0.0 && lambda.value <= 1.0)) {
    throw ConfigError("fixed lambda must lie in [0, 1]");
  }
  if (steps.size() != seq.size()) throw DimensionError("one proxy step per token required");
  const std::size_t vocab = ds.meta.vocab_size;
  const std::size_t k_max = params.k_max();
  if (ds.size() < k_max) {
    throw ConfigError("datastore holds " + std::to_string(ds.size()) + " entries, fewer than k_max=" +
                      std::to_string(k_max));
  }
  seq.validate(vocab);

  const std::size_t first = seq.prompt_len;
  const std::size_t n = seq.size() - first;
  AlignedSequence out;
  out.dists.reserve(n);
  out.observed.reserve(n);
  out.loglik.reserve(n);
  out.diagnostics.resize(n);
  std::vector<ProbDist> knn(n);

  for (std::size_t i = 0; i < n; ++i) {
    const LmStep& step = steps[first + i];
    if (step.dist.vocab_size() != vocab) {
      throw DataError("vocabulary mismatch: proxy has " + std::to_string(step.dist.vocab_size()) +
                      " tokens, datastore " + std::to_string(vocab));
    }
    const NeighborSet ranked = ds.index.search(step.embedding, k_max);
    auto& diag = out.diagnostics[i];
    EffectiveStats st;
    if (params.mode == SelectionMode::adaptive) {
      const Selection sel = select_adaptive(ranked, params, &st);
      diag.k = sel.k;
      diag.tau = sel.tau;
      diag.u = sel.u;
    } else {
      diag.k = params.k;
      diag.tau = params.tau;
      diag.u = surrogate(params.k, params.tau, ranked, params.c, &st);
    }
    diag.k_eff = st.k_eff;
    diag.r_eff = st.r_eff;
    const auto w = retrieval_weights(std::span<const double>(ranked.distances).first(diag.k), diag.tau);
    knn[i] = knn_distribution(ranked, w, vocab);
    if (params.keep_weights) diag.weights = w;
  }

  std::vector<double> lambdas(n, lambda.value);
  if (lambda.mode == LambdaMode::adaptive) {
    std::vector<double> us(n);
    for (std::size_t i = 0; i < n; ++i) us[i] = out.diagnostics[i].u;
    lambdas = adaptive_lambda(us);
  }

  for (std::size_t i = 0; i < n; ++i) {
    out.diagnostics[i].lambda = lambdas[i];
    out.dists.push_back(mix(steps[first + i].dist, knn[i], lambdas[i]));
    const TokenId x = seq.ids[first + i];
    out.observed.push_back(x);
    out.loglik.push_back(std::log(out.dists.back().prob(x)));
  }
  return out;
}

inline AlignedSequence align_sequence(const LmProvider& provider, const Datastore& ds, const TokenSequence& seq,
                                      const RetrievalParams& params, const LambdaConfig& lambda) {
  if (provider.vocab_size() != ds.meta.vocab_size) {
    throw DataError("vocabulary mismatch: provider has " + std::to_string(provider.vocab_size()) +
                    " tokens, datastore " + std::to_string(ds.meta.vocab_size));
  }
  if (provider.embed_dim() != ds.dim()) throw DimensionError("provider embedding width differs from datastore keys");
  const auto steps = provider.steps(seq);
  return align_steps(steps, ds, seq, params, lambda);
}

// The raw proxy viewed as an aligned sequence (no retrieval).
inline AlignedSequence proxy_only(std::span<const LmStep> steps, const TokenSequence& seq) {
  if (steps.size() != seq.size()) throw DimensionError("one proxy step per token required");
  AlignedSequence out;
  for (std::size_t i = seq.prompt_len; i < seq.size(); ++i) {
    out.dists.push_back(steps[i].dist);
    out.observed.push_back(seq.ids[i]);
    out.loglik.push_back(std::log(steps[i].dist.prob(seq.ids[i])));
  }
  return out;
}

}  // namespace knnproxy
