#pragma once

// Ranking and classification metrics.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "knnproxy/error.hpp"

namespace knnproxy {

struct LabeledScores {
  std::vector<double> scores;
  std::vector<int> labels;  // 1 = positive (LLM), 0 = negative (human)

  void add(double score, bool positive) {
    scores.push_back(score);
    labels.push_back(positive ? 1 : 0);
  }
  std::size_t size() const noexcept { return scores.size(); }
};

// Probability that a random positive outranks a random negative, ties
// counted as one half. Computed from midranks in O(n log n).
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimensionError("scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t) {
      if (labels[order[t]] != 0) {
        pos_rank_sum += midrank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw DataError("AUROC needs both classes");
  const double u = pos_rank_sum - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auroc(const LabeledScores& s) { return auroc(s.scores, s.labels); }

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

// One point per distinct score, predicting positive when score >= threshold.
inline std::vector<RocPoint> roc_curve(const LabeledScores& s) {
  std::vector<double> thr(s.scores);
  std::sort(thr.begin(), thr.end(), std::greater<>());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  const auto pos = static_cast<double>(std::count(s.labels.begin(), s.labels.end(), 1));
  const double neg = static_cast<double>(s.size()) - pos;
  std::vector<RocPoint> out{{std::numeric_limits<double>::infinity(), 0.0, 0.0}};
  for (double t : thr) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.scores[i] >= t) (s.labels[i] != 0 ? tp : fp) += 1;
    }
    out.push_back({t, neg > 0 ? fp / neg : 0.0, pos > 0 ? tp / pos : 0.0});
  }
  return out;
}

inline double f1_at(const LabeledScores& s, double threshold) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const bool pred = s.scores[i] >= threshold;
    const bool pos = s.labels[i] != 0;
    if (pred && pos) ++tp;
    else if (pred) ++fp;
    else if (pos) ++fn;
  }
  return tp == 0 ? 0.0 : 2 * tp / (2 * tp + fp + fn);
}

struct F1Result {
  double threshold = 0.0;
  double f1 = 0.0;
};

// Best F1 over thresholds at midpoints between consecutive distinct scores,
// plus one below the minimum (everything positive). Higher scores predict
// positive; the first maximiser in ascending threshold order wins.
inline F1Result f1_sweep(const LabeledScores& s) {
  if (s.size() == 0) throw DataError("F1 sweep over no scores");
  std::vector<double> u(s.scores);
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  std::vector<double> thresholds{u.front() - 1.0};
  for (std::size_t i = 0; i + 1 < u.size(); ++i) thresholds.push_back(0.5 * (u[i] + u[i + 1]));
  thresholds.push_back(u.back() + 1.0);
  F1Result best{thresholds.front(), -1.0};
  for (double t : thresholds) {
    const double f = f1_at(s, t);
    if (f > best.f1) best = {t, f};
  }
  return best;
}

// Row-normalised confusion matrix; rows are true classes. Rows without
// samples stay zero.
inline std::vector<std::vector<double>> confusion(std::span<const std::size_t> truth,
                                                  std::span<const std::size_t> predicted, std::size_t classes) {
  if (truth.size() != predicted.size()) throw DimensionError("truth and prediction lengths differ");
  std::vector<std::vector<double>> m(classes, std::vector<double>(classes, 0.0));
  std::vector<double> rows(classes, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= classes || predicted[i] >= classes) throw DataError("class index out of range");
    m[truth[i]][predicted[i]] += 1.0;
    rows[truth[i]] += 1.0;
  }
  for (std::size_t r = 0; r < classes; ++r) {
    if (rows[r] > 0) {
      for (double& x : m[r]) x /= rows[r];
    }
  }
  return m;
}

}  // namespace knnproxy
