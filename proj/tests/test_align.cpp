#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "knnproxy/align.hpp"
#include "knnproxy/detect.hpp"
#include "test_support.hpp"

using namespace knnproxy;
using testing::seq_of;

namespace {

NeighborSet ranked_from(std::vector<double> d, std::vector<TokenId> y = {}) {
  std::sort(d.begin(), d.end());
  NeighborSet n;
  n.distances = d;
  n.indices.resize(d.size());
  std::iota(n.indices.begin(), n.indices.end(), std::size_t{0});
  n.next_tokens = y.empty() ? std::vector<TokenId>(d.size(), 0) : y;
  return n;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// U from first principles: plain softmax weights, then the two statistics.
double surrogate_from_scratch(const std::vector<double>& d, double tau, double c) {
  std::vector<double> e(d.size());
  double z = 0.0;
  for (std::size_t j = 0; j < d.size(); ++j) z += (e[j] = std::exp(-(d[j] - d[0]) / tau));
  double sq = 0.0, r = 0.0;
  for (std::size_t j = 0; j < d.size(); ++j) {
    const double a = e[j] / z;
    sq += a * a;
    r += a * d[j];
  }
  return c * r + std::sqrt(sq);
}

}  // namespace

TEST_CASE("retrieval weights: hand cases") {
  const std::vector<double> eq{2.0, 2.0, 2.0, 2.0};
  for (double w : retrieval_weights(eq, 0.7)) CHECK(w == doctest::Approx(0.25).epsilon(1e-15));
  const std::vector<double> d{0.0, std::log(2.0)};
  const auto w = retrieval_weights(d, 1.0);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  const std::vector<double> spread{0.0, 1.0, 5.0, 30.0};
  for (double x : retrieval_weights(spread, 1e9)) CHECK(std::abs(x - 0.25) < 1e-6);
  CHECK_THROWS_AS(retrieval_weights(spread, 0.0), ConfigError);
}

TEST_CASE("property: weights sum to one for tau in [1e-3, 1e3]") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ld(-3.0, 3.0);
  std::exponential_distribution<double> dist(0.01);
  for (int t = 0; t < 2000; ++t) {
    std::vector<double> d(1 + rng() % 300);
    for (auto& x : d) x = dist(rng);
    const double tau = std::pow(10.0, ld(rng));
    const auto w = retrieval_weights(d, tau);
    double s = 0.0;
    for (double x : w) {
      REQUIRE(std::isfinite(x));
      s += x;
    }
    REQUIRE(std::abs(s - 1.0) <= 1e-9);
  }
}

TEST_CASE("kNN distribution: hand cases") {
  const auto n = ranked_from({1.0, 2.0, 3.0}, {4, 4, 7});
  const std::vector<double> u{1.0 / 3, 1.0 / 3, 1.0 / 3};
  const auto p = knn_distribution(n, u, 10);
  CHECK(p.prob(4) == doctest::Approx(2.0 / 3));
  CHECK(p.prob(7) == doctest::Approx(1.0 / 3));
  CHECK(p.support() == std::vector<TokenId>{4, 7});
  CHECK(p.is_sparse());
  const auto same = ranked_from({1.0, 2.0}, {3, 3});
  const std::vector<double> h{0.5, 0.5};
  CHECK(knn_distribution(same, h, 5).prob(3) == 1.0);
  const std::vector<double> one{1.0};
  CHECK(knn_distribution(n, one, 10).prob(4) == 1.0);
}

TEST_CASE("effective statistics: hand cases") {
  const std::vector<double> d{1.0, 3.0, 4.0, 9.0};
  const std::vector<double> uni(4, 0.25);
  CHECK(effective_stats(uni, d).k_eff == doctest::Approx(4.0));
  const std::vector<double> spike{1.0, 0.0, 0.0, 0.0};
  CHECK(effective_stats(spike, d).k_eff == 1.0);
  const std::vector<double> half{0.5, 0.5};
  const auto st = effective_stats(half, d);
  CHECK(st.k_eff == doctest::Approx(2.0));
  CHECK(st.r_eff == doctest::Approx(2.0));
}

TEST_CASE("surrogate: hand cases") {
  const auto one = ranked_from({0.7});
  CHECK(surrogate(1, 3.0, one, 1.0) == doctest::Approx(1.7));
  const auto two = ranked_from({1.0, 3.0});
  CHECK(surrogate(2, 1e12, two, 1.0) == doctest::Approx(2.0 + 1.0 / std::sqrt(2.0)).epsilon(1e-9));
  CHECK_THROWS_AS(surrogate(3, 1.0, two, 1.0), ConfigError);
}

TEST_CASE("surrogate with c = 0 is minimised by the largest k_eff") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  std::vector<double> d(64);
  for (auto& x : d) x = u(rng);
  const auto ranked = ranked_from(d);
  RetrievalParams p;
  p.c = 0.0;
  p.k_candidates = {4, 16, 64};
  p.tau_candidates = {0.1, 1.0, 10.0};
  const auto sel = select_adaptive(ranked, p);
  double best = 0.0;
  for (auto k : p.k_candidates) {
    for (double t : p.tau_candidates) {
      EffectiveStats st;
      surrogate(k, t, ranked, 0.0, &st);
      best = std::max(best, st.k_eff);
    }
  }
  EffectiveStats st;
  surrogate(sel.k, sel.tau, ranked, 0.0, &st);
  CHECK(st.k_eff == best);
}

TEST_CASE("select_adaptive: single candidate and zero distances") {
  const auto r = ranked_from({0.5, 1.0, 2.0, 3.0});
  RetrievalParams p;
  p.k_candidates = {3};
  p.tau_candidates = {2.0};
  const auto s = select_adaptive(r, p);
  CHECK(s.k == 3);
  CHECK(s.tau == 2.0);
  CHECK(s.u == surrogate(3, 2.0, r, p.c));

  const auto zeros = ranked_from(std::vector<double>(64, 0.0));
  p.k_candidates = {4, 16, 64};
  p.tau_candidates = {0.1, 5.0};
  const auto z = select_adaptive(zeros, p);
  CHECK(z.k == 64);
  CHECK(z.tau == 0.1);  // every tau ties; the smaller wins
  CHECK(z.u == doctest::Approx(1.0 / 8.0));
}

TEST_CASE("select_adaptive ties go to the smaller k") {
  // Identical distances past the first neighbour are impossible to prefer by
  // bias; with c = 0 and one neighbour, U = 1 everywhere.
  const auto r = ranked_from({1.0, 1e6, 1e6});
  RetrievalParams p;
  p.c = 0.0;
  p.k_candidates = {1, 2, 3};
  p.tau_candidates = {0.01, 0.02};
  const auto s = select_adaptive(r, p);
  CHECK(s.k == 1);
  CHECK(s.tau == 0.01);
}

TEST_CASE("property: prefix selection equals per-candidate re-retrieval") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> g;
  for (int t = 0; t < 100; ++t) {
    const std::size_t d = 2 + rng() % 16, n = 300 + rng() % 700;
    std::vector<float> keys(n * d);
    for (auto& x : keys) x = g(rng);
    std::vector<TokenId> values(n, 0);
    const auto idx = VectorIndex::build(keys, d, values);
    std::vector<float> q(d);
    for (auto& x : q) x = g(rng);
    RetrievalParams p;
    p.k_candidates = {1, 4, 16, 64, 256};
    p.tau_candidates = {0.1, 0.5, 1.0, 5.0};
    p.c = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    const auto sel = select_adaptive(idx.search(q, 256), p);

    Selection best{0, 0.0, 0.0};
    bool have = false;
    for (auto k : p.k_candidates) {
      const auto nbrs = brute_force_search(keys, d, values, q, k);  // fresh retrieval of exactly k
      for (double tau : p.tau_candidates) {
        const double u = surrogate(k, tau, nbrs, p.c);
        REQUIRE(u == doctest::Approx(surrogate_from_scratch(nbrs.distances, tau, p.c)).epsilon(1e-9));
        if (!have || u < best.u) {
          best = {k, tau, u};
          have = true;
        }
      }
    }
    REQUIRE(sel.k == best.k);
    REQUIRE(sel.tau == best.tau);
    REQUIRE(sel.u == best.u);
  }
}

TEST_CASE("property: k_eff bounds, tau monotonicity and r_eff range") {
  std::mt19937_64 rng(4);
  std::exponential_distribution<double> e(1.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> d(2 + rng() % 100);
    for (auto& x : d) x = e(rng);
    std::sort(d.begin(), d.end());
    double last_keff = 0.0;
    for (double tau : {0.01, 0.1, 0.5, 1.0, 5.0, 50.0}) {
      const auto w = retrieval_weights(d, tau);
      const auto st = effective_stats(w, d);
      REQUIRE(st.k_eff >= 1.0 - 1e-12);
      REQUIRE(st.k_eff <= static_cast<double>(d.size()) + 1e-9);
      REQUIRE(st.k_eff >= last_keff - 1e-9);  // larger tau, flatter weights
      REQUIRE(st.r_eff >= d.front() - 1e-12);
      REQUIRE(st.r_eff <= d.back() + 1e-12);
      last_keff = st.k_eff;
    }
  }
}

TEST_CASE("adaptive lambda") {
  const std::vector<double> u{0.0, 1.0, 2.0};
  const auto l = adaptive_lambda(u);
  CHECK(l[0] == doctest::Approx(sigmoid(-1.0)).epsilon(1e-15));
  CHECK(l[1] == 0.5);
  CHECK(l[2] == doctest::Approx(sigmoid(1.0)).epsilon(1e-15));
  CHECK(l[0] == doctest::Approx(0.2689).epsilon(1e-4));
  const std::vector<double> flat(7, 3.3);
  for (double x : adaptive_lambda(flat)) CHECK(x == 0.5);
  const std::vector<double> even{1.0, 2.0, 4.0, 8.0};
  CHECK(adaptive_lambda(even)[1] == doctest::Approx(sigmoid(-1.0)));  // median 3
  const std::vector<double> extreme{-1e6, 0.0, 1e6};
  for (double x : adaptive_lambda(extreme)) {
    CHECK(x > 0.0);
    CHECK(x < 1.0);
  }
}

TEST_CASE("property: half of the tokens get lambda at most one half") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g;
  for (int t = 0; t < 300; ++t) {
    std::vector<double> u(1 + rng() % 60);
    for (auto& x : u) x = g(rng);
    const auto l = adaptive_lambda(u);
    const auto low = std::count_if(l.begin(), l.end(), [](double x) { return x <= 0.5; });
    const double half = static_cast<double>(u.size()) / 2.0;
    REQUIRE(std::abs(static_cast<double>(low) - half) <= 1.0);
    for (double x : l) REQUIRE((x > 0.0 && x < 1.0));
  }
}

// ---------------------------------------------------------------------------
// End-to-end alignment

namespace {

struct Fixture {
  ToyLm lm = testing::small_toy_lm(20, 3, 11, 16);
  Datastore ds;
  std::vector<TokenSequence> texts = testing::random_corpus(6, 25, 20, 12);
  Fixture() {
    BuildConfig b;
    b.window = 8;
    ds = build_datastore(testing::random_corpus(40, 60, 20, 13), lm, b);
  }
};

}  // namespace

TEST_CASE("lambda = 1 reproduces the raw proxy bit for bit") {
  Fixture f;
  RetrievalParams p;
  p.k_candidates = {16, 64, 256};
  const LambdaConfig one{LambdaMode::fixed, 1.0};
  for (const auto& t : f.texts) {
    const auto steps = f.lm.steps(t);
    const auto aln = align_steps(steps, f.ds, t, p, one);
    const auto raw = proxy_only(steps, t);
    REQUIRE(aln.size() == raw.size());
    for (std::size_t i = 0; i < aln.size(); ++i) {
      REQUIRE(aln.dists[i] == raw.dists[i]);
      REQUIRE(aln.loglik[i] == raw.loglik[i]);
    }
    for (auto kind : {DetectorKind::likelihood, DetectorKind::fast_detect, DetectorKind::binoculars}) {
      DetectorConfig c;
      c.kind = kind;
      const auto ref = reference_dists(steps, t);
      REQUIRE(detect(aln, ref, c).score == detect(raw, ref, c).score);
    }
  }
}

TEST_CASE("lambda = 0 uses the retrieval distribution alone") {
  Fixture f;
  RetrievalParams p;
  p.mode = SelectionMode::fixed;
  p.k = 32;
  p.tau = 1.0;
  const auto t = f.texts[0];
  const auto steps = f.lm.steps(t);
  const auto aln = align_steps(steps, f.ds, t, p, {LambdaMode::fixed, 0.0});
  for (std::size_t i = 0; i < aln.size(); ++i) {
    const auto nbrs = f.ds.index.search(steps[i].embedding, 32);
    const auto knn = knn_distribution(nbrs, retrieval_weights(nbrs, 1.0), 20);
    REQUIRE(aln.dists[i].to_dense() == knn.to_dense());
  }
}

TEST_CASE("self-retrieval gives a point mass on the observed token") {
  const auto lm = testing::small_toy_lm(30, 2, 3, 32);
  std::vector<TokenId> ids(29);
  std::iota(ids.begin(), ids.end(), TokenId{1});
  auto text = seq_of(ids, 0, 1);  // position 0 has no stored window
  BuildConfig b;
  b.window = 4;
  const std::vector<TokenSequence> corpus{seq_of(ids)};
  const auto ds = build_datastore(corpus, lm, b);
  RetrievalParams p;
  p.mode = SelectionMode::fixed;
  p.k = 1;
  const double lambda = 0.3;
  const auto aln = align_sequence(lm, ds, text, p, {LambdaMode::fixed, lambda});
  for (std::size_t i = 0; i < aln.size(); ++i) {
    CHECK(aln.diagnostics[i].r_eff == 0.0);
    CHECK(aln.loglik[i] >= std::log(1.0 - lambda));
  }
}

TEST_CASE("alignment diagnostics and determinism") {
  Fixture f;
  RetrievalParams p;
  p.k_candidates = {16, 64, 256};
  p.keep_weights = true;
  for (const auto& t : f.texts) {
    const auto a = align_sequence(f.lm, f.ds, t, p, {});
    const auto b = align_sequence(f.lm, f.ds, t, p, {});
    REQUIRE(a.size() == t.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& d = a.diagnostics[i];
      REQUIRE(normalize_check(a.dists[i]));
      REQUIRE(std::abs(std::accumulate(d.weights.begin(), d.weights.end(), 0.0) - 1.0) <= 1e-9);
      REQUIRE(d.k_eff >= 1.0);
      REQUIRE(d.k_eff <= static_cast<double>(d.k));
      REQUIRE(d.r_eff >= 0.0);
      REQUIRE(d.lambda > 0.0);
      REQUIRE(d.lambda < 1.0);
      REQUIRE(a.dists[i] == b.dists[i]);
      REQUIRE(a.loglik[i] == b.loglik[i]);
      REQUIRE(d.u == b.diagnostics[i].u);
    }
  }
}

TEST_CASE("prompt tokens are not scored") {
  Fixture f;
  RetrievalParams p;
  p.k_candidates = {16};
  auto t = f.texts[0];
  const auto full = align_sequence(f.lm, f.ds, t, p, {LambdaMode::fixed, 0.5});
  t.prompt_len = 5;
  const auto tail = align_sequence(f.lm, f.ds, t, p, {LambdaMode::fixed, 0.5});
  REQUIRE(tail.size() == full.size() - 5);
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail.loglik[i] == full.loglik[i + 5]);
}

TEST_CASE("alignment errors") {
  Fixture f;
  RetrievalParams p;  // the store holds 2360 entries
  p.k_candidates = {16, 4096};
  CHECK_THROWS_AS(align_sequence(f.lm, f.ds, f.texts[0], p, {}), ConfigError);
  const auto other = testing::small_toy_lm(21, 3, 11, 16);
  RetrievalParams q;
  q.k_candidates = {16};
  CHECK_THROWS_AS(align_sequence(other, f.ds, seq_of({1, 2, 3}), q, {}), DataError);
  CHECK_THROWS_AS(align_sequence(f.lm, f.ds, f.texts[0], q, {LambdaMode::fixed, 1.5}), ConfigError);
  const auto clamped = p.clamped_to(100);
  CHECK(clamped.k_candidates == std::vector<std::size_t>{16});
}
