#include <doctest.h>

#include <cmath>
#include <random>

#include "knnproxy/eval.hpp"
#include "test_support.hpp"

using namespace knnproxy;

namespace {

// O(n^2) pair count, ties worth one half.
double pairwise_auroc(const LabeledScores& s) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s.labels[i] == 0) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s.labels[j] != 0) continue;
      pairs += 1.0;
      wins += s.scores[i] > s.scores[j] ? 1.0 : s.scores[i] == s.scores[j] ? 0.5 : 0.0;
    }
  }
  return wins / pairs;
}

LabeledScores random_scores(std::mt19937_64& rng, std::size_t n, bool ties) {
  std::normal_distribution<double> g;
  LabeledScores s;
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = i < 2 ? i == 0 : rng() % 2 == 0;
    double x = g(rng) + (pos ? 0.7 : 0.0);
    if (ties) x = std::round(x * 2.0) / 2.0;
    s.add(x, pos);
  }
  return s;
}

SynthBenchConfig small_synth() {
  SynthBenchConfig c;
  c.source.training_tokens = c.human.training_tokens = c.proxy.training_tokens = 20000;
  c.texts_per_class = 30;
  c.text_length = 24;
  c.datastore_tokens = 2000;
  return c;
}

DetectionBenchConfig small_bench() {
  DetectionBenchConfig c;
  c.synth = small_synth();
  c.build.window = 8;
  c.retrieval.k_candidates = {16, 64, 256};
  return c;
}

}  // namespace

TEST_CASE("AUROC hand example and errors") {
  const std::vector<double> scores{3.0, 1.0, 2.0, 0.0};
  const std::vector<int> labels{1, 1, 0, 0};
  CHECK(auroc(scores, labels) == 0.75);
  const std::vector<int> one{1, 1, 1, 1};
  CHECK_THROWS_AS(auroc(scores, one), DataError);
  const std::vector<int> short_labels{1, 0};
  CHECK_THROWS_AS(auroc(scores, short_labels), DimensionError);
  const std::vector<double> flat{1.0, 1.0, 1.0, 1.0};
  CHECK(auroc(flat, labels) == 0.5);
}

TEST_CASE("property: AUROC equals the pairwise count and ignores monotone transforms") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 200; ++t) {
    const auto s = random_scores(rng, 2 + rng() % 199, t % 3 == 0);
    const double a = auroc(s);
    REQUIRE(a == doctest::Approx(pairwise_auroc(s)).epsilon(1e-12));
    LabeledScores m = s;
    for (double& x : m.scores) x = std::exp(0.5 * x) * 3.0 + 1.0;
    REQUIRE(auroc(m) == doctest::Approx(a).epsilon(1e-12));
  }
}

TEST_CASE("ROC curve runs from (0,0) to (1,1) monotonically") {
  std::mt19937_64 rng(2);
  const auto s = random_scores(rng, 80, true);
  const auto roc = roc_curve(s);
  CHECK(roc.front().fpr == 0.0);
  CHECK(roc.front().tpr == 0.0);
  CHECK(roc.back().fpr == 1.0);
  CHECK(roc.back().tpr == 1.0);
  for (std::size_t i = 1; i < roc.size(); ++i) {
    CHECK(roc[i].fpr >= roc[i - 1].fpr);
    CHECK(roc[i].tpr >= roc[i - 1].tpr);
    CHECK(roc[i].threshold < roc[i - 1].threshold);
  }
}

TEST_CASE("property: F1 sweep attains the exhaustive optimum") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const auto s = random_scores(rng, 2 + rng() % 60, t % 2 == 0);
    double best = 0.0;
    for (double thr : s.scores) best = std::max(best, f1_at(s, thr));  // every distinct partition
    const auto r = f1_sweep(s);
    REQUIRE(r.f1 == doctest::Approx(best).epsilon(1e-15));
    REQUIRE(f1_at(s, r.threshold) == r.f1);
  }
  LabeledScores perfect;
  perfect.add(2.0, true);
  perfect.add(1.0, false);
  CHECK(f1_sweep(perfect).f1 == 1.0);
  CHECK(f1_sweep(perfect).threshold == 1.5);
}

TEST_CASE("confusion rows are distributions") {
  const std::vector<std::size_t> truth{0, 0, 1, 1, 1, 2};
  const std::vector<std::size_t> pred{0, 1, 1, 1, 2, 2};
  const auto m = confusion(truth, pred, 4);
  CHECK(m[0] == std::vector<double>{0.5, 0.5, 0.0, 0.0});
  CHECK(m[1][1] == doctest::Approx(2.0 / 3.0));
  CHECK(m[2][2] == 1.0);
  CHECK(m[3] == std::vector<double>(4, 0.0));
  const std::vector<std::size_t> bad{5, 0, 0, 0, 0, 0};
  CHECK_THROWS_AS(confusion(bad, pred, 4), DataError);
}

TEST_CASE("attribution: equal scores go to the smaller name") {
  const auto lm = testing::small_toy_lm(12, 2, 1);
  BuildConfig b;
  b.window = 4;
  const auto ds = build_datastore(testing::random_corpus(20, 30, 12, 2), lm, b);
  const std::vector<AttributionExpert> experts{{"zeta", &lm, &ds}, {"alpha", &lm, &ds}, {"mid", &lm, &ds}};
  RetrievalParams p;
  p.k_candidates = {16, 64};
  const auto text = testing::random_corpus(1, 20, 12, 3)[0];
  const auto r = attribute(text, experts, p, {});
  CHECK(r.index == 1);
  CHECK(r.name == "alpha");
  CHECK(r.scores[0] == r.scores[1]);
  CHECK_THROWS_AS(attribute(text, std::span(experts).first(1), p, {}), ConfigError);
  const std::vector<AttributionExpert> broken{{"a", &lm, &ds}, {"b", &lm, nullptr}};
  CHECK_THROWS_AS(attribute(text, broken, p, {}), ConfigError);
}

TEST_CASE("attribution prefers the datastore of the generating source") {
  AttributionBenchConfig c;
  c.synth = small_synth();
  c.sources = 2;
  c.style_strength = 1.5;
  c.texts_per_source = 20;
  c.datastore_tokens = 3000;
  c.build.window = 8;
  c.retrieval.k_candidates = {16, 64};
  const auto r = run_attribution_bench(c);
  CHECK(r.names == std::vector<std::string>{"source-0", "source-1"});
  CHECK(r.accuracy > 0.6);
  for (const auto& row : r.confusion) CHECK(row[0] + row[1] == doctest::Approx(1.0));
}

TEST_CASE("synthetic benchmark is seed-deterministic") {
  const auto c = small_synth();
  const auto a = synth_benchmark(c);
  const auto b = synth_benchmark(c);
  REQUIRE(a.llm_texts.size() == 30);
  for (std::size_t i = 0; i < a.llm_texts.size(); ++i) {
    CHECK(a.llm_texts[i].ids == b.llm_texts[i].ids);
    CHECK(a.human_texts[i].ids == b.human_texts[i].ids);
  }
  CHECK(a.proxy.fingerprint() == b.proxy.fingerprint());
  auto d = c;
  d.seed = 2;
  CHECK(synth_benchmark(d).llm_texts[0].ids != a.llm_texts[0].ids);
}

TEST_CASE("identical source and proxy specs are refused unless requested") {
  auto c = small_synth();
  c.proxy = c.source;
  CHECK_THROWS_AS(synth_benchmark(c), ConfigError);
  c.allow_identical_source_proxy = true;
  const auto b = synth_benchmark(c);
  const auto s1 = b.source.steps(b.llm_texts[0]);
  const auto s2 = b.proxy.steps(b.llm_texts[0]);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i].dist == s2[i].dist);
}

TEST_CASE("detection bench: shape, range and determinism") {
  const auto c = small_bench();
  const auto a = run_detection_bench(c);
  const auto b = run_detection_bench(c);
  REQUIRE(a.detectors.size() == 3);
  CHECK(a.datastore_entries == 10 * 199);  // ten 200-token documents
  for (std::size_t d = 0; d < 3; ++d) {
    CHECK(a.detectors[d].auroc_aligned >= 0.0);
    CHECK(a.detectors[d].auroc_aligned <= 1.0);
    CHECK(a.detectors[d].auroc_aligned == b.detectors[d].auroc_aligned);
    CHECK(a.detectors[d].auroc_unaligned == b.detectors[d].auroc_unaligned);
    CHECK(a.detectors[d].f1_aligned.f1 == b.detectors[d].f1_aligned.f1);
  }
  CHECK(a.at(DetectorKind::binoculars).kind == DetectorKind::binoculars);
}

TEST_CASE("a lambda sweep at one matches the unaligned scores") {
  auto c = small_bench();
  const std::vector<double> values{1.0};
  const auto rows = run_sweep(c, SweepAxis::lambda, values);
  REQUIRE(rows.size() == 1);
  for (const auto& d : rows[0].report.detectors) CHECK(d.auroc_aligned == d.auroc_unaligned);
  CHECK_THROWS_AS(run_sweep(c, SweepAxis::lambda, {}), ConfigError);
  const std::vector<double> bad{0.0};
  CHECK_THROWS_AS(run_sweep(c, SweepAxis::k, bad), ConfigError);
}

TEST_CASE("corpus-size sweep caps the datastore") {
  auto c = small_bench();
  c.synth.texts_per_class = 10;
  const std::vector<double> sizes{300, 1000};
  const auto rows = run_sweep(c, SweepAxis::corpus_size, sizes);
  CHECK(rows[0].report.datastore_entries == 300);
  CHECK(rows[1].report.datastore_entries == 1000);
}

TEST_CASE("sweep axis names") {
  CHECK(parse_sweep_axis("tau") == SweepAxis::tau);
  CHECK(parse_sweep_axis("corpus-size") == SweepAxis::corpus_size);
  CHECK(parse_sweep_axis("corpus_size") == SweepAxis::corpus_size);
  CHECK(to_string(SweepAxis::gamma) == "gamma");
  CHECK_THROWS_AS(parse_sweep_axis("window"), ConfigError);
}

TEST_CASE("reserved rare token") {
  const auto lm = testing::small_toy_lm(10, 2, 1);
  const RareTokenProvider rare(lm, -40.0, 1);
  CHECK(rare.vocab_size() == 11);
  CHECK(rare.rare_id() == 10);
  auto text = testing::seq_of({2, 10, 3});
  const auto steps = rare.steps(text);
  const auto base = lm.steps(testing::seq_of({2, 1, 3}));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    CHECK(normalize_check(steps[i].dist));
    CHECK(steps[i].dist.prob(10) == doctest::Approx(std::exp(-40.0)).epsilon(1e-12));
    CHECK(steps[i].embedding == base[i].embedding);
  }
  CHECK_THROWS_AS(RareTokenProvider(lm, 0.0, 1), ConfigError);
  CHECK_THROWS_AS(RareTokenProvider(lm, -1.0, 10), ConfigError);
}

TEST_CASE("outlier injection") {
  const auto texts = testing::random_corpus(5, 20, 10, 1);
  const auto none = inject_outliers(texts, 0.0, 10, 1);
  for (std::size_t i = 0; i < texts.size(); ++i) CHECK(none[i].ids == texts[i].ids);
  std::vector<TokenSequence> prompted(texts);
  for (auto& t : prompted) t.prompt_len = 4;
  const auto all = inject_outliers(prompted, 1.0, 10, 1);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    for (std::size_t j = 0; j < 20; ++j) CHECK(all[i].ids[j] == (j < 4 ? texts[i].ids[j] : 10));
  }
  CHECK(inject_outliers(texts, 0.3, 10, 7)[2].ids == inject_outliers(texts, 0.3, 10, 7)[2].ids);
  CHECK_THROWS_AS(inject_outliers(texts, 1.5, 10, 1), ConfigError);
}

TEST_CASE("routing bench on a small corpus") {
  DomainBenchConfig c;
  c.domains = 3;
  c.store_texts_per_domain = 40;
  c.routed_texts_per_domain = 30;
  c.embed_dim = 64;
  const auto r = run_routing_bench(c);
  CHECK(r.routed == 90);
  CHECK(r.accuracy > 1.0 / 3.0);
  for (const auto& row : r.confusion) {
    double s = 0.0;
    for (double x : row) s += x;
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("bound terms: hand values") {
  CHECK(bound_variance_term(4, 0.1, 2.0) == doctest::Approx(4.0 * std::sqrt(std::log(80.0) / 4.0)).epsilon(1e-14));
  CHECK(bound_value(2.0, 0.5, 4, 0.1, 2.0) == doctest::Approx(1.0 + bound_variance_term(4, 0.1, 2.0)));
  CHECK(bound_variance_term(4, 0.1, 400.0) < bound_variance_term(4, 0.1, 100.0));
}

TEST_CASE("property: the certified constant bounds observed L1 differences") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> g;
  for (int t = 0; t < 20; ++t) {
    const SoftmaxSource src(5, 3, 1.5, rng);
    const double l = src.lipschitz();
    for (int r = 0; r < 200; ++r) {
      std::vector<float> a(3), b(3);
      for (auto& x : a) x = g(rng);
      for (std::size_t j = 0; j < 3; ++j) b[j] = a[j] + 0.3f * g(rng);
      const auto pa = src.probs(a);
      const auto pb = src.probs(b);
      double l1 = 0.0, dh = 0.0;
      for (std::size_t v = 0; v < 5; ++v) l1 += std::abs(pa[v] - pb[v]);
      for (std::size_t j = 0; j < 3; ++j) dh += (a[j] - b[j]) * (a[j] - b[j]);
      REQUIRE(l1 <= l * std::sqrt(dh) + 1e-6);
    }
  }
}

TEST_CASE("bound experiment: violations shrink with the constant, error shrinks with N") {
  BoundExperimentConfig c;
  c.datastore_size = 4000;
  c.k = 100;
  c.queries = 200;
  const auto s = sample_bound_errors(c);
  std::size_t last = s.samples.size() + 1;
  for (double scale : {0.01, 0.1, 1.0, 10.0}) {
    const auto r = evaluate_bound(s, c.vocab_size, c.delta, scale);
    CHECK(r.violations <= last);
    last = r.violations;
  }
  CHECK(evaluate_bound(s, c.vocab_size, c.delta).violation_rate <= c.delta);
  for (const auto& x : s.samples) {
    CHECK(x.k_eff >= 1.0);
    CHECK(x.k_eff <= 100.0 + 1e-9);
  }
  auto big = c;
  big.datastore_size = 40000;
  const auto rs = evaluate_bound(s, c.vocab_size, c.delta);
  const auto rb = validate_bound(big);
  CHECK(rb.mean_r_eff < rs.mean_r_eff);
  CHECK(rb.mean_l1 < rs.mean_l1);

  auto bad = c;
  bad.k = c.datastore_size + 1;
  CHECK_THROWS_AS(validate_bound(bad), ConfigError);
  bad = c;
  bad.delta = 1.0;
  CHECK_THROWS_AS(validate_bound(bad), ConfigError);
}
