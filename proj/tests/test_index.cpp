#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "knnproxy/index.hpp"
#include "test_support.hpp"

using namespace knnproxy;

namespace {

std::vector<float> random_keys(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> k(n * d);
  for (auto& x : k) x = g(rng);
  return k;
}

std::vector<TokenId> iota_values(std::size_t n) {
  std::vector<TokenId> v(n);
  std::iota(v.begin(), v.end(), TokenId{0});
  return v;
}

// Independent double-precision scan with a full stable sort.
std::vector<std::pair<double, std::size_t>> scan(const std::vector<float>& keys, std::size_t d,
                                                 const std::vector<float>& q) {
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t r = 0; r < keys.size() / d; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double t = static_cast<double>(keys[r * d + j]) - q[j];
      s += t * t;
    }
    all.emplace_back(std::sqrt(s), r);
  }
  std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.first < b.first; });
  return all;
}

}  // namespace

TEST_CASE("one-dimensional hand example") {
  const auto idx = VectorIndex::build({0.0f, 1.0f, 5.0f}, 1, {10, 11, 15});
  CHECK(idx.size() == 3);
  CHECK(idx.dim() == 1);
  const std::vector<float> q{0.4f};
  const auto n = idx.search(q, 2);
  CHECK(n.indices == std::vector<std::size_t>{0, 1});
  CHECK(n.distances[0] == doctest::Approx(0.4).epsilon(1e-6));
  CHECK(n.distances[1] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(n.next_tokens == std::vector<TokenId>{10, 11});
}

TEST_CASE("query equal to a stored key returns it at distance zero") {
  std::mt19937_64 rng(1);
  auto keys = random_keys(50, 8, rng);
  const auto idx = VectorIndex::build(keys, 8, iota_values(50));
  const std::vector<float> q(keys.begin() + 8 * 17, keys.begin() + 8 * 18);
  const auto n = idx.search(q, 1);
  CHECK(n.indices[0] == 17);
  CHECK(n.distances[0] == 0.0);
}

TEST_CASE("ties resolve to ascending row id") {
  const auto idx = VectorIndex::build(std::vector<float>(5 * 3, 2.0f), 3, {4, 3, 2, 1, 0});
  const std::vector<float> q{0.0f, 0.0f, 0.0f};
  CHECK(idx.search(q, 3).indices == std::vector<std::size_t>{0, 1, 2});
  const auto dup = VectorIndex::build({1.0f, 1.0f, 7.0f}, 1, {0, 1, 2});
  const std::vector<float> q1{1.0f};
  const auto n = dup.search(q1, 2);
  CHECK(n.indices == std::vector<std::size_t>{0, 1});
  CHECK(n.distances[0] == n.distances[1]);
}

TEST_CASE("k = N returns every row sorted; N = 1 returns the single row") {
  std::mt19937_64 rng(2);
  auto keys = random_keys(30, 4, rng);
  const auto idx = VectorIndex::build(keys, 4, iota_values(30));
  const std::vector<float> q{0.1f, 0.2f, 0.3f, 0.4f};
  const auto all = idx.search(q, 30);
  CHECK(std::is_sorted(all.distances.begin(), all.distances.end()));
  CHECK(std::set<std::size_t>(all.indices.begin(), all.indices.end()).size() == 30);
  const auto one = VectorIndex::build({3.0f, 4.0f}, 2, {9});
  const std::vector<float> q2{-100.0f, 7.0f};
  CHECK(one.search(q2, 1).indices == std::vector<std::size_t>{0});
}

TEST_CASE("build and search errors") {
  CHECK_THROWS_AS(VectorIndex::build({}, 2, {}), DataError);
  CHECK_THROWS_AS(VectorIndex::build({1.0f, NAN}, 2, {0}), DataError);
  CHECK_THROWS_AS(VectorIndex::build({1.0f, 2.0f, 3.0f}, 2, {0}), DimensionError);
  CHECK_THROWS_AS(VectorIndex::build({1.0f, 2.0f}, 2, {0, 1}), DimensionError);
  const auto idx = VectorIndex::build({0.0f, 1.0f, 2.0f, 3.0f}, 2, {0, 1});
  const std::vector<float> q{0.0f, 0.0f};
  CHECK_THROWS_AS(idx.search(q, 3), RequestError);
  CHECK_THROWS_AS(idx.search(q, 0), RequestError);
  const std::vector<float> bad{0.0f};
  CHECK_THROWS_AS(idx.search(bad, 1), DimensionError);
  const std::vector<float> inf{INFINITY, 0.0f};
  CHECK_THROWS_AS(idx.search(inf, 1), RequestError);
}

TEST_CASE("property: exact search equals the brute-force oracle") {
  std::mt19937_64 rng(3);
  const std::size_t dims[] = {2, 8, 64};
  for (int t = 0; t < 60; ++t) {
    const std::size_t d = dims[t % 3];
    const std::size_t n = 1 + rng() % 3000;
    const std::size_t k = 1 + rng() % std::min<std::size_t>(n, 300);
    auto keys = random_keys(n, d, rng);
    if (t % 5 == 0) {
      for (auto& x : keys) x = std::round(x);  // many exact distance ties
    }
    const auto values = iota_values(n);
    const auto idx = VectorIndex::build(keys, d, values);
    std::vector<float> q = random_keys(1, d, rng);
    if (t % 5 == 0) {
      for (auto& x : q) x = std::round(x);
    }
    const auto got = idx.search(q, k);
    const auto ref = brute_force_search(keys, d, values, q, k);
    REQUIRE(got.indices == ref.indices);
    REQUIRE(got.distances == ref.distances);

    const auto indep = scan(keys, d, q);
    for (std::size_t j = 0; j < k; ++j) {
      REQUIRE(got.distances[j] == doctest::Approx(indep[j].first).epsilon(1e-5));
    }
  }
}

TEST_CASE("property: row permutation preserves the distance multiset") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const std::size_t n = 200, d = 4, k = 25;
    auto keys = random_keys(n, d, rng);
    for (auto& x : keys) x = std::round(x * 2.0f) / 2.0f;
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<float> pk(n * d);
    for (std::size_t r = 0; r < n; ++r) std::copy_n(keys.begin() + perm[r] * d, d, pk.begin() + r * d);
    const auto a = VectorIndex::build(keys, d, iota_values(n));
    const auto b = VectorIndex::build(pk, d, iota_values(n));
    const auto q = random_keys(1, d, rng);
    REQUIRE(a.search(q, k).distances == b.search(q, k).distances);
  }
}

TEST_CASE("approximate mode recall on 10k x 64 random keys") {
  std::mt19937_64 rng(5);
  const std::size_t n = 10000, d = 64, k = 10;
  auto keys = random_keys(n, d, rng);
  const auto values = iota_values(n);
  const auto approx = VectorIndex::build(keys, d, values, IndexMode::approximate);
  CHECK(approx.list_count() == 100);
  std::size_t hit = 0, total = 0;
  for (int t = 0; t < 100; ++t) {
    const auto q = random_keys(1, d, rng);
    const auto got = approx.search(q, k);
    const auto ref = brute_force_search(keys, d, values, q, k);
    std::set<std::size_t> truth(ref.indices.begin(), ref.indices.end());
    for (auto i : got.indices) hit += truth.count(i);
    total += k;
    REQUIRE(std::is_sorted(got.distances.begin(), got.distances.end()));
  }
  CHECK(static_cast<double>(hit) / static_cast<double>(total) >= 0.95);
}

TEST_CASE("index round trip preserves keys, values and search results") {
  testing::TempDir dir("index");
  std::mt19937_64 rng(6);
  auto keys = random_keys(100, 8, rng);
  std::vector<TokenId> values(100);
  for (auto& v : values) v = static_cast<TokenId>(rng() % 50);
  const auto idx = VectorIndex::build(keys, 8, values);
  save_index(idx, dir / "a.knpx");
  const auto back = load_index(dir / "a.knpx");
  CHECK(std::equal(back.keys().begin(), back.keys().end(), idx.keys().begin(), idx.keys().end()));
  CHECK(std::equal(back.values().begin(), back.values().end(), idx.values().begin(), idx.values().end()));
  for (int t = 0; t < 50; ++t) {
    const auto q = random_keys(1, 8, rng);
    const auto a = idx.search(q, 7);
    const auto b = back.search(q, 7);
    REQUIRE(a.indices == b.indices);
    REQUIRE(a.distances == b.distances);
  }
}

TEST_CASE("corrupt index files raise format errors") {
  testing::TempDir dir("index-bad");
  const auto idx = VectorIndex::build({0.0f, 1.0f, 2.0f, 3.0f}, 2, {0, 1});
  save_index(idx, dir / "ok.knpx");
  std::string bytes;
  {
    std::ifstream in(dir / "ok.knpx", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  auto write = [&](const std::string& name, const std::string& content) {
    std::ofstream out(dir / name, std::ios::binary);
    out << content;
    return dir / name;
  };
  std::string magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_index(write("magic.knpx", magic)), FormatError);
  CHECK_THROWS_AS(load_index(write("empty.knpx", "")), FormatError);
  CHECK_THROWS_AS(load_index(write("trunc.knpx", bytes.substr(0, bytes.size() - 6))), FormatError);
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  CHECK_THROWS_AS(load_index(write("crc.knpx", flipped)), FormatError);
  CHECK_THROWS_AS(load_index(dir / "missing.knpx"), DataError);
}
