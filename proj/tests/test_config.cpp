#include <doctest.h>

#include <fstream>
#include <string>

#include "knnproxy/config.hpp"
#include "knnproxy/text_io.hpp"
#include "test_support.hpp"

using namespace knnproxy;
using nlohmann::json;

namespace {

void write_file(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

}  // namespace

TEST_CASE("defaults") {
  const RunConfig c;
  CHECK(c.retrieval.k == 256);
  CHECK(c.retrieval.tau == 5.0);
  CHECK(c.retrieval.k_candidates == std::vector<std::size_t>{16, 32, 64, 128, 256, 512, 1024});
  CHECK(c.retrieval.tau_candidates == std::vector<double>{0.1, 0.5, 1.0, 5.0, 10.0, 50.0});
  CHECK(c.retrieval.mode == SelectionMode::adaptive);
  CHECK(c.lambda.mode == LambdaMode::adaptive);
  CHECK(c.lambda.value == 0.1);
  CHECK(c.detector.gamma == -7.5);
  CHECK(c.detector.epsilon == 1e-10);
  CHECK(c.datastore.window == 32);
  CHECK(c.router.k_r == 15);
  CHECK(c.seed == 1);
}

TEST_CASE("resolved config round-trips through JSON") {
  const auto j = json::parse(R"({
    "provider": {"kind": "file", "features": "f.knpf", "bos_id": 2},
    "reference": {"kind": "toy", "corpus": "c.txt", "order": 2},
    "datastore": {"path": "d.knpx", "window": 8, "max_entries": 500, "mode": "approximate", "n_probe": 9},
    "retrieval": {"mode": "fixed", "k": 64, "tau": 0.5, "c": 2.5},
    "lambda": {"mode": "fixed", "value": 0.3},
    "detector": {"kind": "fast", "gamma": null, "threshold": 0.25, "polarity": "lower_is_llm"},
    "router": {"k_r": 7},
    "bench": {"texts_per_class": 12},
    "bound": {"delta": 0.05, "replications": 3},
    "sweep": {"axis": "gamma", "values": [-3, -7.5]},
    "seed": 99, "threads": 2, "log_level": "debug"})");
  const auto c = config_from_json(j);
  CHECK(c.provider.kind == "file");
  CHECK(c.provider.bos_id == 2);
  REQUIRE(c.reference.has_value());
  CHECK(c.reference->order == 2);
  CHECK(c.datastore.max_entries == 500);
  CHECK(c.retrieval.mode == SelectionMode::fixed);
  CHECK(c.detector.kind == DetectorKind::fast_detect);
  CHECK_FALSE(c.detector.gamma.has_value());
  CHECK(c.detector.polarity == Polarity::lower_is_llm);
  CHECK(c.bound_replications == 3);
  CHECK(c.sweep.values == std::vector<double>{-3.0, -7.5});

  const auto out = config_to_json(c);
  CHECK(config_to_json(config_from_json(out)) == out);
  CHECK(config_to_json(RunConfig{}) == config_to_json(config_from_json(json::object())));
}

TEST_CASE("unknown keys and bad values are configuration errors") {
  const char* bad[] = {
      R"({"seeed": 1})",
      R"({"retrieval": {"kk": 3}})",
      R"({"provider": {"kind": "toy", "colour": 1}})",
      R"({"reference": {"kind": "gpt"}})",
      R"({"retrieval": {"mode": "greedy"}})",
      R"({"lambda": {"mode": "sometimes"}})",
      R"({"detector": {"kind": "gltr"}})",
      R"({"detector": {"polarity": "up"}})",
      R"({"datastore": {"mode": "hnsw"}})",
      R"({"sweep": {"axis": "window"}})",
      R"({"log_level": "trace"})",
      R"({"seed": "one"})",
      R"({"retrieval": 5})",
  };
  for (const char* s : bad) {
    INFO(s);
    CHECK_THROWS_AS(config_from_json(json::parse(s)), ConfigError);
  }
}

TEST_CASE("load_config") {
  testing::TempDir dir("config");
  write_file(dir / "ok.json", R"({"seed": 5})");
  CHECK(load_config(dir / "ok.json").seed == 5);
  write_file(dir / "broken.json", "{seed: ");
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
  CHECK_THROWS_AS(load_config(dir / "absent.json"), ConfigError);
}

TEST_CASE("the help reference names every config key") {
  const std::string ref = config_reference();
  const auto j = config_to_json(RunConfig{});
  for (const auto& [section, body] : j.items()) {
    INFO(section);
    CHECK(ref.find(section) != std::string::npos);
    if (!body.is_object() || section == "reference") continue;
    for (const auto& [key, v] : body.items()) {
      (void)v;
      INFO(key);
      CHECK(ref.find(section + "." + key) != std::string::npos);
    }
  }
}

TEST_CASE("whitespace tokenisation and vocabulary") {
  CHECK(split_whitespace("  a\tb\n c  ") == std::vector<std::string>{"a", "b", "c"});
  CHECK(split_whitespace("   ").empty());
  const std::vector<std::string> lines{"the cat", "a cat <bos>"};
  const auto v = vocabulary_from_lines(lines);
  CHECK(v.size() == 5);
  CHECK(v.token(0) == "<bos>");
  CHECK(v.token(1) == "<unk>");
  CHECK(v.token(2) == "a");
  CHECK(v.token(4) == "the");
  const auto s = tokenize(v, "the dog a");
  CHECK(s.ids == std::vector<TokenId>{4, 1, 2});
  CHECK(s.bos_id == 0);
}

TEST_CASE("text corpus and JSON-lines inputs") {
  testing::TempDir dir("textio");
  write_file(dir / "corpus.txt", "x y z\n\n  \ny x\n");
  const auto c = load_text_corpus(dir / "corpus.txt");
  CHECK(c.docs.size() == 2);
  CHECK(c.docs[1].ids == std::vector<TokenId>{3, 2});
  write_file(dir / "empty.txt", "\n \n");
  CHECK_THROWS_AS(load_text_corpus(dir / "empty.txt"), DataError);
  CHECK_THROWS_AS(read_lines(dir / "missing.txt"), DataError);

  write_file(dir / "in.jsonl",
             "{\"id\": \"a\", \"text\": \"x y\", \"label\": \"llm\"}\n"
             "\n"
             "{\"id\": 7, \"token_ids\": [1, 2, 3], \"prompt_len\": 1, \"embedding\": [0.5, 1]}\n"
             "{\"text\": \"z\", \"label\": 3}\n");
  const auto r = read_jsonl_inputs(dir / "in.jsonl");
  REQUIRE(r.size() == 3);
  CHECK(r[0].id == "a");
  CHECK(r[0].text == "x y");
  CHECK(r[0].label == "llm");
  CHECK(r[1].id == "7");
  CHECK(r[1].token_ids == std::vector<TokenId>{1, 2, 3});
  CHECK(r[1].prompt_len == 1);
  CHECK(r[1].embedding == std::vector<float>{0.5f, 1.0f});
  CHECK(r[2].id == "4");  // line number
  CHECK(r[2].label == "3");

  write_file(dir / "no_text.jsonl", "{\"id\": 1}\n");
  CHECK_THROWS_AS(read_jsonl_inputs(dir / "no_text.jsonl"), DataError);
  write_file(dir / "bad.jsonl", "{\"text\": \n");
  CHECK_THROWS_AS(read_jsonl_inputs(dir / "bad.jsonl"), DataError);
  write_file(dir / "array.jsonl", "[1, 2]\n");
  CHECK_THROWS_AS(read_jsonl_inputs(dir / "array.jsonl"), DataError);
  write_file(dir / "types.jsonl", "{\"token_ids\": [\"a\"]}\n");
  CHECK_THROWS_AS(read_jsonl_inputs(dir / "types.jsonl"), DataError);
}
