#pragma once

// Plain-text corpora and JSON-lines inputs for the command-line tool.
//
// A corpus file holds one whitespace-tokenised document per non-empty line.
// Its vocabulary is "<bos>", "<unk>", then the distinct tokens in byte order.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"

namespace knnproxy {

inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kUnkToken = "<unk>";

inline std::vector<std::string> split_whitespace(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) out.push_back(line);
  }
  return out;
}

inline Vocabulary vocabulary_from_lines(std::span<const std::string> lines) {
  std::set<std::string> seen;
  for (const auto& l : lines) {
    for (auto& t : split_whitespace(l)) seen.insert(std::move(t));
  }
  seen.erase(kBosToken);
  seen.erase(kUnkToken);
  std::vector<std::string> toks{kBosToken, kUnkToken};
  toks.insert(toks.end(), seen.begin(), seen.end());
  return Vocabulary(std::move(toks));
}

// Tokens outside the vocabulary map to <unk>.
inline TokenSequence tokenize(const Vocabulary& vocab, std::string_view text) {
  TokenSequence seq;
  seq.bos_id = vocab.id_of(kBosToken);
  const TokenId unk = vocab.id_of(kUnkToken);
  for (const auto& t : split_whitespace(text)) seq.ids.push_back(vocab.contains(t) ? vocab.id_of(t) : unk);
  return seq;
}

struct TextCorpus {
  Vocabulary vocab;
  std::vector<TokenSequence> docs;
};

inline TextCorpus load_text_corpus(const std::filesystem::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty()) throw DataError("corpus '" + path.string() + "' has no documents");
  TextCorpus c{vocabulary_from_lines(lines), {}};
  for (const auto& l : lines) c.docs.push_back(tokenize(c.vocab, l));
  return c;
}

// One JSON object per line: "id" (string or number, default the line
// number), then "text" or "token_ids", optional "prompt_len", "label" and
// "embedding".
struct InputRecord {
  std::string id;
  std::optional<std::string> text;
  std::optional<std::vector<TokenId>> token_ids;
  std::size_t prompt_len = 0;
  std::optional<std::string> label;
  std::optional<std::vector<float>> embedding;
};

inline std::vector<InputRecord> read_jsonl_inputs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read '" + path.string() + "'");
  std::vector<InputRecord> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_object()) throw DataError(where + ": expected a JSON object");
      InputRecord r;
      if (!j.contains("id")) r.id = std::to_string(lineno);
      else if (j["id"].is_string()) r.id = j["id"].get<std::string>();
      else r.id = j["id"].dump();
      if (j.contains("text")) r.text = j["text"].get<std::string>();
      if (j.contains("token_ids")) r.token_ids = j["token_ids"].get<std::vector<TokenId>>();
      if (!r.text && !r.token_ids) throw DataError(where + ": record needs \"text\" or \"token_ids\"");
      if (j.contains("prompt_len")) r.prompt_len = j["prompt_len"].get<std::size_t>();
      if (j.contains("label")) r.label = j["label"].is_string() ? j["label"].get<std::string>() : j["label"].dump();
      if (j.contains("embedding")) r.embedding = j["embedding"].get<std::vector<float>>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

}  // namespace knnproxy
