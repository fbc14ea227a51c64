#pragma once

// "KNPF1" feature files: per-position context embeddings and dense
// next-token log-probabilities precomputed by an external model.
//
// Layout (little-endian): magic "KNPF1", u32 V, u32 d, u64 seq_count; per
// sequence u32 T, u32 prompt_len, T u32 token ids, T*d f32 embeddings, T*V
// f32 log-probs; trailing u32 CRC32 of everything after the magic.

#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "knnproxy/binary_io.hpp"
#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

inline constexpr std::string_view kFeatureMagic = "KNPF1";

class FeatureFileWriter {
 public:
  FeatureFileWriter(const std::filesystem::path& path, std::size_t vocab_size, std::size_t dim,
                    std::uint64_t seq_count)
      : w_(path), vocab_size_(vocab_size), dim_(dim), expected_(seq_count) {
    w_.magic(kFeatureMagic);
    w_.begin_payload();
    w_.put<std::uint32_t>(static_cast<std::uint32_t>(vocab_size));
    w_.put<std::uint32_t>(static_cast<std::uint32_t>(dim));
    w_.put<std::uint64_t>(seq_count);
  }

  void add(const TokenSequence& seq, std::span<const LmStep> steps) {
    if (steps.size() != seq.size()) throw DimensionError("one step per token position required");
    w_.put<std::uint32_t>(static_cast<std::uint32_t>(seq.size()));
    w_.put<std::uint32_t>(static_cast<std::uint32_t>(seq.prompt_len));
    w_.put_array(std::span<const TokenId>(seq.ids));
    for (const auto& s : steps) {
      if (s.embedding.size() != dim_) throw DimensionError("embedding width differs from header");
      w_.put_array(std::span<const float>(s.embedding));
    }
    std::vector<float> lp(vocab_size_);
    for (const auto& s : steps) {
      if (s.dist.vocab_size() != vocab_size_) throw DimensionError("distribution size differs from header");
      const auto p = s.dist.to_dense();
      for (std::size_t v = 0; v < vocab_size_; ++v) lp[v] = static_cast<float>(std::log(p[v]));
      w_.put_array(std::span<const float>(lp));
    }
    ++written_;
  }

  void finish() {
    if (written_ != expected_) throw DataError("feature file sequence count differs from header");
    w_.finish();
  }

 private:
  io::Writer w_;
  std::size_t vocab_size_;
  std::size_t dim_;
  std::uint64_t expected_;
  std::uint64_t written_ = 0;
};

// Runs the provider over every sequence and stores its steps.
inline void write_feature_file(const std::filesystem::path& path, const LmProvider& provider,
                               std::span<const TokenSequence> sequences) {
  FeatureFileWriter w(path, provider.vocab_size(), provider.embed_dim(), sequences.size());
  for (const auto& seq : sequences) w.add(seq, provider.steps(seq));
  w.finish();
}

// Memory-mapped reader. Sequences are looked up by their token ids.
class FeatureFile final : public LmProvider {
 public:
  explicit FeatureFile(const std::filesystem::path& path, TokenId bos_id = 0)
      : path_(path), file_(path), bos_id_(bos_id) {
    io::Reader r(file_.bytes());
    r.expect_magic(kFeatureMagic);
    r.verify_crc(r.position());
    vocab_size_ = r.get<std::uint32_t>();
    dim_ = r.get<std::uint32_t>();
    const auto count = r.get<std::uint64_t>();
    if (vocab_size_ < 2) throw FormatError("vocabulary size below 2");
    if (dim_ == 0) throw FormatError("zero embedding dimension");
    for (std::uint64_t s = 0; s < count; ++s) {
      Record rec;
      const auto t = r.get<std::uint32_t>();
      rec.seq.prompt_len = r.get<std::uint32_t>();
      rec.seq.bos_id = bos_id_;
      rec.seq.ids = r.get_array<std::uint32_t>(t);
      if (rec.seq.prompt_len > t) throw FormatError("prompt_len exceeds sequence length");
      for (TokenId id : rec.seq.ids) {
        if (id >= vocab_size_) throw FormatError("token id outside vocabulary");
      }
      rec.embeddings = r.view(static_cast<std::size_t>(t) * dim_ * sizeof(float));
      rec.log_probs = r.view(static_cast<std::size_t>(t) * vocab_size_ * sizeof(float));
      lookup_.emplace(rec.seq.ids, records_.size());  // duplicates keep the first record
      records_.push_back(std::move(rec));
    }
    if (r.remaining() != 4) throw FormatError("trailing bytes after last sequence");
  }

  std::size_t vocab_size() const override { return vocab_size_; }
  std::size_t embed_dim() const override { return dim_; }
  std::string fingerprint() const override {
    return "file:" + path_.filename().string() + ";V=" + std::to_string(vocab_size_) +
           ";d=" + std::to_string(dim_) + ";n=" + std::to_string(records_.size());
  }

  std::size_t sequence_count() const noexcept { return records_.size(); }
  const TokenSequence& sequence(std::size_t i) const { return records_.at(i).seq; }
  std::vector<TokenSequence> sequences() const {
    std::vector<TokenSequence> out;
    out.reserve(records_.size());
    for (const auto& r : records_) out.push_back(r.seq);
    return out;
  }

  std::vector<LmStep> steps(const TokenSequence& seq) const override {
    auto it = lookup_.find(seq.ids);
    if (it == lookup_.end()) throw DataError("lookup error: sequence not present in feature file");
    return steps_at(it->second);
  }

  std::vector<LmStep> steps_at(std::size_t index) const {
    const Record& rec = records_.at(index);
    const std::size_t t = rec.seq.size();
    std::vector<LmStep> out(t);
    std::vector<float> lp(vocab_size_);
    for (std::size_t i = 0; i < t; ++i) {
      out[i].embedding.resize(dim_);
      std::memcpy(out[i].embedding.data(), rec.embeddings.data() + i * dim_ * sizeof(float),
                  dim_ * sizeof(float));
      std::memcpy(lp.data(), rec.log_probs.data() + i * vocab_size_ * sizeof(float),
                  vocab_size_ * sizeof(float));
      // float32 log-probs do not sum to exactly one after exp; renormalise.
      std::vector<double> p(vocab_size_);
      double total = 0.0;
      for (std::size_t v = 0; v < vocab_size_; ++v) {
        p[v] = std::exp(static_cast<double>(lp[v]));
        total += p[v];
      }
      if (!(total > 0.0) || !std::isfinite(total)) throw FormatError("log-probabilities do not normalise");
      for (double& x : p) x /= total;
      out[i].dist = ProbDist::dense(std::move(p));
    }
    return out;
  }

  // Raw stored values, for exact round-trip checks.
  std::vector<float> raw_embeddings(std::size_t index) const {
    const Record& rec = records_.at(index);
    std::vector<float> out(rec.embeddings.size() / sizeof(float));
    std::memcpy(out.data(), rec.embeddings.data(), rec.embeddings.size());
    return out;
  }
  std::vector<float> raw_log_probs(std::size_t index) const {
    const Record& rec = records_.at(index);
    std::vector<float> out(rec.log_probs.size() / sizeof(float));
    std::memcpy(out.data(), rec.log_probs.data(), rec.log_probs.size());
    return out;
  }

 private:
  struct Record {
    TokenSequence seq;
    std::span<const std::uint8_t> embeddings;
    std::span<const std::uint8_t> log_probs;
  };

  std::filesystem::path path_;
  io::MappedFile file_;
  TokenId bos_id_;
  std::size_t vocab_size_ = 0;
  std::size_t dim_ = 0;
  std::vector<Record> records_;
  std::map<std::vector<TokenId>, std::size_t> lookup_;
};

}  // namespace knnproxy
