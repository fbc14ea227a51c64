#pragma once

// LM provider backed by a remote inference service.
//
//   GET  <base>/info   -> {"vocab_size": V, "embed_dim": d, "fingerprint": "..."}
//   POST <base>/steps  <- {"token_ids": [...], "need_embeddings": bool, "layer": int}
//                      -> {"embeddings": [[d floats] x T], "log_probs": [[V floats] x T]}
//
// token_ids excludes BOS; the service prepends its own. Transport failures and
// 5xx responses are retried with exponential backoff.

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "knnproxy/core.hpp"
#include "knnproxy/error.hpp"
#include "knnproxy/lm.hpp"

namespace knnproxy {

struct HttpProviderConfig {
  std::string url;    // http://host:port[/base]
  std::string token;  // sent as a bearer token when non-empty
  int layer = -1;     // hidden layer for embeddings; -1 is the last
  int max_attempts = 3;
  std::chrono::milliseconds backoff{100};
  std::chrono::seconds timeout{30};

  static HttpProviderConfig from_env() {
    HttpProviderConfig cfg;
    if (const char* u = std::getenv("KNNPROXY_LM_URL")) cfg.url = u;
    if (const char* t = std::getenv("KNNPROXY_LM_TOKEN")) cfg.token = t;
    if (cfg.url.empty()) throw ConfigError("KNNPROXY_LM_URL is not set");
    return cfg;
  }
};

class HttpProvider final : public LmProvider {
 public:
  explicit HttpProvider(HttpProviderConfig cfg) : cfg_(std::move(cfg)) {
    const auto scheme_end = cfg_.url.find("://");
    if (scheme_end == std::string::npos || cfg_.url.substr(0, scheme_end) != "http") {
      throw ConfigError("LM URL must start with http://, got '" + cfg_.url + "'");
    }
    const auto path_begin = cfg_.url.find('/', scheme_end + 3);
    host_ = cfg_.url.substr(0, path_begin);
    base_path_ = path_begin == std::string::npos ? "" : cfg_.url.substr(path_begin);
    while (!base_path_.empty() && base_path_.back() == '/') base_path_.pop_back();

    const auto info = request("GET", "/info", "");
    try {
      vocab_size_ = info.at("vocab_size").get<std::size_t>();
      embed_dim_ = info.at("embed_dim").get<std::size_t>();
      remote_fingerprint_ = info.value("fingerprint", std::string{});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed /info response: ") + e.what());
    }
    if (vocab_size_ < 2 || embed_dim_ < 1) throw DataError("remote model reports an empty vocabulary or dimension");
  }

  std::size_t vocab_size() const override { return vocab_size_; }
  std::size_t embed_dim() const override { return embed_dim_; }
  std::string fingerprint() const override {
    return "http:" + host_ + base_path_ + ";layer=" + std::to_string(cfg_.layer) + ";" + remote_fingerprint_;
  }

  std::vector<LmStep> steps(const TokenSequence& seq) const override {
    seq.validate(vocab_size_);
    nlohmann::json body = {{"token_ids", seq.ids}, {"need_embeddings", true}, {"layer", cfg_.layer}};
    const auto resp = request("POST", "/steps", body.dump());
    std::vector<LmStep> out(seq.size());
    try {
      const auto& emb = resp.at("embeddings");
      const auto& lps = resp.at("log_probs");
      if (emb.size() != seq.size() || lps.size() != seq.size()) {
        throw DataError("remote returned " + std::to_string(lps.size()) + " positions for " +
                        std::to_string(seq.size()) + " tokens");
      }
      for (std::size_t i = 0; i < seq.size(); ++i) {
        out[i].embedding = emb[i].get<std::vector<float>>();
        if (out[i].embedding.size() != embed_dim_) throw DimensionError("remote embedding width mismatch");
        const auto lp = lps[i].get<std::vector<double>>();
        if (lp.size() != vocab_size_) throw DimensionError("remote log-prob width mismatch");
        std::vector<double> p(lp.size());
        double total = 0.0;
        for (std::size_t v = 0; v < lp.size(); ++v) total += (p[v] = std::exp(lp[v]));
        if (!(total > 0.0) || !std::isfinite(total)) throw DataError("remote log-probabilities do not normalise");
        for (double& x : p) x /= total;
        out[i].dist = ProbDist::dense(std::move(p));
      }
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed /steps response: ") + e.what());
    }
    return out;
  }

 private:
  nlohmann::json request(const std::string& method, const std::string& path, const std::string& body) const {
    httplib::Client client(host_);
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!cfg_.token.empty()) headers.emplace("Authorization", "Bearer " + cfg_.token);

    std::string last_error;
    auto delay = cfg_.backoff;
    for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
      auto res = method == "GET" ? client.Get(base_path_ + path, headers)
                                 : client.Post(base_path_ + path, headers, body, "application/json");
      if (res) {
        if (res->status >= 200 && res->status < 300) {
          try {
            return nlohmann::json::parse(res->body);
          } catch (const nlohmann::json::parse_error& e) {
            throw DataError(std::string("remote response is not JSON: ") + e.what());
          }
        }
        if (res->status < 500) {
          throw DataError("remote rejected " + path + " with HTTP " + std::to_string(res->status));
        }
        last_error = "HTTP " + std::to_string(res->status);
      } else {
        last_error = httplib::to_string(res.error());
      }
      if (attempt < cfg_.max_attempts) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
    }
    throw TransportError(path + " failed after " + std::to_string(cfg_.max_attempts) +
                         " attempts: " + last_error);
  }

  HttpProviderConfig cfg_;
  std::string host_;
  std::string base_path_;
  std::size_t vocab_size_ = 0;
  std::size_t embed_dim_ = 0;
  std::string remote_fingerprint_;
};

}  // namespace knnproxy
