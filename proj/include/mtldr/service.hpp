// SPDX-License-Identifier: Apache-2.0
//
// Caching summarization service. POST /summarize takes a multipart upload
// (text required; wav, video optional) or a JSON body with URLs; GET /health
// reports version, model hash and inference count. Uploads live in a
// per-request directory that is removed before the response is sent.
#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtldr/pipeline.hpp"

namespace mtldr {

constexpr const char* kVersion = "0.1.0";

// SHA-256 over the streams in order, each prefixed by its u64 length.
std::string content_hash(const std::vector<std::string_view>& streams);

struct CacheEntry {
  std::string hash;
  std::string summary;
  std::string metadata;  // JSON object text
  std::int64_t created_at = 0;  // unix seconds
};

// Append-only JSON-lines log with an in-memory index rebuilt on open. The
// last record for a hash wins; a torn final line is ignored.
class CacheStore {
 public:
  explicit CacheStore(std::filesystem::path path);

  std::optional<CacheEntry> find(const std::string& hash) const;
  void put(const CacheEntry& entry);
  std::size_t size() const;
  std::size_t log_records() const;
  // Rewrites the log with one record per hash, in first-seen order.
  void compact();

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, CacheEntry> index_;
  std::vector<std::string> order_;
  std::size_t records_ = 0;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0: any free port
  std::filesystem::path work_dir = "mtldr-work";
  std::size_t max_concurrent = 4;
  std::size_t max_queue = 16;
  std::size_t max_payload = 64u << 20;
  int fetch_timeout_s = 60;
};

class SummaryService {
 public:
  SummaryService(const Summarizer& summarizer, CacheStore& cache, std::string model_hash, ServiceOptions opts);
  ~SummaryService();

  // Binds the socket; returns the bound port (throws on failure).
  int bind();
  // Blocks until stop().
  void run();
  void stop();
  bool running() const;

  std::size_t inferences() const { return inferences_.load(); }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::atomic<std::size_t> inferences_{0};
};

}  // namespace mtldr
