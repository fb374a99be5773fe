// SPDX-License-Identifier: Apache-2.0
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "mtldr/service.hpp"

#include <chrono>
#include <fstream>
#include <mutex>
#include <random>
#include <semaphore>
#include <sstream>

#include "httplib.h"
#include "json.hpp"

namespace mtldr {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string content_hash(const std::vector<std::string_view>& streams) {
  std::string buf;
  for (auto s : streams) {
    std::uint64_t n = s.size();
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((n >> (8 * i)) & 0xff));
    buf.append(s);
  }
  return sha256_hex(buf);
}

// ---- cache --------------------------------------------------------------------

namespace {

std::string entry_line(const CacheEntry& e) {
  json j;
  j["hash"] = e.hash;
  j["summary"] = e.summary;
  j["metadata"] = json::parse(e.metadata.empty() ? "{}" : e.metadata);
  j["created_at"] = e.created_at;
  return j.dump() + "\n";
}

}  // namespace

CacheStore::CacheStore(fs::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  std::ifstream in(path_, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    CacheEntry e;
    try {
      const json j = json::parse(line);
      e.hash = j.at("hash").get<std::string>();
      e.summary = j.at("summary").get<std::string>();
      e.metadata = j.at("metadata").dump();
      e.created_at = j.at("created_at").get<std::int64_t>();
    } catch (const json::exception&) {
      continue;  // torn write
    }
    if (!index_.count(e.hash)) order_.push_back(e.hash);
    index_[e.hash] = std::move(e);
    ++records_;
  }
}

std::optional<CacheEntry> CacheStore::find(const std::string& hash) const {
  std::shared_lock lock(mu_);
  auto it = index_.find(hash);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void CacheStore::put(const CacheEntry& entry) {
  const std::string line = entry_line(entry);
  std::unique_lock lock(mu_);
  std::ofstream out(path_, std::ios::binary | std::ios::app);
  out << line;
  out.flush();
  if (!out) throw DataError("cache: cannot append to " + path_.string());
  if (!index_.count(entry.hash)) order_.push_back(entry.hash);
  index_[entry.hash] = entry;
  ++records_;
}

std::size_t CacheStore::size() const {
  std::shared_lock lock(mu_);
  return index_.size();
}

std::size_t CacheStore::log_records() const {
  std::shared_lock lock(mu_);
  return records_;
}

void CacheStore::compact() {
  std::unique_lock lock(mu_);
  fs::path tmp = path_;
  tmp += ".compact";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    for (const auto& h : order_) out << entry_line(index_.at(h));
    if (!out.flush()) throw DataError("cache: cannot write " + tmp.string());
  }
  fs::rename(tmp, path_);
  records_ = order_.size();
}

// ---- service ------------------------------------------------------------------

namespace {

struct HttpError {
  int status;
  std::string message;
};

// Removes the request's directory however the handler exits.
struct TransientDir {
  fs::path path;
  explicit TransientDir(fs::path p) : path(std::move(p)) { fs::create_directories(path); }
  ~TransientDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string fetch_url(const std::string& url, std::size_t cap, int timeout_s) {
  static const std::string http = "http://", https = "https://";
  std::size_t scheme_end;
  if (url.rfind(http, 0) == 0) scheme_end = http.size();
  else if (url.rfind(https, 0) == 0) scheme_end = https.size();
  else throw HttpError{400, "unsupported URL scheme: " + url};
  const auto slash = url.find('/', scheme_end);
  const std::string origin = url.substr(0, slash);
  const std::string path = slash == std::string::npos ? "/" : url.substr(slash);
  httplib::Client cli(origin);
  cli.set_connection_timeout(timeout_s, 0);
  cli.set_read_timeout(timeout_s, 0);
  cli.set_follow_location(true);
  std::string body;
  bool too_big = false;
  auto res = cli.Get(path, [&](const char* data, std::size_t n) {
    if (body.size() + n > cap) {
      too_big = true;
      return false;
    }
    body.append(data, n);
    return true;
  });
  if (too_big) throw HttpError{413, "fetched payload over limit: " + url};
  if (!res) throw HttpError{400, "fetch failed for " + url + ": " + httplib::to_string(res.error())};
  if (res->status != 200) throw HttpError{400, "fetch of " + url + " returned HTTP " + std::to_string(res->status)};
  return body;
}

std::string error_body(const std::string& msg) { return json{{"error", msg}}.dump(); }

}  // namespace

struct SummaryService::Impl {
  const Summarizer& summarizer;
  CacheStore& cache;
  std::string model_hash;
  ServiceOptions opts;
  httplib::Server server;
  std::counting_semaphore<1024> slots;
  std::atomic<std::size_t> pending{0};
  std::atomic<std::uint64_t> request_seq{0};
  std::string nonce;
  int port = 0;

  Impl(const Summarizer& s, CacheStore& c, std::string h, ServiceOptions o)
      : summarizer(s), cache(c), model_hash(std::move(h)), opts(std::move(o)),
        slots(static_cast<std::ptrdiff_t>(opts.max_concurrent)) {
    std::random_device rd;
    std::ostringstream os;
    os << std::hex << rd() << rd();
    nonce = os.str();
  }
};

SummaryService::SummaryService(const Summarizer& summarizer, CacheStore& cache, std::string model_hash,
                               ServiceOptions opts)
    : impl_(std::make_unique<Impl>(summarizer, cache, std::move(model_hash), std::move(opts))) {
  Impl& im = *impl_;
  fs::create_directories(im.opts.work_dir);
  const std::size_t threads = im.opts.max_concurrent + im.opts.max_queue + 4;
  im.server.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  im.server.set_payload_max_length(im.opts.max_payload);

  im.server.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    const json j{{"status", "ok"},
                 {"version", kVersion},
                 {"model_hash", impl_->model_hash},
                 {"inferences", inferences_.load()},
                 {"cache_entries", impl_->cache.size()}};
    res.set_content(j.dump(), "application/json");
  });

  im.server.Post("/summarize", [this](const httplib::Request& req, httplib::Response& res) {
    Impl& im = *impl_;
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t depth = ++im.pending;
    struct Leave {
      std::atomic<std::size_t>& p;
      ~Leave() { --p; }
    } leave{im.pending};
    auto fail = [&](int status, const std::string& msg) {
      res.status = status;
      res.set_content(error_body(msg), "application/json");
    };
    if (depth > im.opts.max_concurrent + im.opts.max_queue) return fail(503, "queue full");

    try {
      std::string text;
      std::optional<std::string> wav, video;
      if (req.is_multipart_form_data()) {
        if (!req.has_file("text")) throw HttpError{400, "multipart field 'text' is required"};
        text = req.get_file_value("text").content;
        if (req.has_file("wav")) wav = req.get_file_value("wav").content;
        if (req.has_file("video")) video = req.get_file_value("video").content;
      } else {
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::exception&) {
          throw HttpError{400, "body must be multipart/form-data or a JSON object"};
        }
        if (!body.is_object()) throw HttpError{400, "JSON body must be an object"};
        auto get_url = [&](const char* key) -> std::optional<std::string> {
          auto it = body.find(key);
          if (it == body.end() || it->is_null()) return std::nullopt;
          if (!it->is_string()) throw HttpError{400, std::string(key) + " must be a string"};
          return fetch_url(it->get<std::string>(), im.opts.max_payload, im.opts.fetch_timeout_s);
        };
        auto t = get_url("text_url");
        if (!t) throw HttpError{400, "text_url is required"};
        text = *t;
        wav = get_url("wav_url");
        video = get_url("video_url");
      }
      if (text.empty()) throw HttpError{400, "text is empty"};

      const std::string hash = content_hash({text, wav.value_or(""), video.value_or("")});
      auto ms = [&] {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      };
      auto respond = [&](const std::string& summary, bool cached) {
        const json j{{"summary", summary}, {"cached", cached}, {"elapsed_ms", ms()}, {"id", hash}};
        res.set_content(j.dump(), "application/json");
      };
      if (auto hit = im.cache.find(hash)) return respond(hit->summary, true);

      std::string summary;
      {
        const TransientDir dir(im.opts.work_dir /
                               ("req-" + im.nonce + "-" + std::to_string(im.request_seq.fetch_add(1))));
        write_file(dir.path / "text.txt", text);
        if (wav) write_file(dir.path / "audio.wav", *wav);
        if (video) write_file(dir.path / "video.tnsr", *video);

        im.slots.acquire();
        struct Release {
          std::counting_semaphore<1024>& s;
          ~Release() { s.release(); }
        } release{im.slots};
        Tensor mf, vid;
        try {
          if (wav) mf = mfcc_from_wav(read_file(dir.path / "audio.wav"));
          if (video) vid = video_from_bytes(read_file(dir.path / "video.tnsr"));
        } catch (const DataError& e) {
          throw HttpError{400, e.what()};
        }
        const SampleInputs in = im.summarizer.featurize(hash, read_file(dir.path / "text.txt"), mf, vid);
        summary = im.summarizer.summarize(in);
        ++inferences_;
      }
      CacheEntry e;
      e.hash = hash;
      e.summary = summary;
      e.metadata = json{{"text_bytes", text.size()},
                        {"audio", wav.has_value()},
                        {"video", video.has_value()},
                        {"model_hash", im.model_hash}}
                       .dump();
      e.created_at = std::chrono::duration_cast<std::chrono::seconds>(
                         std::chrono::system_clock::now().time_since_epoch())
                         .count();
      im.cache.put(e);
      respond(summary, false);
    } catch (const HttpError& e) {
      fail(e.status, e.message);
    } catch (const std::exception& e) {
      fail(500, e.what());
    }
  });
}

SummaryService::~SummaryService() { stop(); }

int SummaryService::bind() {
  Impl& im = *impl_;
  if (im.opts.port == 0) {
    im.port = im.server.bind_to_any_port(im.opts.host);
  } else {
    im.port = im.server.bind_to_port(im.opts.host, im.opts.port) ? im.opts.port : -1;
  }
  if (im.port <= 0) throw std::runtime_error("cannot bind " + im.opts.host + ":" + std::to_string(im.opts.port));
  return im.port;
}

void SummaryService::run() { impl_->server.listen_after_bind(); }

void SummaryService::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

bool SummaryService::running() const { return impl_->server.is_running(); }

}  // namespace mtldr
