// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "mtldr/service.hpp"
#include "mtldr/synthetic.hpp"
#include "mtldr/tensor_io.hpp"
#include "model_fixtures.hpp"

using namespace mtldr;
using namespace mtldr::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "mtldr_test_service" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

CacheEntry entry(const std::string& hash, const std::string& summary) {
  CacheEntry e;
  e.hash = hash;
  e.summary = summary;
  e.metadata = R"({"audio":false})";
  e.created_at = 1700000000;
  return e;
}

std::size_t line_count(const fs::path& p) {
  const std::string s = read_file(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// A service on an ephemeral port, running on its own thread.
struct Running {
  SummaryService svc;
  int port;
  std::thread th;
  Running(const Summarizer& s, CacheStore& c, ServiceOptions o)
      : svc(s, c, "deadbeef", std::move(o)), port(svc.bind()), th([this] { svc.run(); }) {
    for (int i = 0; i < 500 && !svc.running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(2));
  }
  ~Running() {
    svc.stop();
    th.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(60, 0);
    return c;
  }
};

struct Fixture {
  fs::path root;
  std::string wav, video;
  std::optional<Summarizer> summarizer;

  explicit Fixture(const std::string& name) : root(fresh_dir(name)) {
    SyntheticOptions so;
    so.train = 3;
    const fs::path mp = write_synthetic_corpus(root / "corpus", so);
    const Manifest m = load_manifest(mp);
    std::vector<std::string> corpus;
    for (const auto& s : m.samples) corpus.push_back(read_file(m.resolve(s.text_path)) + " " + s.target);
    const Vocabulary vocab = Vocabulary::build(corpus, 128);
    TrainConfig cfg = tiny_train_config();
    cfg.model.vocab = vocab.size();
    cfg.search.max_len = 6;
    save_checkpoint(root / "model.mtlg", Model::make(cfg.model, 5), vocab, cfg);
    summarizer.emplace(load_checkpoint(root / "model.mtlg"));
    wav = read_file(m.resolve(*m.samples[0].audio_path));
    video = read_file(m.resolve(*m.samples[0].video_feat_path));
  }
  ServiceOptions options(const std::string& sub = "work") const {
    ServiceOptions o;
    o.port = 0;
    o.work_dir = root / sub;
    return o;
  }
};

httplib::Result post_multipart(httplib::Client& c, const std::string& text, const std::string* wav = nullptr,
                               const std::string* video = nullptr) {
  httplib::MultipartFormDataItems items{{"text", text, "text.txt", "text/plain"}};
  if (wav) items.push_back({"wav", *wav, "a.wav", "audio/wav"});
  if (video) items.push_back({"video", *video, "v.tnsr", "application/octet-stream"});
  return c.Post("/summarize", items);
}

}  // namespace

TEST_CASE("content hash frames each stream") {
  CHECK(content_hash({"ab", "c"}) != content_hash({"a", "bc"}));
  CHECK(content_hash({"ab", "c"}) == content_hash({"ab", "c"}));
  CHECK(content_hash({"x", "", ""}) != content_hash({"x", "", "", ""}));
  CHECK(content_hash({}) == sha256_hex(""));
  CHECK(content_hash({"x"}).size() == 64);
}

TEST_CASE("cache store reloads, skips torn lines and compacts") {
  const fs::path dir = fresh_dir("cache");
  const fs::path p = dir / "cache.jsonl";
  {
    CacheStore c(p);
    CHECK(c.size() == 0);
    c.put(entry("h1", "one"));
    c.put(entry("h2", "two"));
    c.put(entry("h1", "one again"));
    CHECK(c.size() == 2);
    CHECK(c.log_records() == 3);
    CHECK(c.find("h1")->summary == "one again");
    CHECK_FALSE(c.find("h3").has_value());
  }
  {
    std::ofstream os(p, std::ios::app);
    os << R"({"hash":"h3","summ)";  // torn write
  }
  CacheStore c(p);
  CHECK(c.size() == 2);
  CHECK(c.find("h1")->summary == "one again");
  CHECK(c.find("h2")->metadata == R"({"audio":false})");
  CHECK(c.find("h2")->created_at == 1700000000);
  CHECK_FALSE(c.find("h3").has_value());
  c.compact();
  CHECK(line_count(p) == 2);
  CHECK(c.log_records() == 2);
  c.put(entry("h4", "four"));
  CacheStore again(p);
  CHECK(again.size() == 3);
  CHECK(again.find("h1")->summary == "one again");
  CHECK(again.find("h4")->summary == "four");
}

TEST_CASE("service contract") {
  Fixture fx("contract");
  CacheStore cache(fx.root / "cache.jsonl");
  ServiceOptions o = fx.options();
  o.max_payload = 1u << 20;
  Running r(*fx.summarizer, cache, o);
  auto c = r.client();

  auto health = c.Get("/health");
  REQUIRE(health);
  CHECK(health->status == 200);
  json h = json::parse(health->body);
  CHECK(h["status"] == "ok");
  CHECK(h["version"] == kVersion);
  CHECK(h["model_hash"] == "deadbeef");
  CHECK(h["inferences"] == 0);

  const std::string marker = "QQZX-marker-payload-7731 neural graph";
  auto first = post_multipart(c, marker, &fx.wav, &fx.video);
  REQUIRE(first);
  REQUIRE(first->status == 200);
  const json a = json::parse(first->body);
  CHECK(a["cached"] == false);
  CHECK(a["id"] == content_hash({marker, fx.wav, fx.video}));
  CHECK(r.svc.inferences() == 1);

  auto second = post_multipart(c, marker, &fx.wav, &fx.video);
  REQUIRE(second);
  const json b = json::parse(second->body);
  CHECK(b["cached"] == true);
  CHECK(b["summary"].get<std::string>() == a["summary"].get<std::string>());
  CHECK(r.svc.inferences() == 1);

  // same text without audio is a different request
  auto third = post_multipart(c, marker, nullptr, &fx.video);
  REQUIRE(third);
  CHECK(json::parse(third->body)["cached"] == false);
  CHECK(r.svc.inferences() == 2);

  // a cold cache recomputes the same summary
  {
    CacheStore cold(fx.root / "cold.jsonl");
    Running r2(*fx.summarizer, cold, fx.options("work2"));
    auto c2 = r2.client();
    auto again = post_multipart(c2, marker, &fx.wav, &fx.video);
    REQUIRE(again);
    const json j = json::parse(again->body);
    CHECK(j["cached"] == false);
    CHECK(j["summary"].get<std::string>() == a["summary"].get<std::string>());
  }

  // bad inputs
  auto no_text = c.Post("/summarize", httplib::MultipartFormDataItems{{"wav", fx.wav, "a.wav", "audio/wav"}});
  REQUIRE(no_text);
  CHECK(no_text->status == 400);
  auto bad_wav = post_multipart(c, "graph", &marker);
  REQUIRE(bad_wav);
  CHECK(bad_wav->status == 400);
  auto bad_json = c.Post("/summarize", "{oops", "application/json");
  REQUIRE(bad_json);
  CHECK(bad_json->status == 400);
  auto no_url = c.Post("/summarize", R"({"wav_url":"http://127.0.0.1:1/x"})", "application/json");
  REQUIRE(no_url);
  CHECK(no_url->status == 400);
  CHECK(json::parse(no_url->body).contains("error"));
  auto big = c.Post("/summarize", std::string(2u << 20, 'a'), "text/plain");
  REQUIRE(big);
  CHECK(big->status == 413);

  // uploads are gone and never reach the cache log
  CHECK(fs::is_empty(o.work_dir));
  const std::string log = read_file(cache.path());
  CHECK(log.find("QQZX") == std::string::npos);
  CHECK(log.find(a["summary"].get<std::string>()) != std::string::npos);
  CHECK(json::parse(c.Get("/health")->body)["cache_entries"] == 2);
}

TEST_CASE("service handles concurrent requests") {
  Fixture fx("concurrent");
  CacheStore cache(fx.root / "cache.jsonl");
  ServiceOptions o = fx.options();
  Running r(*fx.summarizer, cache, o);
  std::vector<int> status(4, 0);
  std::vector<std::thread> ts;
  for (int i = 0; i < 4; ++i)
    ts.emplace_back([&, i] {
      auto c = r.client();
      auto res = post_multipart(c, "graph attention sample " + std::to_string(i), &fx.wav, &fx.video);
      status[static_cast<std::size_t>(i)] = res ? res->status : -1;
    });
  for (auto& t : ts) t.join();
  CHECK(status == std::vector<int>{200, 200, 200, 200});
  CHECK(r.svc.inferences() == 4);
  CHECK(cache.size() == 4);
  CHECK(fs::is_empty(o.work_dir));
}

TEST_CASE("service sheds load past its queue") {
  Fixture fx("shed");
  CacheStore cache(fx.root / "cache.jsonl");
  ServiceOptions o = fx.options();
  o.max_concurrent = 0;
  o.max_queue = 0;
  Running r(*fx.summarizer, cache, o);
  auto c = r.client();
  auto res = post_multipart(c, "graph");
  REQUIRE(res);
  CHECK(res->status == 503);
  CHECK(r.svc.inferences() == 0);
}

TEST_CASE("service fetches URL inputs") {
  Fixture fx("urls");
  httplib::Server files;
  const std::string text = "neural graph attention from a url";
  files.Get("/text", [&](const httplib::Request&, httplib::Response& res) { res.set_content(text, "text/plain"); });
  files.Get("/wav", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(fx.wav, "audio/wav");
  });
  files.Get("/big", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(std::string(300000, 'b'), "text/plain");
  });
  const int fport = files.bind_to_any_port("127.0.0.1");
  std::thread ft([&] { files.listen_after_bind(); });
  for (int i = 0; i < 500 && !files.is_running(); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(2));

  CacheStore cache(fx.root / "cache.jsonl");
  ServiceOptions o = fx.options();
  o.max_payload = 200000;
  {
    Running r(*fx.summarizer, cache, o);
    auto c = r.client();
    const std::string base = "http://127.0.0.1:" + std::to_string(fport);
    auto res = c.Post("/summarize", json{{"text_url", base + "/text"}, {"wav_url", base + "/wav"}}.dump(),
                      "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    const json j = json::parse(res->body);
    CHECK(j["id"] == content_hash({text, fx.wav, ""}));
    // the same bytes uploaded directly hit the cache
    auto up = post_multipart(c, text, &fx.wav);
    REQUIRE(up);
    CHECK(json::parse(up->body)["cached"] == true);

    auto missing = c.Post("/summarize", json{{"text_url", base + "/nope"}}.dump(), "application/json");
    REQUIRE(missing);
    CHECK(missing->status == 400);
    auto big = c.Post("/summarize", json{{"text_url", base + "/big"}}.dump(), "application/json");
    REQUIRE(big);
    CHECK(big->status == 413);
    auto scheme = c.Post("/summarize", json{{"text_url", "ftp://x/y"}}.dump(), "application/json");
    REQUIRE(scheme);
    CHECK(scheme->status == 400);
    CHECK(fs::is_empty(o.work_dir));
  }
  files.stop();
  ft.join();
}
