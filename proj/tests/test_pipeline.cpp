// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <set>
#include <sstream>

#include "doctest.h"
#include "mtldr/pipeline.hpp"
#include "mtldr/synthetic.hpp"
#include "mtldr/tensor_io.hpp"
#include "model_fixtures.hpp"

using namespace mtldr;
using namespace mtldr::testing;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "mtldr_test_pipeline" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_file(e.path());
  return out;
}

const char* kFixture =
    R"({"id":"a1","text_path":"a1.txt","audio_path":"a1.wav","video_feat_path":"a1.tnsr","target":"first summary","split":"train","metadata":{"title":"One","authors":["A. Author","B. Author"],"keywords":["graphs"],"venue":"Conf","year":2021}})"
    "\n"
    R"({"id":"b2","text_path":"b2.txt","target":"second","split":"valid"})"
    "\n"
    R"({"id":"c3","text_path":"/abs/c3.txt","video_feat_path":"c3.tnsr","target":"third one","split":"test","metadata":{"year":2019}})"
    "\n";

}  // namespace

TEST_CASE("manifest parsing and round trip") {
  std::istringstream in(kFixture);
  const Manifest m = parse_manifest(in, "/data");
  REQUIRE(m.samples.size() == 3);
  CHECK(m.samples[0].metadata.authors.size() == 2);
  CHECK(*m.samples[0].metadata.year == 2021);
  CHECK_FALSE(m.samples[1].audio_path.has_value());
  CHECK(m.samples[2].split == Split::kTest);
  CHECK(serialize_manifest(m) == kFixture);
  CHECK(m.resolve("x/y.txt") == fs::path("/data/x/y.txt"));
  CHECK(m.resolve("/abs/c3.txt") == fs::path("/abs/c3.txt"));
  CHECK(split_summary(m) == "train 1 / valid 1 / test 1");
  std::istringstream again(serialize_manifest(m));
  CHECK(parse_manifest(again, "/data").samples == m.samples);
  CHECK(m.warnings.empty());

  std::istringstream empty("\n\n");
  const Manifest e = parse_manifest(empty);
  CHECK(e.samples.empty());
  CHECK(e.warnings.size() == 1);
}

TEST_CASE("manifest errors name the line and the problem") {
  auto error_of = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_manifest(in);
    } catch (const ManifestError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  const std::string ok = R"({"id":"x","text_path":"t","target":"s","split":"train"})";
  const std::string dup = error_of(ok + "\n" + ok + "\n");
  CHECK(dup.find("duplicate id 'x'") != std::string::npos);
  CHECK(dup.find("line 2") != std::string::npos);
  CHECK(error_of(ok + "\n{not json\n").find("line 2") != std::string::npos);
  CHECK(error_of(R"({"id":"x","target":"s","split":"train"})").find("text_path") != std::string::npos);
  CHECK(error_of(R"({"id":"x","text_path":"t","target":"s","split":"dev"})").find("split") != std::string::npos);
  CHECK(error_of(R"({"id":"x","text_path":"t","target":"s","split":"train","extra":1})").find("extra") !=
        std::string::npos);
  CHECK(error_of(R"({"id":"x","text_path":"t","target":"s","split":"train","metadata":{"year":"2020"}})").find("year") !=
        std::string::npos);
  CHECK(error_of("[1,2]").find("line 1") != std::string::npos);
}

TEST_CASE("prepare: placeholders, idempotence and no test-split leakage") {
  const fs::path root = fresh_dir("prepare");
  SyntheticOptions so;
  so.train = 4;
  so.valid = 1;
  so.test = 1;
  so.every_third_without_audio = true;
  const fs::path manifest_path = write_synthetic_corpus(root / "corpus", so);
  // a test-only sample with characters never seen in train
  Manifest m = load_manifest(manifest_path);
  write_file(root / "corpus" / "texts" / "leak.txt", "zqxj \xd0\xb6\xd0\xb6 unseenword");
  SampleManifest leak;
  leak.id = "leak";
  leak.text_path = "texts/leak.txt";
  leak.target = "\xd0\xb6 zqxj";
  leak.split = Split::kTest;
  m.samples.push_back(leak);

  std::ostringstream log;
  const PrepareReport rep = prepare_features(m, root / "prep", 256, log);
  CHECK(rep.prepared == 7);
  CHECK(rep.failed == 0);
  const auto first = snapshot(root / "prep");
  const auto mtime = fs::last_write_time(root / "prep" / "index.jsonl");
  prepare_features(m, root / "prep", 256, log);
  CHECK(snapshot(root / "prep") == first);
  CHECK(fs::last_write_time(root / "prep" / "index.jsonl") == mtime);

  const PreparedCorpus pc = load_prepared(root / "prep");
  REQUIRE(pc.samples.size() == 7);
  for (const auto& s : pc.samples) {
    const bool expect_audio = s.id != "syn002" && s.id != "syn005" && s.id != "leak";
    CHECK(s.has_audio == expect_audio);
    if (!s.has_audio) {
      CHECK(s.mfcc.shape() == Shape{1, kCepstra});
      for (double v : s.mfcc.data()) CHECK(v == 0.0);
      CHECK_FALSE(to_inputs(s, 36).mfcc.defined());
    } else {
      CHECK(s.mfcc.shape() == Shape{98, kCepstra});
    }
    CHECK(s.has_video == (s.id != "leak"));
    CHECK(s.video.shape() == Shape{s.has_video ? 3u : 1u, kVideoBlockWidth});
    CHECK(s.tokens.front() == kBosId);
    CHECK(s.target.front() == kBosId);
    CHECK(s.target.back() == kEosId);
  }
  // leakage: characters that only occur in the test split are not in the vocabulary
  std::set<std::string> train_chars;
  for (const auto& s : m.samples) {
    if (s.split != Split::kTrain) continue;
    for (const auto& w : split_words(read_file(m.resolve(s.text_path)) + " " + s.target))
      for (const auto& c : w) train_chars.insert(c.substr(0, c.find("</w>")));
  }
  for (const auto& w : split_words(read_file(root / "corpus" / "texts" / "leak.txt") + " " + leak.target)) {
    for (const auto& c : w) {
      const std::string ch = c.substr(0, c.find("</w>"));
      if (!train_chars.count(ch)) {
        CHECK_FALSE(pc.vocab.contains(ch));
        CHECK_FALSE(pc.vocab.contains(ch + "</w>"));
      }
    }
  }
  CHECK_FALSE(pc.vocab.contains("unseenword</w>"));
  const auto& leak_prepared = pc.samples.back();
  CHECK(std::count(leak_prepared.tokens.begin(), leak_prepared.tokens.end(), kUnkId) > 0);
}

TEST_CASE("prepare reports failures per split") {
  const fs::path root = fresh_dir("failures");
  SyntheticOptions so;
  so.train = 3;
  so.test = 1;
  const fs::path manifest_path = write_synthetic_corpus(root / "corpus", so);
  Manifest m = load_manifest(manifest_path);
  m.samples[1].text_path = "texts/missing.txt";
  m.samples[3].audio_path = "audio/missing.wav";
  std::ostringstream log;
  const PrepareReport rep = prepare_features(m, root / "prep", 256, log);
  CHECK(rep.prepared == 2);
  CHECK(rep.failed == 2);
  CHECK(rep.failed_train == 1);
  CHECK(log.str().find("syn001") != std::string::npos);
  CHECK(load_prepared(root / "prep").samples.size() == 2);
}

TEST_CASE("training targets are cut with EOS kept") {
  PreparedSample s;
  s.tokens = {kBosId, 5, kEosId};
  s.target = {kBosId, 5, 6, 7, 8, 9, kEosId};
  CHECK(to_inputs(s, 36).target == s.target);
  CHECK(to_inputs(s, 4).target == std::vector<int>{kBosId, 5, 6, kEosId});
  const Vocabulary v = Vocabulary::build({"a b c d e f"}, 64);
  const auto t = summary_target("a b c d e f", v, 5);
  CHECK(t.size() == 5);
  CHECK(t.front() == kBosId);
  CHECK(t.back() == kEosId);
}

TEST_CASE("inference path matches prepared features and is deterministic") {
  const fs::path root = fresh_dir("infer");
  SyntheticOptions so;
  so.train = 3;
  so.test = 1;
  const fs::path manifest_path = write_synthetic_corpus(root / "corpus", so);
  const Manifest m = load_manifest(manifest_path);
  std::ostringstream log;
  prepare_features(m, root / "prep", 256, log);
  PreparedCorpus pc = load_prepared(root / "prep");

  TrainConfig cfg = tiny_train_config();
  cfg.model.vocab = pc.vocab.size();
  save_checkpoint(root / "model.mtlg", Model::make(cfg.model, 3), pc.vocab, cfg);
  const Summarizer s(load_checkpoint(root / "model.mtlg"));
  for (std::size_t i = 0; i < m.samples.size(); ++i) {
    const SampleInputs live = featurize_manifest_sample(s, m, m.samples[i]);
    const SampleInputs prepared = to_inputs(pc.samples[i], 36);
    CHECK(live.tokens == prepared.tokens);
    CHECK(max_abs_diff(live.mfcc, prepared.mfcc) == 0.0);
    CHECK(max_abs_diff(live.video, prepared.video) == 0.0);
    const std::string a = s.summarize(live), b = s.summarize(live);
    CHECK(a == b);
  }

  // evaluation: scored rows and the skip accounting
  std::ostringstream warn;
  EvalReport r = evaluate_manifest(m, &s, Split::kTrain, warn);
  CHECK(r.scored);
  CHECK(r.rows.size() == 3);
  CHECK(r.skipped.empty());
  CHECK(r.stats.samples == 4);
  CHECK(r.stats.avg_source_words == 12.0);
  std::ostringstream table, csv;
  write_report_table(table, r);
  write_report_csv(csv, r);
  CHECK(table.str().find("ROUGE-L") != std::string::npos);
  const std::string csv_text = csv.str();
  CHECK(std::count(csv_text.begin(), csv_text.end(), '\n') == 4);
  CHECK(report_json(r).find("\"rouge1\"") != std::string::npos);

  Manifest broken = m;
  broken.samples[0].video_feat_path = "video/none.tnsr";
  r = evaluate_manifest(broken, &s, Split::kTrain, warn);
  CHECK(r.skipped.size() == 1);
  CHECK(r.skipped_fraction() > 0.10);
  CHECK(warn.str().find("syn000") != std::string::npos);

  const EvalReport stats_only = evaluate_manifest(m, nullptr, Split::kTest, warn);
  CHECK_FALSE(stats_only.scored);
  CHECK(stats_only.stats.samples == 4);
}

TEST_CASE("run_training writes checkpoints and metrics and resumes") {
  const fs::path root = fresh_dir("run");
  SyntheticOptions so;
  so.train = 4;
  so.valid = 1;
  const fs::path manifest_path = write_synthetic_corpus(root / "corpus", so);
  std::ostringstream log;
  prepare_features(load_manifest(manifest_path), root / "prep", 256, log);
  TrainConfig cfg = tiny_train_config();
  cfg.epochs = 2;
  TrainRunResult a = run_training(cfg, root / "prep", root / "run", {}, log);
  CHECK(a.state.step == 4);
  CHECK(fs::exists(root / "run" / "best.mtlg"));
  const Checkpoint last = load_checkpoint(root / "run" / "last.mtlg");
  REQUIRE(last.state.has_value());
  CHECK(last.state->step == 4);
  CHECK(last.state->finished);
  const std::string metrics = read_file(root / "run" / "metrics.csv");
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 1 + 4 + 2);

  // raising the epoch cap is a config change, so resume is refused
  TrainConfig more = cfg;
  more.epochs = 3;
  CHECK_THROWS_AS(run_training(more, root / "prep", root / "run", {true, 0}, log), ConfigError);
  // resuming a finished run is a no-op
  TrainRunResult b = run_training(cfg, root / "prep", root / "run", {true, 0}, log);
  CHECK(b.updates_this_run == 0);
  CHECK(b.state.step == 4);
}
