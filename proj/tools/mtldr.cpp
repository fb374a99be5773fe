// SPDX-License-Identifier: Apache-2.0
//
// mtldr: prepare | train | evaluate | summarize | serve | cache-compact | synth
// Exit codes: 0 success, 1 data error, 2 usage or configuration error.

#include <chrono>
#include <csignal>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mtldr/pipeline.hpp"
#include "mtldr/service.hpp"
#include "mtldr/synthetic.hpp"
#include "mtldr/tensor_io.hpp"

using namespace mtldr;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0;
constexpr int kDataError = 1;
constexpr int kUsageError = 2;

struct Options {
  std::string config, manifest, checkpoint, out, features, split = "test", text, audio, video, host = "127.0.0.1",
                                                                cache = "mtldr-cache.log", workdir = "mtldr-work";
  std::uint64_t seed = 0;
  bool seed_set = false, json = false, resume = false;
  int port = 8080;
  std::size_t save_every = 0;
  SyntheticOptions synth;
};

TrainConfig load_config(const Options& o) {
  TrainConfig cfg = o.config.empty() ? TrainConfig{} : load_run_config(o.config);
  if (o.seed_set) cfg.seed = o.seed;
  validate(cfg);
  return cfg;
}

Checkpoint open_checkpoint(const std::string& path) {
  if (path.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  try {
    return load_checkpoint(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
}

int cmd_prepare(const Options& o) {
  if (o.manifest.empty() || o.out.empty()) throw ConfigError("prepare needs --manifest and --out");
  const TrainConfig cfg = load_config(o);
  const Manifest m = load_manifest(o.manifest);
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
  const PrepareReport rep = prepare_features(m, o.out, cfg.vocab_size, std::cerr);
  if (rep.failed_train > 0) {
    std::cerr << "prepare: " << rep.failed_train << " train-split samples failed\n";
    return kDataError;
  }
  return kOk;
}

int cmd_train(const Options& o) {
  if (o.out.empty()) throw ConfigError("train needs --out");
  const TrainConfig cfg = load_config(o);
  fs::path features = o.features;
  if (features.empty()) {
    if (o.manifest.empty()) throw ConfigError("train needs --features or --manifest");
    features = fs::path(o.out) / "features";
    const Manifest m = load_manifest(o.manifest);
    const PrepareReport rep = prepare_features(m, features, cfg.vocab_size, std::cerr);
    if (rep.failed_train > 0) return kDataError;
  }
  const auto t0 = std::chrono::steady_clock::now();
  const TrainRunResult r = run_training(cfg, features, o.out, {o.resume, o.save_every}, std::cerr);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "trained " << r.updates_this_run << " updates (step " << r.state.step << ", epoch " << r.state.epoch
            << ") in " << secs << " s; best validation loss " << r.state.best_val << "\n";
  return kOk;
}

int cmd_evaluate(const Options& o) {
  if (o.manifest.empty()) throw ConfigError("evaluate needs --manifest");
  Split split;
  try {
    split = parse_split(o.split);
  } catch (const ManifestError& e) {
    throw ConfigError(e.what());
  }
  std::optional<Summarizer> summarizer;
  if (!o.checkpoint.empty()) summarizer.emplace(open_checkpoint(o.checkpoint));
  const Manifest m = load_manifest(o.manifest);
  for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
  const EvalReport r = evaluate_manifest(m, summarizer ? &*summarizer : nullptr, split, std::cerr);
  if (o.json) {
    std::cout << report_json(r) << "\n";
  } else {
    write_report_table(std::cout, r);
  }
  if (!o.out.empty() && r.scored) {
    std::ofstream csv(o.out);
    write_report_csv(csv, r);
  }
  if (r.skipped_fraction() > 0.10) {
    std::cerr << "evaluate: " << r.skipped.size() << " of " << r.considered << " samples skipped\n";
    return kDataError;
  }
  return kOk;
}

int cmd_summarize(const Options& o) {
  if (o.text.empty()) throw ConfigError("summarize needs --text");
  const Summarizer s(open_checkpoint(o.checkpoint));
  const auto t0 = std::chrono::steady_clock::now();
  const std::string text = read_file(o.text);
  const Tensor mf = o.audio.empty() ? Tensor() : mfcc_from_wav(read_file(o.audio));
  const Tensor video = o.video.empty() ? Tensor() : video_from_bytes(read_file(o.video));
  const std::string summary = s.summarize(s.featurize(o.text, text, mf, video));
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  if (o.json) {
    std::cout << nlohmann::ordered_json{{"summary", summary}, {"elapsed_ms", ms}}.dump() << "\n";
  } else {
    std::cout << summary << "\n";
    std::cerr << "elapsed " << ms << " ms\n";
  }
  return kOk;
}

SummaryService* g_service = nullptr;

int cmd_serve(const Options& o) {
  const Summarizer s(open_checkpoint(o.checkpoint));
  const std::string hash = file_sha256(o.checkpoint);
  CacheStore cache(o.cache);
  ServiceOptions so;
  so.host = o.host;
  so.port = o.port;
  so.work_dir = o.workdir;
  SummaryService svc(s, cache, hash, so);
  const int port = svc.bind();
  std::cerr << "serving on " << o.host << ":" << port << " (model " << hash.substr(0, 12) << ", " << cache.size()
            << " cached)\n";
  g_service = &svc;
  std::signal(SIGINT, [](int) {
    if (g_service) g_service->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_service) g_service->stop();
  });
  svc.run();
  g_service = nullptr;
  return kOk;
}

int cmd_cache_compact(const Options& o) {
  CacheStore cache(o.cache);
  const std::size_t before = cache.log_records();
  cache.compact();
  std::cout << "compacted " << before << " records to " << cache.log_records() << "\n";
  return kOk;
}

int cmd_synth(const Options& o) {
  SyntheticOptions so = o.synth;
  if (o.seed_set) so.seed = o.seed;
  std::cout << write_synthetic_corpus(o.out, so).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal extreme summarizer"};
  app.require_subcommand(1);
  Options o;

  auto seed = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t v) { o.seed = v, o.seed_set = true; }, "Override the config seed");
  };

  auto* prepare = app.add_subcommand("prepare", "Extract features and build the vocabulary");
  prepare->add_option("--manifest", o.manifest, "Manifest (JSON lines)")->required();
  prepare->add_option("--out", o.out, "Feature directory")->required();
  prepare->add_option("--config", o.config, "Run config (key=value)");
  seed(prepare);

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", o.config, "Run config (key=value)");
  train->add_option("--manifest", o.manifest, "Manifest; features are prepared into OUT/features");
  train->add_option("--features", o.features, "Prepared feature directory");
  train->add_option("--out", o.out, "Run directory")->required();
  train->add_flag("--resume", o.resume, "Continue from OUT/last.mtlg");
  train->add_option("--save-every", o.save_every, "Also checkpoint every N updates");
  seed(train);

  auto* evaluate = app.add_subcommand("evaluate", "Corpus statistics and ROUGE");
  evaluate->add_option("--manifest", o.manifest, "Manifest")->required();
  evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint; without it only statistics are reported");
  evaluate->add_option("--split", o.split, "Split to decode (train, valid, test)");
  evaluate->add_option("--out", o.out, "Per-sample CSV");
  evaluate->add_flag("--json", o.json, "JSON report");

  auto* summarize = app.add_subcommand("summarize", "Summarize one input");
  summarize->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  summarize->add_option("--text", o.text, "Source text file")->required();
  summarize->add_option("--audio", o.audio, "WAV file");
  summarize->add_option("--video", o.video, "Video block features (tensor file)");
  summarize->add_flag("--json", o.json, "JSON output");

  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--checkpoint", o.checkpoint, "Checkpoint")->required();
  serve->add_option("--port", o.port, "Port (0 picks a free one)");
  serve->add_option("--host", o.host, "Bind address");
  serve->add_option("--cache", o.cache, "Cache log file");
  serve->add_option("--workdir", o.workdir, "Transient upload directory");

  auto* compact = app.add_subcommand("cache-compact", "Compact the cache log");
  compact->add_option("--cache", o.cache, "Cache log file")->required();

  auto* synth = app.add_subcommand("synth", "Write a small synthetic multimodal corpus");
  synth->add_option("--out", o.out, "Corpus directory")->required();
  synth->add_option("--train", o.synth.train, "Train samples");
  synth->add_option("--valid", o.synth.valid, "Valid samples");
  synth->add_option("--test", o.synth.test, "Test samples");
  seed(synth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsageError;
  }

  try {
    if (*prepare) return cmd_prepare(o);
    if (*train) return cmd_train(o);
    if (*evaluate) return cmd_evaluate(o);
    if (*summarize) return cmd_summarize(o);
    if (*serve) return cmd_serve(o);
    if (*compact) return cmd_cache_compact(o);
    if (*synth) return cmd_synth(o);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const ManifestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const FeatureError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDataError;
  }
  return kUsageError;
}
