// SPDX-License-Identifier: Apache-2.0
#include "mtldr/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "mtldr/tensor_io.hpp"

namespace mtldr {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("cannot write " + path.string());
}

Tensor mfcc_from_wav(std::string_view wav_bytes) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(wav_bytes.data());
  try {
    const PcmAudio audio = parse_wav({p, wav_bytes.size()});
    return mfcc(resample_mono(audio));
  } catch (const FeatureError& e) {
    throw DataError(std::string("audio: ") + e.what());
  }
}

Tensor video_from_bytes(std::string_view bytes) {
  std::istringstream is{std::string(bytes), std::ios::binary};
  Tensor t;
  try {
    t = read_tensor(is);
  } catch (const std::exception& e) {
    throw DataError(std::string("video features: ") + e.what());
  }
  if (t.rank() != 2 || t.cols() != kVideoBlockWidth || t.rows() == 0) {
    throw DataError("video features must be [B x 2048] with B >= 1, got " + shape_str(t.shape()));
  }
  return t;
}

std::vector<int> summary_target(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 2) throw std::invalid_argument("summary_target: max_len < 2");
  std::vector<int> ids = vocab.encode(text);
  if (ids.size() > max_len - 2) ids.resize(max_len - 2);
  std::vector<int> out{kBosId};
  out.insert(out.end(), ids.begin(), ids.end());
  out.push_back(kEosId);
  return out;
}

// ---- prepare ------------------------------------------------------------------

namespace {

std::string sample_file_key(const std::string& id) {
  std::string safe;
  for (char c : id) safe += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  if (safe.size() > 40) safe.resize(40);
  return safe + "-" + sha256_hex(id).substr(0, 12);
}

std::string tensor_bytes(const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

// Rewrites only when the bytes differ, so reruns leave files untouched.
void write_if_changed(const fs::path& path, const std::string& bytes) {
  std::error_code ec;
  if (fs::exists(path, ec) && fs::file_size(path, ec) == bytes.size() && read_file(path) == bytes) return;
  write_file(path, bytes);
}

}  // namespace

PrepareReport prepare_features(const Manifest& manifest, const fs::path& out_dir, std::size_t vocab_size,
                               std::ostream& log) {
  PrepareReport rep;
  std::vector<std::string> texts(manifest.samples.size());
  std::vector<bool> ok(manifest.samples.size(), true);
  auto fail = [&](std::size_t i, const std::string& why) {
    const auto& s = manifest.samples[i];
    ok[i] = false;
    ++rep.failed;
    if (s.split == Split::kTrain) ++rep.failed_train;
    rep.errors.push_back(s.id + ": " + why);
    log << "prepare: " << s.id << ": " << why << "\n";
  };

  std::vector<std::string> corpus;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    const auto& s = manifest.samples[i];
    try {
      texts[i] = read_file(manifest.resolve(s.text_path));
    } catch (const DataError& e) {
      fail(i, e.what());
      continue;
    }
    if (s.split == Split::kTrain) {
      corpus.push_back(texts[i]);
      corpus.push_back(s.target);
    }
  }
  if (corpus.empty()) throw DataError("prepare: no readable train-split samples to build a vocabulary from");
  const Vocabulary vocab = Vocabulary::build(corpus, vocab_size);

  fs::create_directories(out_dir / "features");
  std::string index;
  for (std::size_t i = 0; i < manifest.samples.size(); ++i) {
    if (!ok[i]) continue;
    const auto& s = manifest.samples[i];
    const std::string key = sample_file_key(s.id);
    try {
      Tensor mf({1, kCepstra}, 0.0), video({1, kVideoBlockWidth}, 0.0);
      if (s.audio_path) mf = mfcc_from_wav(read_file(manifest.resolve(*s.audio_path)));
      if (s.video_feat_path) video = video_from_bytes(read_file(manifest.resolve(*s.video_feat_path)));
      write_if_changed(out_dir / "features" / (key + ".mfcc.tnsr"), tensor_bytes(mf));
      write_if_changed(out_dir / "features" / (key + ".video.tnsr"), tensor_bytes(video));
    } catch (const DataError& e) {
      fail(i, e.what());
      continue;
    }
    ordered_json j;
    j["id"] = s.id;
    j["split"] = split_name(s.split);
    j["file"] = key;
    j["audio"] = s.audio_path.has_value();
    j["video"] = s.video_feat_path.has_value();
    j["tokens"] = tokenize(texts[i], vocab, kMaxSourceLength);
    j["target"] = summary_target(s.target, vocab, std::numeric_limits<std::size_t>::max());
    index += j.dump() + "\n";
    ++rep.prepared;
  }
  std::ostringstream vs;
  vocab.write(vs);
  write_if_changed(out_dir / "vocab.txt", vs.str());
  write_if_changed(out_dir / "index.jsonl", index);
  log << "prepare: " << rep.prepared << " samples prepared, " << rep.failed << " failed (" << split_summary(manifest)
      << "), vocabulary " << vocab.size() << "\n";
  return rep;
}

PreparedCorpus load_prepared(const fs::path& dir) {
  PreparedCorpus c;
  {
    std::istringstream vs(read_file(dir / "vocab.txt"));
    c.vocab = Vocabulary::read(vs);
  }
  std::istringstream idx(read_file(dir / "index.jsonl"));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(idx, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = ordered_json::parse(line);
      PreparedSample s;
      s.id = j.at("id").get<std::string>();
      s.split = parse_split(j.at("split").get<std::string>());
      s.has_audio = j.at("audio").get<bool>();
      s.has_video = j.at("video").get<bool>();
      s.tokens = j.at("tokens").get<std::vector<int>>();
      s.target = j.at("target").get<std::vector<int>>();
      const std::string key = j.at("file").get<std::string>();
      s.mfcc = load_tensor(dir / "features" / (key + ".mfcc.tnsr"));
      s.video = load_tensor(dir / "features" / (key + ".video.tnsr"));
      c.samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw DataError("prepared index line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

SampleInputs to_inputs(const PreparedSample& s, std::size_t max_len_train) {
  SampleInputs in;
  in.id = s.id;
  in.tokens = s.tokens;
  if (s.has_audio) in.mfcc = s.mfcc;
  if (s.has_video) in.video = s.video;
  in.target = s.target;
  if (in.target.size() > max_len_train) {
    in.target.resize(max_len_train - 1);
    in.target.push_back(kEosId);
  }
  return in;
}

// ---- inference ------------------------------------------------------------------

Summarizer::Summarizer(Checkpoint ck) : ck_(std::move(ck)) {}

SampleInputs Summarizer::featurize(const std::string& id, std::string_view text, const Tensor& mfcc,
                                   const Tensor& video) const {
  SampleInputs in;
  in.id = id;
  in.tokens = tokenize(text, ck_.vocab, kMaxSourceLength);
  in.mfcc = mfcc;
  in.video = video;
  return in;
}

std::vector<int> Summarizer::summarize_ids(const SampleInputs& inputs) const {
  const FusedMemory memory = encode_for_inference(ck_.model, inputs);
  return beam_search(ck_.model.decoder, memory, ck_.config.search);
}

std::string Summarizer::summarize(const SampleInputs& inputs) const {
  const auto ids = summarize_ids(inputs);
  return ck_.vocab.decode(ids);
}

SampleInputs featurize_manifest_sample(const Summarizer& s, const Manifest& m, const SampleManifest& sample) {
  const std::string text = read_file(m.resolve(sample.text_path));
  Tensor mf, video;
  if (sample.audio_path) mf = mfcc_from_wav(read_file(m.resolve(*sample.audio_path)));
  if (sample.video_feat_path) video = video_from_bytes(read_file(m.resolve(*sample.video_feat_path)));
  return s.featurize(sample.id, text, mf, video);
}

// ---- training run ----------------------------------------------------------------

TrainRunResult run_training(const TrainConfig& cfg_in, const fs::path& features_dir, const fs::path& out_dir,
                            const TrainRunOptions& opts, std::ostream& log) {
  validate(cfg_in);
  PreparedCorpus corpus = load_prepared(features_dir);
  std::vector<SampleInputs> train, valid;
  for (const auto& s : corpus.samples) {
    if (s.split == Split::kTrain) train.push_back(to_inputs(s, cfg_in.max_len_train));
    if (s.split == Split::kValid) valid.push_back(to_inputs(s, cfg_in.max_len_train));
  }
  if (train.empty()) throw DataError("training split is empty");
  if (valid.empty()) log << "train: no valid split, validating on train\n";

  fs::create_directories(out_dir);
  const fs::path last_path = out_dir / "last.mtlg", best_path = out_dir / "best.mtlg",
                 metrics_path = out_dir / "metrics.csv";
  TrainConfig cfg = cfg_in;
  cfg.model.vocab = corpus.vocab.size();
  Model model;
  std::optional<Adam> adam;
  std::optional<TrainState> state;
  if (opts.resume && fs::exists(last_path)) {
    Checkpoint ck = load_checkpoint(last_path);
    if (format_run_config(ck.config) != format_run_config(cfg_in)) {
      throw ConfigError("resume: " + last_path.string() + " was written with a different configuration");
    }
    if (!(ck.vocab == corpus.vocab)) throw DataError("resume: vocabulary differs from the prepared features");
    model = std::move(ck.model);
    adam = std::move(ck.optimizer);
    state = ck.state;
    log << "train: resuming at step " << (state ? state->step : 0) << "\n";
  } else {
    model = Model::make(cfg.model, cfg.seed);
  }
  Trainer trainer(model, cfg_in);
  if (adam && state) {
    trainer.optimizer() = std::move(*adam);
    trainer.state() = *state;
  }

  std::ofstream metrics(metrics_path, opts.resume && state ? std::ios::app : std::ios::trunc);
  if (!metrics) throw DataError("cannot write " + metrics_path.string());
  if (!(opts.resume && state)) write_metrics_header(metrics);

  TrainRunResult res;
  const std::size_t start_step = trainer.state().step;
  auto save_last = [&] { save_checkpoint(last_path, model, corpus.vocab, cfg_in, &trainer.optimizer(), &trainer.state()); };
  Trainer::Hooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    write_metrics_row(metrics, m);
    res.last = m;
  };
  hooks.on_epoch = [&](const StepMetrics& m) {
    write_metrics_row(metrics, m);
    metrics.flush();
    res.last = m;
    log << "epoch " << m.epoch << " step " << m.step << " nll " << m.loss.nll << " total " << m.loss.total
        << " val " << m.val_total << "\n";
  };
  hooks.on_best = [&] { save_checkpoint(best_path, model, corpus.vocab, cfg_in); };
  hooks.on_checkpoint = [&] {
    const bool boundary = trainer.state().cursor == 0;
    if (boundary || (opts.save_every > 0 && trainer.state().step % opts.save_every == 0)) save_last();
  };
  trainer.fit(train, valid, hooks);
  save_last();
  if (!fs::exists(best_path)) save_checkpoint(best_path, model, corpus.vocab, cfg_in);
  res.state = trainer.state();
  res.updates_this_run = trainer.state().step - start_step;
  return res;
}

// ---- evaluation -------------------------------------------------------------------

double EvalReport::skipped_fraction() const {
  return considered == 0 ? 0.0 : static_cast<double>(skipped.size()) / static_cast<double>(considered);
}

EvalReport evaluate_manifest(const Manifest& manifest, const Summarizer* summarizer, Split split, std::ostream& warn) {
  EvalReport r;
  r.split = split_name(split);
  std::vector<std::pair<std::string, std::string>> source_target;
  for (const auto& s : manifest.samples) {
    try {
      source_target.emplace_back(read_file(manifest.resolve(s.text_path)), s.target);
    } catch (const DataError&) {
      // reported below when the sample is in the scored split
    }
  }
  if (!source_target.empty()) r.stats = corpus_stats(source_target);

  const auto chosen = manifest.split(split);
  r.considered = chosen.size();
  if (!summarizer) {
    for (const auto* s : chosen) {
      if (!fs::exists(manifest.resolve(s->text_path))) {
        r.skipped.push_back(s->id + ": missing " + s->text_path);
        warn << "evaluate: skipping " << r.skipped.back() << "\n";
      }
    }
    return r;
  }
  r.scored = true;
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto* s : chosen) {
    SampleInputs in;
    try {
      in = featurize_manifest_sample(*summarizer, manifest, *s);
    } catch (const DataError& e) {
      r.skipped.push_back(s->id + ": " + e.what());
      warn << "evaluate: skipping " << r.skipped.back() << "\n";
      continue;
    }
    ScoredSample row;
    row.id = s->id;
    row.candidate = summarizer->summarize(in);
    row.reference = s->target;
    row.rouge = rouge_all(row.candidate, row.reference);
    pairs.emplace_back(row.candidate, row.reference);
    r.rows.push_back(std::move(row));
  }
  r.rouge = mean_rouge(pairs);
  return r;
}

namespace {

ordered_json score_json(const RougeScore& s) {
  return ordered_json{{"precision", report_pct(s.precision)}, {"recall", report_pct(s.recall)}, {"f1", report_pct(s.f1)}};
}

std::string pct(double fraction) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << report_pct(fraction);
  return os.str();
}

std::string fixed2(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

void write_report_table(std::ostream& os, const EvalReport& r) {
  os << "samples            " << r.stats.samples << "\n"
     << "avg source words   " << fixed2(r.stats.avg_source_words) << "\n"
     << "avg target words   " << fixed2(r.stats.avg_target_words) << "\n"
     << "novel n-grams (%)  " << fixed2(r.stats.novel_pct) << "\n";
  if (!r.scored) return;
  os << "\nsplit " << r.split << ": " << r.rows.size() << " scored, " << r.skipped.size() << " skipped\n"
     << "           P       R       F1\n";
  auto line = [&](const char* name, const RougeScore& s) {
    os << std::left << std::setw(8) << name << std::right << std::setw(8) << pct(s.precision) << std::setw(8)
       << pct(s.recall) << std::setw(8) << pct(s.f1) << "\n";
  };
  line("ROUGE-1", r.rouge.mean.r1);
  line("ROUGE-2", r.rouge.mean.r2);
  line("ROUGE-L", r.rouge.mean.rl);
}

void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << "id,r1_p,r1_r,r1_f1,r2_p,r2_r,r2_f1,rl_p,rl_r,rl_f1,candidate,reference\n";
  for (const auto& row : r.rows) {
    os << csv_field(row.id);
    for (const auto* s : {&row.rouge.r1, &row.rouge.r2, &row.rouge.rl})
      os << ',' << pct(s->precision) << ',' << pct(s->recall) << ',' << pct(s->f1);
    os << ',' << csv_field(row.candidate) << ',' << csv_field(row.reference) << "\n";
  }
}

std::string report_json(const EvalReport& r) {
  ordered_json j;
  j["stats"] = {{"samples", r.stats.samples},
                {"avg_source_words", r.stats.avg_source_words},
                {"avg_target_words", r.stats.avg_target_words},
                {"novel_ngram_pct", r.stats.novel_pct}};
  if (r.scored) {
    j["split"] = r.split;
    j["scored"] = r.rows.size();
    j["skipped"] = r.skipped;
    j["rouge1"] = score_json(r.rouge.mean.r1);
    j["rouge2"] = score_json(r.rouge.mean.r2);
    j["rougeL"] = score_json(r.rouge.mean.rl);
    ordered_json rows = ordered_json::array();
    for (const auto& row : r.rows) {
      rows.push_back({{"id", row.id},
                      {"candidate", row.candidate},
                      {"reference", row.reference},
                      {"rouge1_f1", report_pct(row.rouge.r1.f1)},
                      {"rouge2_f1", report_pct(row.rouge.r2.f1)},
                      {"rougeL_f1", report_pct(row.rouge.rl.f1)}});
    }
    j["samples"] = std::move(rows);
  }
  return j.dump(2);
}

}  // namespace mtldr
