// SPDX-License-Identifier: Apache-2.0
//
// End-to-end plumbing shared by the command-line tool and the service:
// feature preparation, prepared-corpus loading, inference, training and
// evaluation runs.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "mtldr/checkpoint.hpp"
#include "mtldr/eval.hpp"
#include "mtldr/manifest.hpp"

namespace mtldr {

// Bad or missing input data (exit code 1 at the command line).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_file(const std::filesystem::path& path);  // DataError when unreadable
void write_file(const std::filesystem::path& path, std::string_view bytes);

// WAV bytes -> MFCC frames [T x 40].
Tensor mfcc_from_wav(std::string_view wav_bytes);
// Tensor-format bytes -> video blocks [B x 2048].
Tensor video_from_bytes(std::string_view bytes);

// BOS + ids cut to max_len - 2 + EOS.
std::vector<int> summary_target(std::string_view text, const Vocabulary& vocab, std::size_t max_len);

// ---- prepared features --------------------------------------------------------
//
// out_dir/vocab.txt, out_dir/index.jsonl, out_dir/features/<key>.{mfcc,video}.tnsr

struct PreparedSample {
  std::string id;
  Split split = Split::kTrain;
  std::vector<int> tokens;  // BOS ... EOS (source, cut to 512)
  std::vector<int> target;  // BOS ... EOS (full summary)
  bool has_audio = false;
  bool has_video = false;
  Tensor mfcc;   // zero placeholder [1 x 40] when has_audio is false
  Tensor video;  // [B x 2048]; zero placeholder [1 x 2048] when has_video is false
};

struct PrepareReport {
  std::size_t prepared = 0;
  std::size_t failed = 0;
  std::size_t failed_train = 0;
  std::vector<std::string> errors;
};

// Vocabulary from train-split texts and targets only. Deterministic: a rerun over
// unchanged inputs rewrites identical bytes.
PrepareReport prepare_features(const Manifest& manifest, const std::filesystem::path& out_dir, std::size_t vocab_size,
                               std::ostream& log);

struct PreparedCorpus {
  Vocabulary vocab;
  std::vector<PreparedSample> samples;
};

PreparedCorpus load_prepared(const std::filesystem::path& dir);

// Model inputs with the target cut to max_len_train; missing modalities left undefined.
SampleInputs to_inputs(const PreparedSample& s, std::size_t max_len_train);

// ---- inference ------------------------------------------------------------------

class Summarizer {
 public:
  explicit Summarizer(Checkpoint ck);

  // mfcc / video may be undefined.
  SampleInputs featurize(const std::string& id, std::string_view text, const Tensor& mfcc, const Tensor& video) const;
  std::vector<int> summarize_ids(const SampleInputs& inputs) const;
  std::string summarize(const SampleInputs& inputs) const;

  const Checkpoint& checkpoint() const { return ck_; }

 private:
  Checkpoint ck_;
};

// Reads the sample's files; DataError when one is missing or malformed.
SampleInputs featurize_manifest_sample(const Summarizer& s, const Manifest& m, const SampleManifest& sample);

// ---- runs -----------------------------------------------------------------------

struct TrainRunOptions {
  bool resume = false;
  std::size_t save_every = 0;  // also save last.mtlg every N updates; 0: epoch ends only
};

struct TrainRunResult {
  TrainState state;
  StepMetrics last;
  std::size_t updates_this_run = 0;
};

// Writes out_dir/{last.mtlg, best.mtlg, metrics.csv}.
TrainRunResult run_training(const TrainConfig& cfg, const std::filesystem::path& features_dir,
                            const std::filesystem::path& out_dir, const TrainRunOptions& opts, std::ostream& log);

struct ScoredSample {
  std::string id;
  std::string candidate;
  std::string reference;
  RougeTriple rouge;
};

struct EvalReport {
  std::string split;
  CorpusStats stats;  // over every sample whose text loads
  bool scored = false;
  std::vector<ScoredSample> rows;
  RougeMeans rouge;
  std::size_t considered = 0;
  std::vector<std::string> skipped;  // "id: reason"

  double skipped_fraction() const;
};

EvalReport evaluate_manifest(const Manifest& manifest, const Summarizer* summarizer, Split split, std::ostream& warn);

void write_report_table(std::ostream& os, const EvalReport& r);
void write_report_csv(std::ostream& os, const EvalReport& r);
std::string report_json(const EvalReport& r);

}  // namespace mtldr
