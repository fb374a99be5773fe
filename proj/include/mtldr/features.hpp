// SPDX-License-Identifier: Apache-2.0
//
// Modality front ends: PCM audio to MFCC frames, pooled video block vectors,
// and a byte-pair subword vocabulary for text.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mtldr/nn.hpp"

namespace mtldr {

// Malformed or unsupported input data.
class FeatureError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- audio ------------------------------------------------------------------

struct PcmAudio {
  std::vector<double> samples;  // interleaved, scaled to [-1, 1)
  int rate = 16000;
  int channels = 1;

  std::size_t frames() const { return channels > 0 ? samples.size() / static_cast<std::size_t>(channels) : 0; }
};

// RIFF/WAVE, PCM 16-bit little-endian only.
PcmAudio parse_wav(std::span<const std::uint8_t> bytes);
PcmAudio read_wav(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_wav(const PcmAudio& audio);
void write_wav(const std::filesystem::path& path, const PcmAudio& audio);

constexpr int kTargetRate = 16000;
constexpr std::size_t kWindow = 480;  // 30 ms
constexpr std::size_t kHop = 160;     // 10 ms
constexpr std::size_t kFftSize = 512;
constexpr std::size_t kMelBands = 80;
constexpr std::size_t kCepstra = 40;
constexpr double kLogFloor = 1e-10;
constexpr std::size_t kFixedAudioLen = 256;

// Channel average followed by linear-interpolation resampling to 16 kHz.
std::vector<double> resample_mono(const PcmAudio& audio);

std::size_t frame_count(std::size_t samples);

struct MelBand {
  double lo_hz, center_hz, hi_hz;
};
// Triangular HTK-mel filters spanning 0..8000 Hz.
const std::vector<MelBand>& mel_bands();

// Per-frame filter-bank energies (before the log) [T x 80].
Tensor mel_energies(std::span<const double> pcm16k);
// log filter-bank energies -> orthonormal DCT-II, first 40 coefficients [T x 40].
Tensor mfcc(std::span<const double> pcm16k);

struct AudioFeatures {
  Tensor frames;  // [fixed_len x d]
  std::size_t valid_frames = 0;
};

// Affine projection per frame, then zero rows appended or the tail clipped.
AudioFeatures project_audio(const Tensor& mfcc_frames, const Linear& proj, std::size_t fixed_len = kFixedAudioLen);

// ---- video ------------------------------------------------------------------

constexpr std::size_t kVideoBlockWidth = 2048;

struct VideoFeatures {
  Tensor global_vec;  // [1 x d]
  std::size_t block_count = 0;
};

VideoFeatures ingest_video(const Tensor& blocks, const Linear& proj);

// ---- text -------------------------------------------------------------------

constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr std::size_t kMaxSourceLength = 512;

using SymbolPair = std::pair<std::string, std::string>;

// Words split on whitespace, each word split into UTF-8 characters with the
// end-of-word marker appended to the last one.
std::vector<std::vector<std::string>> split_words(std::string_view text);

// Adjacent-symbol pair counts over a corpus before any merge.
std::map<SymbolPair, long> pair_frequencies(const std::vector<std::string>& corpus);

class Vocabulary {
 public:
  static constexpr std::string_view kEndOfWord = "</w>";

  // Greedy merges by pair frequency (ties: lexicographically smallest pair)
  // until `size` tokens exist or no pair remains.
  static Vocabulary build(const std::vector<std::string>& corpus, std::size_t size = 4096);

  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int id(const std::string& token) const;  // kUnkId when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::vector<SymbolPair>& merges() const { return merges_; }

  // "token<TAB>id" lines, "#MERGES", then "left right" lines.
  void write(std::ostream& os) const;
  static Vocabulary read(std::istream& is);
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_ && merges_ == other.merges_; }

 private:
  void add(const std::string& token);
  std::vector<std::string> apply_merges(std::vector<std::string> symbols) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::vector<SymbolPair> merges_;
  std::map<SymbolPair, std::size_t> rank_;
};

// BOS + subword ids + EOS, cut to max_len (EOS dropped when cut).
std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len = kMaxSourceLength);

}  // namespace mtldr
