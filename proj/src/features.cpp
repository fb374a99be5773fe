// SPDX-License-Identifier: Apache-2.0
#include "mtldr/features.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numbers>
#include <set>
#include <sstream>

namespace mtldr {

// ---- WAV --------------------------------------------------------------------

namespace {

std::uint32_t rd_u32(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint32_t>(b[at]) | (static_cast<std::uint32_t>(b[at + 1]) << 8) |
         (static_cast<std::uint32_t>(b[at + 2]) << 16) | (static_cast<std::uint32_t>(b[at + 3]) << 24);
}
std::uint16_t rd_u16(std::span<const std::uint8_t> b, std::size_t at) {
  return static_cast<std::uint16_t>(b[at] | (b[at + 1] << 8));
}
void wr_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void wr_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

PcmAudio parse_wav(std::span<const std::uint8_t> b) {
  if (b.size() < 12 || std::string(b.begin(), b.begin() + 4) != "RIFF" ||
      std::string(b.begin() + 8, b.begin() + 12) != "WAVE") {
    throw FeatureError("wav: missing RIFF/WAVE header");
  }
  PcmAudio audio;
  bool have_fmt = false;
  std::size_t at = 12;
  while (at + 8 <= b.size()) {
    const std::string id(b.begin() + at, b.begin() + at + 4);
    const std::size_t len = rd_u32(b, at + 4);
    const std::size_t body = at + 8;
    if (body + len > b.size()) throw FeatureError("wav: truncated chunk '" + id + "'");
    if (id == "fmt ") {
      if (len < 16) throw FeatureError("wav: short fmt chunk");
      const auto format = rd_u16(b, body);
      audio.channels = rd_u16(b, body + 2);
      audio.rate = static_cast<int>(rd_u32(b, body + 4));
      const auto bits = rd_u16(b, body + 14);
      if (format != 1 || bits != 16) throw FeatureError("wav: only 16-bit PCM is supported");
      if (audio.channels < 1 || audio.channels > 2) throw FeatureError("wav: only mono or stereo is supported");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FeatureError("wav: data chunk before fmt");
      audio.samples.resize(len / 2);
      for (std::size_t i = 0; i < audio.samples.size(); ++i) {
        audio.samples[i] = static_cast<std::int16_t>(rd_u16(b, body + 2 * i)) / 32768.0;
      }
      return audio;
    }
    at = body + len + (len & 1);
  }
  throw FeatureError("wav: no data chunk");
}

PcmAudio read_wav(const std::filesystem::path& path) { return parse_wav(slurp(path)); }

std::vector<std::uint8_t> encode_wav(const PcmAudio& audio) {
  const auto data_bytes = static_cast<std::uint32_t>(audio.samples.size() * 2);
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  for (char c : std::string_view("RIFF")) out.push_back(static_cast<std::uint8_t>(c));
  wr_u32(out, 36 + data_bytes);
  for (char c : std::string_view("WAVEfmt ")) out.push_back(static_cast<std::uint8_t>(c));
  wr_u32(out, 16);
  wr_u16(out, 1);
  wr_u16(out, static_cast<std::uint16_t>(audio.channels));
  wr_u32(out, static_cast<std::uint32_t>(audio.rate));
  wr_u32(out, static_cast<std::uint32_t>(audio.rate * audio.channels * 2));
  wr_u16(out, static_cast<std::uint16_t>(audio.channels * 2));
  wr_u16(out, 16);
  for (char c : std::string_view("data")) out.push_back(static_cast<std::uint8_t>(c));
  wr_u32(out, data_bytes);
  for (double s : audio.samples) {
    const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
    wr_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  return out;
}

void write_wav(const std::filesystem::path& path, const PcmAudio& audio) {
  const auto bytes = encode_wav(audio);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// ---- resampling and MFCC -----------------------------------------------------

std::vector<double> resample_mono(const PcmAudio& audio) {
  static const std::set<int> rates{8000, 16000, 22050, 44100, 48000};
  if (!rates.count(audio.rate)) throw FeatureError("resample: unsupported rate " + std::to_string(audio.rate));
  if (audio.channels < 1 || audio.channels > 2) throw FeatureError("resample: 1 or 2 channels expected");
  const std::size_t n = audio.frames();
  if (n == 0) throw FeatureError("resample: empty signal");

  std::vector<double> mono(n);
  if (audio.channels == 1) {
    mono = audio.samples;
  } else {
    for (std::size_t i = 0; i < n; ++i) mono[i] = 0.5 * (audio.samples[2 * i] + audio.samples[2 * i + 1]);
  }
  if (audio.rate == kTargetRate) return mono;

  const double ratio = static_cast<double>(audio.rate) / kTargetRate;
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(n) / ratio));
  std::vector<double> out(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const double src = static_cast<double>(i) * ratio;
    const auto j = static_cast<std::size_t>(src);
    if (j + 1 >= n) {
      out[i] = mono[n - 1];
      continue;
    }
    const double frac = src - static_cast<double>(j);
    out[i] = mono[j] + frac * (mono[j + 1] - mono[j]);
  }
  return out;
}

std::size_t frame_count(std::size_t samples) { return samples < kWindow ? 0 : (samples - kWindow) / kHop + 1; }

namespace {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Weight matrix [80 x 257], rows are filters over FFT bins.
const std::vector<double>& mel_weights() {
  static const std::vector<double> w = [] {
    const std::size_t bins = kFftSize / 2 + 1;
    std::vector<double> out(kMelBands * bins, 0.0);
    const auto& bands = mel_bands();
    for (std::size_t m = 0; m < kMelBands; ++m) {
      const auto& b = bands[m];
      for (std::size_t k = 0; k < bins; ++k) {
        const double f = static_cast<double>(k) * kTargetRate / kFftSize;
        double v = 0.0;
        if (f > b.lo_hz && f <= b.center_hz) v = (f - b.lo_hz) / (b.center_hz - b.lo_hz);
        else if (f > b.center_hz && f < b.hi_hz) v = (b.hi_hz - f) / (b.hi_hz - b.center_hz);
        out[m * bins + k] = v;
      }
    }
    return out;
  }();
  return w;
}

const std::vector<double>& hann() {
  static const std::vector<double> w = [] {
    std::vector<double> out(kWindow);
    for (std::size_t i = 0; i < kWindow; ++i)
      out[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / kWindow);
    return out;
  }();
  return w;
}

std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

const std::vector<MelBand>& mel_bands() {
  static const std::vector<MelBand> bands = [] {
    const double top = hz_to_mel(kTargetRate / 2.0);
    std::vector<double> edges(kMelBands + 2);
    for (std::size_t i = 0; i < edges.size(); ++i)
      edges[i] = mel_to_hz(top * static_cast<double>(i) / static_cast<double>(kMelBands + 1));
    std::vector<MelBand> out(kMelBands);
    for (std::size_t m = 0; m < kMelBands; ++m) out[m] = {edges[m], edges[m + 1], edges[m + 2]};
    return out;
  }();
  return bands;
}

Tensor mel_energies(std::span<const double> pcm) {
  const std::size_t frames = frame_count(pcm.size());
  if (frames == 0) {
    throw FeatureError("mfcc: signal of " + std::to_string(pcm.size()) + " samples is shorter than one " +
                       std::to_string(kWindow) + "-sample window");
  }
  const std::size_t bins = kFftSize / 2 + 1;
  double* in = fftw_alloc_real(kFftSize);
  fftw_complex* spectrum = fftw_alloc_complex(bins);
  fftw_plan plan;
  {
    // Planner calls are not thread-safe; execution is.
    std::lock_guard lock(fftw_plan_mutex());
    plan = fftw_plan_dft_r2c_1d(static_cast<int>(kFftSize), in, spectrum, FFTW_ESTIMATE);
  }
  const auto& win = hann();
  const auto& weights = mel_weights();
  Tensor out({frames, kMelBands});
  auto od = out.mutable_data();
  std::vector<double> mag(bins);
  for (std::size_t f = 0; f < frames; ++f) {
    std::fill(in, in + kFftSize, 0.0);
    for (std::size_t i = 0; i < kWindow; ++i) in[i] = pcm[f * kHop + i] * win[i];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) mag[k] = std::hypot(spectrum[k][0], spectrum[k][1]);
    for (std::size_t m = 0; m < kMelBands; ++m) {
      double acc = 0.0;
      for (std::size_t k = 0; k < bins; ++k) acc += weights[m * bins + k] * mag[k];
      od[f * kMelBands + m] = acc;
    }
  }
  {
    std::lock_guard lock(fftw_plan_mutex());
    fftw_destroy_plan(plan);
  }
  fftw_free(in);
  fftw_free(spectrum);
  return out;
}

Tensor mfcc(std::span<const double> pcm) {
  const Tensor energies = mel_energies(pcm);
  const std::size_t frames = energies.rows();
  static const std::vector<double> dct = [] {
    std::vector<double> m(kCepstra * kMelBands);
    for (std::size_t k = 0; k < kCepstra; ++k) {
      const double s = std::sqrt((k == 0 ? 1.0 : 2.0) / kMelBands);
      for (std::size_t n = 0; n < kMelBands; ++n)
        m[k * kMelBands + n] =
            s * std::cos(std::numbers::pi * static_cast<double>(k) * (static_cast<double>(n) + 0.5) / kMelBands);
    }
    return m;
  }();
  Tensor out({frames, kCepstra});
  auto od = out.mutable_data();
  std::vector<double> logs(kMelBands);
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t n = 0; n < kMelBands; ++n) logs[n] = std::log(std::max(energies.at(f, n), kLogFloor));
    for (std::size_t k = 0; k < kCepstra; ++k) {
      double acc = 0.0;
      for (std::size_t n = 0; n < kMelBands; ++n) acc += dct[k * kMelBands + n] * logs[n];
      od[f * kCepstra + k] = acc;
    }
  }
  return out;
}

AudioFeatures project_audio(const Tensor& frames, const Linear& proj, std::size_t fixed_len) {
  if (frames.rank() != 2 || frames.cols() != proj.weight.rows()) {
    throw DimensionError("project_audio: frames " + shape_str(frames.shape()) + " do not match the projection input");
  }
  AudioFeatures a;
  a.valid_frames = std::min(frames.rows(), fixed_len);
  if (a.valid_frames == 0) {
    a.frames = Tensor({fixed_len, proj.weight.cols()}, 0.0);
    return a;
  }
  Tensor kept = frames.rows() > fixed_len ? slice_rows(frames, 0, fixed_len) : frames;
  Tensor projected = proj(kept);
  if (a.valid_frames < fixed_len) {
    projected = concat_rows({projected, Tensor({fixed_len - a.valid_frames, proj.weight.cols()}, 0.0)});
  }
  a.frames = projected;
  return a;
}

VideoFeatures ingest_video(const Tensor& blocks, const Linear& proj) {
  if (blocks.rank() != 2 || blocks.cols() != kVideoBlockWidth) {
    throw DimensionError("ingest_video: expected [B x 2048] blocks, got " + shape_str(blocks.shape()));
  }
  if (blocks.rows() == 0) throw DimensionError("ingest_video: no blocks");
  if (proj.weight.rows() != kVideoBlockWidth) throw DimensionError("ingest_video: projection input must be 2048");
  return {proj(mean_rows(blocks)), blocks.rows()};
}

// ---- BPE --------------------------------------------------------------------

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

std::vector<std::string_view> whitespace_split(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > start) words.push_back(text.substr(start, i - start));
  }
  return words;
}

std::vector<std::string> word_symbols(std::string_view word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    std::size_t j = i + 1;
    while (j < word.size() && (static_cast<unsigned char>(word[j]) & 0xC0) == 0x80) ++j;
    out.emplace_back(word.substr(i, j - i));
    i = j;
  }
  out.back() += Vocabulary::kEndOfWord;
  return out;
}

using WordCounts = std::map<std::vector<std::string>, long>;

WordCounts count_words(const std::vector<std::string>& corpus) {
  WordCounts counts;
  for (const auto& text : corpus)
    for (auto w : whitespace_split(text)) ++counts[word_symbols(w)];
  return counts;
}

std::map<SymbolPair, long> count_pairs(const WordCounts& words) {
  std::map<SymbolPair, long> pairs;
  for (const auto& [syms, n] : words)
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) pairs[{syms[i], syms[i + 1]}] += n;
  return pairs;
}

std::vector<std::string> merge_pair(const std::vector<std::string>& syms, const SymbolPair& p) {
  std::vector<std::string> out;
  out.reserve(syms.size());
  for (std::size_t i = 0; i < syms.size(); ++i) {
    if (i + 1 < syms.size() && syms[i] == p.first && syms[i + 1] == p.second) {
      out.push_back(p.first + p.second);
      ++i;
    } else {
      out.push_back(syms[i]);
    }
  }
  return out;
}

}  // namespace

std::vector<std::vector<std::string>> split_words(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  for (auto w : whitespace_split(text)) out.push_back(word_symbols(w));
  return out;
}

std::map<SymbolPair, long> pair_frequencies(const std::vector<std::string>& corpus) {
  return count_pairs(count_words(corpus));
}

void Vocabulary::add(const std::string& token) {
  if (index_.count(token)) return;
  index_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(token);
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, std::size_t size) {
  if (size < 64) throw std::invalid_argument("vocabulary size must be at least 64");
  WordCounts words = count_words(corpus);
  if (words.empty()) throw FeatureError("vocabulary: empty corpus");

  Vocabulary v;
  for (const char* s : {"<pad>", "<s>", "</s>", "<unk>"}) v.add(s);
  std::set<std::string> base;
  for (const auto& [syms, n] : words) {
    for (const auto& s : syms) {
      const bool final = s.ends_with(kEndOfWord);
      const std::string bare = final ? s.substr(0, s.size() - kEndOfWord.size()) : s;
      base.insert(bare);
      base.insert(bare + std::string(kEndOfWord));
    }
  }
  for (const auto& s : base) v.add(s);

  while (v.size() < size) {
    const auto pairs = count_pairs(words);
    const SymbolPair* best = nullptr;
    long best_n = 0;
    for (const auto& [p, n] : pairs) {
      if (n > best_n) {  // map order makes the first maximum the lexicographically smallest
        best = &p;
        best_n = n;
      }
    }
    if (!best) break;
    const SymbolPair chosen = *best;
    WordCounts next;
    for (const auto& [syms, n] : words) next[merge_pair(syms, chosen)] += n;
    words = std::move(next);
    v.rank_.emplace(chosen, v.merges_.size());
    v.merges_.push_back(chosen);
    v.add(chosen.first + chosen.second);
  }
  return v;
}

std::vector<std::string> Vocabulary::apply_merges(std::vector<std::string> syms) const {
  while (syms.size() > 1) {
    std::size_t best_rank = SIZE_MAX;
    const SymbolPair* best = nullptr;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto it = rank_.find({syms[i], syms[i + 1]});
      if (it != rank_.end() && it->second < best_rank) {
        best_rank = it->second;
        best = &it->first;
      }
    }
    if (!best) break;
    syms = merge_pair(syms, *best);
  }
  return syms;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (auto w : whitespace_split(text))
    for (const auto& s : apply_merges(word_symbols(w))) ids.push_back(id(s));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kPadId || i == kBosId || i == kEosId) continue;
    if (i < 0 || static_cast<std::size_t>(i) >= tokens_.size() || i == kUnkId) {
      out += "<unk>";
      continue;
    }
    const std::string& t = tokens_[static_cast<std::size_t>(i)];
    if (t.ends_with(kEndOfWord)) {
      out.append(t, 0, t.size() - kEndOfWord.size());
      out += ' ';
    } else {
      out += t;
    }
  }
  if (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

void Vocabulary::write(std::ostream& os) const {
  for (std::size_t i = 0; i < tokens_.size(); ++i) os << tokens_[i] << '\t' << i << '\n';
  os << "#MERGES\n";
  for (const auto& [a, b] : merges_) os << a << ' ' << b << '\n';
}

Vocabulary Vocabulary::read(std::istream& is) {
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  bool in_merges = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!in_merges && line == "#MERGES") {
      in_merges = true;
      continue;
    }
    if (!in_merges) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw FeatureError("vocabulary line " + std::to_string(lineno) + ": missing tab");
      const std::string token = line.substr(0, tab);
      const long id = std::stol(line.substr(tab + 1));
      if (id != static_cast<long>(v.tokens_.size()) || v.index_.count(token)) {
        throw FeatureError("vocabulary line " + std::to_string(lineno) + ": ids must be dense and tokens unique");
      }
      v.add(token);
    } else {
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw FeatureError("vocabulary line " + std::to_string(lineno) + ": bad merge");
      SymbolPair p{line.substr(0, sp), line.substr(sp + 1)};
      v.rank_.emplace(p, v.merges_.size());
      v.merges_.push_back(std::move(p));
    }
  }
  if (v.tokens_.size() < 4) throw FeatureError("vocabulary: missing special tokens");
  return v;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FeatureError("cannot write " + path.string());
  write(out);
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureError("cannot open " + path.string());
  return read(in);
}

std::vector<int> tokenize(std::string_view text, const Vocabulary& vocab, std::size_t max_len) {
  std::vector<int> ids{kBosId};
  const auto body = vocab.encode(text);
  ids.insert(ids.end(), body.begin(), body.end());
  if (ids.size() + 1 <= max_len) {
    ids.push_back(kEosId);
  } else {
    ids.resize(max_len);
  }
  return ids;
}

}  // namespace mtldr
