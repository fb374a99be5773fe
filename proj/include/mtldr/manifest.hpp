// SPDX-License-Identifier: Apache-2.0
//
// Dataset manifest: JSON lines, one sample per line.
//   {"id", "text_path", "audio_path"?, "video_feat_path"?, "target", "split", "metadata"?}
// Relative paths resolve against the manifest's directory.
#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtldr {

class ManifestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { kTrain, kValid, kTest };

const char* split_name(Split s);
Split parse_split(const std::string& s);  // ManifestError on anything else

struct SampleMetadata {
  std::optional<std::string> title;
  std::vector<std::string> authors;
  std::vector<std::string> keywords;
  std::optional<std::string> venue;
  std::optional<int> year;

  bool empty() const { return !title && authors.empty() && keywords.empty() && !venue && !year; }
  bool operator==(const SampleMetadata&) const = default;
};

struct SampleManifest {
  std::string id;
  std::string text_path;
  std::optional<std::string> audio_path;
  std::optional<std::string> video_feat_path;
  std::string target;
  Split split = Split::kTrain;
  SampleMetadata metadata;

  bool operator==(const SampleManifest&) const = default;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<SampleManifest> samples;
  std::vector<std::string> warnings;

  std::filesystem::path resolve(const std::string& p) const;
  std::vector<const SampleManifest*> split(Split s) const;
};

// Errors carry the 1-based line number; duplicate ids name the id.
Manifest parse_manifest(std::istream& is, const std::filesystem::path& base_dir = {});
Manifest load_manifest(const std::filesystem::path& path);

// Canonical one-line JSON; parse(serialize(x)) == x.
std::string serialize_sample(const SampleManifest& s);
std::string serialize_manifest(const Manifest& m);

// "train 3 / valid 1 / test 2"
std::string split_summary(const Manifest& m);

}  // namespace mtldr
