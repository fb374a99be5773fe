// SPDX-License-Identifier: Apache-2.0
#include "mtldr/manifest.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace mtldr {

using ordered_json = nlohmann::ordered_json;

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw ManifestError("split must be train, valid or test, got '" + s + "'");
}

std::filesystem::path Manifest::resolve(const std::string& p) const {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

std::vector<const SampleManifest*> Manifest::split(Split s) const {
  std::vector<const SampleManifest*> out;
  for (const auto& x : samples)
    if (x.split == s) out.push_back(&x);
  return out;
}

namespace {

std::string need_string(const ordered_json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw ManifestError(std::string("missing required field '") + key + "'");
  if (!it->is_string()) throw ManifestError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

std::optional<std::string> opt_string(const ordered_json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw ManifestError(std::string("field '") + key + "' must be a string");
  return it->get<std::string>();
}

std::vector<std::string> string_list(const ordered_json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) return {};
  if (!it->is_array()) throw ManifestError(std::string("metadata '") + key + "' must be an array of strings");
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) throw ManifestError(std::string("metadata '") + key + "' must be an array of strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

SampleManifest from_json(const ordered_json& j) {
  static const std::set<std::string> known{"id", "text_path", "audio_path", "video_feat_path", "target", "split", "metadata"};
  if (!j.is_object()) throw ManifestError("line is not a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ManifestError("unknown field '" + k + "'");
  SampleManifest s;
  s.id = need_string(j, "id");
  if (s.id.empty()) throw ManifestError("empty id");
  s.text_path = need_string(j, "text_path");
  s.audio_path = opt_string(j, "audio_path");
  s.video_feat_path = opt_string(j, "video_feat_path");
  s.target = need_string(j, "target");
  s.split = parse_split(need_string(j, "split"));
  if (auto it = j.find("metadata"); it != j.end()) {
    if (!it->is_object()) throw ManifestError("metadata must be an object");
    static const std::set<std::string> meta_keys{"title", "authors", "keywords", "venue", "year"};
    for (const auto& [k, v] : it->items())
      if (!meta_keys.count(k)) throw ManifestError("unknown metadata field '" + k + "'");
    s.metadata.title = opt_string(*it, "title");
    s.metadata.authors = string_list(*it, "authors");
    s.metadata.keywords = string_list(*it, "keywords");
    s.metadata.venue = opt_string(*it, "venue");
    if (auto y = it->find("year"); y != it->end() && !y->is_null()) {
      if (!y->is_number_integer()) throw ManifestError("metadata 'year' must be an integer");
      s.metadata.year = y->get<int>();
    }
  }
  return s;
}

ordered_json to_json(const SampleManifest& s) {
  ordered_json j;
  j["id"] = s.id;
  j["text_path"] = s.text_path;
  if (s.audio_path) j["audio_path"] = *s.audio_path;
  if (s.video_feat_path) j["video_feat_path"] = *s.video_feat_path;
  j["target"] = s.target;
  j["split"] = split_name(s.split);
  if (!s.metadata.empty()) {
    ordered_json m = ordered_json::object();
    if (s.metadata.title) m["title"] = *s.metadata.title;
    if (!s.metadata.authors.empty()) m["authors"] = s.metadata.authors;
    if (!s.metadata.keywords.empty()) m["keywords"] = s.metadata.keywords;
    if (s.metadata.venue) m["venue"] = *s.metadata.venue;
    if (s.metadata.year) m["year"] = *s.metadata.year;
    j["metadata"] = std::move(m);
  }
  return j;
}

}  // namespace

Manifest parse_manifest(std::istream& is, const std::filesystem::path& base_dir) {
  Manifest m;
  m.base_dir = base_dir;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    SampleManifest s;
    try {
      s = from_json(ordered_json::parse(line));
    } catch (const ordered_json::exception& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": malformed JSON: " + e.what());
    } catch (const ManifestError& e) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(s.id).second) {
      throw ManifestError("manifest line " + std::to_string(lineno) + ": duplicate id '" + s.id + "'");
    }
    m.samples.push_back(std::move(s));
  }
  if (m.samples.empty()) m.warnings.push_back("manifest has no samples");
  return m;
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ManifestError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

std::string serialize_sample(const SampleManifest& s) { return to_json(s).dump(); }

std::string serialize_manifest(const Manifest& m) {
  std::string out;
  for (const auto& s : m.samples) out += serialize_sample(s) + "\n";
  return out;
}

std::string split_summary(const Manifest& m) {
  std::ostringstream os;
  os << "train " << m.split(Split::kTrain).size() << " / valid " << m.split(Split::kValid).size() << " / test "
     << m.split(Split::kTest).size();
  return os.str();
}

}  // namespace mtldr
