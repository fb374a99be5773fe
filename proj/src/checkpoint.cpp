// SPDX-License-Identifier: Apache-2.0
#include "mtldr/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <map>
#include <sstream>

#include "mtldr/tensor_io.hpp"

namespace mtldr {

namespace {

constexpr char kMagic[4] = {'M', 'T', 'L', 'G'};

std::string params_blob(const ParamList& params) {
  std::ostringstream os(std::ios::binary);
  le::put_u32(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    le::put_string(os, p.name);
    write_tensor(os, p.tensor);
  }
  return os.str();
}

void restore_params(const std::string& blob, ParamList params, const std::string& segment) {
  std::istringstream is(blob, std::ios::binary);
  const std::uint32_t n = le::get_u32(is);
  if (n != params.size()) throw FormatError("checkpoint: segment " + segment + " has the wrong parameter count");
  for (auto& p : params) {
    const std::string name = le::get_string(is);
    if (name != p.name) throw FormatError("checkpoint: expected parameter " + p.name + ", found " + name);
    Tensor t = read_tensor(is);
    if (t.shape() != p.tensor.shape()) {
      throw FormatError("checkpoint: shape mismatch for " + name + ": " + shape_str(t.shape()) + " vs " +
                        shape_str(p.tensor.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), p.tensor.mutable_data().begin());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model& model, const Vocabulary& vocab,
                     const TrainConfig& config, const Adam* optimizer, const TrainState* state) {
  std::vector<std::pair<std::string, std::string>> segments;
  for (const auto& name : Model::segment_names()) segments.emplace_back(name, params_blob(model.segment(name)));
  {
    std::ostringstream os(std::ios::binary);
    le::put_u32(os, optimizer && state ? 1 : 0);
    if (optimizer && state) {
      optimizer->write(os);
      state->write(os);
    }
    segments.emplace_back("optimizer", os.str());
  }
  {
    std::ostringstream os;
    vocab.write(os);
    segments.emplace_back("vocab", os.str());
  }
  segments.emplace_back("config", format_run_config(config));

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, 4);
    le::put_u32(out, kCheckpointVersion);
    le::put_u32(out, static_cast<std::uint32_t>(segments.size()));
    for (const auto& [name, blob] : segments) {
      le::put_string(out, name);
      le::put_u64(out, blob.size());
      out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    }
    if (!out.flush()) throw FormatError("checkpoint write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint: " + path.string());
  const std::uint32_t version = le::get_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  const std::uint32_t count = le::get_u32(in);
  std::map<std::string, std::string> segs;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = le::get_string(in);
    const std::uint64_t len = le::get_u64(in);
    std::string blob(len, '\0');
    in.read(blob.data(), static_cast<std::streamsize>(len));
    if (!in) throw FormatError("checkpoint truncated in segment " + name);
    segs[name] = std::move(blob);
  }
  auto need = [&](const std::string& name) -> const std::string& {
    auto it = segs.find(name);
    if (it == segs.end()) throw FormatError("checkpoint missing segment " + name);
    return it->second;
  };

  Checkpoint ck;
  {
    std::istringstream is(need("config"));
    ck.config = parse_run_config(is);
  }
  {
    std::istringstream is(need("vocab"));
    ck.vocab = Vocabulary::read(is);
  }
  ModelConfig mc = ck.config.model;
  mc.vocab = ck.vocab.size();
  ck.model = Model::make(mc, ck.config.seed);
  for (const auto& name : Model::segment_names()) restore_params(need(name), ck.model.segment(name), name);
  {
    std::istringstream is(need("optimizer"), std::ios::binary);
    if (le::get_u32(is) == 1) {
      ck.optimizer = Adam::read(is);
      ck.state = TrainState::read(is);
    }
  }
  return ck;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string file_sha256(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

}  // namespace mtldr
