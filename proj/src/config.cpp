// SPDX-License-Identifier: Apache-2.0
#include "mtldr/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mtldr {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw ConfigError("config: bad value '" + v + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(TrainConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define SIZE_FIELD(name, expr)                                                                              \
  {                                                                                                         \
    name, Field{[](TrainConfig& c, const std::string& k, const std::string& v) {                            \
                  c.expr = parse_number<std::size_t>(k, v);                                                 \
                },                                                                                          \
                [](const TrainConfig& c) { return std::to_string(c.expr); }}                                \
  }
#define REAL_FIELD(name, expr)                                                                                   \
  {                                                                                                              \
    name, Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_number<double>(k, v); }, \
                [](const TrainConfig& c) { return fmt(c.expr); }}                                                \
  }
#define BOOL_FIELD(name, expr)                                                                                  \
  {                                                                                                             \
    name, Field{[](TrainConfig& c, const std::string& k, const std::string& v) { c.expr = parse_bool(k, v); }, \
                [](const TrainConfig& c) { return std::string(c.expr ? "true" : "false"); }}                    \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f{
      SIZE_FIELD("epochs", epochs),
      SIZE_FIELD("accum_steps", accum_steps),
      REAL_FIELD("max_lr", max_lr),
      SIZE_FIELD("warmup_steps", warmup_steps),
      REAL_FIELD("mle_weight", mle_weight),
      REAL_FIELD("lambda", lambda),
      REAL_FIELD("alpha", alpha),
      {"seed", Field{[](TrainConfig& c, const std::string& k, const std::string& v) {
                       c.seed = parse_number<std::uint64_t>(k, v);
                     },
                     [](const TrainConfig& c) { return std::to_string(c.seed); }}},
      SIZE_FIELD("batch_size", batch_size),
      SIZE_FIELD("patience", patience),
      SIZE_FIELD("max_steps", max_steps),
      REAL_FIELD("ranking_margin", ranking_margin),
      SIZE_FIELD("vocab_size", vocab_size),
      SIZE_FIELD("max_len_train", max_len_train),
      SIZE_FIELD("d_model", model.d_model),
      SIZE_FIELD("heads", model.heads),
      SIZE_FIELD("hcl_n", model.hcl_n),
      SIZE_FIELD("dfhc_depth", model.dfhc_depth),
      SIZE_FIELD("latent_dim", model.latent_dim),
      SIZE_FIELD("flows", model.flows),
      SIZE_FIELD("decoder_depth", model.decoder_depth),
      SIZE_FIELD("max_target_positions", model.max_target_positions),
      BOOL_FIELD("use_audio", model.use_audio),
      BOOL_FIELD("use_video", model.use_video),
      SIZE_FIELD("beams", search.beams),
      SIZE_FIELD("max_len_test", search.max_len),
      BOOL_FIELD("block_trigrams", search.block_trigrams),
      REAL_FIELD("length_penalty", search.length_penalty),
  };
  return f;
}

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("config: unknown key '" + key + "'");
  it->second.set(cfg, key, value);
}

void validate(const TrainConfig& c) {
  auto positive = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("config: ") + what + " must be positive");
  };
  positive(c.epochs > 0, "epochs");
  positive(c.accum_steps > 0, "accum_steps");
  positive(c.max_lr > 0, "max_lr");
  positive(c.warmup_steps >= 1, "warmup_steps");
  positive(c.mle_weight > 0, "mle_weight");
  positive(c.batch_size > 0, "batch_size");
  positive(c.patience > 0, "patience");
  positive(c.search.beams > 0, "beams");
  positive(c.search.max_len > 0, "max_len_test");
  positive(c.max_len_train >= 2, "max_len_train");
  if (c.lambda < 0 || c.alpha < 0) throw ConfigError("config: lambda and alpha must be non-negative");
  if (c.model.d_model == 0 || c.model.heads == 0 || c.model.d_model % c.model.heads != 0) {
    throw ConfigError("config: d_model must be divisible by heads");
  }
  if (c.model.hcl_n == 0 || c.model.d_model % c.model.hcl_n != 0) throw ConfigError("config: hcl_n must divide d_model");
  if (c.model.latent_dim == 0) throw ConfigError("config: latent_dim must be positive");
  if (!c.model.use_audio && !c.model.use_video) throw ConfigError("config: both streams disabled");
  if (c.vocab_size < 64) throw ConfigError("config: vocab_size must be at least 64");
  if (c.model.max_target_positions < std::max(c.max_len_train, c.search.max_len + 1)) {
    throw ConfigError("config: max_target_positions shorter than the summary length caps");
  }
}

TrainConfig parse_run_config(std::istream& is) {
  TrainConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    try {
      set_config_value(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

TrainConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return parse_run_config(in);
}

std::string format_run_config(const TrainConfig& cfg) {
  std::ostringstream os;
  for (const auto& [k, f] : fields()) os << k << '=' << f.get(cfg) << '\n';
  return os.str();
}

}  // namespace mtldr
