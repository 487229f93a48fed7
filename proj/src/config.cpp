#include "tpsalign/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tpsalign/common.hpp"

namespace tpsalign {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("value for " + key + " is not a number: '" + v + "'");
  return x;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw ConfigError("value for " + key + " is not an integer: '" + v + "'");
  return static_cast<int64_t>(x);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0' || v.find('-') != std::string::npos)
    throw ConfigError("value for " + key + " is not an unsigned integer: '" +
                      v + "'");
  return static_cast<uint64_t>(x);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw ConfigError("value for " + key + " is not a boolean: '" + v + "'");
}

}  // namespace

void RunConfig::validate() const {
  data.validate();
  loss.validate();
  if (batch_p < 2) throw ConfigError("optim.batch_p must be >= 2");
  if (batch_k < 2) throw ConfigError("optim.batch_k must be >= 2 (triplet mining)");
  if (lr <= 0.0) throw ConfigError("optim.lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
  if (epochs < 1) throw ConfigError("optim.epochs must be >= 1");
  if (warmup_epochs < -1) throw ConfigError("optim.warmup_epochs must be >= 0 or -1");
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every must be >= 0");
  if (bench_iters < 1) throw ConfigError("bench.iters must be >= 1");
  if (dam.momentum < 0.0 || dam.momentum > 1.0)
    throw ConfigError("dam.momentum must lie in [0, 1]");
}

void apply_config_line(RunConfig* cfg, const std::string& raw_key,
                       const std::string& raw_value) {
  const std::string key = trim(raw_key);
  const std::string v = trim(raw_value);
  if (key.empty()) throw ConfigError("empty config key");

  if (key == "seed") cfg->seed = parse_u64(key, v);

  else if (key == "data.identities") cfg->data.identities = parse_int(key, v);
  else if (key == "data.samples_per_view") cfg->data.samples_per_view = parse_int(key, v);
  else if (key == "data.image_h") cfg->data.image_h = parse_int(key, v);
  else if (key == "data.image_w") cfg->data.image_w = parse_int(key, v);
  else if (key == "data.ground_angle") cfg->data.ground_angle = parse_double(key, v);
  else if (key == "data.aerial_angle") cfg->data.aerial_angle = parse_double(key, v);
  else if (key == "data.squash_lo") cfg->data.squash_lo = parse_double(key, v);
  else if (key == "data.squash_hi") cfg->data.squash_hi = parse_double(key, v);
  else if (key == "data.occlusion_prob") cfg->data.occlusion_prob = parse_double(key, v);
  else if (key == "data.occlusion_width") cfg->data.occlusion_width = parse_double(key, v);
  else if (key == "data.noise_sigma") cfg->data.noise_sigma = parse_double(key, v);

  else if (key == "encoder.depth") cfg->encoder.depth = parse_int(key, v);
  else if (key == "encoder.dim") cfg->encoder.dim = parse_int(key, v);
  else if (key == "encoder.heads") cfg->encoder.heads = parse_int(key, v);
  else if (key == "encoder.patch") cfg->encoder.patch = parse_int(key, v);
  else if (key == "encoder.mlp_ratio") cfg->encoder.mlp_ratio = parse_int(key, v);

  else if (key == "ltps.placement") cfg->placement = v;
  else if (key == "ltps.eta") cfg->encoder.eta = parse_double(key, v);
  else if (key == "ltps.control_points") cfg->encoder.control_points = parse_int(key, v);
  else if (key == "ltps.rotation") cfg->encoder.rotation = rotation_mode_from_string(v);
  else if (key == "ltps.fixed_angle_deg")
    cfg->encoder.fixed_angle = parse_double(key, v) * kPi / 180.0;
  else if (key == "ltps.forward_warp") cfg->encoder.forward_warp = parse_bool(key, v);
  else if (key == "ltps.eta_trainable") cfg->encoder.eta_trainable = parse_bool(key, v);

  else if (key == "dam.enabled") cfg->dam_enabled = parse_bool(key, v);
  else if (key == "dam.variant") cfg->dam.variant = dam_variant_from_string(v);
  else if (key == "dam.momentum") cfg->dam.momentum = parse_double(key, v);

  else if (key == "loss.lambda") cfg->loss.lambda = parse_double(key, v);
  else if (key == "loss.alpha") cfg->loss.alpha = parse_double(key, v);
  else if (key == "loss.beta") cfg->loss.beta = parse_double(key, v);
  else if (key == "loss.margin") cfg->loss.margin = parse_double(key, v);
  else if (key == "loss.smoothing") cfg->loss.smoothing = parse_double(key, v);

  else if (key == "optim.lr") cfg->lr = parse_double(key, v);
  else if (key == "optim.weight_decay") cfg->weight_decay = parse_double(key, v);
  else if (key == "optim.epochs") cfg->epochs = parse_int(key, v);
  else if (key == "optim.warmup_epochs") cfg->warmup_epochs = parse_int(key, v);
  else if (key == "optim.batch_p") cfg->batch_p = parse_int(key, v);
  else if (key == "optim.batch_k") cfg->batch_k = parse_int(key, v);

  else if (key == "train.checkpoint_every") cfg->checkpoint_every = parse_int(key, v);
  else if (key == "bench.iters") cfg->bench_iters = parse_int(key, v);

  else throw ConfigError("unknown config key: " + key);
}

void load_config_file(RunConfig* cfg, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected key = value");
    apply_config_line(cfg, line.substr(0, eq), line.substr(eq + 1));
  }
}

void apply_config_override(RunConfig* cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like key=value: " + assignment);
  apply_config_line(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::vector<int64_t> resolve_placement(const std::string& placement,
                                       int64_t depth) {
  const std::string p = placement;
  if (p.empty() || p == "none") return {};
  if (p == "all" || p == "first_layer" || p == "first_4" || p == "middle_4" ||
      p == "last_4")
    return placement_presets(p, depth);
  // otherwise a comma-separated index list
  std::vector<int64_t> out;
  std::stringstream ss(p);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const long long idx = std::strtoll(item.c_str(), &end, 10);
    if (end == item.c_str() || *end != '\0')
      throw ConfigError("bad placement entry: '" + item + "'");
    out.push_back(static_cast<int64_t>(idx));
  }
  if (out.empty()) throw ConfigError("bad placement: '" + p + "'");
  return out;
}

}  // namespace tpsalign
