#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpsalign/dam.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/encoder.hpp"
#include "tpsalign/losses.hpp"

namespace tpsalign {

// Everything one run needs, in one bag. Keys are flat dotted names; the
// schema is documented in the README. Unknown keys are rejected so typos
// fail loudly.
struct RunConfig {
  uint64_t seed = 1;
  SyntheticSpec data;

  EncoderConfig encoder;       // placement stays empty here; see below
  std::string placement = "all";  // preset name, "none", or comma-joined indices

  bool dam_enabled = true;
  DamConfig dam;
  LossConfig loss;

  double lr = 3.5e-4;  // for a batch of 64, rescaled by the actual batch
  double weight_decay = 0.05;
  int64_t epochs = 4;
  int64_t warmup_epochs = -1;  // -1 resolves to epochs / 6
  int64_t batch_p = 8;
  int64_t batch_k = 4;
  int64_t checkpoint_every = 0;  // steps; 0 keeps only the final checkpoint
  int64_t bench_iters = 200;

  void validate() const;
};

// Parses "key = value" lines; '#' starts a comment. Values land on top of
// *cfg. Unknown keys or unparsable values throw ConfigError.
void apply_config_line(RunConfig* cfg, const std::string& key,
                       const std::string& value);
void load_config_file(RunConfig* cfg, const std::string& path);
// "key=value" override as passed on the command line.
void apply_config_override(RunConfig* cfg, const std::string& assignment);

// Resolves the placement string against a depth: preset names, "none"/"",
// or comma-separated layer indices.
std::vector<int64_t> resolve_placement(const std::string& placement,
                                       int64_t depth);

}  // namespace tpsalign
