#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tpsalign/checkpoint.hpp"
#include "tpsalign/config.hpp"
#include "tpsalign/dam.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/encoder.hpp"
#include "tpsalign/losses.hpp"

namespace tpsalign {

// Resolves the parts of the encoder config that depend on the dataset.
EncoderConfig make_encoder_config(const RunConfig& cfg, int64_t image_h,
                                  int64_t image_w, int64_t num_classes);

// Run-config round trip through the named-tensor table (config.* entries) so
// a checkpoint alone can rebuild the model it was trained with.
void save_run_config(NamedTensors* out, const RunConfig& cfg,
                     const EncoderConfig& resolved);
RunConfig checkpoint_run_config(const NamedTensors& in);
EncoderConfig checkpoint_encoder_config(const NamedTensors& in);

void save_params(NamedTensors* out, const ParamRefs& params);
void load_params(const NamedTensors& in, const ParamRefs& params);
void save_bank(NamedTensors* out, const DamBank& bank);
DamBank load_bank(const NamedTensors& in, int64_t dim);

struct TrainOptions {
  std::string out_dir;     // metrics.jsonl and checkpoint.ckpt land here
  std::string resume;      // checkpoint to continue from; empty = fresh run
  int64_t max_steps = -1;  // cap steps run by this invocation; -1 = no cap
};

struct TrainResult {
  std::string checkpoint_path;
  int64_t first_step = 0;  // 1-based global index of the first step run
  int64_t steps_run = 0;
  std::vector<LossBreakdown> records;
};

// Trains on the dataset's train split. Every step appends one JSON line to
// metrics.jsonl; a non-finite total dumps the offending breakdown to stderr
// and throws NumericError. Batches are P identities x K instances drawn from
// a per-step seed stream, so resumed runs reproduce the fresh run's batches
// bit-exactly.
TrainResult train_model(const RunConfig& cfg, const Dataset& ds,
                        const TrainOptions& opts);

}  // namespace tpsalign
