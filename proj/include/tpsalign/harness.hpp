#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tpsalign/config.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/metrics.hpp"

namespace tpsalign {

// Embeds the dataset's test split with the checkpointed encoder (no DAM, no
// labels) and scores one protocol.
RetrievalMetrics evaluate_checkpoint(const std::string& checkpoint_path,
                                     const Dataset& ds, Protocol protocol);
std::vector<RetrievalMetrics> evaluate_checkpoint_all(
    const std::string& checkpoint_path, const Dataset& ds);

// One ablation axis: trains every setting with the base config's seed and
// budget, evaluates all four protocols, and writes a CSV
// (setting, then rank1/mAP/mINP per protocol). Returns the rows.
struct AblationRow {
  std::string setting;
  std::vector<RetrievalMetrics> metrics;  // ALL, GG, AA, AG
};
std::vector<AblationRow> run_ablation(const std::string& axis,
                                      const RunConfig& base, const Dataset& ds,
                                      const std::string& out_csv,
                                      const std::string& work_dir);

// Median forward wall time with LTPS placed everywhere vs. nowhere at equal
// shared parameters.
struct BenchReport {
  double median_with_ms = 0.0;
  double median_without_ms = 0.0;
  double overhead = 0.0;  // (with - without) / without
  int64_t iters = 0;
};
BenchReport run_bench(const RunConfig& cfg, int64_t iters);

// Renders a glyph, solves the spline for a pure rotation, and writes the
// warped image (PPM, warped grid drawn on top) plus the sampling coordinates
// as CSV (x,y per line, row-major over output pixels).
void run_warp_demo(const SyntheticSpec& spec, double angle_deg,
                   const std::string& out_dir);

// The gradient suite behind the `gradcheck` subcommand: finite differences
// on the alignment block (features, source points, rotation head), the mask
// generator (all parameters) and every loss, each over >= 5 screened seeds.
// Prints one line per check; returns true when everything passed.
bool run_gradient_suite(std::ostream& out);

}  // namespace tpsalign
