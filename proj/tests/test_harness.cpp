#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "tpsalign/common.hpp"
#include "tpsalign/harness.hpp"
#include "tpsalign/train.hpp"

using namespace tpsalign;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("tpsalign_hn_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.seed = 3;
  cfg.data.identities = 8;
  cfg.data.samples_per_view = 2;
  cfg.data.image_h = 16;
  cfg.data.image_w = 8;
  cfg.data.seed = 3;
  cfg.encoder.depth = 2;
  cfg.encoder.dim = 16;
  cfg.encoder.heads = 2;
  cfg.encoder.patch = 4;
  cfg.placement = "all";
  cfg.batch_p = 2;
  cfg.batch_k = 2;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  return cfg;
}

}  // namespace

TEST_CASE("gradient suite passes every check") {
  std::ostringstream out;
  const bool ok = run_gradient_suite(out);
  INFO(out.str());
  CHECK(ok);
  const std::string s = out.str();
  for (const char* op :
       {"ltps_forward", "generate_mask", "id_loss", "triplet_loss",
        "deformation_loss", "align_loss", "entropy_loss"})
    CHECK(s.find(std::string("PASS ") + op) != std::string::npos);
  CHECK(s.find("FAIL") == std::string::npos);
}

TEST_CASE("bench produces positive medians and a finite overhead") {
  const RunConfig cfg = tiny_config();
  const BenchReport r = run_bench(cfg, 15);
  CHECK(r.iters == 15);
  CHECK(r.median_with_ms > 0.0);
  CHECK(r.median_without_ms > 0.0);
  CHECK(r.overhead ==
        doctest::Approx((r.median_with_ms - r.median_without_ms) /
                        r.median_without_ms)
            .epsilon(1e-12));
}

TEST_CASE("warp demo writes image and grid artifacts") {
  SyntheticSpec spec;
  spec.identities = 1;
  spec.samples_per_view = 1;
  spec.image_h = 24;
  spec.image_w = 12;
  spec.seed = 5;
  const fs::path dir = fresh_dir("warp");
  run_warp_demo(spec, 30.0, dir.string());
  CHECK(fs::exists(dir / "input.pgm"));
  CHECK(fs::exists(dir / "warp_demo.ppm"));

  std::ifstream csv(dir / "warp_grid.csv");
  REQUIRE(csv.good());
  std::string line;
  int64_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    ++rows;
    double x = 0, y = 0;
    char comma = 0;
    std::istringstream ss(line);
    REQUIRE((ss >> x >> comma >> y));
    REQUIRE(comma == ',');
    CHECK(std::abs(x) < 3.0);
    CHECK(std::abs(y) < 3.0);
  }
  CHECK(rows == spec.image_h * spec.image_w);
  fs::remove_all(dir);
}

TEST_CASE("ablation writes one schema valid row per setting") {
  const RunConfig cfg = tiny_config();
  const fs::path data_dir = fresh_dir("abl_data");
  generate_dataset(cfg.data, data_dir.string());
  const Dataset ds = load_dataset(data_dir.string());

  const fs::path work = fresh_dir("abl_work");
  const fs::path csv_path = work / "rotation.csv";
  const std::vector<AblationRow> rows =
      run_ablation("rotation", cfg, ds, csv_path.string(), work.string());

  REQUIRE(rows.size() == 3u);
  CHECK(rows[0].setting == "fixed_angle");
  CHECK(rows[1].setting == "ltps_no_deform_loss");
  CHECK(rows[2].setting == "ltps_with_deform_loss");
  for (const AblationRow& row : rows) {
    REQUIRE(row.metrics.size() == 4u);
    for (const RetrievalMetrics& m : row.metrics) {
      CHECK(m.map >= 0.0);
      CHECK(m.map <= 100.0);
    }
  }

  std::ifstream csv(csv_path);
  REQUIRE(csv.good());
  std::string header;
  REQUIRE(std::getline(csv, header));
  CHECK(header ==
        "setting,ALL_rank1,ALL_mAP,ALL_mINP,GG_rank1,GG_mAP,GG_mINP,"
        "AA_rank1,AA_mAP,AA_mINP,AG_rank1,AG_mAP,AG_mINP");
  int64_t body = 0;
  std::string line;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    ++body;
    int64_t commas = 0;
    for (char c : line) commas += c == ',';
    CHECK(commas == 12);
  }
  CHECK(body == 3);

  CHECK_THROWS_AS(
      run_ablation("flux", cfg, ds, csv_path.string(), work.string()),
      ConfigError);
  fs::remove_all(data_dir);
  fs::remove_all(work);
}
