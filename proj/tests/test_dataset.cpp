#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "tpsalign/common.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/image_io.hpp"
#include "tpsalign/rng.hpp"

using namespace tpsalign;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("tpsalign_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.identities = 10;
  spec.samples_per_view = 4;
  spec.image_h = 32;
  spec.image_w = 16;
  spec.seed = 7;
  return spec;
}

}  // namespace

TEST_CASE("pgm round trip") {
  const fs::path dir = fresh_dir("pgm");
  Rng rng(42);
  Tensor img({9, 5});
  for (int64_t i = 0; i < img.numel(); ++i) img[i] = rng.uniform(0.0, 1.0);
  img[0] = 0.0;
  img[1] = 1.0;
  const std::string path = (dir / "t.pgm").string();
  write_pgm(path, img);
  const Tensor back = read_pgm(path);
  REQUIRE(back.shape(0) == 9);
  REQUIRE(back.shape(1) == 5);
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5 / 255.0 + 1e-12);
  // quantized values survive a second round trip exactly
  write_pgm(path, back);
  const Tensor again = read_pgm(path);
  for (int64_t i = 0; i < back.numel(); ++i) CHECK(again[i] == back[i]);
  fs::remove_all(dir);
}

TEST_CASE("pgm error paths") {
  const fs::path dir = fresh_dir("pgm_err");
  CHECK_THROWS_AS(read_pgm((dir / "missing.pgm").string()), IoError);
  {
    std::ofstream out(dir / "bad.pgm", std::ios::binary);
    out << "P5\n3 3\n255\nxy";  // truncated payload
  }
  CHECK_THROWS_AS(read_pgm((dir / "bad.pgm").string()), ConfigError);
  {
    std::ofstream out(dir / "p2.pgm", std::ios::binary);
    out << "P2\n1 1\n255\n0\n";
  }
  CHECK_THROWS_AS(read_pgm((dir / "p2.pgm").string()), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("render_sample is deterministic and in range") {
  const SyntheticSpec spec = small_spec();
  const Tensor a = render_sample(spec, 3, 1, 2);
  const Tensor b = render_sample(spec, 3, 1, 2);
  REQUIRE(a.shape(0) == spec.image_h);
  REQUIRE(a.shape(1) == spec.image_w);
  for (int64_t i = 0; i < a.numel(); ++i) {
    CHECK(a[i] == b[i]);
    CHECK(a[i] >= 0.0);
    CHECK(a[i] <= 1.0);
  }
  // a different sample index of the same identity differs somewhere
  const Tensor c = render_sample(spec, 3, 1, 3);
  bool any = false;
  for (int64_t i = 0; i < a.numel() && !any; ++i) any = a[i] != c[i];
  CHECK(any);
}

TEST_CASE("generate_dataset layout and split") {
  const SyntheticSpec spec = small_spec();
  const fs::path dir = fresh_dir("gen");
  const std::vector<SampleMeta> metas = generate_dataset(spec, dir.string());
  CHECK(metas.size() == 10u * 4u * 2u);

  std::set<int64_t> train_ids, test_ids;
  for (const SampleMeta& m : metas) {
    CHECK(fs::exists(dir / m.path));
    if (m.split == "train")
      train_ids.insert(m.identity);
    else
      test_ids.insert(m.identity);
    if (m.view == 0) {
      CHECK(std::abs(m.angle_deg) <= spec.ground_angle);
      CHECK(m.squash == 1.0);
      CHECK_FALSE(m.occluded);
    } else {
      CHECK(std::abs(m.angle_deg) <= spec.aerial_angle);
      CHECK(m.squash >= spec.squash_lo);
      CHECK(m.squash <= spec.squash_hi);
    }
  }
  CHECK(train_ids.size() == 5u);
  CHECK(test_ids.size() == 5u);
  for (int64_t id : train_ids) CHECK(test_ids.count(id) == 0u);

  // manifest header + one row per sample
  std::ifstream manifest(dir / "manifest.csv");
  std::string line;
  int64_t rows = -1;  // header
  while (std::getline(manifest, line))
    if (!line.empty()) ++rows;
  CHECK(rows == static_cast<int64_t>(metas.size()));
  fs::remove_all(dir);
}

TEST_CASE("generate_dataset is byte deterministic") {
  const SyntheticSpec spec = small_spec();
  const fs::path a = fresh_dir("det_a");
  const fs::path b = fresh_dir("det_b");
  const std::vector<SampleMeta> ma = generate_dataset(spec, a.string());
  const std::vector<SampleMeta> mb = generate_dataset(spec, b.string());
  REQUIRE(ma.size() == mb.size());
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  CHECK(slurp(a / "gen_meta.csv") == slurp(b / "gen_meta.csv"));
  for (size_t i = 0; i < ma.size(); ++i) {
    REQUIRE(ma[i].path == mb[i].path);
    CHECK(slurp(a / ma[i].path) == slurp(b / mb[i].path));
  }
  // a different seed must change the images
  SyntheticSpec other = spec;
  other.seed = 8;
  const fs::path c = fresh_dir("det_c");
  const std::vector<SampleMeta> mc = generate_dataset(other, c.string());
  bool any = false;
  for (size_t i = 0; i < ma.size() && !any; ++i)
    any = slurp(a / ma[i].path) != slurp(c / mc[i].path);
  CHECK(any);
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(c);
}

TEST_CASE("occlusion probability zero means no occlusions") {
  SyntheticSpec spec = small_spec();
  spec.occlusion_prob = 0.0;
  const fs::path dir = fresh_dir("noocc");
  const std::vector<SampleMeta> metas = generate_dataset(spec, dir.string());
  for (const SampleMeta& m : metas) CHECK_FALSE(m.occluded);
  fs::remove_all(dir);
}

TEST_CASE("load_dataset round trips the manifest") {
  const SyntheticSpec spec = small_spec();
  const fs::path dir = fresh_dir("load");
  const std::vector<SampleMeta> metas = generate_dataset(spec, dir.string());
  const Dataset ds = load_dataset(dir.string());

  REQUIRE(ds.images.size() == metas.size());
  CHECK(ds.image_h == spec.image_h);
  CHECK(ds.image_w == spec.image_w);
  for (size_t i = 0; i < metas.size(); ++i) {
    CHECK(ds.identities[i] == metas[i].identity);
    CHECK(ds.views[i] == metas[i].view);
    CHECK((ds.is_train[i] != 0) == (metas[i].split == "train"));
    REQUIRE(ds.images[i].rank() == 3);
    CHECK(ds.images[i].shape(0) == 1);
    CHECK(ds.images[i].shape(1) == spec.image_h);
    CHECK(ds.images[i].shape(2) == spec.image_w);
  }
  CHECK(ds.train_indices.size() == 40u);
  CHECK(ds.test_indices.size() == 40u);
  CHECK(ds.num_train_classes == 5);
  REQUIRE(ds.train_labels.size() == ds.train_indices.size());
  std::set<int64_t> seen;
  for (size_t i = 0; i < ds.train_indices.size(); ++i) {
    const int64_t lbl = ds.train_labels[i];
    CHECK(lbl >= 0);
    CHECK(lbl < ds.num_train_classes);
    seen.insert(lbl);
    // same raw identity always maps to the same compact label
    for (size_t j = 0; j < i; ++j)
      if (ds.identities[static_cast<size_t>(ds.train_indices[j])] ==
          ds.identities[static_cast<size_t>(ds.train_indices[i])])
        CHECK(ds.train_labels[j] == lbl);
  }
  CHECK(seen.size() == 5u);

  // loaded pixels match a direct render
  const Tensor direct = render_sample(spec, metas[0].identity, metas[0].view, 0);
  const Tensor& loaded = ds.images[0];
  for (int64_t r = 0; r < spec.image_h; ++r)
    for (int64_t c = 0; c < spec.image_w; ++c)
      CHECK(std::abs(loaded.at(0, r, c) - direct.at(r, c)) <=
            0.5 / 255.0 + 1e-12);
  fs::remove_all(dir);
}

TEST_CASE("spec validation") {
  SyntheticSpec spec = small_spec();
  spec.identities = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.squash_lo = 1.2;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.occlusion_prob = 1.5;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.image_h = 0;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}
