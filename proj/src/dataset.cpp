#include "tpsalign/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "tpsalign/common.hpp"
#include "tpsalign/image_io.hpp"
#include "tpsalign/rng.hpp"

namespace fs = std::filesystem;

namespace tpsalign {

namespace {

constexpr double kDeg = kPi / 180.0;

// Seed-stream tags keeping identity appearance and sample pose independent.
constexpr uint64_t kIdentityStream = 0xA11CE000;
constexpr uint64_t kSampleStream = 0x5A3B1E00;

struct GlyphStyle {
  std::array<int, 8> cell_level;   // permutation of the shared levels
  std::array<double, 8> jitter;    // small per-cell offsets, identity-stable
};

GlyphStyle glyph_style(const SyntheticSpec& spec, int64_t identity) {
  Rng rng(mix_seed(spec.seed, kIdentityStream + static_cast<uint64_t>(identity)));
  GlyphStyle st;
  std::vector<int> perm{0, 1, 2, 3, 4, 5, 6, 7};
  rng.shuffle(perm);
  for (int i = 0; i < 8; ++i) {
    st.cell_level[static_cast<size_t>(i)] = perm[static_cast<size_t>(i)];
    st.jitter[static_cast<size_t>(i)] = rng.uniform(-0.02, 0.02);
  }
  return st;
}

// Glyph intensity at normalized coordinates (u right, v down), |u|,|v| <~ 1.
double glyph_value(const GlyphStyle& st, double u, double v) {
  constexpr double kBodyU = 0.62, kBodyV = 0.95, kPow = 2.5;
  constexpr double kBackground = 0.06;
  static const std::array<double, 8> kLevels = {0.15, 0.26, 0.37, 0.48,
                                                0.59, 0.70, 0.81, 0.92};
  const double s = std::pow(std::abs(u) / kBodyU, kPow) +
                   std::abs(std::pow(std::abs(v) / kBodyV, kPow));
  if (s > 1.0) return kBackground;

  // orientation beacon (head) and notch (tail) break rotational symmetry
  const double du_b = u, dv_b = v + 0.72;
  if (du_b * du_b + dv_b * dv_b < 0.17 * 0.17) return 1.0;
  const double du_n = u, dv_n = v - 0.82;
  if (du_n * du_n + dv_n * dv_n < 0.10 * 0.10) return 0.03;
  if (s > 0.85) return 0.10;  // dark rim

  const int col = u > 0.0 ? 1 : 0;
  int row = static_cast<int>(std::floor((v + kBodyV) / (2.0 * kBodyV / 4.0)));
  row = std::clamp(row, 0, 3);
  const int cell = row * 2 + col;
  const size_t lvl = static_cast<size_t>(st.cell_level[static_cast<size_t>(cell)]);
  return kLevels[lvl] + st.jitter[static_cast<size_t>(cell)];
}

}  // namespace

void SyntheticSpec::validate() const {
  if (identities < 1) throw ConfigError("identities must be >= 1");
  if (samples_per_view < 1) throw ConfigError("samples_per_view must be >= 1");
  if (image_h < 8 || image_w < 8) throw ConfigError("image size must be >= 8");
  if (ground_angle < 0.0 || aerial_angle < 0.0 || aerial_angle > 90.0)
    throw ConfigError("angle ranges must lie in [0, 90] degrees");
  if (squash_lo <= 0.0 || squash_hi > 1.0 || squash_lo > squash_hi)
    throw ConfigError("squash range must satisfy 0 < lo <= hi <= 1");
  if (occlusion_prob < 0.0 || occlusion_prob > 1.0)
    throw ConfigError("occlusion_prob must lie in [0, 1]");
  if (occlusion_width <= 0.0 || occlusion_width >= 1.0)
    throw ConfigError("occlusion_width must lie in (0, 1)");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
}

Tensor render_sample(const SyntheticSpec& spec, int64_t identity, int64_t view,
                     int64_t index) {
  const GlyphStyle style = glyph_style(spec, identity);
  Rng rng(mix_seed(spec.seed,
                   kSampleStream + static_cast<uint64_t>(identity) * 1000003ull +
                       static_cast<uint64_t>(view) * 500009ull +
                       static_cast<uint64_t>(index)));

  const double max_angle = view == 0 ? spec.ground_angle : spec.aerial_angle;
  const double theta = rng.uniform(-max_angle, max_angle) * kDeg;
  double squash = 1.0;
  bool occluded = false;
  double occl_center = 0.0;
  if (view == 1) {
    squash = rng.uniform(spec.squash_lo, spec.squash_hi);
    if (rng.uniform() < spec.occlusion_prob) {
      occluded = true;
      occl_center = rng.uniform(0.15, 0.85);
    }
  }

  const int64_t h = spec.image_h, w = spec.image_w;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double scale = static_cast<double>(std::min(h, w)) / 2.0 - 1.5;
  const double ct = std::cos(theta), snt = std::sin(theta);
  const int64_t band_lo =
      occluded ? static_cast<int64_t>((occl_center - spec.occlusion_width / 2.0) *
                                      static_cast<double>(h))
               : 0;
  const int64_t band_hi =
      occluded ? band_lo + static_cast<int64_t>(spec.occlusion_width *
                                                static_cast<double>(h))
               : -1;

  Tensor img({h, w});
  for (int64_t r = 0; r < h; ++r) {
    for (int64_t c = 0; c < w; ++c) {
      double acc = 0.0;
      // 2 x 2 supersampling keeps cell borders from aliasing harshly
      for (int sr = 0; sr < 2; ++sr) {
        for (int sc = 0; sc < 2; ++sc) {
          const double px = (static_cast<double>(c) + 0.25 + 0.5 * sc - cx) / scale;
          double py = (static_cast<double>(r) + 0.25 + 0.5 * sr - cy) / scale;
          py /= squash;  // invert the vertical foreshortening
          const double u = ct * px + snt * py;   // rotate back by -theta
          const double v = -snt * px + ct * py;
          acc += glyph_value(style, u, v);
        }
      }
      double val = acc / 4.0;
      if (occluded && r >= band_lo && r < band_hi) val = 0.5;
      if (spec.noise_sigma > 0.0) val += rng.normal(0.0, spec.noise_sigma);
      img.at(r, c) = std::clamp(val, 0.0, 1.0);
    }
  }
  return img;
}

std::vector<SampleMeta> generate_dataset(const SyntheticSpec& spec,
                                         const std::string& out_dir) {
  spec.validate();
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  std::vector<SampleMeta> metas;
  std::ostringstream manifest, gen_meta;
  manifest << "path,identity,view,split\n";
  gen_meta << "path,angle_deg,squash,occluded\n";

  const int64_t train_cut = spec.identities / 2;
  for (int64_t id = 0; id < spec.identities; ++id) {
    for (int64_t view = 0; view < 2; ++view) {
      for (int64_t idx = 0; idx < spec.samples_per_view; ++idx) {
        SampleMeta m;
        char name[64];
        std::snprintf(name, sizeof(name), "images/id%04lld_%c_%02lld.pgm",
                      static_cast<long long>(id), view == 0 ? 'g' : 'a',
                      static_cast<long long>(idx));
        m.path = name;
        m.identity = id;
        m.view = view;
        m.split = id < train_cut ? "train" : "test";

        // re-derive the pose draws so the metadata matches the raster exactly
        Rng rng(mix_seed(spec.seed, kSampleStream +
                                        static_cast<uint64_t>(id) * 1000003ull +
                                        static_cast<uint64_t>(view) * 500009ull +
                                        static_cast<uint64_t>(idx)));
        const double max_angle =
            view == 0 ? spec.ground_angle : spec.aerial_angle;
        m.angle_deg = rng.uniform(-max_angle, max_angle);
        if (view == 1) {
          m.squash = rng.uniform(spec.squash_lo, spec.squash_hi);
          m.occluded = rng.uniform() < spec.occlusion_prob;
        }

        Tensor img = render_sample(spec, id, view, idx);
        write_pgm((fs::path(out_dir) / m.path).string(), img);

        manifest << m.path << "," << m.identity << ","
                 << (m.view == 0 ? "ground" : "aerial") << "," << m.split << "\n";
        char ang[32], sq[32];
        std::snprintf(ang, sizeof(ang), "%.17g", m.angle_deg);
        std::snprintf(sq, sizeof(sq), "%.17g", m.squash);
        gen_meta << m.path << "," << ang << "," << sq << ","
                 << (m.occluded ? 1 : 0) << "\n";
        metas.push_back(std::move(m));
      }
    }
  }

  {
    std::ofstream mf(fs::path(out_dir) / "manifest.csv", std::ios::binary);
    if (!mf) throw IoError("cannot write manifest.csv under " + out_dir);
    mf << manifest.str();
  }
  {
    std::ofstream gf(fs::path(out_dir) / "gen_meta.csv", std::ios::binary);
    if (!gf) throw IoError("cannot write gen_meta.csv under " + out_dir);
    gf << gen_meta.str();
  }
  return metas;
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.csv");
  if (!mf) throw IoError("cannot open manifest.csv under " + dir);
  std::string line;
  if (!std::getline(mf, line) || line != "path,identity,view,split")
    throw ConfigError("unexpected manifest header in " + dir);

  Dataset ds;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string path, id_s, view_s, split_s;
    if (!std::getline(ss, path, ',') || !std::getline(ss, id_s, ',') ||
        !std::getline(ss, view_s, ',') || !std::getline(ss, split_s))
      throw ConfigError("malformed manifest row: " + line);
    int64_t view;
    if (view_s == "ground") {
      view = 0;
    } else if (view_s == "aerial") {
      view = 1;
    } else {
      throw ConfigError("unknown view in manifest: " + view_s);
    }
    if (split_s != "train" && split_s != "test")
      throw ConfigError("unknown split in manifest: " + split_s);

    Tensor img = read_pgm((fs::path(dir) / path).string());
    if (ds.images.empty()) {
      ds.image_h = img.shape(0);
      ds.image_w = img.shape(1);
    } else if (img.shape(0) != ds.image_h || img.shape(1) != ds.image_w) {
      throw ConfigError("inconsistent image sizes in " + dir);
    }
    ds.images.push_back(img.reshaped({1, ds.image_h, ds.image_w}));
    ds.identities.push_back(std::stoll(id_s));
    ds.views.push_back(view);
    ds.is_train.push_back(split_s == "train" ? 1 : 0);
  }
  if (ds.images.empty()) throw ConfigError("empty manifest in " + dir);

  std::map<int64_t, int64_t> label_of;
  for (size_t i = 0; i < ds.images.size(); ++i) {
    if (ds.is_train[i]) {
      label_of.emplace(ds.identities[i], 0);
    }
  }
  int64_t next = 0;
  for (auto& [id, lbl] : label_of) lbl = next++;
  ds.num_train_classes = next;
  for (size_t i = 0; i < ds.images.size(); ++i) {
    if (ds.is_train[i]) {
      ds.train_indices.push_back(static_cast<int64_t>(i));
      ds.train_labels.push_back(label_of.at(ds.identities[i]));
    } else {
      ds.test_indices.push_back(static_cast<int64_t>(i));
    }
  }
  return ds;
}

}  // namespace tpsalign
