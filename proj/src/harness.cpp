#include "tpsalign/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>

#include "tpsalign/checkpoint.hpp"
#include "tpsalign/common.hpp"
#include "tpsalign/dam.hpp"
#include "tpsalign/encoder.hpp"
#include "tpsalign/grad_check.hpp"
#include "tpsalign/image_io.hpp"
#include "tpsalign/losses.hpp"
#include "tpsalign/rng.hpp"
#include "tpsalign/tps.hpp"
#include "tpsalign/train.hpp"

namespace fs = std::filesystem;

namespace tpsalign {

namespace {

Tensor embed_test_split(Encoder& enc, const Dataset& ds,
                        std::vector<int64_t>* ids,
                        std::vector<int64_t>* views) {
  const EncoderConfig& cfg = enc.config();
  if (cfg.image_h != ds.image_h || cfg.image_w != ds.image_w)
    throw ConfigError("checkpoint was trained on a different image size");
  if (ds.test_indices.empty())
    throw ConfigError("dataset has no test split");
  const int64_t n = static_cast<int64_t>(ds.test_indices.size());
  Tensor embeds({n, cfg.dim});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t row = ds.test_indices[static_cast<size_t>(i)];
    const Encoder::Output out = enc.forward(
        ds.images[static_cast<size_t>(row)], ds.views[static_cast<size_t>(row)],
        nullptr);
    for (int64_t j = 0; j < cfg.dim; ++j) embeds.at(i, j) = out.embedding[j];
    ids->push_back(ds.identities[static_cast<size_t>(row)]);
    views->push_back(ds.views[static_cast<size_t>(row)]);
  }
  return embeds;
}

Encoder encoder_from_checkpoint(const NamedTensors& table) {
  Encoder enc(checkpoint_encoder_config(table));
  ParamRefs params;
  enc.collect_params(params);
  load_params(table, params);
  return enc;
}

}  // namespace

RetrievalMetrics evaluate_checkpoint(const std::string& checkpoint_path,
                                     const Dataset& ds, Protocol protocol) {
  const NamedTensors table = load_named_tensors(checkpoint_path);
  Encoder enc = encoder_from_checkpoint(table);
  std::vector<int64_t> ids, views;
  const Tensor embeds = embed_test_split(enc, ds, &ids, &views);
  return evaluate_embeddings(embeds, ids, views, protocol);
}

std::vector<RetrievalMetrics> evaluate_checkpoint_all(
    const std::string& checkpoint_path, const Dataset& ds) {
  const NamedTensors table = load_named_tensors(checkpoint_path);
  Encoder enc = encoder_from_checkpoint(table);
  std::vector<int64_t> ids, views;
  const Tensor embeds = embed_test_split(enc, ds, &ids, &views);
  std::vector<RetrievalMetrics> out;
  for (Protocol p : {Protocol::kAll, Protocol::kGroundGround,
                     Protocol::kAerialAerial, Protocol::kAerialGround})
    out.push_back(evaluate_embeddings(embeds, ids, views, p));
  return out;
}

std::vector<AblationRow> run_ablation(const std::string& axis,
                                      const RunConfig& base, const Dataset& ds,
                                      const std::string& out_csv,
                                      const std::string& work_dir) {
  struct Setting {
    std::string name;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Setting> settings;

  if (axis == "control_points") {
    for (int64_t k : {4, 9, 16, 25, 36})
      settings.push_back({std::to_string(k), [k](RunConfig& c) {
                            c.encoder.control_points = k;
                          }});
  } else if (axis == "placement") {
    for (const char* p :
         {"first_layer", "first_4", "middle_4", "last_4", "all"})
      settings.push_back({p, [p](RunConfig& c) { c.placement = p; }});
  } else if (axis == "dam") {
    settings.push_back({"none", [](RunConfig& c) { c.dam_enabled = false; }});
    for (const char* v : {"inner_batch", "memory_bank", "classification_matrix"})
      settings.push_back({v, [v](RunConfig& c) {
                            c.dam_enabled = true;
                            c.dam.variant = dam_variant_from_string(v);
                          }});
  } else if (axis == "rotation") {
    settings.push_back({"fixed_angle", [](RunConfig& c) {
                          c.encoder.rotation = RotationMode::kFixed;
                          c.encoder.fixed_angle = kPi / 4.0;
                          c.loss.alpha = 0.0;
                        }});
    settings.push_back({"ltps_no_deform_loss", [](RunConfig& c) {
                          c.encoder.rotation = RotationMode::kLearned;
                          c.loss.alpha = 0.0;
                        }});
    settings.push_back({"ltps_with_deform_loss", [](RunConfig& c) {
                          c.encoder.rotation = RotationMode::kLearned;
                          if (c.loss.alpha == 0.0) c.loss.alpha = 0.1;
                        }});
  } else {
    throw ConfigError(
        "unknown ablation axis: " + axis +
        " (expected control_points, placement, dam or rotation)");
  }

  std::vector<AblationRow> rows;
  for (const Setting& s : settings) {
    RunConfig cfg = base;
    s.apply(cfg);
    TrainOptions opts;
    opts.out_dir = (fs::path(work_dir) / (axis + "_" + s.name)).string();
    const TrainResult run = train_model(cfg, ds, opts);
    AblationRow row;
    row.setting = s.name;
    row.metrics = evaluate_checkpoint_all(run.checkpoint_path, ds);
    rows.push_back(std::move(row));
  }

  std::ofstream csv(out_csv, std::ios::binary);
  if (!csv) throw IoError("cannot write " + out_csv);
  csv << "setting";
  for (const char* p : {"ALL", "GG", "AA", "AG"})
    csv << "," << p << "_rank1," << p << "_mAP," << p << "_mINP";
  csv << "\n";
  char buf[32];
  for (const AblationRow& row : rows) {
    csv << row.setting;
    for (const RetrievalMetrics& m : row.metrics) {
      std::snprintf(buf, sizeof(buf), ",%.4f,%.4f,%.4f", m.rank1, m.map,
                    m.minp);
      csv << buf;
    }
    csv << "\n";
  }
  return rows;
}

BenchReport run_bench(const RunConfig& cfg, int64_t iters) {
  if (iters < 1) throw ConfigError("bench needs >= 1 iteration");
  const int64_t classes = std::max<int64_t>(2, cfg.data.identities / 2);

  RunConfig without = cfg;
  without.placement = "none";
  RunConfig with = cfg;
  with.placement = "all";

  EncoderConfig cfg_without = make_encoder_config(
      without, cfg.data.image_h, cfg.data.image_w, classes);
  EncoderConfig cfg_with =
      make_encoder_config(with, cfg.data.image_h, cfg.data.image_w, classes);

  Encoder plain(cfg_without);
  Encoder placed(cfg_with);
  {
    Rng rng(mix_seed(cfg.seed, 0xBE7C4));
    plain.init(rng);
    Rng rng2(mix_seed(cfg.seed, 0xBE7C5));
    placed.init(rng2);
    // share every common parameter so the comparison is at equal weights
    ParamRefs a, b;
    plain.collect_params(a);
    placed.collect_params(b);
    for (Param* q : b)
      for (Param* p : a)
        if (p->name == q->name) {
          q->value = p->value;
          break;
        }
  }

  Rng img_rng(mix_seed(cfg.seed, 0xBE7C6));
  Tensor image({1, cfg.data.image_h, cfg.data.image_w});
  for (int64_t i = 0; i < image.numel(); ++i) image[i] = img_rng.uniform();

  auto median_ms = [&](Encoder& enc) {
    for (int i = 0; i < 5; ++i) enc.forward(image, i % 2, nullptr);
    std::vector<double> times;
    times.reserve(static_cast<size_t>(iters));
    for (int64_t i = 0; i < iters; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      enc.forward(image, i % 2, nullptr);
      const auto t1 = std::chrono::steady_clock::now();
      times.push_back(
          std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };

  BenchReport report;
  report.iters = iters;
  report.median_without_ms = median_ms(plain);
  report.median_with_ms = median_ms(placed);
  report.overhead = (report.median_with_ms - report.median_without_ms) /
                    report.median_without_ms;
  return report;
}

void run_warp_demo(const SyntheticSpec& spec, double angle_deg,
                   const std::string& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory: " + out_dir);

  const Tensor image = render_sample(spec, 0, 0, 0);
  const int64_t h = image.shape(0), w = image.shape(1);
  write_pgm((fs::path(out_dir) / "input.pgm").string(), image);

  const double theta = angle_deg * kPi / 180.0;
  const Tensor grid = control_point_grid(16);
  const TpsSolution sol = solve_tps(grid, rotate_points(grid, theta));
  const Tensor centers = patch_centers(h, w);
  const Tensor coords = evaluate_warp(sol, centers);
  const Tensor warped =
      bilinear_sample(image.reshaped({h, w, 1}), coords).reshaped({h, w});

  Tensor rgb({h, w, 3});
  for (int64_t r = 0; r < h; ++r)
    for (int64_t c = 0; c < w; ++c)
      for (int64_t k = 0; k < 3; ++k) rgb.at(r, c, k) = warped.at(r, c);

  // overlay: where a coarse lattice lands under the warp
  const int64_t lattice = 7;
  Tensor pts({lattice * lattice, 2});
  for (int64_t i = 0; i < lattice; ++i)
    for (int64_t j = 0; j < lattice; ++j) {
      pts.at(i * lattice + j, 0) = -0.9 + 1.8 * static_cast<double>(j) /
                                              static_cast<double>(lattice - 1);
      pts.at(i * lattice + j, 1) = -0.9 + 1.8 * static_cast<double>(i) /
                                              static_cast<double>(lattice - 1);
    }
  const Tensor moved = evaluate_warp(sol, pts);
  for (int64_t i = 0; i < moved.shape(0); ++i) {
    const double gx = ((moved.at(i, 0) + 1.0) * static_cast<double>(w) - 1.0) / 2.0;
    const double gy = ((moved.at(i, 1) + 1.0) * static_cast<double>(h) - 1.0) / 2.0;
    const int64_t cc = static_cast<int64_t>(std::lround(gx));
    const int64_t rr = static_cast<int64_t>(std::lround(gy));
    if (rr < 0 || rr >= h || cc < 0 || cc >= w) continue;
    rgb.at(rr, cc, 0) = 1.0;
    rgb.at(rr, cc, 1) = 0.1;
    rgb.at(rr, cc, 2) = 0.1;
  }
  write_ppm((fs::path(out_dir) / "warp_demo.ppm").string(), rgb);

  std::ofstream csv(fs::path(out_dir) / "warp_grid.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write warp_grid.csv under " + out_dir);
  char buf[80];
  for (int64_t i = 0; i < coords.shape(0); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g\n", coords.at(i, 0),
                  coords.at(i, 1));
    csv << buf;
  }
}

namespace {

// ---- gradient suite ----

std::vector<double> pack(const std::vector<const Tensor*>& parts) {
  std::vector<double> out;
  for (const Tensor* t : parts)
    out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

void unpack(const std::vector<double>& point, const std::vector<Tensor*>& parts) {
  std::size_t at = 0;
  for (Tensor* t : parts)
    for (int64_t i = 0; i < t->numel(); ++i) (*t)[i] = point[at++];
}

bool coords_clear_of_kinks(const Tensor& coords, int64_t h, int64_t w,
                           double tol = 5e-3) {
  for (int64_t p = 0; p < coords.shape(0); ++p) {
    const double dims[2] = {static_cast<double>(w), static_cast<double>(h)};
    for (int axis = 0; axis < 2; ++axis) {
      const double g = ((coords.at(p, axis) + 1.0) * dims[axis] - 1.0) / 2.0;
      const double hi = dims[axis] - 1.0;
      if (std::abs(g) < tol || std::abs(g - hi) < tol) return false;
      if (g > 0.0 && g < hi) {
        const double frac = g - std::floor(g);
        if (frac < tol || frac > 1.0 - tol) return false;
      }
    }
  }
  return true;
}

struct SuiteCheck {
  std::string name;
  // Runs the check at one seed; returns whether the sampled point is clear
  // of kinks (usable), and when usable fills the report.
  std::function<bool(uint64_t, GradReport*)> attempt;
};

bool run_check(std::ostream& out, const SuiteCheck& check, int needed = 5,
               int pool = 24) {
  int passed = 0, used = 0;
  double worst = 0.0;
  for (uint64_t seed = 1; seed <= static_cast<uint64_t>(pool) && used < needed;
       ++seed) {
    GradReport report;
    if (!check.attempt(seed, &report)) continue;
    ++used;
    worst = std::max(worst, report.max_rel_err);
    if (report.pass) ++passed;
  }
  const bool ok = used >= needed && passed == used;
  out << (ok ? "PASS " : "FAIL ") << check.name << ": " << passed << "/"
      << used << " seeds, worst rel err " << worst << "\n";
  return ok;
}

Tensor tensor_of(std::vector<int64_t> shape, const std::vector<double>& vals) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = vals[static_cast<std::size_t>(i)];
  return t;
}

Tensor random_tensor(Rng& rng, std::vector<int64_t> shape, double lo,
                     double hi) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

bool check_ltps(uint64_t seed, GradReport* report) {
  const int64_t h = 3, w = 3, d = 4, k = 4;
  LtpsBlock block("ltps", k, h, w, d, 0.5, RotationMode::kLearned, 0.0, false,
                  false);
  Rng rng(mix_seed(seed, 0x6A01));
  block.init(rng);
  for (int64_t i = 0; i < block.source().value.numel(); ++i)
    block.source().value[i] += rng.uniform(-0.1, 0.1);
  // a non-vanishing head makes theta respond to the features
  for (int64_t i = 0; i < d; ++i)
    block.head_weight().value[i] = rng.uniform(-0.5, 0.5);
  block.head_bias().value[0] = rng.uniform(-0.3, 0.3);

  Tensor f = random_tensor(rng, {h, w, d}, -1.0, 1.0);
  Tensor cot = random_tensor(rng, {h, w, d}, -1.0, 1.0);

  LtpsBlock::Cache cache;
  block.forward(f, &cache);
  if (!coords_clear_of_kinks(cache.coords, h, w)) return false;

  std::vector<Tensor*> parts{&f, &block.source().value,
                             &block.head_weight().value,
                             &block.head_bias().value};
  const std::vector<double> point = pack({&f, &block.source().value,
                             &block.head_weight().value,
                             &block.head_bias().value});

  auto loss_at = [&](const std::vector<double>& x) {
    unpack(x, parts);
    const Tensor out = block.forward(f, nullptr);
    double loss = 0.0;
    for (int64_t i = 0; i < out.numel(); ++i) loss += cot[i] * out[i];
    return loss;
  };

  unpack(point, parts);
  LtpsBlock::Cache c2;
  const Tensor out = block.forward(f, &c2);
  (void)out;
  block.source().zero_grad();
  block.head_weight().zero_grad();
  block.head_bias().zero_grad();
  Tensor d_f({h, w, d});
  block.backward(c2, cot, 0.0, &d_f);

  const std::vector<double> analytic = pack({&d_f, &block.source().grad,
                                &block.head_weight().grad,
                                &block.head_bias().grad});
  *report = finite_diff_check(loss_at, point, analytic, 1e-5, 1e-4,
                              "ltps_forward");
  return true;
}

bool check_mask_generator(uint64_t seed, GradReport* report) {
  const int64_t d = 6;
  MaskGenerator gen("dam", d);
  Rng rng(mix_seed(seed, 0x6A02));
  gen.init(rng);
  Tensor f = random_tensor(rng, {d}, -1.0, 1.0);
  Tensor cot = random_tensor(rng, {d}, -1.0, 1.0);

  MaskGenerator::Cache cache;
  gen.forward(f, &cache);
  for (int64_t i = 0; i < cache.h_pre.numel(); ++i)
    if (std::abs(cache.h_pre[i]) < 1e-3) return false;

  std::vector<Tensor*> parts{&f, &gen.w1().value, &gen.b1().value,
                             &gen.w2().value, &gen.b2().value};
  const std::vector<double> point = pack({&f, &gen.w1().value, &gen.b1().value,
                             &gen.w2().value, &gen.b2().value});
  auto loss_at = [&](const std::vector<double>& x) {
    unpack(x, parts);
    MaskGenerator::Cache c;
    gen.forward(f, &c);
    double loss = 0.0;
    for (int64_t i = 0; i < d; ++i) loss += cot[i] * c.mask[i];
    return loss;
  };

  unpack(point, parts);
  MaskGenerator::Cache c2;
  gen.forward(f, &c2);
  ParamRefs params;
  gen.collect_params(params);
  for (Param* p : params) p->zero_grad();
  Tensor d_f({d});
  gen.backward(c2, cot, &d_f);
  const std::vector<double> analytic = pack({&d_f, &gen.w1().grad, &gen.b1().grad,
                                &gen.w2().grad, &gen.b2().grad});
  *report = finite_diff_check(loss_at, point, analytic, 1e-5, 1e-4,
                              "generate_mask");
  return true;
}

bool check_id_loss(uint64_t seed, GradReport* report) {
  Rng rng(mix_seed(seed, 0x6A03));
  const int64_t n = 4, c = 3;
  Tensor logits = random_tensor(rng, {n, c}, -2.0, 2.0);
  const std::vector<int64_t> labels{0, 2, 1, 2};
  const double smoothing = seed % 2 == 0 ? 0.1 : 0.0;

  auto loss_at = [&](const std::vector<double>& x) {
    return id_loss(tensor_of({n, c}, x), labels, smoothing, nullptr);
  };
  Tensor grad({n, c});
  id_loss(logits, labels, smoothing, &grad);
  *report = finite_diff_check(loss_at, logits.values(), grad.values(), 1e-5,
                              1e-4, "id_loss");
  return true;
}

bool check_triplet_loss(uint64_t seed, GradReport* report) {
  Rng rng(mix_seed(seed, 0x6A04));
  const int64_t n = 6, d = 3;
  Tensor f = random_tensor(rng, {n, d}, -1.0, 1.0);
  const std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};

  // screen: every anchor's hinge term away from the kink, all pairwise
  // distances separated (no selection ties), no coincident points
  std::vector<double> dist(static_cast<size_t>(n * n), 0.0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (int64_t k = 0; k < d; ++k) {
        const double diff = f.at(i, k) - f.at(j, k);
        s += diff * diff;
      }
      dist[static_cast<size_t>(i * n + j)] = std::sqrt(s);
      if (i != j && std::sqrt(s) < 1e-2) return false;
    }
  for (int64_t i = 0; i < n; ++i) {
    double hp = 0.0, hn = 1e30;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dd = dist[static_cast<size_t>(i * n + j)];
      if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)])
        hp = std::max(hp, dd);
      else
        hn = std::min(hn, dd);
    }
    if (std::abs(hp - hn + 0.3) < 1e-3) return false;
    for (int64_t j = 0; j < n; ++j)
      for (int64_t k = j + 1; k < n; ++k) {
        if (j == i || k == i) continue;
        if (std::abs(dist[static_cast<size_t>(i * n + j)] -
                     dist[static_cast<size_t>(i * n + k)]) < 1e-3)
          return false;
      }
  }

  auto loss_at = [&](const std::vector<double>& x) {
    return triplet_loss(tensor_of({n, d}, x), labels, 0.3, nullptr);
  };
  Tensor grad({n, d});
  triplet_loss(f, labels, 0.3, &grad);
  *report = finite_diff_check(loss_at, f.values(), grad.values(), 1e-5, 1e-4,
                              "triplet_loss");
  return true;
}

bool check_deformation_loss(uint64_t seed, GradReport* report) {
  Rng rng(mix_seed(seed, 0x6A05));
  const int64_t n = 5;
  Tensor angles = random_tensor(rng, {n}, -1.2, 1.2);
  for (int64_t i = 0; i < n; ++i)
    if (std::abs(angles[i]) < 1e-3) return false;

  auto loss_at = [&](const std::vector<double>& x) {
    return deformation_loss(x, nullptr);
  };
  std::vector<double> g(angles.values().size(), 0.0);
  deformation_loss(angles.values(), &g);
  *report = finite_diff_check(loss_at, angles.values(), g, 1e-5, 1e-4,
                              "deformation_loss");
  return true;
}

bool check_align_loss(uint64_t seed, GradReport* report) {
  Rng rng(mix_seed(seed, 0x6A06));
  const int64_t n = 3, d = 4;
  Tensor masks = random_tensor(rng, {n, d}, 0.1, 0.9);
  Tensor feats = random_tensor(rng, {n, d}, 0.3, 1.0);
  Tensor protos = random_tensor(rng, {n, d}, 0.3, 1.0);

  std::vector<Tensor*> parts{&masks, &feats, &protos};
  const std::vector<double> point = pack({&masks, &feats, &protos});
  auto loss_at = [&](const std::vector<double>& x) {
    unpack(x, parts);
    return align_loss(masks, feats, protos, nullptr, nullptr, nullptr,
                      nullptr);
  };
  unpack(point, parts);
  Tensor dm({n, d}), df({n, d}), dp({n, d});
  align_loss(masks, feats, protos, &dm, &df, &dp, nullptr);
  const std::vector<double> analytic = pack({&dm, &df, &dp});
  *report =
      finite_diff_check(loss_at, point, analytic, 1e-5, 1e-4, "align_loss");
  return true;
}

bool check_entropy_loss(uint64_t seed, GradReport* report) {
  Rng rng(mix_seed(seed, 0x6A07));
  const int64_t n = 3, d = 4;
  Tensor masks = random_tensor(rng, {n, d}, 0.05, 0.95);
  auto loss_at = [&](const std::vector<double>& x) {
    return entropy_loss(tensor_of({n, d}, x), nullptr);
  };
  Tensor grad({n, d});
  entropy_loss(masks, &grad);
  *report = finite_diff_check(loss_at, masks.values(), grad.values(), 1e-5,
                              1e-4, "entropy_loss");
  return true;
}

}  // namespace

bool run_gradient_suite(std::ostream& out) {
  const std::vector<SuiteCheck> checks{
      {"ltps_forward (features, source points, rotation head)", check_ltps},
      {"generate_mask (all parameters)", check_mask_generator},
      {"id_loss", check_id_loss},
      {"triplet_loss", check_triplet_loss},
      {"deformation_loss", check_deformation_loss},
      {"align_loss", check_align_loss},
      {"entropy_loss", check_entropy_loss},
  };
  bool ok = true;
  for (const SuiteCheck& c : checks) ok = run_check(out, c) && ok;
  out << (ok ? "gradient suite: all checks passed\n"
             : "gradient suite: FAILURES above\n");
  return ok;
}

}  // namespace tpsalign
