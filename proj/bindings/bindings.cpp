#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "tpsalign/config.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/harness.hpp"
#include "tpsalign/losses.hpp"
#include "tpsalign/metrics.hpp"
#include "tpsalign/tps.hpp"
#include "tpsalign/train.hpp"

namespace py = pybind11;
using namespace tpsalign;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
  std::vector<int64_t> shape(static_cast<size_t>(a.ndim()));
  for (py::ssize_t i = 0; i < a.ndim(); ++i)
    shape[static_cast<size_t>(i)] = a.shape(i);
  Tensor t(shape);
  const double* src = a.data();
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = src[i];
  return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.rank());
  for (int64_t i = 0; i < t.rank(); ++i)
    shape[static_cast<size_t>(i)] = static_cast<py::ssize_t>(t.shape(i));
  py::array_t<double> a(shape);
  double* dst = a.mutable_data();
  for (int64_t i = 0; i < t.numel(); ++i) dst[i] = t[i];
  return a;
}

SyntheticSpec spec_from_args(int64_t identities, int64_t samples_per_view,
                             int64_t image_h, int64_t image_w, uint64_t seed,
                             double aerial_angle, double occlusion_prob,
                             double noise_sigma) {
  SyntheticSpec spec;
  spec.identities = identities;
  spec.samples_per_view = samples_per_view;
  spec.image_h = image_h;
  spec.image_w = image_w;
  spec.seed = seed;
  spec.aerial_angle = aerial_angle;
  spec.occlusion_prob = occlusion_prob;
  spec.noise_sigma = noise_sigma;
  spec.validate();
  return spec;
}

py::dict metrics_dict(const RetrievalMetrics& m) {
  py::dict d;
  d["protocol"] = m.protocol;
  d["rank1"] = m.rank1;
  d["mAP"] = m.map;
  d["mINP"] = m.minp;
  d["queries"] = m.queries;
  d["skipped"] = m.skipped;
  return d;
}

RunConfig config_from_overrides(const std::vector<std::string>& overrides) {
  RunConfig cfg;
  for (const std::string& kv : overrides) apply_config_override(&cfg, kv);
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "cross-view alignment toolkit: spline warps, masked prototypes, "
            "retrieval metrics";

  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<NumericError>(m, "NumericError");
  py::register_exception<IoError>(m, "IoError");

  m.def(
      "generate_dataset",
      [](const std::string& out_dir, int64_t identities,
         int64_t samples_per_view, int64_t image_h, int64_t image_w,
         uint64_t seed, double aerial_angle, double occlusion_prob,
         double noise_sigma) {
        const SyntheticSpec spec =
            spec_from_args(identities, samples_per_view, image_h, image_w,
                           seed, aerial_angle, occlusion_prob, noise_sigma);
        return static_cast<int64_t>(generate_dataset(spec, out_dir).size());
      },
      py::arg("out_dir"), py::arg("identities") = 40,
      py::arg("samples_per_view") = 4, py::arg("image_h") = 64,
      py::arg("image_w") = 32, py::arg("seed") = 1,
      py::arg("aerial_angle") = 90.0, py::arg("occlusion_prob") = 0.3,
      py::arg("noise_sigma") = 0.02,
      "Render the synthetic benchmark; returns the sample count.");

  m.def(
      "render_sample",
      [](int64_t identity, int64_t view, int64_t index, int64_t image_h,
         int64_t image_w, uint64_t seed) {
        SyntheticSpec spec;
        spec.image_h = image_h;
        spec.image_w = image_w;
        spec.seed = seed;
        spec.identities = identity + 1;
        spec.validate();
        return array_from_tensor(render_sample(spec, identity, view, index));
      },
      py::arg("identity"), py::arg("view") = 0, py::arg("index") = 0,
      py::arg("image_h") = 64, py::arg("image_w") = 32, py::arg("seed") = 1,
      "One glyph image as an (H, W) array in [0, 1].");

  m.def(
      "train",
      [](const std::string& data_dir, const std::string& out_dir,
         const std::vector<std::string>& overrides, int64_t max_steps,
         const std::string& resume) {
        const RunConfig cfg = config_from_overrides(overrides);
        const Dataset ds = load_dataset(data_dir);
        TrainOptions opts;
        opts.out_dir = out_dir;
        opts.resume = resume;
        opts.max_steps = max_steps;
        const TrainResult res = train_model(cfg, ds, opts);
        py::list records;
        for (const LossBreakdown& b : res.records) {
          py::dict r;
          r["id"] = b.id;
          r["triplet"] = b.triplet;
          r["deform"] = b.deform;
          r["align"] = b.align;
          r["entropy"] = b.entropy;
          r["mask"] = b.mask;
          r["total"] = b.total;
          records.append(r);
        }
        py::dict out;
        out["checkpoint"] = res.checkpoint_path;
        out["first_step"] = res.first_step;
        out["steps_run"] = res.steps_run;
        out["records"] = records;
        return out;
      },
      py::arg("data_dir"), py::arg("out_dir"),
      py::arg("overrides") = std::vector<std::string>{},
      py::arg("max_steps") = -1, py::arg("resume") = std::string(),
      "Train on a generated dataset; overrides use the config file schema.");

  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& data_dir,
         const std::string& protocol) {
        const Dataset ds = load_dataset(data_dir);
        return metrics_dict(evaluate_checkpoint(
            checkpoint, ds, protocol_from_string(protocol)));
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("protocol") = "AG",
      "Score a trained checkpoint on the test split.");

  m.def(
      "evaluate_embeddings",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>&
             embeddings,
         const std::vector<int64_t>& identities,
         const std::vector<int64_t>& views, const std::string& protocol) {
        return metrics_dict(evaluate_embeddings(tensor_from_array(embeddings),
                                                identities, views,
                                                protocol_from_string(protocol)));
      },
      py::arg("embeddings"), py::arg("identities"), py::arg("views"),
      py::arg("protocol") = "ALL",
      "Self-retrieval metrics of an (N, D) embedding table.");

  m.def("average_precision", &average_precision, py::arg("flags"),
        "AP of one ranked relevance list.");
  m.def("inverse_negative_penalty", &inverse_negative_penalty,
        py::arg("flags"), "INP of one ranked relevance list.");

  m.def(
      "rotation_warp_grid",
      [](int64_t control_points, int64_t h, int64_t w, double theta) {
        const Tensor grid = control_point_grid(control_points);
        const TpsSolution sol = solve_tps(grid, rotate_points(grid, theta));
        return array_from_tensor(evaluate_warp(sol, patch_centers(h, w)));
      },
      py::arg("control_points") = 4, py::arg("h") = 8, py::arg("w") = 8,
      py::arg("theta") = 0.0,
      "Spline sampling grid (h*w, 2) for a pure in-plane rotation.");

  m.def(
      "deformation_loss",
      [](const std::vector<double>& angles) {
        return deformation_loss(angles, nullptr);
      },
      py::arg("angles"), "Mean absolute rotation angle.");
  m.def(
      "entropy_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>&
             masks) { return entropy_loss(tensor_from_array(masks), nullptr); },
      py::arg("masks"), "Mean binary entropy of an (N, D) mask table.");
  m.def(
      "align_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>&
             masks,
         const py::array_t<double, py::array::c_style | py::array::forcecast>&
             features,
         const py::array_t<double, py::array::c_style | py::array::forcecast>&
             prototypes) {
        return align_loss(tensor_from_array(masks),
                          tensor_from_array(features),
                          tensor_from_array(prototypes), nullptr, nullptr,
                          nullptr, nullptr);
      },
      py::arg("masks"), py::arg("features"), py::arg("prototypes"),
      "Masked feature-to-prototype alignment distance.");

  m.def(
      "gradcheck",
      []() {
        std::ostringstream out;
        const bool ok = run_gradient_suite(out);
        py::print(out.str());
        return ok;
      },
      "Finite difference audit; prints one line per check.");
}
