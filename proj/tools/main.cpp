#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tpsalign/common.hpp"
#include "tpsalign/config.hpp"
#include "tpsalign/dataset.hpp"
#include "tpsalign/harness.hpp"
#include "tpsalign/metrics.hpp"
#include "tpsalign/train.hpp"

namespace fs = std::filesystem;
using namespace tpsalign;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_given = false;
  std::string out_dir;
};

// Precedence: config file, then --seed (which moves both the run seed and the
// generator seed), then --set overrides.
RunConfig build_config(const GlobalArgs& g) {
  RunConfig cfg;
  if (!g.config_path.empty()) load_config_file(&cfg, g.config_path);
  if (g.seed_given) {
    cfg.seed = g.seed;
    cfg.data.seed = g.seed;
  }
  for (const std::string& assignment : g.overrides)
    apply_config_override(&cfg, assignment);
  cfg.validate();
  return cfg;
}

std::string require_out(const GlobalArgs& g, const char* what) {
  if (g.out_dir.empty())
    throw ConfigError(std::string(what) + " needs --out <dir>");
  fs::create_directories(g.out_dir);
  return g.out_dir;
}

void print_metrics(const RetrievalMetrics& m) {
  std::printf("%-4s rank1 %6.2f  mAP %6.2f  mINP %6.2f  (%lld queries, %lld skipped)\n",
              m.protocol.c_str(), m.rank1, m.map, m.minp,
              static_cast<long long>(m.queries),
              static_cast<long long>(m.skipped));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"thin plate spline alignment toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--config", g.config_path, "key=value config file");
  app.add_option("--set", g.overrides, "config override key=value (repeatable)");
  app.add_option("--seed", g.seed, "run seed")->each([&](const std::string&) {
    g.seed_given = true;
  });
  app.add_option("--out", g.out_dir, "output directory");

  CLI::App* cmd_generate =
      app.add_subcommand("generate", "render the synthetic benchmark to --out");

  std::string data_dir, checkpoint_path, resume_path;
  int64_t max_steps = -1;
  CLI::App* cmd_train =
      app.add_subcommand("train", "train on a generated dataset");
  cmd_train->add_option("--data", data_dir, "dataset directory")->required();
  cmd_train->add_option("--resume", resume_path, "checkpoint to continue from");
  cmd_train->add_option("--steps", max_steps,
                        "cap the steps run by this invocation");

  std::string protocol_name;
  CLI::App* cmd_eval =
      app.add_subcommand("eval", "score a checkpoint on the test split");
  cmd_eval->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();
  cmd_eval->add_option("--data", data_dir, "dataset directory")->required();
  cmd_eval->add_option("--protocol", protocol_name,
                       "ALL, GG, AA or AG (default: all four)");

  std::string axis;
  CLI::App* cmd_ablate =
      app.add_subcommand("ablate", "sweep one ablation axis into a CSV");
  cmd_ablate->add_option("--axis", axis,
                         "control_points, placement, dam or rotation")
      ->required();
  cmd_ablate->add_option("--data", data_dir, "dataset directory")->required();

  CLI::App* cmd_gradcheck = app.add_subcommand(
      "gradcheck", "finite difference audit of every differentiable piece");

  int64_t bench_iters = 0;
  CLI::App* cmd_bench = app.add_subcommand(
      "bench", "forward wall time with and without alignment blocks");
  cmd_bench->add_option("--iters", bench_iters, "forward passes per variant");

  double warp_angle = 30.0;
  CLI::App* cmd_warp = app.add_subcommand(
      "warp-demo", "warp one glyph by a pure rotation and dump the grid");
  cmd_warp->add_option("--angle", warp_angle, "rotation in degrees");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig cfg = build_config(g);

    if (cmd_generate->parsed()) {
      const std::string out = require_out(g, "generate");
      const std::vector<SampleMeta> metas = generate_dataset(cfg.data, out);
      std::printf("wrote %zu samples under %s\n", metas.size(), out.c_str());
    } else if (cmd_train->parsed()) {
      const Dataset ds = load_dataset(data_dir);
      TrainOptions opts;
      opts.out_dir = require_out(g, "train");
      opts.resume = resume_path;
      opts.max_steps = max_steps;
      const TrainResult res = train_model(cfg, ds, opts);
      const double last =
          res.records.empty() ? 0.0 : res.records.back().total;
      std::printf("ran steps %lld..%lld, last total %.6f, checkpoint %s\n",
                  static_cast<long long>(res.first_step),
                  static_cast<long long>(res.first_step + res.steps_run - 1),
                  last, res.checkpoint_path.c_str());
    } else if (cmd_eval->parsed()) {
      const Dataset ds = load_dataset(data_dir);
      if (protocol_name.empty()) {
        for (const RetrievalMetrics& m :
             evaluate_checkpoint_all(checkpoint_path, ds))
          print_metrics(m);
      } else {
        print_metrics(evaluate_checkpoint(
            checkpoint_path, ds, protocol_from_string(protocol_name)));
      }
    } else if (cmd_ablate->parsed()) {
      const Dataset ds = load_dataset(data_dir);
      const std::string out = require_out(g, "ablate");
      const std::string csv = (fs::path(out) / (axis + ".csv")).string();
      run_ablation(axis, cfg, ds, csv, (fs::path(out) / "work").string());
      std::printf("wrote %s\n", csv.c_str());
    } else if (cmd_gradcheck->parsed()) {
      if (!run_gradient_suite(std::cout)) return 3;
    } else if (cmd_bench->parsed()) {
      const int64_t iters = bench_iters > 0 ? bench_iters : cfg.bench_iters;
      const BenchReport r = run_bench(cfg, iters);
      std::printf("with ltps    %9.3f ms median\n", r.median_with_ms);
      std::printf("without ltps %9.3f ms median\n", r.median_without_ms);
      std::printf("overhead     %9.2f %% over %lld forwards\n",
                  100.0 * r.overhead, static_cast<long long>(r.iters));
    } else if (cmd_warp->parsed()) {
      const std::string out = require_out(g, "warp-demo");
      run_warp_demo(cfg.data, warp_angle, out);
      std::printf("wrote input.pgm, warp_demo.ppm, warp_grid.csv under %s\n",
                  out.c_str());
    }
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
