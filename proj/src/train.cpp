#include "tpsalign/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "tpsalign/common.hpp"
#include "tpsalign/metrics.hpp"
#include "tpsalign/optim.hpp"
#include "tpsalign/rng.hpp"

namespace fs = std::filesystem;

namespace tpsalign {

namespace {

constexpr uint64_t kInitStream = 0x17A1;
constexpr uint64_t kBatchStream = 0xBA7C00;

int64_t rotation_code(RotationMode m) {
  switch (m) {
    case RotationMode::kLearned: return 0;
    case RotationMode::kFixed: return 1;
    case RotationMode::kOriginal: return 2;
  }
  throw ConfigError("invalid rotation mode");
}

RotationMode rotation_from_code(int64_t c) {
  if (c == 0) return RotationMode::kLearned;
  if (c == 1) return RotationMode::kFixed;
  if (c == 2) return RotationMode::kOriginal;
  throw ConfigError("invalid rotation code in checkpoint");
}

int64_t variant_code(DamVariant v) {
  switch (v) {
    case DamVariant::kInnerBatch: return 0;
    case DamVariant::kMemoryBank: return 1;
    case DamVariant::kClassificationMatrix: return 2;
  }
  throw ConfigError("invalid dam variant");
}

DamVariant variant_from_code(int64_t c) {
  if (c == 0) return DamVariant::kInnerBatch;
  if (c == 1) return DamVariant::kMemoryBank;
  if (c == 2) return DamVariant::kClassificationMatrix;
  throw ConfigError("invalid dam variant code in checkpoint");
}

}  // namespace

EncoderConfig make_encoder_config(const RunConfig& cfg, int64_t image_h,
                                  int64_t image_w, int64_t num_classes) {
  EncoderConfig enc = cfg.encoder;
  enc.image_h = image_h;
  enc.image_w = image_w;
  enc.in_channels = 1;
  enc.num_classes = num_classes;
  enc.placement = resolve_placement(cfg.placement, enc.depth);
  enc.validate();
  return enc;
}

void save_run_config(NamedTensors* out, const RunConfig& cfg,
                     const EncoderConfig& resolved) {
  out->put_scalar("config.seed", static_cast<double>(cfg.seed));

  out->put_scalar("config.data.identities", static_cast<double>(cfg.data.identities));
  out->put_scalar("config.data.samples_per_view",
                  static_cast<double>(cfg.data.samples_per_view));
  out->put_scalar("config.data.image_h", static_cast<double>(cfg.data.image_h));
  out->put_scalar("config.data.image_w", static_cast<double>(cfg.data.image_w));
  out->put_scalar("config.data.ground_angle", cfg.data.ground_angle);
  out->put_scalar("config.data.aerial_angle", cfg.data.aerial_angle);
  out->put_scalar("config.data.squash_lo", cfg.data.squash_lo);
  out->put_scalar("config.data.squash_hi", cfg.data.squash_hi);
  out->put_scalar("config.data.occlusion_prob", cfg.data.occlusion_prob);
  out->put_scalar("config.data.occlusion_width", cfg.data.occlusion_width);
  out->put_scalar("config.data.noise_sigma", cfg.data.noise_sigma);

  out->put_scalar("config.encoder.depth", static_cast<double>(resolved.depth));
  out->put_scalar("config.encoder.dim", static_cast<double>(resolved.dim));
  out->put_scalar("config.encoder.heads", static_cast<double>(resolved.heads));
  out->put_scalar("config.encoder.patch", static_cast<double>(resolved.patch));
  out->put_scalar("config.encoder.mlp_ratio",
                  static_cast<double>(resolved.mlp_ratio));
  out->put_scalar("config.encoder.image_h", static_cast<double>(resolved.image_h));
  out->put_scalar("config.encoder.image_w", static_cast<double>(resolved.image_w));
  out->put_scalar("config.encoder.num_classes",
                  static_cast<double>(resolved.num_classes));

  Tensor placement({static_cast<int64_t>(resolved.placement.size())});
  for (size_t i = 0; i < resolved.placement.size(); ++i)
    placement[static_cast<int64_t>(i)] = static_cast<double>(resolved.placement[i]);
  out->put("config.ltps.placement", placement);
  out->put_scalar("config.ltps.eta", resolved.eta);
  out->put_scalar("config.ltps.control_points",
                  static_cast<double>(resolved.control_points));
  out->put_scalar("config.ltps.rotation",
                  static_cast<double>(rotation_code(resolved.rotation)));
  out->put_scalar("config.ltps.fixed_angle", resolved.fixed_angle);
  out->put_scalar("config.ltps.forward_warp", resolved.forward_warp ? 1.0 : 0.0);
  out->put_scalar("config.ltps.eta_trainable", resolved.eta_trainable ? 1.0 : 0.0);

  out->put_scalar("config.dam.enabled", cfg.dam_enabled ? 1.0 : 0.0);
  out->put_scalar("config.dam.variant",
                  static_cast<double>(variant_code(cfg.dam.variant)));
  out->put_scalar("config.dam.momentum", cfg.dam.momentum);

  out->put_scalar("config.loss.lambda", cfg.loss.lambda);
  out->put_scalar("config.loss.alpha", cfg.loss.alpha);
  out->put_scalar("config.loss.beta", cfg.loss.beta);
  out->put_scalar("config.loss.margin", cfg.loss.margin);
  out->put_scalar("config.loss.smoothing", cfg.loss.smoothing);

  out->put_scalar("config.optim.lr", cfg.lr);
  out->put_scalar("config.optim.weight_decay", cfg.weight_decay);
  out->put_scalar("config.optim.epochs", static_cast<double>(cfg.epochs));
  out->put_scalar("config.optim.warmup_epochs",
                  static_cast<double>(cfg.warmup_epochs));
  out->put_scalar("config.optim.batch_p", static_cast<double>(cfg.batch_p));
  out->put_scalar("config.optim.batch_k", static_cast<double>(cfg.batch_k));
  out->put_scalar("config.train.checkpoint_every",
                  static_cast<double>(cfg.checkpoint_every));
  out->put_scalar("config.bench.iters", static_cast<double>(cfg.bench_iters));
}

RunConfig checkpoint_run_config(const NamedTensors& in) {
  RunConfig cfg;
  cfg.seed = static_cast<uint64_t>(in.scalar("config.seed"));

  cfg.data.identities = static_cast<int64_t>(in.scalar("config.data.identities"));
  cfg.data.samples_per_view =
      static_cast<int64_t>(in.scalar("config.data.samples_per_view"));
  cfg.data.image_h = static_cast<int64_t>(in.scalar("config.data.image_h"));
  cfg.data.image_w = static_cast<int64_t>(in.scalar("config.data.image_w"));
  cfg.data.ground_angle = in.scalar("config.data.ground_angle");
  cfg.data.aerial_angle = in.scalar("config.data.aerial_angle");
  cfg.data.squash_lo = in.scalar("config.data.squash_lo");
  cfg.data.squash_hi = in.scalar("config.data.squash_hi");
  cfg.data.occlusion_prob = in.scalar("config.data.occlusion_prob");
  cfg.data.occlusion_width = in.scalar("config.data.occlusion_width");
  cfg.data.noise_sigma = in.scalar("config.data.noise_sigma");

  cfg.encoder.depth = static_cast<int64_t>(in.scalar("config.encoder.depth"));
  cfg.encoder.dim = static_cast<int64_t>(in.scalar("config.encoder.dim"));
  cfg.encoder.heads = static_cast<int64_t>(in.scalar("config.encoder.heads"));
  cfg.encoder.patch = static_cast<int64_t>(in.scalar("config.encoder.patch"));
  cfg.encoder.mlp_ratio =
      static_cast<int64_t>(in.scalar("config.encoder.mlp_ratio"));

  const Tensor& placement = in.at("config.ltps.placement");
  if (placement.numel() == 0) {
    cfg.placement = "none";
  } else {
    std::ostringstream joined;
    for (int64_t i = 0; i < placement.numel(); ++i) {
      if (i) joined << ",";
      joined << static_cast<int64_t>(placement[i]);
    }
    cfg.placement = joined.str();
  }
  cfg.encoder.eta = in.scalar("config.ltps.eta");
  cfg.encoder.control_points =
      static_cast<int64_t>(in.scalar("config.ltps.control_points"));
  cfg.encoder.rotation =
      rotation_from_code(static_cast<int64_t>(in.scalar("config.ltps.rotation")));
  cfg.encoder.fixed_angle = in.scalar("config.ltps.fixed_angle");
  cfg.encoder.forward_warp = in.scalar("config.ltps.forward_warp") != 0.0;
  cfg.encoder.eta_trainable = in.scalar("config.ltps.eta_trainable") != 0.0;

  cfg.dam_enabled = in.scalar("config.dam.enabled") != 0.0;
  cfg.dam.variant =
      variant_from_code(static_cast<int64_t>(in.scalar("config.dam.variant")));
  cfg.dam.momentum = in.scalar("config.dam.momentum");

  cfg.loss.lambda = in.scalar("config.loss.lambda");
  cfg.loss.alpha = in.scalar("config.loss.alpha");
  cfg.loss.beta = in.scalar("config.loss.beta");
  cfg.loss.margin = in.scalar("config.loss.margin");
  cfg.loss.smoothing = in.scalar("config.loss.smoothing");

  cfg.lr = in.scalar("config.optim.lr");
  cfg.weight_decay = in.scalar("config.optim.weight_decay");
  cfg.epochs = static_cast<int64_t>(in.scalar("config.optim.epochs"));
  cfg.warmup_epochs = static_cast<int64_t>(in.scalar("config.optim.warmup_epochs"));
  cfg.batch_p = static_cast<int64_t>(in.scalar("config.optim.batch_p"));
  cfg.batch_k = static_cast<int64_t>(in.scalar("config.optim.batch_k"));
  cfg.checkpoint_every =
      static_cast<int64_t>(in.scalar("config.train.checkpoint_every"));
  cfg.bench_iters = static_cast<int64_t>(in.scalar("config.bench.iters"));
  return cfg;
}

EncoderConfig checkpoint_encoder_config(const NamedTensors& in) {
  const RunConfig cfg = checkpoint_run_config(in);
  EncoderConfig enc = cfg.encoder;
  enc.image_h = static_cast<int64_t>(in.scalar("config.encoder.image_h"));
  enc.image_w = static_cast<int64_t>(in.scalar("config.encoder.image_w"));
  enc.in_channels = 1;
  enc.num_classes = static_cast<int64_t>(in.scalar("config.encoder.num_classes"));
  enc.placement = resolve_placement(cfg.placement, enc.depth);
  enc.validate();
  return enc;
}

void save_params(NamedTensors* out, const ParamRefs& params) {
  for (const Param* p : params) out->put(p->name, p->value);
}

void load_params(const NamedTensors& in, const ParamRefs& params) {
  for (Param* p : params) {
    const Tensor& t = in.at(p->name);
    if (t.numel() != p->value.numel())
      throw ConfigError("checkpoint shape mismatch for " + p->name);
    p->value = t.reshaped(p->value.shape());
  }
}

void save_bank(NamedTensors* out, const DamBank& bank) {
  const int64_t n = static_cast<int64_t>(bank.table.class_ids.size());
  Tensor ids({n});
  Tensor counts({n});
  for (int64_t i = 0; i < n; ++i) {
    ids[i] = static_cast<double>(bank.table.class_ids[static_cast<size_t>(i)]);
    counts[i] = static_cast<double>(bank.table.counts[static_cast<size_t>(i)]);
  }
  out->put("dam.bank.class_ids", ids);
  out->put("dam.bank.counts", counts);
  out->put("dam.bank.protos", n == 0 ? Tensor({0, 0}) : bank.table.protos);
}

DamBank load_bank(const NamedTensors& in, int64_t dim) {
  DamBank bank;
  const Tensor* ids = in.find("dam.bank.class_ids");
  if (!ids) return bank;
  const Tensor& counts = in.at("dam.bank.counts");
  const Tensor& protos = in.at("dam.bank.protos");
  const int64_t n = ids->numel();
  if (counts.numel() != n || (n > 0 && protos.numel() != n * dim))
    throw ConfigError("inconsistent dam bank tensors in checkpoint");
  for (int64_t i = 0; i < n; ++i) {
    bank.table.class_ids.push_back(static_cast<int64_t>((*ids)[i]));
    bank.table.counts.push_back(static_cast<int64_t>(counts[i]));
  }
  if (n > 0) bank.table.protos = protos.reshaped({n, dim});
  return bank;
}

namespace {

struct BatchPlan {
  std::vector<int64_t> sample_rows;  // indices into ds.train_indices
  std::vector<int64_t> labels;       // compact labels, aligned
};

BatchPlan plan_batch(const Dataset& ds,
                     const std::vector<std::vector<int64_t>>& rows_of_class,
                     int64_t p, int64_t k, uint64_t seed, int64_t step) {
  Rng rng(mix_seed(seed, kBatchStream + static_cast<uint64_t>(step)));
  const int64_t c = ds.num_train_classes;
  std::vector<int64_t> classes(static_cast<size_t>(c));
  for (int64_t i = 0; i < c; ++i) classes[static_cast<size_t>(i)] = i;
  rng.shuffle(classes);
  const int64_t p_eff = std::min(p, c);

  BatchPlan plan;
  for (int64_t pi = 0; pi < p_eff; ++pi) {
    const int64_t cls = classes[static_cast<size_t>(pi)];
    std::vector<int64_t> pool = rows_of_class[static_cast<size_t>(cls)];
    rng.shuffle(pool);
    for (int64_t ki = 0; ki < k; ++ki) {
      // classes smaller than K wrap around to a uniform redraw
      const int64_t row =
          ki < static_cast<int64_t>(pool.size())
              ? pool[static_cast<size_t>(ki)]
              : pool[static_cast<size_t>(rng.randint(pool.size()))];
      plan.sample_rows.push_back(row);
      plan.labels.push_back(cls);
    }
  }
  return plan;
}

void write_metrics_line(std::ofstream& out, int64_t step,
                        const LossBreakdown& b) {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["id"] = b.id;
  j["triplet"] = b.triplet;
  j["deform"] = b.deform;
  j["align"] = b.align;
  j["entropy"] = b.entropy;
  j["mask"] = b.mask;
  j["total"] = b.total;
  out << j.dump() << "\n";
  out.flush();
}

}  // namespace

TrainResult train_model(const RunConfig& cfg, const Dataset& ds,
                        const TrainOptions& opts) {
  cfg.validate();
  if (ds.train_indices.empty()) throw ConfigError("dataset has no train split");
  if (ds.num_train_classes < 2)
    throw ConfigError("training needs >= 2 identities in the train split");

  EncoderConfig enc_cfg =
      make_encoder_config(cfg, ds.image_h, ds.image_w, ds.num_train_classes);
  Encoder enc(enc_cfg);
  MaskGenerator gen("dam", enc_cfg.dim);
  DamBank bank;

  ParamRefs params;
  enc.collect_params(params);
  if (cfg.dam_enabled) gen.collect_params(params);

  AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  int64_t start_step = 0;
  if (opts.resume.empty()) {
    Rng init_rng(mix_seed(cfg.seed, kInitStream));
    enc.init(init_rng);
    gen.init(init_rng);
    opt.init(params);
  } else {
    const NamedTensors table = load_named_tensors(opts.resume);
    load_params(table, params);
    opt.load(table, params);
    bank = load_bank(table, enc_cfg.dim);
    start_step = opt.step_count;
  }

  const int64_t batch = cfg.batch_p * cfg.batch_k;
  const int64_t steps_per_epoch = std::max<int64_t>(
      1, static_cast<int64_t>(ds.train_indices.size()) / batch);
  const int64_t total_steps = cfg.epochs * steps_per_epoch;
  const int64_t warmup_epochs =
      cfg.warmup_epochs < 0 ? cfg.epochs / 6 : cfg.warmup_epochs;
  const int64_t warmup_steps = warmup_epochs * steps_per_epoch;
  const double eff_lr =
      cfg.lr * static_cast<double>(batch) / 64.0;

  std::vector<std::vector<int64_t>> rows_of_class(
      static_cast<size_t>(ds.num_train_classes));
  for (size_t i = 0; i < ds.train_indices.size(); ++i)
    rows_of_class[static_cast<size_t>(ds.train_labels[i])].push_back(
        static_cast<int64_t>(i));
  for (const auto& rows : rows_of_class)
    if (rows.empty()) throw ConfigError("a train class has no samples");

  std::error_code ec;
  fs::create_directories(opts.out_dir, ec);
  if (ec) throw IoError("cannot create run directory: " + opts.out_dir);
  const std::string metrics_path =
      (fs::path(opts.out_dir) / "metrics.jsonl").string();
  std::ofstream metrics(metrics_path, std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + metrics_path);
  const std::string ckpt_path =
      (fs::path(opts.out_dir) / "checkpoint.ckpt").string();

  auto save_state = [&]() {
    NamedTensors table;
    save_run_config(&table, cfg, enc_cfg);
    save_params(&table, params);
    opt.save(&table, params);
    save_bank(&table, bank);
    save_named_tensors(ckpt_path, table);
  };

  TrainResult result;
  result.first_step = start_step + 1;
  const int64_t end_step =
      opts.max_steps < 0
          ? total_steps
          : std::min<int64_t>(total_steps, start_step + opts.max_steps);

  const int64_t n_placed = static_cast<int64_t>(enc_cfg.placement.size());

  for (int64_t step = start_step; step < end_step; ++step) {
    const BatchPlan plan = plan_batch(ds, rows_of_class, cfg.batch_p,
                                      cfg.batch_k, cfg.seed, step);
    const int64_t n = static_cast<int64_t>(plan.sample_rows.size());
    const int64_t dim = enc_cfg.dim;

    std::vector<Encoder::Cache> caches(static_cast<size_t>(n));
    Tensor embeds({n, dim});
    Tensor logits({n, enc_cfg.num_classes});
    std::vector<double> thetas;
    thetas.reserve(static_cast<size_t>(n * n_placed));

    for (int64_t i = 0; i < n; ++i) {
      const int64_t ds_row =
          ds.train_indices[static_cast<size_t>(plan.sample_rows[static_cast<size_t>(i)])];
      Encoder::Output out = enc.forward(ds.images[static_cast<size_t>(ds_row)],
                                        ds.views[static_cast<size_t>(ds_row)],
                                        &caches[static_cast<size_t>(i)]);
      for (int64_t j = 0; j < dim; ++j) embeds.at(i, j) = out.embedding[j];
      for (int64_t j = 0; j < enc_cfg.num_classes; ++j)
        logits.at(i, j) = out.logits[j];
      for (const LtpsState& st : out.states) thetas.push_back(st.theta);
    }

    for (Param* p : params) p->zero_grad();
    Tensor d_embeds({n, dim});
    Tensor d_logits({n, enc_cfg.num_classes});
    std::vector<double> d_thetas(thetas.size(), 0.0);

    const double id = id_loss(logits, plan.labels, cfg.loss.smoothing, &d_logits);
    const double triplet =
        triplet_loss(embeds, plan.labels, cfg.loss.margin, &d_embeds);
    const double deform = deformation_loss(thetas, &d_thetas);

    double align = 0.0, entropy = 0.0;
    DamStepOutput dam_out;
    Tensor d_masks_align, d_feats_align, d_protos_align, d_masks_ent;
    if (cfg.dam_enabled) {
      const Tensor* classifier =
          cfg.dam.variant == DamVariant::kClassificationMatrix
              ? &enc.classifier().value
              : nullptr;
      dam_out = dam_training_step(embeds, plan.labels, gen, cfg.dam,
                                  &bank, classifier);
      d_masks_align = Tensor({n, dim});
      d_feats_align = Tensor({n, dim});
      d_protos_align = Tensor({n, dim});
      d_masks_ent = Tensor({n, dim});
      align = align_loss(dam_out.masks, embeds, dam_out.protos_per_sample,
                         &d_masks_align, &d_feats_align, &d_protos_align,
                         nullptr);
      entropy = entropy_loss(dam_out.masks, &d_masks_ent);
    }

    const LossBreakdown b =
        total_loss(id, triplet, deform, align, entropy, cfg.loss);
    write_metrics_line(metrics, step + 1, b);
    result.records.push_back(b);

    if (!std::isfinite(b.total)) {
      nlohmann::ordered_json j;
      j["step"] = step + 1;
      j["id"] = b.id;
      j["triplet"] = b.triplet;
      j["deform"] = b.deform;
      j["align"] = b.align;
      j["entropy"] = b.entropy;
      j["mask"] = b.mask;
      j["total"] = b.total;
      std::cerr << "non-finite loss, aborting: " << j.dump() << "\n";
      throw NumericError("non-finite loss at step " + std::to_string(step + 1));
    }

    if (cfg.dam_enabled) {
      Tensor d_masks({n, dim});
      Tensor d_protos({n, dim});
      const double beta = cfg.loss.beta;
      const double bl = beta * cfg.loss.lambda;
      for (int64_t i = 0; i < n * dim; ++i) {
        d_masks[i] = beta * d_masks_align[i] + bl * d_masks_ent[i];
        d_protos[i] = beta * d_protos_align[i];
        d_embeds[i] += beta * d_feats_align[i];
      }
      dam_training_step_backward(embeds, plan.labels, gen, cfg.dam, dam_out,
                                 d_masks, d_protos, d_embeds);
    }

    for (int64_t i = 0; i < n; ++i) {
      Tensor d_e({dim});
      for (int64_t j = 0; j < dim; ++j) d_e[j] = d_embeds.at(i, j);
      Tensor d_l({enc_cfg.num_classes});
      for (int64_t j = 0; j < enc_cfg.num_classes; ++j)
        d_l[j] = d_logits.at(i, j);
      std::vector<double> extra;
      if (n_placed > 0) {
        extra.resize(static_cast<size_t>(n_placed));
        for (int64_t l = 0; l < n_placed; ++l)
          extra[static_cast<size_t>(l)] =
              cfg.loss.alpha * d_thetas[static_cast<size_t>(i * n_placed + l)];
      }
      enc.backward(caches[static_cast<size_t>(i)], d_e, d_l, extra);
    }

    const double lr = schedule_lr(eff_lr, step, total_steps, warmup_steps);
    opt.step(params, lr);
    ++result.steps_run;

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save_state();
  }

  save_state();
  result.checkpoint_path = ckpt_path;
  return result;
}

}  // namespace tpsalign
