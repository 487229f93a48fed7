#include "tpsalign/dam.hpp"

#include <algorithm>
#include <cmath>

#include "tpsalign/common.hpp"

namespace tpsalign {

namespace {

double norm_of(const double* v, int64_t d) {
  double s = 0.0;
  for (int64_t t = 0; t < d; ++t) s += v[t] * v[t];
  return std::sqrt(s);
}

}  // namespace

DamVariant dam_variant_from_string(const std::string& s) {
  if (s == "inner_batch") return DamVariant::kInnerBatch;
  if (s == "memory_bank") return DamVariant::kMemoryBank;
  if (s == "classification_matrix") return DamVariant::kClassificationMatrix;
  throw ConfigError("unknown dam variant '" + s +
                    "' (expected inner_batch, memory_bank or classification_matrix)");
}

std::string dam_variant_to_string(DamVariant v) {
  switch (v) {
    case DamVariant::kInnerBatch: return "inner_batch";
    case DamVariant::kMemoryBank: return "memory_bank";
    case DamVariant::kClassificationMatrix: return "classification_matrix";
  }
  throw ConfigError("invalid dam variant value");
}

int64_t PrototypeTable::row_of(int64_t class_id) const {
  const auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
  if (it == class_ids.end() || *it != class_id) return -1;
  return it - class_ids.begin();
}

PrototypeTable compute_prototypes(const Tensor& features,
                                  const std::vector<int64_t>& labels) {
  if (features.rank() != 2) throw ConfigError("compute_prototypes: features must be N x D");
  const int64_t n = features.shape(0), d = features.shape(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ConfigError("compute_prototypes: label count mismatch");
  }
  if (n < 1) throw ConfigError("compute_prototypes: empty batch");

  PrototypeTable table;
  table.class_ids = labels;
  std::sort(table.class_ids.begin(), table.class_ids.end());
  table.class_ids.erase(
      std::unique(table.class_ids.begin(), table.class_ids.end()),
      table.class_ids.end());
  const int64_t c = static_cast<int64_t>(table.class_ids.size());
  table.protos = Tensor::zeros({c, d});
  table.counts.assign(c, 0);

  // Sum of per-sample normalized features, in ascending sample index order.
  for (int64_t i = 0; i < n; ++i) {
    const double* f = features.data() + i * d;
    const double nf = norm_of(f, d);
    if (nf < kNormGuard) {
      throw NumericError("compute_prototypes: feature " + std::to_string(i) +
                         " has near-zero norm");
    }
    const int64_t row = table.row_of(labels[i]);
    double* p = table.protos.data() + row * d;
    for (int64_t t = 0; t < d; ++t) p[t] += f[t] / nf;
    ++table.counts[row];
  }
  for (int64_t r = 0; r < c; ++r) {
    double* p = table.protos.data() + r * d;
    for (int64_t t = 0; t < d; ++t) p[t] /= static_cast<double>(table.counts[r]);
    const double np = norm_of(p, d);
    if (np < kNormGuard) {
      throw NumericError("compute_prototypes: class " +
                         std::to_string(table.class_ids[r]) +
                         " mean collapsed to zero");
    }
    for (int64_t t = 0; t < d; ++t) p[t] /= np;
  }
  return table;
}

void compute_prototypes_backward(const Tensor& features,
                                 const std::vector<int64_t>& labels,
                                 const PrototypeTable& table,
                                 const Tensor& d_protos, Tensor& d_features) {
  const int64_t n = features.shape(0), d = features.shape(1);
  const int64_t c = static_cast<int64_t>(table.class_ids.size());
  if (d_protos.shape() != std::vector<int64_t>({c, d}) ||
      d_features.shape() != features.shape()) {
    throw ConfigError("compute_prototypes_backward: shape mismatch");
  }

  // Recompute the per-class means of normalized features (mu before the
  // final normalization) to invert p = mu / |mu|.
  Tensor mu = Tensor::zeros({c, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* f = features.data() + i * d;
    const double nf = norm_of(f, d);
    const int64_t row = table.row_of(labels[i]);
    double* m = mu.data() + row * d;
    for (int64_t t = 0; t < d; ++t) m[t] += f[t] / (nf * static_cast<double>(table.counts[row]));
  }

  Tensor d_mu = Tensor::zeros({c, d});
  for (int64_t r = 0; r < c; ++r) {
    const double* m = mu.data() + r * d;
    const double* g = d_protos.data() + r * d;
    const double* p = table.protos.data() + r * d;
    const double nm = norm_of(m, d);
    double pg = 0.0;
    for (int64_t t = 0; t < d; ++t) pg += p[t] * g[t];
    double* dm = d_mu.data() + r * d;
    for (int64_t t = 0; t < d; ++t) dm[t] = (g[t] - p[t] * pg) / nm;
  }

  for (int64_t i = 0; i < n; ++i) {
    const double* f = features.data() + i * d;
    const double nf = norm_of(f, d);
    const int64_t row = table.row_of(labels[i]);
    const double* dm = d_mu.data() + row * d;
    const double inv_count = 1.0 / static_cast<double>(table.counts[row]);
    // d_fhat = dm / N_c; d_f = (d_fhat - fhat (fhat . d_fhat)) / |f|.
    double fg = 0.0;
    for (int64_t t = 0; t < d; ++t) fg += (f[t] / nf) * dm[t] * inv_count;
    double* df = d_features.data() + i * d;
    for (int64_t t = 0; t < d; ++t) {
      df[t] += (dm[t] * inv_count - (f[t] / nf) * fg) / nf;
    }
  }
}

MaskGenerator::MaskGenerator(std::string name_prefix, int64_t dim)
    : dim_(dim), hidden_(dim / 2) {
  if (dim < 2) throw ConfigError("MaskGenerator: dim must be at least 2");
  w1_ = Param(name_prefix + ".w1", Tensor::zeros({dim_, hidden_}));
  b1_ = Param(name_prefix + ".b1", Tensor::zeros({hidden_}));
  w2_ = Param(name_prefix + ".w2", Tensor::zeros({hidden_, dim_}));
  b2_ = Param(name_prefix + ".b2", Tensor::zeros({dim_}));
}

void MaskGenerator::init(Rng& rng) {
  const double s1 = 1.0 / std::sqrt(static_cast<double>(dim_));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
  for (int64_t i = 0; i < w1_.value.numel(); ++i) w1_.value[i] = rng.normal(0.0, s1);
  for (int64_t i = 0; i < w2_.value.numel(); ++i) w2_.value[i] = rng.normal(0.0, s2);
  b1_.value.fill(0.0);
  b2_.value.fill(0.0);
}

void MaskGenerator::collect_params(ParamRefs& out) {
  out.push_back(&w1_);
  out.push_back(&b1_);
  out.push_back(&w2_);
  out.push_back(&b2_);
}

Tensor MaskGenerator::forward(const Tensor& f, Cache* cache) const {
  if (f.numel() != dim_) throw ConfigError("MaskGenerator: input width mismatch");
  f.ensure_finite("mask generator input");

  Tensor h_pre = b1_.value;
  for (int64_t j = 0; j < hidden_; ++j) {
    double acc = h_pre[j];
    for (int64_t t = 0; t < dim_; ++t) acc += w1_.value.at(t, j) * f[t];
    h_pre[j] = acc;
  }
  Tensor h_act = h_pre;
  for (int64_t j = 0; j < hidden_; ++j) h_act[j] = std::max(0.0, h_act[j]);

  Tensor mask = b2_.value;
  for (int64_t t = 0; t < dim_; ++t) {
    double acc = mask[t];
    for (int64_t j = 0; j < hidden_; ++j) acc += w2_.value.at(j, t) * h_act[j];
    mask[t] = 1.0 / (1.0 + std::exp(-acc));
  }

  if (cache) {
    cache->f = f;
    cache->h_pre = std::move(h_pre);
    cache->h_act = std::move(h_act);
    cache->mask = mask;
  }
  return mask;
}

void MaskGenerator::backward(const Cache& cache, const Tensor& d_mask,
                             Tensor* d_f) {
  if (d_mask.numel() != dim_) throw ConfigError("MaskGenerator: gradient width mismatch");
  Tensor d_logit({dim_});
  for (int64_t t = 0; t < dim_; ++t) {
    const double m = cache.mask[t];
    d_logit[t] = d_mask[t] * m * (1.0 - m);
    b2_.grad[t] += d_logit[t];
  }
  Tensor d_hact = Tensor::zeros({hidden_});
  for (int64_t j = 0; j < hidden_; ++j) {
    const double h = cache.h_act[j];
    double acc = 0.0;
    for (int64_t t = 0; t < dim_; ++t) {
      w2_.grad.at(j, t) += h * d_logit[t];
      acc += w2_.value.at(j, t) * d_logit[t];
    }
    d_hact[j] = acc;
  }
  for (int64_t j = 0; j < hidden_; ++j) {
    const double d_hpre = cache.h_pre[j] > 0.0 ? d_hact[j] : 0.0;
    b1_.grad[j] += d_hpre;
    for (int64_t t = 0; t < dim_; ++t) {
      w1_.grad.at(t, j) += cache.f[t] * d_hpre;
      if (d_f) (*d_f)[t] += w1_.value.at(t, j) * d_hpre;
    }
  }
}

Tensor mask_prototype(const Tensor& p, const Tensor& m) {
  if (p.numel() != m.numel()) throw ConfigError("mask_prototype: width mismatch");
  Tensor out = p;
  for (int64_t t = 0; t < p.numel(); ++t) out[t] *= m[t];
  return out;
}

PrototypeTable select_prototypes(const DamConfig& config,
                                 const PrototypeTable& batch, DamBank* bank,
                                 const Tensor* classifier) {
  switch (config.variant) {
    case DamVariant::kInnerBatch:
      return batch;

    case DamVariant::kMemoryBank: {
      if (!bank) throw ConfigError("select_prototypes: memory_bank needs a bank");
      const int64_t d = batch.protos.shape(1);
      const double mu = config.momentum;
      if (mu < 0.0 || mu > 1.0) {
        throw ConfigError("select_prototypes: momentum must be in [0,1]");
      }
      PrototypeTable out;
      out.class_ids = batch.class_ids;
      out.counts = batch.counts;
      out.protos = Tensor::zeros({static_cast<int64_t>(batch.class_ids.size()), d});

      for (size_t r = 0; r < batch.class_ids.size(); ++r) {
        const int64_t cid = batch.class_ids[r];
        const double* bp = batch.protos.data() + static_cast<int64_t>(r) * d;
        const int64_t bank_row = bank->table.row_of(cid);
        std::vector<double> updated(static_cast<size_t>(d));
        if (bank_row < 0) {
          // First sighting: seed the bank with the batch prototype.
          std::copy(bp, bp + d, updated.begin());
          const auto pos = std::lower_bound(bank->table.class_ids.begin(),
                                            bank->table.class_ids.end(), cid) -
                           bank->table.class_ids.begin();
          bank->table.class_ids.insert(bank->table.class_ids.begin() + pos, cid);
          bank->table.counts.insert(bank->table.counts.begin() + pos,
                                    batch.counts[r]);
          Tensor grown = Tensor::zeros(
              {static_cast<int64_t>(bank->table.class_ids.size()), d});
          for (int64_t i = 0, j = 0; i < grown.shape(0); ++i) {
            if (i == pos) {
              std::copy(updated.begin(), updated.end(), grown.data() + i * d);
            } else {
              std::copy(bank->table.protos.data() + j * d,
                        bank->table.protos.data() + (j + 1) * d,
                        grown.data() + i * d);
              ++j;
            }
          }
          bank->table.protos = std::move(grown);
        } else {
          double* held = bank->table.protos.data() + bank_row * d;
          double nn = 0.0;
          for (int64_t t = 0; t < d; ++t) {
            updated[static_cast<size_t>(t)] = mu * held[t] + (1.0 - mu) * bp[t];
            nn += updated[static_cast<size_t>(t)] * updated[static_cast<size_t>(t)];
          }
          nn = std::sqrt(nn);
          if (nn < kNormGuard) {
            throw NumericError("select_prototypes: bank update collapsed to zero");
          }
          for (auto& v : updated) v /= nn;
          std::copy(updated.begin(), updated.end(), held);
          bank->table.counts[bank_row] += batch.counts[r];
        }
        std::copy(updated.begin(), updated.end(),
                  out.protos.data() + static_cast<int64_t>(r) * d);
      }
      return out;
    }

    case DamVariant::kClassificationMatrix: {
      if (!classifier) {
        throw ConfigError("select_prototypes: classification_matrix needs classifier rows");
      }
      const int64_t d = classifier->shape(1);
      PrototypeTable out;
      out.class_ids = batch.class_ids;
      out.counts = batch.counts;
      out.protos = Tensor::zeros({static_cast<int64_t>(batch.class_ids.size()), d});
      for (size_t r = 0; r < batch.class_ids.size(); ++r) {
        const int64_t cid = batch.class_ids[r];
        if (cid < 0 || cid >= classifier->shape(0)) {
          throw ConfigError("select_prototypes: class id outside classifier rows");
        }
        const double* row = classifier->data() + cid * d;
        const double nn = norm_of(row, d);
        if (nn < kNormGuard) {
          throw NumericError("select_prototypes: zero classifier row for class " +
                             std::to_string(cid));
        }
        double* o = out.protos.data() + static_cast<int64_t>(r) * d;
        for (int64_t t = 0; t < d; ++t) o[t] = row[t] / nn;
      }
      return out;
    }
  }
  throw ConfigError("select_prototypes: invalid variant");
}

DamStepOutput dam_training_step(const Tensor& features,
                                const std::vector<int64_t>& labels,
                                const MaskGenerator& gen,
                                const DamConfig& config, DamBank* bank,
                                const Tensor* classifier) {
  const int64_t n = features.shape(0), d = features.shape(1);
  PrototypeTable batch = compute_prototypes(features, labels);
  DamStepOutput out;
  out.used = select_prototypes(config, batch, bank, classifier);
  out.masks = Tensor({n, d});
  out.masked_protos = Tensor({n, d});
  out.masked_feats = Tensor({n, d});
  out.protos_per_sample = Tensor({n, d});
  out.caches.resize(static_cast<size_t>(n));

  for (int64_t i = 0; i < n; ++i) {
    const int64_t row = out.used.row_of(labels[i]);
    if (row < 0) throw ConfigError("dam_training_step: missing prototype for label");
    Tensor f({d}, std::vector<double>(features.data() + i * d,
                                      features.data() + (i + 1) * d));
    Tensor m = gen.forward(f, &out.caches[static_cast<size_t>(i)]);
    const double* p = out.used.protos.data() + row * d;
    for (int64_t t = 0; t < d; ++t) {
      out.masks.at(i, t) = m[t];
      out.protos_per_sample.at(i, t) = p[t];
      out.masked_protos.at(i, t) = m[t] * p[t];
      out.masked_feats.at(i, t) = m[t] * f[t];
    }
  }
  return out;
}

void dam_training_step_backward(const Tensor& features,
                                const std::vector<int64_t>& labels,
                                MaskGenerator& gen, const DamConfig& config,
                                const DamStepOutput& out, const Tensor& d_masks,
                                const Tensor& d_protos_per_sample,
                                Tensor& d_features) {
  const int64_t n = features.shape(0), d = features.shape(1);
  if (d_masks.shape() != features.shape() ||
      d_protos_per_sample.shape() != features.shape() ||
      d_features.shape() != features.shape()) {
    throw ConfigError("dam_training_step_backward: shape mismatch");
  }

  for (int64_t i = 0; i < n; ++i) {
    Tensor dm({d}, std::vector<double>(d_masks.data() + i * d,
                                       d_masks.data() + (i + 1) * d));
    Tensor df = Tensor::zeros({d});
    gen.backward(out.caches[static_cast<size_t>(i)], dm, &df);
    for (int64_t t = 0; t < d; ++t) d_features.at(i, t) += df[t];
  }

  if (config.variant == DamVariant::kInnerBatch) {
    // Scatter per-sample prototype gradients onto table rows, then pull back
    // through the double normalization. Bank and classifier prototypes are
    // constants within a step.
    const int64_t c = static_cast<int64_t>(out.used.class_ids.size());
    Tensor d_protos = Tensor::zeros({c, d});
    for (int64_t i = 0; i < n; ++i) {
      const int64_t row = out.used.row_of(labels[i]);
      for (int64_t t = 0; t < d; ++t) {
        d_protos.at(row, t) += d_protos_per_sample.at(i, t);
      }
    }
    compute_prototypes_backward(features, labels, out.used, d_protos, d_features);
  }
}

}  // namespace tpsalign
