#include "tpsalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tpsalign/common.hpp"
#include "tpsalign/dam.hpp"

namespace tpsalign {

void LossConfig::validate() const {
  if (lambda < 0.0 || alpha < 0.0 || beta < 0.0) {
    throw ConfigError("loss config: lambda, alpha, beta must be >= 0");
  }
  if (margin < 0.0) throw ConfigError("loss config: margin must be >= 0");
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("loss config: smoothing must be in [0, 1)");
  }
}

double id_loss(const Tensor& logits, const std::vector<int64_t>& labels,
               double smoothing, Tensor* d_logits) {
  if (logits.rank() != 2) throw ConfigError("id_loss: logits must be N x C");
  const int64_t n = logits.shape(0), c = logits.shape(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ConfigError("id_loss: label count mismatch");
  }
  if (d_logits && d_logits->shape() != logits.shape()) {
    throw ConfigError("id_loss: gradient shape mismatch");
  }
  const double off = smoothing / static_cast<double>(c);

  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const int64_t y = labels[i];
    if (y < 0 || y >= c) throw ConfigError("id_loss: label outside [0, C)");
    const double* row = logits.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);

    // Smoothed target: (1-s) on the true class plus s/C everywhere.
    double dotted = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double t = off + (j == y ? 1.0 - smoothing : 0.0);
      dotted += t * row[j];
    }
    loss += lse - dotted;

    if (d_logits) {
      for (int64_t j = 0; j < c; ++j) {
        const double p = std::exp(row[j] - mx) / z;
        const double t = off + (j == y ? 1.0 - smoothing : 0.0);
        d_logits->at(i, j) += (p - t) / static_cast<double>(n);
      }
    }
  }
  return loss / static_cast<double>(n);
}

double triplet_loss(const Tensor& features, const std::vector<int64_t>& labels,
                    double margin, Tensor* d_features) {
  if (features.rank() != 2) throw ConfigError("triplet_loss: features must be N x D");
  const int64_t n = features.shape(0), d = features.shape(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ConfigError("triplet_loss: label count mismatch");
  }

  // PK precondition: at least two classes, each with at least two samples.
  {
    std::vector<int64_t> ids(labels);
    std::sort(ids.begin(), ids.end());
    ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
    if (ids.size() < 2) {
      throw ConfigError("triplet_loss: sampling error, batch needs >= 2 classes");
    }
    for (int64_t cid : ids) {
      if (std::count(labels.begin(), labels.end(), cid) < 2) {
        throw ConfigError("triplet_loss: sampling error, class " +
                          std::to_string(cid) + " has a single sample");
      }
    }
  }

  Tensor dist({n, n});
  for (int64_t i = 0; i < n; ++i) {
    dist.at(i, i) = 0.0;
    for (int64_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      const double* a = features.data() + i * d;
      const double* b = features.data() + j * d;
      for (int64_t t = 0; t < d; ++t) {
        const double diff = a[t] - b[t];
        s += diff * diff;
      }
      const double r = std::sqrt(s);
      dist.at(i, j) = r;
      dist.at(j, i) = r;
    }
  }

  double loss = 0.0;
  const double w = 1.0 / static_cast<double>(n);
  for (int64_t a = 0; a < n; ++a) {
    int64_t hp = -1, hn = -1;
    for (int64_t j = 0; j < n; ++j) {
      if (j == a) continue;
      if (labels[j] == labels[a]) {
        if (hp < 0 || dist.at(a, j) > dist.at(a, hp)) hp = j;
      } else {
        if (hn < 0 || dist.at(a, j) < dist.at(a, hn)) hn = j;
      }
    }
    const double term = dist.at(a, hp) - dist.at(a, hn) + margin;
    if (term <= 0.0) continue;
    loss += w * term;

    if (d_features) {
      // d term / d f = unit(a - hp) on the positive side, minus unit(a - hn).
      // Coincident points contribute a zero subgradient.
      const double* fa = features.data() + a * d;
      if (dist.at(a, hp) > kNormGuard) {
        const double inv = 1.0 / dist.at(a, hp);
        const double* fp = features.data() + hp * d;
        for (int64_t t = 0; t < d; ++t) {
          const double g = w * (fa[t] - fp[t]) * inv;
          d_features->at(a, t) += g;
          d_features->at(hp, t) -= g;
        }
      }
      if (dist.at(a, hn) > kNormGuard) {
        const double inv = 1.0 / dist.at(a, hn);
        const double* fn = features.data() + hn * d;
        for (int64_t t = 0; t < d; ++t) {
          const double g = w * (fa[t] - fn[t]) * inv;
          d_features->at(a, t) -= g;
          d_features->at(hn, t) += g;
        }
      }
    }
  }
  return loss;
}

double deformation_loss(const std::vector<double>& angles,
                        std::vector<double>* d_angles) {
  if (angles.empty()) return 0.0;
  if (d_angles && d_angles->size() != angles.size()) {
    throw ConfigError("deformation_loss: gradient size mismatch");
  }
  const double inv = 1.0 / static_cast<double>(angles.size());
  double loss = 0.0;
  for (size_t l = 0; l < angles.size(); ++l) {
    loss += std::abs(angles[l]) * inv;
    if (d_angles) {
      (*d_angles)[l] +=
          angles[l] > 0.0 ? inv : (angles[l] < 0.0 ? -inv : 0.0);
    }
  }
  return loss;
}

double align_loss(const Tensor& masks, const Tensor& features,
                  const Tensor& protos, Tensor* d_masks, Tensor* d_features,
                  Tensor* d_protos, int64_t* guarded_events) {
  if (masks.rank() != 2 || masks.shape() != features.shape() ||
      masks.shape() != protos.shape()) {
    throw ConfigError("align_loss: all inputs must share one N x D shape");
  }
  const int64_t n = masks.shape(0), d = masks.shape(1);
  const double eps = kNormGuard;
  const double w = 1.0 / static_cast<double>(n);
  if (guarded_events) *guarded_events = 0;

  double loss = 0.0;
  std::vector<double> a(static_cast<size_t>(d)), b(static_cast<size_t>(d));
  std::vector<double> ga(static_cast<size_t>(d)), gb(static_cast<size_t>(d));
  for (int64_t i = 0; i < n; ++i) {
    const double* m = masks.data() + i * d;
    const double* f = features.data() + i * d;
    const double* p = protos.data() + i * d;
    double na2 = 0.0, nb2 = 0.0;
    for (int64_t t = 0; t < d; ++t) {
      a[static_cast<size_t>(t)] = m[t] * p[t];
      b[static_cast<size_t>(t)] = m[t] * f[t];
      na2 += a[static_cast<size_t>(t)] * a[static_cast<size_t>(t)];
      nb2 += b[static_cast<size_t>(t)] * b[static_cast<size_t>(t)];
    }
    if (guarded_events) {
      if (na2 < eps) ++*guarded_events;
      if (nb2 < eps) ++*guarded_events;
    }
    const double na = std::sqrt(na2 + eps);
    const double nb = std::sqrt(nb2 + eps);

    double term = 0.0, adotg = 0.0, bdotg = 0.0;
    for (int64_t t = 0; t < d; ++t) {
      const size_t s = static_cast<size_t>(t);
      const double diff = a[s] / na - b[s] / nb;
      term += diff * diff;
      // d term / d a_hat = 2 diff, d term / d b_hat = -2 diff.
      ga[s] = 2.0 * diff;
      gb[s] = -2.0 * diff;
    }
    loss += w * term;

    if (d_masks || d_features || d_protos) {
      for (int64_t t = 0; t < d; ++t) {
        adotg += (a[static_cast<size_t>(t)] / na) * ga[static_cast<size_t>(t)];
        bdotg += (b[static_cast<size_t>(t)] / nb) * gb[static_cast<size_t>(t)];
      }
      for (int64_t t = 0; t < d; ++t) {
        const size_t s = static_cast<size_t>(t);
        const double da = w * (ga[s] - (a[s] / na) * adotg) / na;
        const double db = w * (gb[s] - (b[s] / nb) * bdotg) / nb;
        if (d_masks) d_masks->at(i, t) += da * p[t] + db * f[t];
        if (d_protos) d_protos->at(i, t) += da * m[t];
        if (d_features) d_features->at(i, t) += db * m[t];
      }
    }
  }
  return loss;
}

double entropy_loss(const Tensor& masks, Tensor* d_masks) {
  if (masks.numel() == 0) throw ConfigError("entropy_loss: empty masks");
  if (d_masks && d_masks->shape() != masks.shape()) {
    throw ConfigError("entropy_loss: gradient shape mismatch");
  }
  constexpr double kClamp = 1e-7;
  const double w = 1.0 / static_cast<double>(masks.numel());
  double loss = 0.0;
  for (int64_t i = 0; i < masks.numel(); ++i) {
    const double raw = masks[i];
    const double m = std::clamp(raw, kClamp, 1.0 - kClamp);
    loss += -w * (m * std::log(m) + (1.0 - m) * std::log(1.0 - m));
    if (d_masks && raw > kClamp && raw < 1.0 - kClamp) {
      (*d_masks)[i] += w * std::log((1.0 - m) / m);
    }
  }
  return loss;
}

double mask_loss(double align, double entropy, double lambda) {
  if (lambda < 0.0) throw ConfigError("mask_loss: lambda must be >= 0");
  return align + lambda * entropy;
}

LossBreakdown total_loss(double id, double triplet, double deform,
                         double align, double entropy, const LossConfig& cfg) {
  cfg.validate();
  LossBreakdown out;
  out.id = id;
  out.triplet = triplet;
  out.deform = deform;
  out.align = align;
  out.entropy = entropy;
  out.mask = mask_loss(align, entropy, cfg.lambda);
  out.total = (id + triplet) + cfg.alpha * deform + cfg.beta * out.mask;
  return out;
}

}  // namespace tpsalign
