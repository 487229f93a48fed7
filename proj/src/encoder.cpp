#include "tpsalign/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "tpsalign/common.hpp"
#include "tpsalign/linalg.hpp"

namespace tpsalign {

namespace {

constexpr double kLnEps = 1e-6;
constexpr double kEmbedGuard = 1e-12;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) +
         x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

void add_bias(Tensor& x, const Tensor& b) {
  const int64_t rows = x.shape(0), cols = x.shape(1);
  for (int64_t i = 0; i < rows; ++i) {
    double* r = x.data() + i * cols;
    for (int64_t j = 0; j < cols; ++j) r[j] += b[j];
  }
}

void col_sums_acc(const Tensor& x, Tensor& out) {
  const int64_t rows = x.shape(0), cols = x.shape(1);
  for (int64_t i = 0; i < rows; ++i) {
    const double* r = x.data() + i * cols;
    for (int64_t j = 0; j < cols; ++j) out[j] += r[j];
  }
}

// y = x * W + b for W stored (in x out).
Tensor linear(const Tensor& x, const Param& w, const Param& b) {
  Tensor y({x.shape(0), w.value.shape(1)});
  matmul(x.data(), w.value.data(), y.data(), x.shape(0), x.shape(1),
         w.value.shape(1));
  add_bias(y, b.value);
  return y;
}

// Backward of y = x * W + b: accumulates dW, db, and d_x += d_y * W^T.
void linear_backward(const Tensor& x, Param& w, Param& b, const Tensor& d_y,
                     Tensor& d_x) {
  const int64_t rows = x.shape(0), in = x.shape(1), out = w.value.shape(1);
  matmul_tn_acc(x.data(), d_y.data(), w.grad.data(), in, rows, out);
  col_sums_acc(d_y, b.grad);
  std::vector<double> wt(static_cast<size_t>(in * out));
  transpose(w.value.data(), wt.data(), in, out);
  matmul_acc(d_y.data(), wt.data(), d_x.data(), rows, out, in);
}

}  // namespace

bool EncoderConfig::placed(int64_t layer) const {
  return std::find(placement.begin(), placement.end(), layer) != placement.end();
}

void EncoderConfig::validate() const {
  if (depth < 1) throw ConfigError("encoder: depth must be >= 1");
  if (heads < 1) throw ConfigError("encoder: heads must be >= 1");
  if (dim % 2 != 0) throw ConfigError("encoder: dim must be even");
  if (dim % heads != 0) throw ConfigError("encoder: dim must divide by heads");
  if (patch < 1 || image_h % patch != 0 || image_w % patch != 0) {
    throw ConfigError("encoder: image dims must divide by the patch size");
  }
  if (in_channels < 1) throw ConfigError("encoder: in_channels must be >= 1");
  if (num_classes < 1) throw ConfigError("encoder: num_classes must be >= 1");
  if (mlp_ratio < 1) throw ConfigError("encoder: mlp_ratio must be >= 1");
  std::set<int64_t> seen;
  for (int64_t l : placement) {
    if (l < 0 || l >= depth) throw ConfigError("encoder: ltps placement outside [0, depth)");
    if (!seen.insert(l).second) throw ConfigError("encoder: duplicate ltps placement");
  }
  if (!eta_per_layer.empty() &&
      static_cast<int64_t>(eta_per_layer.size()) != depth) {
    throw ConfigError("encoder: eta_per_layer must list one value per layer");
  }
  const int64_t root = static_cast<int64_t>(std::llround(std::sqrt(
      static_cast<double>(control_points))));
  if (root < 2 || root > 6 || root * root != control_points) {
    throw ConfigError("encoder: control_points must be one of 4, 9, 16, 25, 36");
  }
}

std::vector<int64_t> placement_presets(const std::string& name, int64_t depth) {
  if (depth < 1) throw ConfigError("placement_presets: depth must be >= 1");
  const int64_t four = depth >= 12 ? 4 : (depth + 2) / 3;  // ceil(depth/3)
  std::vector<int64_t> out;
  if (name == "first_layer") {
    out.push_back(0);
  } else if (name == "first_4") {
    for (int64_t l = 0; l < std::min(four, depth); ++l) out.push_back(l);
  } else if (name == "middle_4") {
    const int64_t start = (depth - std::min(four, depth)) / 2;
    for (int64_t l = start; l < start + std::min(four, depth); ++l) out.push_back(l);
  } else if (name == "last_4") {
    for (int64_t l = std::max<int64_t>(0, depth - four); l < depth; ++l) out.push_back(l);
  } else if (name == "all") {
    for (int64_t l = 0; l < depth; ++l) out.push_back(l);
  } else {
    throw ConfigError("placement_presets: unknown preset '" + name + "'");
  }
  return out;
}

Tensor extract_patches(const Tensor& image, int64_t patch) {
  if (image.rank() != 3) throw ConfigError("extract_patches: image must be C x H x W");
  const int64_t c = image.shape(0), h = image.shape(1), w = image.shape(2);
  if (patch < 1 || h % patch != 0 || w % patch != 0) {
    throw ConfigError("extract_patches: image dims must divide by the patch size");
  }
  const int64_t gh = h / patch, gw = w / patch;
  Tensor out({gh * gw, c * patch * patch});
  for (int64_t pr = 0; pr < gh; ++pr) {
    for (int64_t pc = 0; pc < gw; ++pc) {
      double* row = out.data() + (pr * gw + pc) * out.shape(1);
      int64_t t = 0;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t py = 0; py < patch; ++py)
          for (int64_t px = 0; px < patch; ++px)
            row[t++] = image.at(ch, pr * patch + py, pc * patch + px);
    }
  }
  return out;
}

Encoder::Encoder(const EncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t d = cfg_.dim;
  const int64_t pw = cfg_.patch * cfg_.patch * cfg_.in_channels;
  const int64_t s = cfg_.tokens();
  const int64_t hid = cfg_.mlp_ratio * d;

  patch_w_ = Param("patch.weight", Tensor::zeros({pw, d}));
  patch_b_ = Param("patch.bias", Tensor::zeros({d}));
  cls_tok_ = Param("cls", Tensor::zeros({d}));
  view_tok_ = Param("view", Tensor::zeros({2, d}));
  pos_ = Param("pos", Tensor::zeros({s, d}));

  layers_.resize(static_cast<size_t>(cfg_.depth));
  for (int64_t l = 0; l < cfg_.depth; ++l) {
    Layer& lay = layers_[static_cast<size_t>(l)];
    const std::string p = "layers." + std::to_string(l) + ".";
    lay.ln1_g = Param(p + "ln1.gamma", Tensor::full({d}, 1.0));
    lay.ln1_b = Param(p + "ln1.beta", Tensor::zeros({d}));
    lay.wq = Param(p + "attn.wq", Tensor::zeros({d, d}));
    lay.bq = Param(p + "attn.bq", Tensor::zeros({d}));
    lay.wk = Param(p + "attn.wk", Tensor::zeros({d, d}));
    lay.bk = Param(p + "attn.bk", Tensor::zeros({d}));
    lay.wv = Param(p + "attn.wv", Tensor::zeros({d, d}));
    lay.bv = Param(p + "attn.bv", Tensor::zeros({d}));
    lay.wo = Param(p + "attn.wo", Tensor::zeros({d, d}));
    lay.bo = Param(p + "attn.bo", Tensor::zeros({d}));
    lay.ln2_g = Param(p + "ln2.gamma", Tensor::full({d}, 1.0));
    lay.ln2_b = Param(p + "ln2.beta", Tensor::zeros({d}));
    lay.m1_w = Param(p + "mlp.w1", Tensor::zeros({d, hid}));
    lay.m1_b = Param(p + "mlp.b1", Tensor::zeros({hid}));
    lay.m2_w = Param(p + "mlp.w2", Tensor::zeros({hid, d}));
    lay.m2_b = Param(p + "mlp.b2", Tensor::zeros({d}));
    if (cfg_.placed(l)) {
      lay.ltps = std::make_unique<LtpsBlock>(
          p + "ltps", cfg_.control_points, cfg_.grid_h(), cfg_.grid_w(), d,
          cfg_.eta_for(l), cfg_.rotation, cfg_.fixed_angle, cfg_.forward_warp,
          cfg_.eta_trainable);
    }
  }
  lnf_g_ = Param("lnf.gamma", Tensor::full({d}, 1.0));
  lnf_b_ = Param("lnf.beta", Tensor::zeros({d}));
  cls_w_ = Param("classifier.weight", Tensor::zeros({cfg_.num_classes, d}));
  cls_b_ = Param("classifier.bias", Tensor::zeros({cfg_.num_classes}));
}

void Encoder::init(Rng& rng) {
  const int64_t d = cfg_.dim;
  auto fill_normal = [&rng](Tensor& t, double sigma) {
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, sigma);
  };
  fill_normal(patch_w_.value, 1.0 / std::sqrt(static_cast<double>(patch_w_.value.shape(0))));
  patch_b_.value.fill(0.0);
  fill_normal(cls_tok_.value, 0.02);
  fill_normal(view_tok_.value, 0.02);
  fill_normal(pos_.value, 0.02);
  const double attn_s = 1.0 / std::sqrt(static_cast<double>(d));
  const double mlp_s = 1.0 / std::sqrt(static_cast<double>(cfg_.mlp_ratio * d));
  for (Layer& lay : layers_) {
    fill_normal(lay.wq.value, attn_s);
    fill_normal(lay.wk.value, attn_s);
    fill_normal(lay.wv.value, attn_s);
    fill_normal(lay.wo.value, attn_s);
    fill_normal(lay.m1_w.value, attn_s);
    fill_normal(lay.m2_w.value, mlp_s);
    if (lay.ltps) lay.ltps->init(rng);
  }
  fill_normal(cls_w_.value, attn_s);
  cls_b_.value.fill(0.0);
}

void Encoder::collect_params(ParamRefs& out) {
  out.push_back(&patch_w_);
  out.push_back(&patch_b_);
  out.push_back(&cls_tok_);
  out.push_back(&view_tok_);
  out.push_back(&pos_);
  for (Layer& lay : layers_) {
    if (lay.ltps) lay.ltps->collect_params(out);
    for (Param* p : {&lay.ln1_g, &lay.ln1_b, &lay.wq, &lay.bq, &lay.wk, &lay.bk,
                     &lay.wv, &lay.bv, &lay.wo, &lay.bo, &lay.ln2_g, &lay.ln2_b,
                     &lay.m1_w, &lay.m1_b, &lay.m2_w, &lay.m2_b}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_g_);
  out.push_back(&lnf_b_);
  out.push_back(&cls_w_);
  out.push_back(&cls_b_);
}

void Encoder::zero_grads() {
  ParamRefs params;
  collect_params(params);
  for (Param* p : params) p->zero_grad();
}

std::vector<LtpsBlock*> Encoder::ltps_blocks() {
  std::vector<LtpsBlock*> out;
  for (Layer& lay : layers_)
    if (lay.ltps) out.push_back(lay.ltps.get());
  return out;
}

void Encoder::layer_norm(const Tensor& x, const Param& g, const Param& b,
                         Tensor& xhat, Tensor& rstd, Tensor& out) const {
  const int64_t rows = x.shape(0), d = x.shape(1);
  xhat = Tensor({rows, d});
  rstd = Tensor({rows});
  out = Tensor({rows, d});
  for (int64_t i = 0; i < rows; ++i) {
    const double* r = x.data() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += r[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLnEps);
    rstd[i] = rs;
    double* xh = xhat.data() + i * d;
    double* o = out.data() + i * d;
    for (int64_t j = 0; j < d; ++j) {
      xh[j] = (r[j] - mean) * rs;
      o[j] = g.value[j] * xh[j] + b.value[j];
    }
  }
}

void Encoder::layer_norm_backward(const Tensor& d_out, const Tensor& xhat,
                                  const Tensor& rstd, Param& g, Param& b,
                                  Tensor& d_x) const {
  const int64_t rows = d_out.shape(0), d = d_out.shape(1);
  for (int64_t i = 0; i < rows; ++i) {
    const double* go = d_out.data() + i * d;
    const double* xh = xhat.data() + i * d;
    double m1 = 0.0, m2 = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double dxh = go[j] * g.value[j];
      m1 += dxh;
      m2 += dxh * xh[j];
      g.grad[j] += go[j] * xh[j];
      b.grad[j] += go[j];
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    double* dx = d_x.data() + i * d;
    const double rs = rstd[i];
    for (int64_t j = 0; j < d; ++j) {
      const double dxh = go[j] * g.value[j];
      dx[j] += rs * (dxh - m1 - xh[j] * m2);
    }
  }
}

Encoder::Output Encoder::forward(const Tensor& image, int64_t view,
                                 Cache* cache) const {
  if (view != 0 && view != 1) throw ConfigError("encoder: view must be 0 or 1");
  const int64_t d = cfg_.dim, s = cfg_.tokens();
  const int64_t gh = cfg_.grid_h(), gw = cfg_.grid_w(), hw = gh * gw;
  const int64_t hd = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Cache local;
  Cache& cc = cache ? *cache : local;
  cc.view = view;

  cc.patches = extract_patches(image, cfg_.patch);
  if (cc.patches.shape(0) != hw || cc.patches.shape(1) != patch_w_.value.shape(0)) {
    throw ConfigError("encoder: image shape disagrees with the configuration");
  }

  // Assemble the token sequence: [cls, view, patches...] + positions.
  Tensor x({s, d});
  Tensor tokens = linear(cc.patches, patch_w_, patch_b_);
  for (int64_t j = 0; j < d; ++j) {
    x.at(0, j) = cls_tok_.value[j] + pos_.value.at(0, j);
    x.at(1, j) = view_tok_.value.at(view, j) + pos_.value.at(1, j);
  }
  for (int64_t p = 0; p < hw; ++p)
    for (int64_t j = 0; j < d; ++j)
      x.at(2 + p, j) = tokens.at(p, j) + pos_.value.at(2 + p, j);
  cc.x0 = x;

  cc.blocks.clear();
  cc.blocks.resize(static_cast<size_t>(cfg_.depth));
  cc.states.clear();

  for (int64_t l = 0; l < cfg_.depth; ++l) {
    const Layer& lay = layers_[static_cast<size_t>(l)];
    BlockCache& bc = cc.blocks[static_cast<size_t>(l)];

    if (lay.ltps) {
      Tensor grid({gh, gw, d});
      std::memcpy(grid.data(), x.data() + 2 * d,
                  static_cast<size_t>(hw * d) * sizeof(double));
      Tensor fused = lay.ltps->forward(grid, &bc.ltps);
      std::memcpy(x.data() + 2 * d, fused.data(),
                  static_cast<size_t>(hw * d) * sizeof(double));
      LtpsState st;
      st.layer_index = l;
      st.theta = bc.ltps.theta;
      st.eta = lay.ltps->eta();
      st.enabled = true;
      cc.states.push_back(st);
    }
    bc.x_ltps = x;

    // Pre-norm attention.
    layer_norm(x, lay.ln1_g, lay.ln1_b, bc.ln1_xhat, bc.ln1_rstd, bc.ln1_out);
    bc.q = linear(bc.ln1_out, lay.wq, lay.bq);
    bc.k = linear(bc.ln1_out, lay.wk, lay.bk);
    bc.v = linear(bc.ln1_out, lay.wv, lay.bv);
    bc.probs = Tensor({cfg_.heads, s, s});
    bc.ctx = Tensor::zeros({s, d});
    for (int64_t h = 0; h < cfg_.heads; ++h) {
      const int64_t ofs = h * hd;
      double* ph = bc.probs.data() + h * s * s;
      for (int64_t i = 0; i < s; ++i) {
        const double* qi = bc.q.data() + i * d + ofs;
        double* row = ph + i * s;
        double mx = -1e300;
        for (int64_t j = 0; j < s; ++j) {
          const double* kj = bc.k.data() + j * d + ofs;
          double acc = 0.0;
          for (int64_t t = 0; t < hd; ++t) acc += qi[t] * kj[t];
          row[j] = acc * scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (int64_t j = 0; j < s; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (int64_t j = 0; j < s; ++j) row[j] /= z;
        double* ci = bc.ctx.data() + i * d + ofs;
        for (int64_t j = 0; j < s; ++j) {
          const double* vj = bc.v.data() + j * d + ofs;
          const double p = row[j];
          for (int64_t t = 0; t < hd; ++t) ci[t] += p * vj[t];
        }
      }
    }
    Tensor attn_out = linear(bc.ctx, lay.wo, lay.bo);
    bc.x_attn = x;
    for (int64_t i = 0; i < s * d; ++i) bc.x_attn[i] += attn_out[i];

    // Pre-norm MLP.
    layer_norm(bc.x_attn, lay.ln2_g, lay.ln2_b, bc.ln2_xhat, bc.ln2_rstd,
               bc.ln2_out);
    bc.h_pre = linear(bc.ln2_out, lay.m1_w, lay.m1_b);
    bc.h_act = bc.h_pre;
    for (int64_t i = 0; i < bc.h_act.numel(); ++i) bc.h_act[i] = gelu(bc.h_act[i]);
    Tensor mlp_out = linear(bc.h_act, lay.m2_w, lay.m2_b);
    bc.x_out = bc.x_attn;
    for (int64_t i = 0; i < s * d; ++i) bc.x_out[i] += mlp_out[i];
    x = bc.x_out;
  }

  // Final norm on the cls row, then l2 normalization for retrieval.
  Tensor cls_row({1, d});
  std::memcpy(cls_row.data(), x.data(), static_cast<size_t>(d) * sizeof(double));
  Tensor xhat, rstd, e_row;
  layer_norm(cls_row, lnf_g_, lnf_b_, xhat, rstd, e_row);
  cc.lnf_xhat = Tensor({d}, std::vector<double>(xhat.data(), xhat.data() + d));
  cc.lnf_rstd = rstd[0];
  cc.embed_raw = Tensor({d}, std::vector<double>(e_row.data(), e_row.data() + d));

  double nn = kEmbedGuard;
  for (int64_t j = 0; j < d; ++j) nn += cc.embed_raw[j] * cc.embed_raw[j];
  nn = std::sqrt(nn);
  cc.inv_norm = 1.0 / nn;
  cc.embedding = Tensor({d});
  for (int64_t j = 0; j < d; ++j) cc.embedding[j] = cc.embed_raw[j] * cc.inv_norm;

  Output out;
  out.embedding = cc.embedding;
  // The classifier reads the raw cls feature; the l2 normalization above is
  // retrieval geometry only, and routing it into the logits would cap their
  // scale at the classifier row norms.
  out.logits = Tensor({cfg_.num_classes});
  for (int64_t c = 0; c < cfg_.num_classes; ++c) {
    const double* row = cls_w_.value.data() + c * d;
    double acc = cls_b_.value[c];
    for (int64_t j = 0; j < d; ++j) acc += row[j] * cc.embed_raw[j];
    out.logits[c] = acc;
  }
  out.logits.ensure_finite("encoder logits");
  out.states = cc.states;
  return out;
}

void Encoder::backward(const Cache& cache, const Tensor& d_embedding,
                       const Tensor& d_logits,
                       const std::vector<double>& d_theta_extra) {
  const int64_t d = cfg_.dim, s = cfg_.tokens();
  const int64_t gh = cfg_.grid_h(), gw = cfg_.grid_w(), hw = gh * gw;
  const int64_t hd = d / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (!d_theta_extra.empty() && d_theta_extra.size() != cache.states.size()) {
    throw ConfigError("encoder backward: d_theta_extra size mismatch");
  }

  // Classifier head: the logits cotangent lands on the raw cls feature, the
  // embedding cotangent on the normalized one.
  Tensor d_u({d});
  Tensor d_raw({d});
  if (d_embedding.numel() == d) {
    for (int64_t j = 0; j < d; ++j) d_u[j] = d_embedding[j];
  } else if (d_embedding.numel() != 0) {
    throw ConfigError("encoder backward: embedding cotangent width mismatch");
  }
  if (d_logits.numel() == cfg_.num_classes) {
    for (int64_t c = 0; c < cfg_.num_classes; ++c) {
      const double g = d_logits[c];
      cls_b_.grad[c] += g;
      double* wrow = cls_w_.grad.data() + c * d;
      const double* vrow = cls_w_.value.data() + c * d;
      for (int64_t j = 0; j < d; ++j) {
        wrow[j] += g * cache.embed_raw[j];
        d_raw[j] += g * vrow[j];
      }
    }
  } else if (d_logits.numel() != 0) {
    throw ConfigError("encoder backward: logits cotangent width mismatch");
  }

  // Through u = e / sqrt(|e|^2 + guard): d_e = (d_u - u (u . d_u)) / n,
  // plus the direct classifier path into e.
  double udot = 0.0;
  for (int64_t j = 0; j < d; ++j) udot += cache.embedding[j] * d_u[j];
  Tensor d_e({1, d});
  for (int64_t j = 0; j < d; ++j) {
    d_e.at(0, j) =
        (d_u[j] - cache.embedding[j] * udot) * cache.inv_norm + d_raw[j];
  }

  // Final layer norm over the cls row only.
  Tensor d_x = Tensor::zeros({s, d});
  {
    Tensor xhat({1, d},
                std::vector<double>(cache.lnf_xhat.data(), cache.lnf_xhat.data() + d));
    Tensor rstd({1});
    rstd[0] = cache.lnf_rstd;
    Tensor d_cls = Tensor::zeros({1, d});
    layer_norm_backward(d_e, xhat, rstd, lnf_g_, lnf_b_, d_cls);
    for (int64_t j = 0; j < d; ++j) d_x.at(0, j) = d_cls.at(0, j);
  }

  size_t state_idx = cache.states.size();
  for (int64_t l = cfg_.depth - 1; l >= 0; --l) {
    Layer& lay = layers_[static_cast<size_t>(l)];
    const BlockCache& bc = cache.blocks[static_cast<size_t>(l)];

    // MLP half: x_out = x_attn + m2(gelu(m1(ln2(x_attn)))).
    Tensor d_hact = Tensor::zeros({s, cfg_.mlp_ratio * d});
    linear_backward(bc.h_act, lay.m2_w, lay.m2_b, d_x, d_hact);
    for (int64_t i = 0; i < d_hact.numel(); ++i) {
      d_hact[i] *= gelu_grad(bc.h_pre[i]);
    }
    Tensor d_ln2 = Tensor::zeros({s, d});
    linear_backward(bc.ln2_out, lay.m1_w, lay.m1_b, d_hact, d_ln2);
    layer_norm_backward(d_ln2, bc.ln2_xhat, bc.ln2_rstd, lay.ln2_g, lay.ln2_b,
                        d_x);

    // Attention half: x_attn = x_ltps + wo(attend(ln1(x_ltps))).
    Tensor d_ctx = Tensor::zeros({s, d});
    linear_backward(bc.ctx, lay.wo, lay.bo, d_x, d_ctx);
    Tensor d_q = Tensor::zeros({s, d});
    Tensor d_k = Tensor::zeros({s, d});
    Tensor d_v = Tensor::zeros({s, d});
    std::vector<double> d_probs(static_cast<size_t>(s) * static_cast<size_t>(s));
    for (int64_t h = 0; h < cfg_.heads; ++h) {
      const int64_t ofs = h * hd;
      const double* ph = bc.probs.data() + h * s * s;
      for (int64_t i = 0; i < s; ++i) {
        const double* dci = d_ctx.data() + i * d + ofs;
        const double* prow = ph + i * s;
        double* dprow = d_probs.data() + i * s;
        for (int64_t j = 0; j < s; ++j) {
          const double* vj = bc.v.data() + j * d + ofs;
          double* dvj = d_v.data() + j * d + ofs;
          double acc = 0.0;
          const double p = prow[j];
          for (int64_t t = 0; t < hd; ++t) {
            acc += dci[t] * vj[t];
            dvj[t] += p * dci[t];
          }
          dprow[j] = acc;
        }
        // softmax backward on this row
        double dot = 0.0;
        for (int64_t j = 0; j < s; ++j) dot += dprow[j] * prow[j];
        for (int64_t j = 0; j < s; ++j) {
          const double ds = prow[j] * (dprow[j] - dot) * scale;
          const double* kj = bc.k.data() + j * d + ofs;
          const double* qi = bc.q.data() + i * d + ofs;
          double* dqi = d_q.data() + i * d + ofs;
          double* dkj = d_k.data() + j * d + ofs;
          for (int64_t t = 0; t < hd; ++t) {
            dqi[t] += ds * kj[t];
            dkj[t] += ds * qi[t];
          }
        }
      }
    }
    Tensor d_ln1 = Tensor::zeros({s, d});
    linear_backward(bc.ln1_out, lay.wq, lay.bq, d_q, d_ln1);
    linear_backward(bc.ln1_out, lay.wk, lay.bk, d_k, d_ln1);
    linear_backward(bc.ln1_out, lay.wv, lay.bv, d_v, d_ln1);
    layer_norm_backward(d_ln1, bc.ln1_xhat, bc.ln1_rstd, lay.ln1_g, lay.ln1_b,
                        d_x);

    if (lay.ltps) {
      --state_idx;
      const double extra =
          d_theta_extra.empty() ? 0.0 : d_theta_extra[state_idx];
      Tensor d_grid({gh, gw, d});
      std::memcpy(d_grid.data(), d_x.data() + 2 * d,
                  static_cast<size_t>(hw * d) * sizeof(double));
      Tensor d_grid_in = Tensor::zeros({gh, gw, d});
      lay.ltps->backward(bc.ltps, d_grid, extra, &d_grid_in);
      std::memcpy(d_x.data() + 2 * d, d_grid_in.data(),
                  static_cast<size_t>(hw * d) * sizeof(double));
    }
  }

  // Token assembly.
  for (int64_t j = 0; j < d; ++j) {
    cls_tok_.grad[j] += d_x.at(0, j);
    view_tok_.grad.at(cache.view, j) += d_x.at(1, j);
  }
  for (int64_t i = 0; i < s; ++i)
    for (int64_t j = 0; j < d; ++j) pos_.grad.at(i, j) += d_x.at(i, j);
  Tensor d_tokens({hw, d});
  std::memcpy(d_tokens.data(), d_x.data() + 2 * d,
              static_cast<size_t>(hw * d) * sizeof(double));
  matmul_tn_acc(cache.patches.data(), d_tokens.data(), patch_w_.grad.data(),
                cache.patches.shape(1), hw, d);
  col_sums_acc(d_tokens, patch_b_.grad);
}

}  // namespace tpsalign
