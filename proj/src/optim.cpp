#include "tpsalign/optim.hpp"

#include <cmath>

#include "tpsalign/common.hpp"

namespace tpsalign {

void AdamW::init(const ParamRefs& params) {
  m.clear();
  v.clear();
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Param* p : params) {
    m.emplace_back(Tensor(p->value.shape()));
    v.emplace_back(Tensor(p->value.shape()));
  }
  step_count = 0;
}

void AdamW::step(ParamRefs& params, double lr) {
  if (m.size() != params.size())
    throw ConfigError("optimizer state does not match the parameter list");
  ++step_count;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_count));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_count));
  for (size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    const bool decay = p.value.rank() >= 2;
    for (int64_t k = 0; k < p.value.numel(); ++k) {
      const double g = p.grad[k];
      m[i][k] = beta1 * m[i][k] + (1.0 - beta1) * g;
      v[i][k] = beta2 * v[i][k] + (1.0 - beta2) * g * g;
      const double mhat = m[i][k] / bc1;
      const double vhat = v[i][k] / bc2;
      double x = p.value[k];
      if (decay) x -= lr * weight_decay * x;
      p.value[k] = x - lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void AdamW::save(NamedTensors* out, const ParamRefs& params) const {
  if (m.size() != params.size())
    throw ConfigError("optimizer state does not match the parameter list");
  for (size_t i = 0; i < params.size(); ++i) {
    out->put("adam.m." + params[i]->name, m[i]);
    out->put("adam.v." + params[i]->name, v[i]);
  }
  out->put_scalar("opt.step", static_cast<double>(step_count));
}

void AdamW::load(const NamedTensors& in, const ParamRefs& params) {
  init(params);
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor& ms = in.at("adam.m." + params[i]->name);
    const Tensor& vs = in.at("adam.v." + params[i]->name);
    if (ms.numel() != m[i].numel() || vs.numel() != v[i].numel())
      throw ConfigError("optimizer state shape mismatch for " +
                        params[i]->name);
    m[i] = ms;
    v[i] = vs;
  }
  step_count = static_cast<int64_t>(in.scalar("opt.step"));
}

double schedule_lr(double base, int64_t step, int64_t total_steps,
                   int64_t warmup_steps) {
  if (total_steps < 1) throw ConfigError("schedule needs total_steps >= 1");
  if (step < 0) step = 0;
  if (warmup_steps > 0 && step < warmup_steps)
    return base * static_cast<double>(step + 1) /
           static_cast<double>(warmup_steps);
  const int64_t span = total_steps - warmup_steps;
  if (span <= 1) return base;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(span);
  return base * 0.5 * (1.0 + std::cos(kPi * std::min(1.0, t)));
}

}  // namespace tpsalign
