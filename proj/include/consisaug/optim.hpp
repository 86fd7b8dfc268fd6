#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "consisaug/errors.hpp"
#include "consisaug/model.hpp"

namespace consisaug {

/// Linear warmup to max_lr followed by a half-cosine decay to ~0 over the
/// remaining steps.
inline double lr_schedule(std::int64_t step, std::int64_t total_steps, std::int64_t warmup_steps,
                          double max_lr) {
  if (step < 0) raise(ErrorCode::InvalidConfig, "negative step");
  if (warmup_steps > 0 && step < warmup_steps)
    return max_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return max_lr;
  const double t = static_cast<double>(step - warmup_steps) /
                   static_cast<double>(total_steps - warmup_steps);
  return max_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, t)));
}

/// Decoupled-weight-decay Adam. Moments are keyed by parameter name so
/// they serialize naturally into checkpoints.
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t t = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;

  void step(DetectorParams& params, const std::map<std::string, std::vector<double>>& grads,
            double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    params.for_each([&](const char* name, Tensor& p) {
      const auto it = grads.find(name);
      if (it == grads.end()) raise(ErrorCode::ShapeMismatch, std::string("missing gradient for ") + name);
      const std::vector<double>& g = it->second;
      if (g.size() != p.data.size())
        raise(ErrorCode::ShapeMismatch, std::string("gradient shape mismatch for ") + name);
      auto& mi = m[name];
      auto& vi = v[name];
      if (mi.empty()) mi.assign(g.size(), 0.0);
      if (vi.empty()) vi.assign(g.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        mi[i] = beta1 * mi[i] + (1.0 - beta1) * g[i];
        vi[i] = beta2 * vi[i] + (1.0 - beta2) * g[i] * g[i];
        const double mhat = mi[i] / bc1;
        const double vhat = vi[i] / bc2;
        p.data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[i]);
      }
    });
  }
};

}  // namespace consisaug
