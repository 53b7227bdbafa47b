#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "cara/nn/tensor.hpp"

namespace cara::nn {

inline void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

inline double global_grad_norm(const std::vector<Param*>& params) {
  double sq = 0.0;
  for (Param* p : params) sq += p->grad.squaredNorm();
  return std::sqrt(sq);
}

// Rescales gradients in place so the global norm does not exceed max_norm.
inline void clip_global_norm(const std::vector<Param*>& params, double max_norm) {
  double n = global_grad_norm(params);
  if (n > max_norm && n > 0.0) {
    double s = max_norm / n;
    for (Param* p : params) p->grad *= s;
  }
}

struct Sgd {
  void step(const std::vector<Param*>& params, double lr) {
    for (Param* p : params) p->value -= lr * p->grad;
  }
};

// Adam with per-parameter state; the same instance may serve several
// parameter groups at different learning rates.
struct Adam {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  struct Slot {
    Mat m, v;
    long t = 0;
  };
  std::unordered_map<Param*, Slot> state;

  void step(const std::vector<Param*>& params, double lr) {
    for (Param* p : params) {
      Slot& s = state[p];
      if (s.m.size() == 0) {
        s.m = Mat::Zero(p->value.rows(), p->value.cols());
        s.v = Mat::Zero(p->value.rows(), p->value.cols());
      }
      s.t += 1;
      s.m = beta1 * s.m + (1.0 - beta1) * p->grad;
      s.v = beta2 * s.v.array() + (1.0 - beta2) * p->grad.array().square();
      const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(s.t));
      const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(s.t));
      p->value.array() -=
          lr * (s.m.array() / bc1) / ((s.v.array() / bc2).sqrt() + eps);
    }
  }
};

}  // namespace cara::nn
