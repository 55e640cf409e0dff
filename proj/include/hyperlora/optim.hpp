#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hyperlora/errors.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

struct AdamWConfig {
  double lr = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

// Decoupled weight decay:
//   m <- b1 m + (1-b1) g            v <- b2 v + (1-b2) g^2
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
template <typename T = float>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long step_count() const { return t_; }

  // Moment access for checkpoint/resume of long runs.
  const std::vector<std::vector<T>>& moments_m() const { return m_; }
  const std::vector<std::vector<T>>& moments_v() const { return v_; }
  void restore(std::vector<std::vector<T>> m, std::vector<std::vector<T>> v,
               long t) {
    if (m.size() != v.size())
      throw StructuralError("optimizer restore: m/v group count mismatch");
    m_ = std::move(m);
    v_ = std::move(v);
    t_ = t;
  }

  void step(const std::vector<Tensor<T>*>& params,
            const std::vector<Tensor<T>*>& grads) {
    if (params.size() != grads.size())
      throw StructuralError("optimizer: params/grads count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<std::size_t>(params[i]->numel()), T{0});
        v_[i].assign(static_cast<std::size_t>(params[i]->numel()), T{0});
      }
    }
    if (m_.size() != params.size())
      throw StructuralError("optimizer: parameter group changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      const Tensor<T>& g = *grads[i];
      check_same_shape(p, g, "optimizer step");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::int64_t j = 0; j < p.numel(); ++j) {
        double gj = static_cast<double>(g[j]);
        double mj = cfg_.beta1 * m[static_cast<std::size_t>(j)] +
                    (1.0 - cfg_.beta1) * gj;
        double vj = cfg_.beta2 * v[static_cast<std::size_t>(j)] +
                    (1.0 - cfg_.beta2) * gj * gj;
        m[static_cast<std::size_t>(j)] = static_cast<T>(mj);
        v[static_cast<std::size_t>(j)] = static_cast<T>(vj);
        double update = (mj / bc1) / (std::sqrt(vj / bc2) + cfg_.eps) +
                        cfg_.weight_decay * static_cast<double>(p[j]);
        p[j] = static_cast<T>(static_cast<double>(p[j]) - cfg_.lr * update);
      }
    }
  }

 private:
  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<T>> m_, v_;
};

template <typename T>
double global_grad_norm(const std::vector<Tensor<T>*>& grads) {
  double sq = 0.0;
  for (const Tensor<T>* g : grads)
    for (std::int64_t j = 0; j < g->numel(); ++j)
      sq += static_cast<double>((*g)[j]) * static_cast<double>((*g)[j]);
  return std::sqrt(sq);
}

// Scales gradients in place when their global norm exceeds max_norm.
// Returns the pre-clip norm.
template <typename T>
double clip_global_norm(const std::vector<Tensor<T>*>& grads, double max_norm) {
  double norm = global_grad_norm(grads);
  if (norm > max_norm && norm > 0.0) {
    double scale = max_norm / norm;
    for (Tensor<T>* g : grads)
      for (std::int64_t j = 0; j < g->numel(); ++j)
        (*g)[j] = static_cast<T>(static_cast<double>((*g)[j]) * scale);
  }
  return norm;
}

}  // namespace hyperlora
