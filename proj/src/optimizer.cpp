#include "geohand/optimizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace geohand {

AdamW::AdamW(const ParamMap& params, double lr_in, double weight_decay, double beta1, double beta2,
             double eps)
    : lr(lr_in), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.resize(params.size());
  v_.resize(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    m_[i].assign(static_cast<size_t>(params[i].tensor.numel()), 0.0);
    v_[i].assign(static_cast<size_t>(params[i].tensor.numel()), 0.0);
  }
}

void AdamW::zero_grad(ParamMap& params) const {
  for (auto& p : params) p.tensor.clear_grad();
}

void AdamW::step(ParamMap& params) {
  if (params.size() != m_.size()) {
    throw std::runtime_error("adamw: parameter map size changed since construction");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& p = params[i].tensor;
    const size_t n = static_cast<size_t>(p.numel());
    if (m_[i].size() != n) {
      throw std::runtime_error("adamw: state size mismatch for '" + params[i].name + "'");
    }
    const double* g = p.has_grad() ? p.grad().data() : nullptr;
    double* x = p.data();
    for (size_t k = 0; k < n; ++k) {
      const double gk = g ? g[k] : 0.0;
      m_[i][k] = beta1_ * m_[i][k] + (1.0 - beta1_) * gk;
      v_[i][k] = beta2_ * v_[i][k] + (1.0 - beta2_) * gk * gk;
      const double mhat = m_[i][k] / bc1;
      const double vhat = v_[i][k] / bc2;
      x[k] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd_ * x[k]);
    }
  }
}

void AdamW::restore(uint64_t t, std::vector<std::vector<double>> m,
                    std::vector<std::vector<double>> v) {
  if (m.size() != m_.size() || v.size() != v_.size()) {
    throw std::runtime_error("adamw: restored state has a different parameter count");
  }
  for (size_t i = 0; i < m.size(); ++i) {
    if (m[i].size() != m_[i].size() || v[i].size() != v_[i].size()) {
      throw std::runtime_error("adamw: restored state shape mismatch at index " + std::to_string(i));
    }
  }
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace geohand
