#pragma once

#include <cstdint>
#include <vector>

#include "geohand/nn.hpp"

// AdamW with decoupled weight decay. State rows align with the ParamMap the
// optimizer was built over; non-trainable entries keep empty state and are
// never touched.

namespace geohand {

class AdamW {
 public:
  AdamW() = default;
  AdamW(const ParamMap& params, double lr, double weight_decay, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8);

  void zero_grad(ParamMap& params) const;
  void step(ParamMap& params);  // reads grads, updates data in place

  uint64_t t() const { return t_; }
  const std::vector<std::vector<double>>& m_state() const { return m_; }
  const std::vector<std::vector<double>>& v_state() const { return v_; }
  // checkpoint restore; sizes must match the constructed state
  void restore(uint64_t t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v);

  double lr = 0.0;

 private:
  double wd_ = 0.0, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace geohand
