#pragma once

#include <functional>
#include <string>
#include <vector>

#include "geohand/tensor.hpp"

// Central-difference gradient verification. The builder must be a pure,
// deterministic function of its inputs; it is replayed twice per perturbed
// coordinate, so keep checked subgraphs small.

namespace geohand {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_input;  // description of the worst coordinate
  bool finite = true;
};

// relative error |analytic - numeric| / max(1, |analytic|), maximized over
// every coordinate of every input
GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& builder,
    std::vector<Tensor> inputs, double eps = 1e-5);

}  // namespace geohand
