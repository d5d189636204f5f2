#include "geohand/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace geohand {

GradCheckResult grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& builder,
    std::vector<Tensor> inputs, double eps) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.clear_grad();
  }

  // analytic pass
  std::vector<std::vector<double>> analytic;
  {
    Graph graph;
    GraphScope scope(graph);
    Tensor loss = builder(inputs);
    if (loss.numel() != 1) fail("grad_check: builder must return a scalar");
    graph.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) analytic.push_back(t.grad());
      else analytic.emplace_back(t.numel(), 0.0);  // input not used by the subgraph
      t.clear_grad();
    }
  }

  auto eval = [&]() {
    NoGradScope no_grad;
    Tensor loss = builder(inputs);
    return loss.value();
  };

  GradCheckResult res;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    double* data = inputs[ti].data();
    int64_t n = inputs[ti].numel();
    for (int64_t i = 0; i < n; ++i) {
      double saved = data[i];
      data[i] = saved + eps;
      double fp = eval();
      data[i] = saved - eps;
      double fm = eval();
      data[i] = saved;
      double numeric = (fp - fm) / (2.0 * eps);
      double a = analytic[ti][static_cast<size_t>(i)];
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        res.finite = false;
        res.max_rel_err = std::numeric_limits<double>::infinity();
        res.worst_input = "input " + std::to_string(ti) + " coord " + std::to_string(i) +
                          " (non-finite gradient)";
        return res;
      }
      double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(a));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_input = "input " + std::to_string(ti) + " coord " + std::to_string(i) +
                          " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

}  // namespace geohand
