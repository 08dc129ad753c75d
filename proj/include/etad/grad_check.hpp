#pragma once

#include "etad/tensor.hpp"

#include <functional>
#include <vector>

namespace etad {

// Scalar-valued function of a single tensor, rebuilt on the given graph.
using ScalarFn = std::function<Tensor(Graph&, const Tensor&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  // coordinates where the one-sided differences disagree (nondifferentiable
  // point within eps); these are reported, not compared
  std::vector<std::int64_t> excluded;
};

// Compares the analytic gradient of fn at x0 against central finite
// differences with step eps. Relative error per coordinate is
// |analytic - central| / max(1, |central|).
GradCheckResult grad_check(const ScalarFn& fn, const Shape& shape,
                           const ArrayX& x0, double eps = 1e-5);

}  // namespace etad
