#pragma once

#include "sora/tensor.hpp"

#include <functional>
#include <vector>

namespace sora {

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    std::size_t n_checked = 0;
};

// Compares analytic gradients against central finite differences.
//
// `f` must rebuild the forward pass from the current contents of `params`
// and return the scalar loss value. `analytic` holds d loss / d param in the
// same order, computed once by the caller (typically via Tape::backward)
// before the sweep. Every coordinate of every parameter is perturbed by
// +/- eps. The relative error is |a - n| / max(1, |a|, |n|), so gradients of
// order one are judged relatively and near-zero gradients absolutely.
GradCheckResult finite_diff_check(const std::function<double()>& f,
                                  const std::vector<Tensor*>& params,
                                  const std::vector<Tensor>& analytic,
                                  double eps = 1e-5);

} // namespace sora
