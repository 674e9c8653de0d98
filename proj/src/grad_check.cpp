#include "sora/grad_check.hpp"

#include "sora/errors.hpp"

#include <cmath>

namespace sora {

GradCheckResult finite_diff_check(const std::function<double()>& f,
                                  const std::vector<Tensor*>& params,
                                  const std::vector<Tensor>& analytic,
                                  double eps) {
    if (params.size() != analytic.size()) {
        throw InputError("finite_diff_check: params and analytic gradients differ in count");
    }
    GradCheckResult res;
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& t = *params[p];
        const Tensor& a = analytic[p];
        if (!t.same_shape(a)) {
            throw DimensionError("finite_diff_check: gradient shape " + a.shape_str() +
                                 " does not match parameter " + t.shape_str());
        }
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + eps;
            const double fp = f();
            t[i] = keep - eps;
            const double fm = f();
            t[i] = keep;
            const double num = (fp - fm) / (2.0 * eps);
            const double ana = a[i];
            const double abs_err = std::abs(ana - num);
            const double rel_err = abs_err / std::max({1.0, std::abs(ana), std::abs(num)});
            res.max_abs_err = std::max(res.max_abs_err, abs_err);
            res.max_rel_err = std::max(res.max_rel_err, rel_err);
            ++res.n_checked;
        }
    }
    return res;
}

} // namespace sora
