#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hvp/errors.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
    std::string worst;  // "param k, index j" of the worst component
    bool ok(double tol = 1e-4) const { return max_rel_err < tol; }
};

// Central finite differences against an analytic gradient over a list of
// parameter tensors. `f` evaluates the scalar loss at the current parameter
// state; `params` are mutated in place and restored. Relative error uses a
// symmetric denominator floored at `floor_abs` so near-zero pairs compare
// absolutely.
inline GradCheckResult gradcheck(const std::function<double()>& f,
                                 const std::vector<Tensor*>& params,
                                 const std::vector<Tensor>& analytic, double h = 1e-5,
                                 double floor_abs = 1e-6) {
    if (analytic.size() != params.size())
        throw dim_error("gradcheck: gradient count != parameter count");
    GradCheckResult res;
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (!analytic[k].same_shape(*params[k]))
            throw dim_error("gradcheck: gradient shape mismatch at parameter " +
                            std::to_string(k));
        for (std::size_t j = 0; j < params[k]->size(); ++j) {
            double saved = params[k]->v[j];
            params[k]->v[j] = saved + h;
            double fp = f();
            params[k]->v[j] = saved - h;
            double fm = f();
            params[k]->v[j] = saved;
            double fd = (fp - fm) / (2.0 * h);
            double an = analytic[k].v[j];
            double denom = std::max(floor_abs, std::max(std::abs(fd), std::abs(an)));
            double rel = std::abs(fd - an) / denom;
            ++res.n_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = "param " + std::to_string(k) + ", index " + std::to_string(j) +
                            " (fd " + std::to_string(fd) + ", analytic " + std::to_string(an) + ")";
            }
        }
    }
    return res;
}

// Single-tensor convenience overload (e.g. gradient in a control vector).
inline GradCheckResult gradcheck(const std::function<double()>& f, Tensor& param,
                                 const Tensor& analytic, double h = 1e-5,
                                 double floor_abs = 1e-6) {
    std::vector<Tensor*> ps{&param};
    std::vector<Tensor> an{analytic};
    return gradcheck(f, ps, an, h, floor_abs);
}

}  // namespace hvp
