#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hvp/errors.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Adam with bias correction. Moment buffers are lazily sized to match the
// parameter list on the first step.
struct AdamState {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;
};

inline void adam_step(AdamState& st, const std::vector<Tensor*>& params,
                      const std::vector<Tensor>& grads,
                      const std::vector<std::string>& names = {}) {
    if (params.size() != grads.size()) throw dim_error("adam_step: param/grad count mismatch");
    if (st.m.empty()) {
        for (const Tensor* p : params) {
            st.m.push_back(Tensor::zeros(p->shape));
            st.v.push_back(Tensor::zeros(p->shape));
        }
    }
    if (st.m.size() != params.size()) throw dim_error("adam_step: state/param count mismatch");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].finite()) {
            std::string who = i < names.size() ? names[i] : ("param#" + std::to_string(i));
            throw numeric_error("adam_step: non-finite gradient for " + who);
        }
        if (!grads[i].same_shape(*params[i])) throw dim_error("adam_step: grad shape mismatch");
    }
    ++st.step;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            double g = grads[i].v[k];
            st.m[i].v[k] = st.beta1 * st.m[i].v[k] + (1.0 - st.beta1) * g;
            st.v[i].v[k] = st.beta2 * st.v[i].v[k] + (1.0 - st.beta2) * g * g;
            double mhat = st.m[i].v[k] / bc1;
            double vhat = st.v[i].v[k] / bc2;
            p.v[k] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
        p.check_finite("adam_step parameter");
    }
}

}  // namespace hvp
