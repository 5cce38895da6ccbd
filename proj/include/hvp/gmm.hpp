#pragma once

#include <cmath>
#include <vector>

#include "hvp/rng.hpp"
#include "hvp/schedule.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Gaussian mixture data prior with isotropic per-component variances. Its
// noised posterior mean (Tweedie estimate) is available in closed form,
// which is what lets the oracle module verify everything downstream.
struct GmmPrior {
    std::vector<double> w;   // component weights, sum to 1
    std::vector<Tensor> m;   // component means, each [d]
    std::vector<double> v;   // isotropic variances
    std::size_t dim = 0;

    std::size_t components() const { return w.size(); }

    void validate() const {
        if (w.empty() || w.size() != m.size() || w.size() != v.size())
            throw param_error("gmm: inconsistent component counts");
        double ws = 0.0;
        for (double x : w) {
            if (x < 0.0) throw param_error("gmm: negative weight");
            ws += x;
        }
        if (std::abs(ws - 1.0) > 1e-12) throw param_error("gmm: weights must sum to 1");
        for (double x : v)
            if (!(x > 0.0)) throw param_error("gmm: variances must be positive");
        for (const Tensor& mk : m)
            if (mk.shape.size() != 1 || mk.shape[0] != dim) throw dim_error("gmm: mean dim mismatch");
    }

    static GmmPrior single(Tensor mean, double var) {
        GmmPrior p;
        p.dim = mean.size();
        p.w = {1.0};
        p.m = {std::move(mean)};
        p.v = {var};
        p.validate();
        return p;
    }

    static GmmPrior standard(std::size_t d) { return single(Tensor::zeros({d}), 1.0); }

    Tensor sample(NoiseStream& rng) const {
        double u = rng.uniform();
        std::size_t k = 0;
        double acc = 0.0;
        for (; k < w.size(); ++k) {
            acc += w[k];
            if (u <= acc) break;
        }
        if (k == w.size()) k = w.size() - 1;
        Tensor x = rng.normal_vec(dim);
        double sd = std::sqrt(v[k]);
        for (std::size_t i = 0; i < dim; ++i) x.v[i] = m[k].v[i] + sd * x.v[i];
        return x;
    }

    double log_density(const Tensor& x) const {
        double best = -1e300;
        std::vector<double> lw(w.size());
        for (std::size_t k = 0; k < w.size(); ++k) {
            double q = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                double dlt = x.v[i] - m[k].v[i];
                q += dlt * dlt;
            }
            lw[k] = std::log(w[k]) - 0.5 * static_cast<double>(dim) * std::log(2.0 * M_PI * v[k]) -
                    q / (2.0 * v[k]);
            best = std::max(best, lw[k]);
        }
        double z = 0.0;
        for (double l : lw) z += std::exp(l - best);
        return best + std::log(z);
    }
};

// Posterior mean E[x0 | x_t] under the mixture prior and forward marginal
// x_t = a_t x0 + s_t eps. Responsibilities in log space with max
// subtraction.
inline Tensor gmm_tweedie(const GmmPrior& prior, const NoiseSchedule& sch, const Tensor& x_t,
                          int t) {
    if (t < 1 || t > sch.T) throw param_error("gmm_tweedie: t out of range");
    double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
    std::size_t d = prior.dim;
    std::size_t K = prior.components();
    std::vector<double> logits(K);
    double mx = -1e300;
    for (std::size_t k = 0; k < K; ++k) {
        double c = at * at * prior.v[k] + st * st;
        if (!(c > 0.0)) throw numeric_error("gmm_tweedie: degenerate marginal variance");
        double q = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double dlt = x_t.v[i] - at * prior.m[k].v[i];
            q += dlt * dlt;
        }
        logits[k] = std::log(prior.w[k]) - 0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * c) -
                    q / (2.0 * c);
        mx = std::max(mx, logits[k]);
    }
    double z = 0.0;
    for (double& l : logits) {
        l = std::exp(l - mx);
        z += l;
    }
    Tensor out = Tensor::zeros({d});
    for (std::size_t k = 0; k < K; ++k) {
        double r = logits[k] / z;
        double c = at * at * prior.v[k] + st * st;
        double cx = at * prior.v[k] / c;
        double cm = st * st / c;
        for (std::size_t i = 0; i < d; ++i) out.v[i] += r * (cx * x_t.v[i] + cm * prior.m[k].v[i]);
    }
    return out;
}

// Tape version, differentiable w.r.t. x_t.
inline Var gmm_tweedie(Tape& tp, const GmmPrior& prior, const NoiseSchedule& sch, Var x_t, int t) {
    if (t < 1 || t > sch.T) throw param_error("gmm_tweedie: t out of range");
    double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
    std::size_t d = prior.dim;
    std::size_t K = prior.components();
    std::vector<Var> logits;
    logits.reserve(K);
    for (std::size_t k = 0; k < K; ++k) {
        double c = at * at * prior.v[k] + st * st;
        if (!(c > 0.0)) throw numeric_error("gmm_tweedie: degenerate marginal variance");
        Var diff = tp.addt(x_t, prior.m[k] * (-at));
        double cnst = std::log(prior.w[k]) - 0.5 * static_cast<double>(d) * std::log(2.0 * M_PI * c);
        logits.push_back(tp.shift(tp.scale(tp.sum_sq(diff), -1.0 / (2.0 * c)), cnst));
    }
    Var resp = tp.softmax(tp.concat(logits));
    Var out;
    for (std::size_t k = 0; k < K; ++k) {
        double c = at * at * prior.v[k] + st * st;
        Var comp_mean = tp.addt(tp.scale(x_t, at * prior.v[k] / c), prior.m[k] * (st * st / c));
        Var term = tp.smul(comp_mean, tp.slice(resp, k, 1));
        out = (k == 0) ? term : tp.add(out, term);
    }
    return out;
}

}  // namespace hvp
