#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hvp/gmm.hpp"
#include "hvp/rng.hpp"
#include "hvp/schedule.hpp"
#include "hvp/task.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Dense matrix form of a linear measurement operator.
inline Tensor task_matrix(const ForwardTask& task) {
    if (!task.linear()) throw param_error("task_matrix: nonlinear task");
    if (task.kind == ForwardTask::Kind::Dense) return task.A;
    Tensor A = Tensor::zeros({task.m, task.d});
    for (std::size_t j = 0; j < task.d; ++j) {
        Tensor e = Tensor::zeros({task.d});
        e.v[j] = 1.0;
        Tensor col = apply(task, e);
        for (std::size_t i = 0; i < task.m; ++i) A.at(i, j) = col.v[i];
    }
    return A;
}

// In-place Cholesky of an SPD matrix stored row-major; returns lower factor.
inline Tensor cholesky(Tensor C) {
    std::size_t n = C.shape[0];
    if (C.shape.size() != 2 || C.shape[1] != n) throw dim_error("cholesky: square matrix expected");
    for (std::size_t j = 0; j < n; ++j) {
        double diag = C.at(j, j);
        for (std::size_t k = 0; k < j; ++k) diag -= C.at(j, k) * C.at(j, k);
        if (!(diag > 0.0)) throw numeric_error("cholesky: matrix not positive definite");
        double lj = std::sqrt(diag);
        C.at(j, j) = lj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = C.at(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= C.at(i, k) * C.at(j, k);
            C.at(i, j) = s / lj;
        }
        for (std::size_t k = j + 1; k < n; ++k) C.at(j, k) = 0.0;
    }
    return C;
}

inline Tensor chol_solve(const Tensor& L, const Tensor& b) {
    std::size_t n = L.shape[0];
    Tensor y = b;
    for (std::size_t i = 0; i < n; ++i) {
        double s = y.v[i];
        for (std::size_t k = 0; k < i; ++k) s -= L.at(i, k) * y.v[k];
        y.v[i] = s / L.at(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y.v[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= L.at(k, ii) * y.v[k];
        y.v[ii] = s / L.at(ii, ii);
    }
    return y;
}

// log N(x; mean, cov) with a dense SPD covariance.
inline double log_gaussian(const Tensor& x, const Tensor& mean, const Tensor& cov) {
    std::size_t n = x.size();
    Tensor L = cholesky(cov);
    Tensor r = x - mean;
    // solve L z = r, quad form = |z|^2
    double quad = 0.0, logdet = 0.0;
    Tensor z = r;
    for (std::size_t i = 0; i < n; ++i) {
        double s = z.v[i];
        for (std::size_t k = 0; k < i; ++k) s -= L.at(i, k) * z.v[k];
        z.v[i] = s / L.at(i, i);
        quad += z.v[i] * z.v[i];
        logdet += 2.0 * std::log(L.at(i, i));
    }
    return -0.5 * (static_cast<double>(n) * std::log(2.0 * M_PI) + logdet + quad);
}

// Gaussian prior (diagonal covariance) observed through a linear operator
// with isotropic noise: every posterior quantity in closed form.
struct GaussianLinearInstance {
    Tensor mu0;    // [d]
    Tensor var0;   // [d] diagonal of the prior covariance
    Tensor A;      // [m, d]
    double sigma_y = 0.01;
    Tensor y;      // [m]

    std::size_t d() const { return mu0.size(); }
    std::size_t m() const { return y.size(); }

    void check() const {
        if (A.shape.size() != 2 || A.shape[0] != m() || A.shape[1] != d())
            throw dim_error("gaussian-linear instance: A shape mismatch");
        for (double v : var0.v)
            if (!(v > 0.0)) throw param_error("gaussian-linear instance: prior variance <= 0");
        if (!(sigma_y >= 0.0)) throw param_error("gaussian-linear instance: sigma_y < 0");
    }

    // C = A diag(var0) A^T + sigma_y^2 I
    Tensor marginal_cov() const {
        std::size_t mm = m(), dd = d();
        Tensor C = Tensor::zeros({mm, mm});
        for (std::size_t i = 0; i < mm; ++i)
            for (std::size_t j = 0; j < mm; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < dd; ++k) s += A.at(i, k) * var0.v[k] * A.at(j, k);
                C.at(i, j) = s;
            }
        for (std::size_t i = 0; i < mm; ++i) C.at(i, i) += sigma_y * sigma_y;
        return C;
    }
};

inline double log_evidence(const GaussianLinearInstance& inst) {
    inst.check();
    return log_gaussian(inst.y, matvec(inst.A, inst.mu0), inst.marginal_cov());
}

struct PosteriorMoments {
    Tensor mean;  // [d]
    Tensor cov;   // [d, d]
};

inline PosteriorMoments posterior_moments(const GaussianLinearInstance& inst) {
    inst.check();
    std::size_t dd = inst.d(), mm = inst.m();
    Tensor L = cholesky(inst.marginal_cov());
    Tensor resid = inst.y - matvec(inst.A, inst.mu0);
    Tensor alpha = chol_solve(L, resid);  // C^{-1} (y - A mu0)

    PosteriorMoments pm;
    pm.mean = inst.mu0;
    for (std::size_t k = 0; k < dd; ++k) {
        double s = 0.0;
        for (std::size_t i = 0; i < mm; ++i) s += inst.A.at(i, k) * alpha.v[i];
        pm.mean.v[k] += inst.var0.v[k] * s;
    }

    // cov = S0 - S0 A^T C^{-1} A S0, via columns of C^{-1} A S0
    pm.cov = Tensor::zeros({dd, dd});
    for (std::size_t k = 0; k < dd; ++k) {
        Tensor col = Tensor::zeros({mm});
        for (std::size_t i = 0; i < mm; ++i) col.v[i] = inst.A.at(i, k) * inst.var0.v[k];
        Tensor sol = chol_solve(L, col);
        for (std::size_t j = 0; j < dd; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < mm; ++i) s += inst.A.at(i, j) * sol.v[i];
            pm.cov.at(j, k) = -inst.var0.v[j] * s;
        }
        pm.cov.at(k, k) += inst.var0.v[k];
    }
    return pm;
}

// Trapezoid estimate of E[x0 | x_t] for a 1D mixture prior. Self-checks the
// grid by comparing against a half-resolution pass.
inline double quadrature_tweedie_1d(const GmmPrior& prior, const NoiseSchedule& sch, double x_t,
                                    int t, std::size_t grid_points = 100001,
                                    double self_check_tol = 1e-5) {
    if (prior.dim != 1) throw param_error("quadrature_tweedie_1d: 1D priors only");
    double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
    double lo = 1e300, hi = -1e300;
    for (std::size_t k = 0; k < prior.components(); ++k) {
        double sd = std::sqrt(prior.v[k]);
        lo = std::min(lo, prior.m[k].v[0] - 8.0 * sd);
        hi = std::max(hi, prior.m[k].v[0] + 8.0 * sd);
    }

    auto estimate = [&](std::size_t n) {
        double h = (hi - lo) / static_cast<double>(n - 1);
        // log weights: log p(x_t | x0) + log p(x0), max-subtracted
        std::vector<double> lw(n);
        double mx = -1e300;
        Tensor x0({1}, {0.0});
        for (std::size_t i = 0; i < n; ++i) {
            double x = lo + h * static_cast<double>(i);
            x0.v[0] = x;
            double dlt = x_t - at * x;
            lw[i] = -dlt * dlt / (2.0 * st * st) + prior.log_density(x0);
            mx = std::max(mx, lw[i]);
        }
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double w = std::exp(lw[i] - mx);
            if (i == 0 || i + 1 == n) w *= 0.5;
            double x = lo + h * static_cast<double>(i);
            num += w * x;
            den += w;
        }
        return num / den;
    };

    double fine = estimate(grid_points);
    double coarse = estimate(grid_points / 2 + 1);
    if (std::abs(fine - coarse) > self_check_tol)
        throw numeric_error("quadrature_tweedie_1d: grid too coarse for requested tolerance");
    return fine;
}

struct McEvidence {
    double estimate = 0.0;
    double std_error = 0.0;
    long n_samples = 0;
};

// log-mean-exp of log p(y|x0) over prior samples, block-jackknife standard
// error. Biased low for the log; bound tests account for that with an SE
// gate.
inline McEvidence mc_evidence(const GmmPrior& prior, const ForwardTask& task, const Tensor& y,
                              long n_samples, std::uint64_t seed) {
    if (n_samples < 10000) throw param_error("mc_evidence: need at least 1e4 samples");
    NoiseStream rng(seed, NoiseStream::kData);
    std::vector<double> lw(static_cast<std::size_t>(n_samples));
    double mx = -1e300;
    for (long i = 0; i < n_samples; ++i) {
        Tensor x0 = prior.sample(rng);
        lw[static_cast<std::size_t>(i)] = log_likelihood(task, y, x0);
        mx = std::max(mx, lw[static_cast<std::size_t>(i)]);
    }
    constexpr std::size_t kBlocks = 100;
    std::size_t per = static_cast<std::size_t>(n_samples) / kBlocks;
    std::vector<double> block_sum(kBlocks, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < static_cast<std::size_t>(n_samples); ++i) {
        double w = std::exp(lw[i] - mx);
        total += w;
        std::size_t b = std::min(i / per, kBlocks - 1);
        block_sum[b] += w;
    }
    if (!(total > 0.0)) {
        double best = -1e300;
        for (double l : lw) best = std::max(best, l);
        throw numeric_error("mc_evidence: all likelihood weights underflowed; max log-weight " +
                            std::to_string(best));
    }
    McEvidence r;
    r.n_samples = n_samples;
    r.estimate = mx + std::log(total / static_cast<double>(n_samples));
    // leave-one-block-out jackknife
    std::vector<double> loo(kBlocks);
    double mean_loo = 0.0;
    for (std::size_t b = 0; b < kBlocks; ++b) {
        std::size_t nb = (b == kBlocks - 1) ? static_cast<std::size_t>(n_samples) - per * (kBlocks - 1)
                                            : per;
        loo[b] = mx + std::log((total - block_sum[b]) /
                               static_cast<double>(static_cast<std::size_t>(n_samples) - nb));
        mean_loo += loo[b];
    }
    mean_loo /= static_cast<double>(kBlocks);
    double ss = 0.0;
    for (double l : loo) ss += (l - mean_loo) * (l - mean_loo);
    r.std_error = std::sqrt(ss * static_cast<double>(kBlocks - 1) / static_cast<double>(kBlocks));
    return r;
}

}  // namespace hvp
