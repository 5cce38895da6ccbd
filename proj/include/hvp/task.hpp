#pragma once

#include <cmath>
#include <cstdint>

#include "hvp/rng.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Measurement operator A plus Gaussian observation noise level. Linear
// kinds: dense matrix, block-average pooling (the desk-scale stand-in for
// bicubic downsampling), and a binary inpainting mask. Nonlinear kind: HDR
// clip(alpha x + beta, 0, 1).
struct ForwardTask {
    enum class Kind { Dense, Pool, Mask, Hdr };

    Kind kind = Kind::Dense;
    std::size_t d = 0;   // signal dim
    std::size_t m = 0;   // measurement dim
    double sigma_y = 0.01;

    Tensor A;            // Dense: [m, d]
    std::size_t factor = 1;  // Pool
    bool grid2d = false;     // Pool: treat d as a side x side image
    Tensor mask;             // Mask: [d] of 0/1
    double alpha = 2.0, beta = 0.0;  // Hdr

    static ForwardTask dense(Tensor a, double sigma_y) {
        ForwardTask t;
        t.kind = Kind::Dense;
        t.m = a.shape[0];
        t.d = a.shape[1];
        t.A = std::move(a);
        t.sigma_y = sigma_y;
        t.check();
        return t;
    }
    static ForwardTask pool(std::size_t d, std::size_t factor, double sigma_y, bool grid2d = false) {
        ForwardTask t;
        t.kind = Kind::Pool;
        t.d = d;
        t.factor = factor;
        t.grid2d = grid2d;
        if (grid2d) {
            std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
            if (side * side != d || side % factor != 0)
                throw param_error("pool task: d must be a square with side divisible by factor");
            t.m = (side / factor) * (side / factor);
        } else {
            if (factor == 0 || d % factor != 0)
                throw param_error("pool task: d must be divisible by factor");
            t.m = d / factor;
        }
        t.sigma_y = sigma_y;
        t.check();
        return t;
    }
    static ForwardTask inpaint(Tensor mask01, double sigma_y) {
        ForwardTask t;
        t.kind = Kind::Mask;
        t.d = mask01.size();
        t.m = t.d;
        t.mask = std::move(mask01);
        for (double x : t.mask.v)
            if (x != 0.0 && x != 1.0) throw param_error("inpaint task: mask entries must be 0/1");
        t.sigma_y = sigma_y;
        t.check();
        return t;
    }
    static ForwardTask hdr(std::size_t d, double alpha, double beta, double sigma_y) {
        ForwardTask t;
        t.kind = Kind::Hdr;
        t.d = d;
        t.m = d;
        t.alpha = alpha;
        t.beta = beta;
        t.sigma_y = sigma_y;
        t.check();
        return t;
    }

    // Random inpainting mask with the given per-coordinate drop probability.
    static ForwardTask random_inpaint(std::size_t d, double drop_prob, double sigma_y,
                                      std::uint64_t seed) {
        NoiseStream rng(seed, NoiseStream::kData);
        Tensor mask01 = Tensor::zeros({d});
        for (std::size_t i = 0; i < d; ++i) mask01.v[i] = rng.uniform() < drop_prob ? 0.0 : 1.0;
        return inpaint(std::move(mask01), sigma_y);
    }

    void check() const {
        if (!(sigma_y > 0.0)) throw param_error("task: sigma_y must be positive");
        if (d == 0 || m == 0) throw param_error("task: empty dims");
    }

    bool linear() const { return kind != Kind::Hdr; }
};

inline Tensor apply(const ForwardTask& task, const Tensor& x0) {
    if (x0.size() != task.d) throw dim_error("task apply: input dim mismatch");
    switch (task.kind) {
        case ForwardTask::Kind::Dense:
            return matvec(task.A, x0);
        case ForwardTask::Kind::Pool: {
            if (task.grid2d) {
                std::size_t side = static_cast<std::size_t>(
                    std::llround(std::sqrt(static_cast<double>(task.d))));
                std::size_t f = task.factor, ms = side / f;
                Tensor r = Tensor::zeros({ms * ms});
                double inv = 1.0 / static_cast<double>(f * f);
                for (std::size_t bi = 0; bi < ms; ++bi)
                    for (std::size_t bj = 0; bj < ms; ++bj) {
                        double s = 0.0;
                        for (std::size_t di = 0; di < f; ++di)
                            for (std::size_t dj = 0; dj < f; ++dj)
                                s += x0.v[(bi * f + di) * side + bj * f + dj];
                        r.v[bi * ms + bj] = s * inv;
                    }
                return r;
            }
            std::size_t f = task.factor;
            Tensor r = Tensor::zeros({task.m});
            for (std::size_t i = 0; i < task.m; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < f; ++j) s += x0.v[i * f + j];
                r.v[i] = s / static_cast<double>(f);
            }
            return r;
        }
        case ForwardTask::Kind::Mask: {
            Tensor r = x0;
            for (std::size_t i = 0; i < r.size(); ++i) r.v[i] *= task.mask.v[i];
            return r;
        }
        case ForwardTask::Kind::Hdr: {
            Tensor r = x0;
            for (double& x : r.v) {
                x = task.alpha * x + task.beta;
                x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
            }
            return r;
        }
    }
    throw contract_error("task apply: unknown kind");
}

inline Var apply(Tape& tp, const ForwardTask& task, Var x0) {
    if (tp.val(x0).size() != task.d) throw dim_error("task apply: input dim mismatch");
    switch (task.kind) {
        case ForwardTask::Kind::Dense:
            return tp.matvec(tp.constant(task.A), x0);
        case ForwardTask::Kind::Pool:
            if (task.grid2d) {
                std::size_t side = static_cast<std::size_t>(
                    std::llround(std::sqrt(static_cast<double>(task.d))));
                return tp.avgpool2d(x0, side, task.factor);
            }
            return tp.avgpool1d(x0, task.factor);
        case ForwardTask::Kind::Mask:
            return tp.mul(x0, tp.constant(task.mask));
        case ForwardTask::Kind::Hdr: {
            Var lin = tp.shift(tp.scale(x0, task.alpha), task.beta);
            return tp.clip01(lin);
        }
    }
    throw contract_error("task apply: unknown kind");
}

// log N(y; A(x0), sigma_y^2 I)
inline double log_likelihood(const ForwardTask& task, const Tensor& y, const Tensor& x0) {
    if (y.size() != task.m) throw dim_error("log_likelihood: y dim mismatch");
    Tensor r = apply(task, x0) - y;
    double s2 = task.sigma_y * task.sigma_y;
    return -0.5 * static_cast<double>(task.m) * std::log(2.0 * M_PI * s2) - sum_sq(r) / (2.0 * s2);
}

inline Var log_likelihood(Tape& tp, const ForwardTask& task, const Tensor& y, Var x0) {
    if (y.size() != task.m) throw dim_error("log_likelihood: y dim mismatch");
    Var r = tp.addt(apply(tp, task, x0), y * -1.0);
    double s2 = task.sigma_y * task.sigma_y;
    double cnst = -0.5 * static_cast<double>(task.m) * std::log(2.0 * M_PI * s2);
    return tp.shift(tp.scale(tp.sum_sq(r), -1.0 / (2.0 * s2)), cnst);
}

struct Observation {
    Tensor y;
    Tensor x0_truth;  // evaluation only, never fed to policies
    std::uint64_t seed = 0;
};

inline Observation make_observation(const ForwardTask& task, const Tensor& x0_truth,
                                    std::uint64_t seed, bool noiseless = false) {
    Observation obs;
    obs.seed = seed;
    obs.x0_truth = x0_truth;
    obs.y = apply(task, x0_truth);
    if (!noiseless) {
        NoiseStream rng(seed, NoiseStream::kData);
        for (std::size_t i = 0; i < obs.y.size(); ++i) obs.y.v[i] += task.sigma_y * rng.normal();
    }
    return obs;
}

}  // namespace hvp
