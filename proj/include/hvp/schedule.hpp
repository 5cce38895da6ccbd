#pragma once

#include <cmath>
#include <vector>

#include "hvp/errors.hpp"

namespace hvp {

// Discrete variance-preserving schedule over T reverse steps. Forward
// marginal: x_t = a[t] * x0 + s[t] * eps with a^2 + s^2 = 1. rsigma[t-1] is
// the reverse-step standard deviation used by p(x_{t-1} | x_t), computed
// from eta by the deterministic-interpolation rule.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> a;       // size T+1, a[0] = 1
    std::vector<double> s;       // size T+1, s[0] = 0
    std::vector<double> rsigma;  // size T, rsigma[t-1] for step t -> t-1
    double eta = 0.5;
};

// Linear-beta base schedule with kBaseSteps steps, subsampled to T points.
inline NoiseSchedule build_schedule(int T, double beta_min = 1e-4, double beta_max = 0.02,
                                    double eta = 0.5) {
    if (T < 2) throw param_error("build_schedule: T must be >= 2");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw param_error("build_schedule: need 0 < beta_min <= beta_max < 1");
    if (eta < 0.0 || eta > 1.0) throw param_error("build_schedule: eta must be in [0,1]");

    constexpr int kBaseSteps = 1000;
    std::vector<double> log_abar(kBaseSteps + 1, 0.0);
    for (int i = 0; i < kBaseSteps; ++i) {
        double beta = beta_min + (beta_max - beta_min) * static_cast<double>(i) /
                                     static_cast<double>(kBaseSteps - 1);
        log_abar[static_cast<std::size_t>(i + 1)] =
            log_abar[static_cast<std::size_t>(i)] + std::log1p(-beta);
    }

    NoiseSchedule sch;
    sch.T = T;
    sch.eta = eta;
    sch.a.resize(static_cast<std::size_t>(T) + 1);
    sch.s.resize(static_cast<std::size_t>(T) + 1);
    sch.a[0] = 1.0;
    sch.s[0] = 0.0;
    for (int t = 1; t <= T; ++t) {
        int idx = static_cast<int>(std::llround(static_cast<double>(t) * kBaseSteps /
                                                static_cast<double>(T)));
        double abar = std::exp(log_abar[static_cast<std::size_t>(idx)]);
        sch.a[static_cast<std::size_t>(t)] = std::sqrt(abar);
        sch.s[static_cast<std::size_t>(t)] = std::sqrt(1.0 - abar);
    }

    sch.rsigma.resize(static_cast<std::size_t>(T));
    for (int t = 1; t <= T; ++t) {
        double at = sch.a[static_cast<std::size_t>(t)], atp = sch.a[static_cast<std::size_t>(t - 1)];
        double st = sch.s[static_cast<std::size_t>(t)], stp = sch.s[static_cast<std::size_t>(t - 1)];
        double r;
        if (stp == 0.0) {
            r = 0.0;
        } else {
            double inner = 1.0 - (at * at * stp * stp) / (atp * atp * st * st);
            if (inner < 0.0) inner = 0.0;
            r = eta * stp * std::sqrt(inner);
        }
        sch.rsigma[static_cast<std::size_t>(t - 1)] = r;
    }

    // sanity: monotone coefficients and nonincreasing reverse stds
    for (int t = 1; t <= T; ++t) {
        if (!(sch.a[static_cast<std::size_t>(t)] < sch.a[static_cast<std::size_t>(t - 1)]) ||
            !(sch.s[static_cast<std::size_t>(t)] > sch.s[static_cast<std::size_t>(t - 1)]))
            throw numeric_error("build_schedule: coefficients not monotone");
        if (sch.rsigma[static_cast<std::size_t>(t - 1)] >
            sch.s[static_cast<std::size_t>(t - 1)] + 1e-15)
            throw numeric_error("build_schedule: rsigma exceeds marginal std");
    }
    for (int t = T; t >= 2; --t) {
        if (sch.rsigma[static_cast<std::size_t>(t - 2)] >
            sch.rsigma[static_cast<std::size_t>(t - 1)] + 1e-12)
            throw numeric_error("build_schedule: rsigma not nonincreasing along rollout");
    }
    return sch;
}

}  // namespace hvp
