#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "hvp/denoiser.hpp"
#include "hvp/mlp.hpp"
#include "hvp/rng.hpp"
#include "hvp/schedule.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Initial-noise policy: x_T = eps + net(y, eps).
struct NoisePolicy {
    Mlp net;  // input [y(m); eps(d)] -> d

    static NoisePolicy make(std::size_t m, std::size_t d, const std::vector<std::size_t>& hidden,
                            std::uint64_t seed) {
        std::vector<std::size_t> widths{m + d};
        for (auto h : hidden) widths.push_back(h);
        widths.push_back(d);
        return NoisePolicy{Mlp::make(widths, seed, /*zero_last=*/true)};
    }
};

// Per-step Gaussian controller. Policy std is kappa * s_t (nonincreasing
// along the rollout since s is strictly increasing in t).
struct StepPolicy {
    Mlp net;  // input [x_t(d); u_prev(d); u_ema(d); y(m); a_t; s_t] -> d
    double kappa = 0.05;
    bool stochastic = true;

    static StepPolicy make(std::size_t m, std::size_t d, const std::vector<std::size_t>& hidden,
                           std::uint64_t seed, double kappa = 0.05, bool stochastic = true) {
        if (!(kappa > 0.0)) throw param_error("step policy: kappa must be positive");
        std::vector<std::size_t> widths{3 * d + m + 2};
        for (auto h : hidden) widths.push_back(h);
        widths.push_back(d);
        return StepPolicy{Mlp::make(widths, seed, /*zero_last=*/true), kappa, stochastic};
    }

    Tensor input(const NoiseSchedule& sch, const Tensor& x_t, const Tensor& u_prev,
                 const Tensor& u_ema, const Tensor& y, int t) const {
        Tensor te = Tensor::vec({sch.a[static_cast<std::size_t>(t)], sch.s[static_cast<std::size_t>(t)]});
        return concat(concat(concat(concat(x_t, u_prev), u_ema), y), te);
    }
};

struct PolicyPair {
    NoisePolicy noise;
    StepPolicy step;
};

struct GuidanceConfig {
    double gamma = 1.0;
    int T = 8;
    bool use_noise_policy = true;
    bool use_controls = true;
    bool record_kl = true;
    // Exact-KL evaluation rollouts: the eps input of the noise policy is
    // zeroed (so q(x_T|y) is an explicit unit-variance Gaussian) and control
    // injection is disabled at the final step, where the reverse-step std is
    // zero and a shifted mean would make the transition KL infinite.
    bool exact_elbo_mode = false;
};

struct CallCounts {
    long denoiser = 0;
    long policy = 0;
    long noise_policy = 0;
};

// One rollout record; step t lives at index t-1 in the per-step arrays.
struct GuidedTrajectory {
    int T = 0;
    std::vector<Tensor> x;        // size T+1, x[t]
    std::vector<Tensor> u;        // sampled controls
    std::vector<Tensor> u_mean;   // policy means
    std::vector<double> u_std;    // policy stds (sigma_bar)
    std::vector<Tensor> u_prev_in, u_ema_in;  // controller inputs, for per-step losses
    std::vector<Tensor> xi;       // control noise draws
    std::vector<Tensor> zeta;     // step noise draws
    std::vector<Tensor> mu_ctrl;  // reverse mean at controlled state
    std::vector<Tensor> mu_free;  // reverse mean at raw state (when recorded)
    std::vector<bool> injected;   // whether gamma*u was injected at this step
    Tensor eps;
    Tensor ephi_out;  // noise-policy output (zero vector when disabled)
    CallCounts calls;

    const Tensor& x0() const { return x.front(); }
};

inline Tensor sample_initial_noise(const NoisePolicy& pol, const Tensor& y, const Tensor& eps,
                                   Tensor* net_out = nullptr) {
    Tensor out = pol.net.forward(concat(y, eps));
    if (net_out) *net_out = out;
    return eps + out;
}

struct ControlSample {
    Tensor u;
    Tensor mean;
    double std = 0.0;
};

inline ControlSample sample_control(const StepPolicy& pol, const NoiseSchedule& sch,
                                    const Tensor& x_t, const Tensor& u_prev, const Tensor& u_ema,
                                    const Tensor& y, int t, const Tensor& noise) {
    ControlSample cs;
    cs.mean = pol.net.forward(pol.input(sch, x_t, u_prev, u_ema, y, t));
    cs.std = pol.kappa * sch.s[static_cast<std::size_t>(t)];
    if (pol.stochastic) {
        cs.u = cs.mean;
        for (std::size_t i = 0; i < cs.u.size(); ++i) cs.u.v[i] += cs.std * noise.v[i];
    } else {
        cs.u = cs.mean;
    }
    return cs;
}

struct GuidedStepResult {
    Tensor x_prev;
    Tensor mu_ctrl;
    Tensor mu_free;
};

// x_{t-1} ~ N(mu_pretrained(x_t + gamma u_t, t), rsigma^2). Exactly two
// denoiser mean evaluations when the free mean is requested, one otherwise.
inline GuidedStepResult guided_step(const Denoiser& den, const NoiseSchedule& sch,
                                    const GuidanceConfig& cfg, const Tensor& x_t, const Tensor& u_t,
                                    int t, const Tensor& step_noise, bool inject,
                                    CallCounts* calls) {
    GuidedStepResult r;
    Tensor x_in = x_t;
    if (inject && cfg.gamma != 0.0)
        for (std::size_t i = 0; i < x_in.size(); ++i) x_in.v[i] += cfg.gamma * u_t.v[i];
    r.mu_ctrl = denoiser_mean(den, sch, x_in, t);
    if (calls) ++calls->denoiser;
    if (cfg.record_kl) {
        r.mu_free = denoiser_mean(den, sch, x_t, t);
        if (calls) ++calls->denoiser;
    }
    double rs = sch.rsigma[static_cast<std::size_t>(t - 1)];
    r.x_prev = r.mu_ctrl;
    for (std::size_t i = 0; i < r.x_prev.size(); ++i) r.x_prev.v[i] += rs * step_noise.v[i];
    return r;
}

// Single-pass conditional sampler: x_T from the noise policy, then T guided
// reverse steps. Deterministic given the seed; noise streams are split per
// role so guided and unguided rollouts share step noise.
inline GuidedTrajectory ahvp_rollout(const PolicyPair& pols, const Denoiser& den,
                                     const NoiseSchedule& sch, const GuidanceConfig& cfg,
                                     const Tensor& y, std::uint64_t seed) {
    const int T = sch.T;
    const std::size_t d = den.dim();
    NoiseStream init_rng(seed, NoiseStream::kInitNoise);
    NoiseStream ctrl_rng(seed, NoiseStream::kControlNoise);
    NoiseStream step_rng(seed, NoiseStream::kStepNoise);

    GuidedTrajectory traj;
    traj.T = T;
    traj.x.assign(static_cast<std::size_t>(T) + 1, Tensor());
    traj.u.assign(static_cast<std::size_t>(T), Tensor());
    traj.u_mean.assign(static_cast<std::size_t>(T), Tensor());
    traj.u_std.assign(static_cast<std::size_t>(T), 0.0);
    traj.u_prev_in.assign(static_cast<std::size_t>(T), Tensor());
    traj.u_ema_in.assign(static_cast<std::size_t>(T), Tensor());
    traj.xi.assign(static_cast<std::size_t>(T), Tensor());
    traj.zeta.assign(static_cast<std::size_t>(T), Tensor());
    traj.mu_ctrl.assign(static_cast<std::size_t>(T), Tensor());
    traj.mu_free.assign(static_cast<std::size_t>(T), Tensor());
    traj.injected.assign(static_cast<std::size_t>(T), false);

    traj.eps = init_rng.normal_vec(d);
    if (cfg.use_noise_policy) {
        Tensor eps_in = cfg.exact_elbo_mode ? Tensor::zeros({d}) : traj.eps;
        traj.ephi_out = pols.noise.net.forward(concat(y, eps_in));
        ++traj.calls.noise_policy;
        traj.x[static_cast<std::size_t>(T)] = traj.eps + traj.ephi_out;
    } else {
        traj.ephi_out = Tensor::zeros({d});
        traj.x[static_cast<std::size_t>(T)] = traj.eps;
    }

    Tensor u_prev = Tensor::zeros({d});
    Tensor u_ema = Tensor::zeros({d});
    for (int t = T; t >= 1; --t) {
        std::size_t i = static_cast<std::size_t>(t - 1);
        const Tensor& x_t = traj.x[static_cast<std::size_t>(t)];
        traj.xi[i] = ctrl_rng.normal_vec(d);
        traj.zeta[i] = step_rng.normal_vec(d);

        bool inject = cfg.use_controls && !(cfg.exact_elbo_mode && t == 1);
        if (cfg.use_controls) {
            traj.u_prev_in[i] = u_prev;
            traj.u_ema_in[i] = u_ema;
            ControlSample cs =
                sample_control(pols.step, sch, x_t, u_prev, u_ema, y, t, traj.xi[i]);
            ++traj.calls.policy;
            traj.u[i] = cs.u;
            traj.u_mean[i] = cs.mean;
            traj.u_std[i] = cs.std;
            u_prev = cs.u;
            for (std::size_t k = 0; k < d; ++k) u_ema.v[k] = 0.9 * u_ema.v[k] + 0.1 * cs.u.v[k];
        } else {
            traj.u[i] = Tensor::zeros({d});
            traj.u_mean[i] = Tensor::zeros({d});
            traj.u_std[i] = pols.step.kappa * sch.s[static_cast<std::size_t>(t)];
            traj.u_prev_in[i] = u_prev;
            traj.u_ema_in[i] = u_ema;
            inject = false;
        }
        traj.injected[i] = inject;

        GuidedStepResult gs =
            guided_step(den, sch, cfg, x_t, traj.u[i], t, traj.zeta[i], inject, &traj.calls);
        traj.x[i] = gs.x_prev;
        traj.mu_ctrl[i] = gs.mu_ctrl;
        traj.mu_free[i] = gs.mu_free;
    }
    traj.x0().check_finite("ahvp_rollout terminal sample");
    return traj;
}

}  // namespace hvp
