#pragma once

#include <cmath>
#include <vector>

#include "hvp/denoiser.hpp"
#include "hvp/policy.hpp"
#include "hvp/task.hpp"

namespace hvp {

// Diagonal-Gaussian KL, componentwise with scalar stds broadcast:
//   sum_i [ ln(s2/s1) + (s1^2 + (m1-m2)_i^2) / (2 s2^2) - 1/2 ]
inline double kl_gaussian(const Tensor& m1, double s1, const Tensor& m2, double s2) {
    if (!m1.same_shape(m2)) throw dim_error("kl_gaussian: mean shape mismatch");
    if (!(s1 > 0.0) || !(s2 > 0.0)) throw param_error("kl_gaussian: stds must be positive");
    double d = static_cast<double>(m1.size());
    double msq = 0.0;
    for (std::size_t i = 0; i < m1.size(); ++i) {
        double dm = m1.v[i] - m2.v[i];
        msq += dm * dm;
    }
    return d * (std::log(s2 / s1) - 0.5) + (d * s1 * s1 + msq) / (2.0 * s2 * s2);
}

inline double kl_gaussian(const Tensor& m1, const Tensor& s1, const Tensor& m2, const Tensor& s2) {
    if (!m1.same_shape(m2) || !m1.same_shape(s1) || !m1.same_shape(s2))
        throw dim_error("kl_gaussian: shape mismatch");
    double kl = 0.0;
    for (std::size_t i = 0; i < m1.size(); ++i) {
        if (!(s1.v[i] > 0.0) || !(s2.v[i] > 0.0))
            throw param_error("kl_gaussian: stds must be positive");
        double dm = m1.v[i] - m2.v[i];
        kl += std::log(s2.v[i] / s1.v[i]) +
              (s1.v[i] * s1.v[i] + dm * dm) / (2.0 * s2.v[i] * s2.v[i]) - 0.5;
    }
    return kl;
}

struct LossWeights {
    double w_T = 50.0;        // terminal / reward weight
    double w_control = 0.5;   // L3 surrogate weight
    double w_score = -1.0;    // L2 surrogate weight; < 0 means per-step 1/(2 rsigma^2)
    double lambda2 = 0.5;     // SHVP transition penalty
    double lambda3 = 0.5;     // SHVP control penalty
    bool exact_kl = false;
};

struct ElboTerms {
    double reward = 0.0;
    double l1 = 0.0;
    double l2 = 0.0;
    double l3 = 0.0;
    bool exact = false;
    double elbo() const { return reward - l1 - l2 - l3; }
};

// Single-trajectory estimate of the four bound terms. Exact mode evaluates
// the three diagonal-Gaussian KLs and expects a rollout made with
// exact_elbo_mode (Gaussian q(x_T|y), no final-step injection) and a
// stochastic controller. Surrogate mode evaluates the training-time
// replacements: |E_phi|^2, |mu_ctrl - mu_free|^2, |u_t|^2.
inline ElboTerms elbo_terms(const GuidedTrajectory& traj, const ForwardTask& task, const Tensor& y,
                            const NoiseSchedule& sch, bool exact) {
    ElboTerms e;
    e.exact = exact;
    e.reward = log_likelihood(task, y, traj.x0());
    if (exact) {
        e.l1 = kl_gaussian(traj.ephi_out, 1.0, Tensor::zeros(traj.ephi_out.shape), 1.0);
    } else {
        e.l1 = sum_sq(traj.ephi_out);
    }
    for (int t = traj.T; t >= 1; --t) {
        std::size_t i = static_cast<std::size_t>(t - 1);
        if (traj.injected[i]) {
            if (traj.mu_free[i].empty())
                throw contract_error("elbo_terms: rollout did not record free means");
            double diff = sum_sq(traj.mu_ctrl[i] - traj.mu_free[i]);
            if (exact) {
                double rs = sch.rsigma[i];
                if (!(rs > 0.0)) {
                    if (diff > 0.0)
                        throw numeric_error("elbo_terms: shifted mean at a deterministic step");
                } else {
                    e.l2 += diff / (2.0 * rs * rs);
                }
            } else {
                e.l2 += diff;
            }
        }
        if (exact) {
            if (!(traj.u_std[i] > 0.0))
                throw contract_error("elbo_terms: exact mode needs a stochastic controller");
            e.l3 += kl_gaussian(traj.u_mean[i], traj.u_std[i],
                                Tensor::zeros(traj.u_mean[i].shape), 1.0);
        } else {
            e.l3 += sum_sq(traj.u[i]);
        }
    }
    return e;
}

struct LossEval {
    double value = 0.0;
    std::vector<Tensor> grads;  // per parameter, same order as Mlp::params()
};

// Stage-1 objective on one observation batch: mean over the batch of
//   -w_T log p(y|x0) + w_control |E_phi(y,eps)|^2
// with x0 produced by backprop through the whole (control-free) chain.
inline LossEval stage1_loss(const NoisePolicy& pol, const Denoiser& den, const NoiseSchedule& sch,
                            const ForwardTask& task, const std::vector<Observation>& batch,
                            const LossWeights& w, std::uint64_t seed, bool want_grad = true) {
    if (batch.empty()) throw param_error("stage1_loss: empty batch");
    LossEval out;
    std::size_t np = pol.net.params().size();
    if (want_grad)
        for (const Tensor* p : pol.net.params()) out.grads.push_back(Tensor::zeros(p->shape));
    const std::size_t d = den.dim();
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
        std::uint64_t rs = seed ^ (0x9e3779b97f4a7c15ULL * (bi + 1));
        NoiseStream init_rng(rs, NoiseStream::kInitNoise);
        NoiseStream step_rng(rs, NoiseStream::kStepNoise);
        Tensor eps = init_rng.normal_vec(d);

        Tape tp;
        std::vector<Var> pv = pol.net.leaves(tp);
        Var in = tp.constant(concat(batch[bi].y, eps));
        Var net_out = pol.net.forward(tp, in, pv);
        Var x = tp.addt(net_out, eps);
        for (int t = sch.T; t >= 1; --t) {
            Var mu = denoiser_mean(tp, den, sch, x, t);
            double rsg = sch.rsigma[static_cast<std::size_t>(t - 1)];
            Tensor zeta = step_rng.normal_vec(d);
            x = tp.addt(mu, zeta * rsg);
        }
        Var ll = log_likelihood(tp, task, batch[bi].y, x);
        Var loss = tp.add(tp.scale(ll, -w.w_T), tp.scale(tp.sum_sq(net_out), w.w_control));
        out.value += tp.val(loss).v[0];
        if (want_grad) {
            tp.backward(loss);
            for (std::size_t k = 0; k < np; ++k) {
                Tensor g = tp.grad(pv[k]);
                for (std::size_t j = 0; j < g.size(); ++j) out.grads[k].v[j] += g.v[j];
            }
        }
    }
    double inv = 1.0 / static_cast<double>(batch.size());
    out.value *= inv;
    for (Tensor& g : out.grads)
        for (double& x : g.v) x *= inv;
    return out;
}

// Stage-2 per-step objective summed over the recorded trajectory, with
// per-step stop-gradient: states and recorded noise are constants; only the
// reparameterized control of the step under consideration carries gradient.
inline LossEval stage2_loss(const StepPolicy& pol, const Denoiser& den, const NoiseSchedule& sch,
                            const ForwardTask& task, const Tensor& y,
                            const GuidedTrajectory& traj, const LossWeights& w, double gamma,
                            bool want_grad = true) {
    LossEval out;
    std::size_t np = pol.net.params().size();
    if (want_grad)
        for (const Tensor* p : pol.net.params()) out.grads.push_back(Tensor::zeros(p->shape));
    for (int t = traj.T; t >= 1; --t) {
        std::size_t i = static_cast<std::size_t>(t - 1);
        if (traj.mu_free[i].empty())
            throw contract_error("stage2_loss: rollout did not record free means");
        double at = sch.a[static_cast<std::size_t>(t)], atp = sch.a[static_cast<std::size_t>(t - 1)];
        double st = sch.s[static_cast<std::size_t>(t)], stp = sch.s[static_cast<std::size_t>(t - 1)];
        double rsg = sch.rsigma[i];
        double dir = std::sqrt(std::max(0.0, stp * stp - rsg * rsg)) / st;

        Tape tp;
        std::vector<Var> pv = pol.net.leaves(tp);
        Var in = tp.constant(pol.input(sch, traj.x[static_cast<std::size_t>(t)], traj.u_prev_in[i],
                                       traj.u_ema_in[i], y, t));
        Var mean = pol.net.forward(tp, in, pv);
        Var u = pol.stochastic ? tp.addt(mean, traj.xi[i] * traj.u_std[i]) : mean;
        Var x_ctrl = tp.addt(tp.scale(u, gamma), traj.x[static_cast<std::size_t>(t)]);
        Var tw = den.tweedie(tp, sch, x_ctrl, t);
        Var ll = log_likelihood(tp, task, y, tw);
        Var loss = tp.scale(ll, -w.w_T);
        double ws = w.w_score >= 0.0 ? w.w_score : (rsg > 0.0 ? 1.0 / (2.0 * rsg * rsg) : 0.0);
        if (ws > 0.0) {
            Var mu_ctrl = tp.axpy(dir, x_ctrl, tp.scale(tw, atp - dir * at));
            Var score = tp.sum_sq(tp.addt(mu_ctrl, traj.mu_free[i] * -1.0));
            loss = tp.add(loss, tp.scale(score, ws));
        }
        loss = tp.add(loss, tp.scale(tp.sum_sq(u), w.w_control));
        out.value += tp.val(loss).v[0];
        if (want_grad) {
            tp.backward(loss);
            for (std::size_t k = 0; k < np; ++k) {
                Tensor g = tp.grad(pv[k]);
                for (std::size_t j = 0; j < g.size(); ++j) out.grads[k].v[j] += g.v[j];
            }
        }
    }
    return out;
}

struct StepObjective {
    double value = 0.0;
    Tensor grad_u;
};

// Per-step SHVP objective and its exact gradient in the control:
//   log p(y | x0hat(x_t + gamma u, t)) - lambda2 |mu_ctrl - mu_free|^2
//   - lambda3 |u|^2
// mu_free is supplied by the caller (computed once per step).
inline StepObjective shvp_step_objective(const Tensor& x_t, const Tensor& u_t, int t,
                                         const ForwardTask& task, const Tensor& y,
                                         const Denoiser& den, const NoiseSchedule& sch,
                                         const LossWeights& w, double gamma,
                                         const Tensor& mu_free, bool want_grad = true) {
    double at = sch.a[static_cast<std::size_t>(t)], atp = sch.a[static_cast<std::size_t>(t - 1)];
    double st = sch.s[static_cast<std::size_t>(t)], stp = sch.s[static_cast<std::size_t>(t - 1)];
    double rsg = sch.rsigma[static_cast<std::size_t>(t - 1)];
    double dir = std::sqrt(std::max(0.0, stp * stp - rsg * rsg)) / st;

    Tape tp;
    Var u = tp.leaf(u_t);
    Var x_ctrl = tp.addt(tp.scale(u, gamma), x_t);
    Var tw = den.tweedie(tp, sch, x_ctrl, t);
    Var obj = log_likelihood(tp, task, y, tw);
    if (w.lambda2 != 0.0) {
        Var mu_ctrl = tp.axpy(dir, x_ctrl, tp.scale(tw, atp - dir * at));
        Var score = tp.sum_sq(tp.addt(mu_ctrl, mu_free * -1.0));
        obj = tp.add(obj, tp.scale(score, -w.lambda2));
    }
    if (w.lambda3 != 0.0) obj = tp.add(obj, tp.scale(tp.sum_sq(u), -w.lambda3));
    StepObjective so;
    so.value = tp.val(obj).v[0];
    if (want_grad) {
        tp.backward(obj);
        so.grad_u = tp.grad(u);
    }
    return so;
}

// Full surrogate-mode bound of one guided rollout as a differentiable scalar
// in both policy networks, with reparameterized noise held fixed. Used by
// the gradient suite and the reparameterization property tests; training
// proper uses the cheaper stage losses.
inline LossEval surrogate_elbo_rollout(const PolicyPair& pols, const Denoiser& den,
                                       const NoiseSchedule& sch, const GuidanceConfig& cfg,
                                       const ForwardTask& task, const Tensor& y,
                                       std::uint64_t seed, bool want_grad = true) {
    const std::size_t d = den.dim();
    NoiseStream init_rng(seed, NoiseStream::kInitNoise);
    NoiseStream ctrl_rng(seed, NoiseStream::kControlNoise);
    NoiseStream step_rng(seed, NoiseStream::kStepNoise);
    Tensor eps = init_rng.normal_vec(d);

    Tape tp;
    std::vector<Var> pv_noise = pols.noise.net.leaves(tp);
    std::vector<Var> pv_step = pols.step.net.leaves(tp);

    Var net_out = pols.noise.net.forward(tp, tp.constant(concat(y, eps)), pv_noise);
    Var x = tp.addt(net_out, eps);
    Var l2_acc, l3_acc;
    Var u_prev = tp.constant(Tensor::zeros({d}));
    Var u_ema = tp.constant(Tensor::zeros({d}));
    Tensor temb;
    for (int t = sch.T; t >= 1; --t) {
        Tensor xi = ctrl_rng.normal_vec(d);
        Tensor zeta = step_rng.normal_vec(d);
        double sbar = pols.step.kappa * sch.s[static_cast<std::size_t>(t)];
        Var in = tp.concat({x, u_prev, u_ema, tp.constant(y),
                            tp.constant(Tensor::vec({sch.a[static_cast<std::size_t>(t)],
                                                     sch.s[static_cast<std::size_t>(t)]}))});
        Var mean = pols.step.net.forward(tp, in, pv_step);
        Var u = pols.step.stochastic ? tp.addt(mean, xi * sbar) : mean;
        Var x_ctrl = tp.axpy(cfg.gamma, u, x);
        Var mu_ctrl = denoiser_mean(tp, den, sch, x_ctrl, t);
        Var mu_free = denoiser_mean(tp, den, sch, x, t);
        Var l2t = tp.sum_sq(tp.sub(mu_ctrl, mu_free));
        Var l3t = tp.sum_sq(u);
        l2_acc = l2_acc.valid() ? tp.add(l2_acc, l2t) : l2t;
        l3_acc = l3_acc.valid() ? tp.add(l3_acc, l3t) : l3t;
        u_ema = tp.add(tp.scale(u_ema, 0.9), tp.scale(u, 0.1));
        u_prev = u;
        double rsg = sch.rsigma[static_cast<std::size_t>(t - 1)];
        x = tp.addt(mu_ctrl, zeta * rsg);
    }
    Var ll = log_likelihood(tp, task, y, x);
    Var elbo = tp.sub(tp.sub(tp.sub(ll, tp.sum_sq(net_out)), l2_acc), l3_acc);

    LossEval out;
    out.value = tp.val(elbo).v[0];
    if (want_grad) {
        tp.backward(elbo);
        for (Var p : pv_noise) out.grads.push_back(tp.grad(p));
        for (Var p : pv_step) out.grads.push_back(tp.grad(p));
    }
    return out;
}

}  // namespace hvp
