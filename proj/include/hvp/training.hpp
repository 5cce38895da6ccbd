#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hvp/adam.hpp"
#include "hvp/objective.hpp"
#include "hvp/oracle.hpp"
#include "hvp/parallel.hpp"
#include "hvp/policy.hpp"

namespace hvp {

struct TrainConfig {
    int stage = 1;
    long epochs = 200;
    std::size_t batch_size = 32;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    std::size_t dataset_size = 512;

    void check() const {
        if (stage != 1 && stage != 2) throw param_error("train config: stage must be 1 or 2");
        if (epochs < 0) throw param_error("train config: negative epochs");
        if (batch_size == 0 || dataset_size == 0) throw param_error("train config: empty counts");
        if (!(lr > 0.0)) throw param_error("train config: lr must be positive");
    }
};

struct RefineConfig {
    long n_grad_steps = 5;
    double inner_lr = 0.05;
    double lambda2 = 0.5;
    double lambda3 = 0.5;
    bool backtracking = false;
    long max_backtracks = 30;

    void check() const {
        if (n_grad_steps < 0) throw param_error("refine config: n_grad_steps must be >= 0");
        if (!(inner_lr > 0.0)) throw param_error("refine config: inner_lr must be positive");
    }
};

struct TrainResult {
    std::vector<double> loss_curve;  // per-epoch mean training loss
    long aborted_epoch = -1;         // epoch index at which NaN forced an early stop, else -1
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (a + 1)) ^ (0xbf58476d1ce4e5b9ULL * (b + 1));
    z ^= z >> 30;
    z *= 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::vector<Tensor> snapshot(const std::vector<Tensor*>& params) {
    std::vector<Tensor> s;
    s.reserve(params.size());
    for (const Tensor* p : params) s.push_back(*p);
    return s;
}

inline void restore(const std::vector<Tensor*>& params, const std::vector<Tensor>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) *params[i] = snap[i];
}

}  // namespace detail

// Stage 1: Adam on the backprop-through-the-chain loss, controls disabled.
// On a NaN loss the last finite parameter state is restored and training
// stops early.
inline TrainResult train_stage1(const TrainConfig& cfg, const ForwardTask& task,
                                const std::vector<Observation>& dataset, NoisePolicy& pol,
                                const Denoiser& den, const NoiseSchedule& sch,
                                const LossWeights& w) {
    cfg.check();
    if (dataset.empty()) throw param_error("train_stage1: empty dataset");
    std::vector<Tensor*> params = pol.net.params();
    AdamState opt;
    opt.lr = cfg.lr;
    TrainResult res;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Tensor> snap = detail::snapshot(params);
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t off = 0; off < dataset.size(); off += cfg.batch_size, ++n_batches) {
            std::size_t end = std::min(off + cfg.batch_size, dataset.size());
            std::vector<Observation> batch(dataset.begin() + static_cast<long>(off),
                                           dataset.begin() + static_cast<long>(end));
            std::uint64_t bs = detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), off);
            LossEval le = stage1_loss(pol, den, sch, task, batch, w, bs);
            if (!std::isfinite(le.value)) {
                detail::restore(params, snap);
                res.aborted_epoch = epoch;
                return res;
            }
            epoch_loss += le.value;
            adam_step(opt, params, le.grads);
        }
        res.loss_curve.push_back(epoch_loss / static_cast<double>(n_batches));
    }
    return res;
}

// Stage 2: per-step controller training with phi frozen. Each batch item is
// one fresh guided rollout under the current policies; gradients flow only
// through the reparameterized control of each step.
inline TrainResult train_stage2(const TrainConfig& cfg, const ForwardTask& task,
                                const std::vector<Observation>& dataset, const PolicyPair& frozen,
                                StepPolicy& pol, const Denoiser& den, const NoiseSchedule& sch,
                                const LossWeights& w, const GuidanceConfig& gcfg) {
    cfg.check();
    if (dataset.empty()) throw param_error("train_stage2: empty dataset");
    std::vector<Tensor*> params = pol.net.params();
    AdamState opt;
    opt.lr = cfg.lr;
    TrainResult res;
    GuidanceConfig rcfg = gcfg;
    rcfg.record_kl = true;
    for (long epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<Tensor> snap = detail::snapshot(params);
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t off = 0; off < dataset.size(); off += cfg.batch_size, ++n_batches) {
            std::size_t end = std::min(off + cfg.batch_size, dataset.size());
            double batch_loss = 0.0;
            std::vector<Tensor> acc;
            for (const Tensor* p : params) acc.push_back(Tensor::zeros(p->shape));
            for (std::size_t bi = off; bi < end; ++bi) {
                std::uint64_t rs =
                    detail::mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), bi);
                PolicyPair cur{frozen.noise, pol};
                GuidedTrajectory traj = ahvp_rollout(cur, den, sch, rcfg, dataset[bi].y, rs);
                LossEval le =
                    stage2_loss(pol, den, sch, task, dataset[bi].y, traj, w, rcfg.gamma);
                batch_loss += le.value;
                for (std::size_t k = 0; k < acc.size(); ++k)
                    for (std::size_t j = 0; j < acc[k].size(); ++j)
                        acc[k].v[j] += le.grads[k].v[j];
            }
            double inv = 1.0 / static_cast<double>(end - off);
            batch_loss *= inv;
            for (Tensor& g : acc)
                for (double& x : g.v) x *= inv;
            if (!std::isfinite(batch_loss)) {
                detail::restore(params, snap);
                res.aborted_epoch = epoch;
                return res;
            }
            epoch_loss += batch_loss;
            adam_step(opt, params, acc);
        }
        res.loss_curve.push_back(epoch_loss / static_cast<double>(n_batches));
    }
    return res;
}

// Semi-amortized rollout: identical to ahvp_rollout except that at each step
// the amortized control initializes n_grad_steps plain gradient-ascent
// iterations on the per-step objective before the guided transition fires.
// n_grad_steps = 0 reproduces ahvp_rollout bit-for-bit. Call accounting: a
// gradient evaluation of the per-step objective costs two denoiser calls
// (forward and backward sweep through the denoiser); a value-only
// backtracking probe costs one.
inline GuidedTrajectory shvp_refine(const PolicyPair& pols, const Denoiser& den,
                                    const NoiseSchedule& sch, const GuidanceConfig& cfg,
                                    const ForwardTask& task, const Tensor& y, const RefineConfig& rc,
                                    std::uint64_t seed) {
    rc.check();
    const int T = sch.T;
    const std::size_t d = den.dim();
    NoiseStream init_rng(seed, NoiseStream::kInitNoise);
    NoiseStream ctrl_rng(seed, NoiseStream::kControlNoise);
    NoiseStream step_rng(seed, NoiseStream::kStepNoise);

    LossWeights sw;
    sw.lambda2 = rc.lambda2;
    sw.lambda3 = rc.lambda3;

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
        } else {
            traj.u[i] = Tensor::zeros({d});
            traj.u_mean[i] = Tensor::zeros({d});
            traj.u_std[i] = pols.step.kappa * sch.s[static_cast<std::size_t>(t)];
            traj.u_prev_in[i] = u_prev;
            traj.u_ema_in[i] = u_ema;
            inject = false;
        }

        if (rc.n_grad_steps > 0 && inject) {
            Tensor mu_free;
            if (cfg.record_kl) {
                mu_free = denoiser_mean(den, sch, x_t, t);
                // charged below with the guided step's free-mean evaluation
            } else {
                mu_free = denoiser_mean(den, sch, x_t, t);
                ++traj.calls.denoiser;
            }
            Tensor u = traj.u[i];
            StepObjective cur = shvp_step_objective(x_t, u, t, task, y, den, sch, sw, cfg.gamma,
                                                    mu_free, /*want_grad=*/true);
            traj.calls.denoiser += 2;
            for (long it = 0; it < rc.n_grad_steps; ++it) {
                double lr = rc.inner_lr;
                Tensor cand = u;
                for (std::size_t k = 0; k < d; ++k) cand.v[k] = u.v[k] + lr * cur.grad_u.v[k];
                if (rc.backtracking) {
                    long bt = 0;
                    for (;;) {
                        StepObjective probe =
                            shvp_step_objective(x_t, cand, t, task, y, den, sch, sw, cfg.gamma,
                                                mu_free, /*want_grad=*/false);
                        ++traj.calls.denoiser;
                        if (probe.value >= cur.value || bt >= rc.max_backtracks) break;
                        lr *= 0.5;
                        ++bt;
                        for (std::size_t k = 0; k < d; ++k)
                            cand.v[k] = u.v[k] + lr * cur.grad_u.v[k];
                    }
                }
                u = cand;
                if (it + 1 < rc.n_grad_steps) {
                    cur = shvp_step_objective(x_t, u, t, task, y, den, sch, sw, cfg.gamma, mu_free,
                                              /*want_grad=*/true);
                    traj.calls.denoiser += 2;
                }
            }
            traj.u[i] = u;
        }
        traj.injected[i] = inject;

        GuidedStepResult gs =
            guided_step(den, sch, cfg, x_t, traj.u[i], t, traj.zeta[i], inject, &traj.calls);
        traj.x[i] = gs.x_prev;
        traj.mu_ctrl[i] = gs.mu_ctrl;
        traj.mu_free[i] = gs.mu_free;

        u_prev = traj.u[i];
        for (std::size_t k = 0; k < d; ++k) u_ema.v[k] = 0.9 * u_ema.v[k] + 0.1 * traj.u[i].v[k];
    }
    traj.x0().check_finite("shvp_refine terminal sample");
    return traj;
}

// Denoising regression for the MLP denoiser: sample x0 from the prior, a
// uniform step t and forward noise, and regress the Tweedie target
// (here simply x0) from (x_t, a_t, s_t). Returns the per-step mean loss.
inline std::vector<double> train_mlp_denoiser(MlpDenoiser& den, const GmmPrior& prior,
                                              const NoiseSchedule& sch, long steps, double lr,
                                              std::uint64_t seed, std::size_t batch = 32) {
    std::vector<Tensor*> params = den.net().params();
    AdamState opt;
    opt.lr = lr;
    NoiseStream rng(seed, NoiseStream::kData);
    std::vector<double> curve;
    for (long it = 0; it < steps; ++it) {
        Tape tp;
        std::vector<Var> pv = den.net().leaves(tp);
        Var loss;
        for (std::size_t b = 0; b < batch; ++b) {
            Tensor x0 = prior.sample(rng);
            int t = 1 + static_cast<int>(rng.uniform_u64() % static_cast<std::uint64_t>(sch.T));
            double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
            Tensor x_t = x0 * at + rng.normal_vec(prior.dim) * st;
            Var in = tp.constant(concat(x_t, Tensor::vec({at, st})));
            Var pred = den.net().forward(tp, in, pv);
            Var err = tp.sum_sq(tp.addt(pred, x0 * -1.0));
            loss = loss.valid() ? tp.add(loss, err) : err;
        }
        loss = tp.scale(loss, 1.0 / static_cast<double>(batch));
        curve.push_back(tp.val(loss).v[0]);
        tp.backward(loss);
        std::vector<Tensor> grads;
        for (Var p : pv) grads.push_back(tp.grad(p));
        adam_step(opt, params, grads);
    }
    return curve;
}

// Draws x0* from the prior and observes it through the task; one fixed
// measurement-noise draw per observation, reused across epochs.
inline std::vector<Observation> make_dataset(const GmmPrior& prior, const ForwardTask& task,
                                             std::size_t n, std::uint64_t seed,
                                             bool noiseless = false) {
    std::vector<Observation> out;
    out.reserve(n);
    NoiseStream rng(seed, NoiseStream::kData);
    for (std::size_t i = 0; i < n; ++i) {
        Tensor x0 = prior.sample(rng);
        out.push_back(make_observation(task, x0, detail::mix_seed(seed, i, 1), noiseless));
    }
    return out;
}

enum class EvalMode { Unguided, Stage1Only, Ahvp, AhvpDet, Shvp };

inline std::string to_string(EvalMode m) {
    switch (m) {
        case EvalMode::Unguided: return "unguided";
        case EvalMode::Stage1Only: return "stage1_only";
        case EvalMode::Ahvp: return "ahvp";
        case EvalMode::AhvpDet: return "ahvp_det";
        case EvalMode::Shvp: return "shvp";
    }
    throw contract_error("eval mode: unknown");
}

inline EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "unguided") return EvalMode::Unguided;
    if (s == "stage1_only") return EvalMode::Stage1Only;
    if (s == "ahvp") return EvalMode::Ahvp;
    if (s == "ahvp_det") return EvalMode::AhvpDet;
    if (s == "shvp") return EvalMode::Shvp;
    throw config_error("eval mode: unknown value '" + s + "'");
}

struct MetricsRow {
    std::string method;
    std::size_t obs_id = 0;
    double mse = 0.0;
    double psnr = 0.0;
    double measurement_residual = 0.0;
    double terminal_loglik = 0.0;
    long denoiser_calls = 0;
    long policy_calls = 0;
    long noise_policy_calls = 0;
    double elbo = 0.0;
    bool has_elbo = false;
};

struct EvalReport {
    std::vector<MetricsRow> rows;
    double mean_mse = 0.0;
    double mean_psnr = 0.0;
    double mean_residual = 0.0;
    double mean_loglik = 0.0;
};

// Runs one rollout per observation (deterministic given seed) and reports
// the desk-scale metric set. PSNR uses unit peak: psnr = -10 log10(mse).
inline EvalReport evaluate(const PolicyPair& pols, const Denoiser& den, const NoiseSchedule& sch,
                           const GuidanceConfig& gcfg, const ForwardTask& task,
                           const std::vector<Observation>& test, EvalMode mode,
                           const RefineConfig& rc, std::uint64_t seed, bool want_elbo = false) {
    EvalReport rep;
    rep.rows.assign(test.size(), MetricsRow{});
    parallel_for(test.size(), [&](std::size_t i) {
        GuidanceConfig cfg = gcfg;
        PolicyPair p = pols;
        switch (mode) {
            case EvalMode::Unguided:
                cfg.use_noise_policy = false;
                cfg.use_controls = false;
                break;
            case EvalMode::Stage1Only:
                cfg.use_controls = false;
                break;
            case EvalMode::Ahvp:
                break;
            case EvalMode::AhvpDet:
                p.step.stochastic = false;
                break;
            case EvalMode::Shvp:
                break;
        }
        cfg.record_kl = want_elbo;
        std::uint64_t rs = detail::mix_seed(seed, i, 0);
        GuidedTrajectory traj = mode == EvalMode::Shvp
                                    ? shvp_refine(p, den, sch, cfg, task, test[i].y, rc, rs)
                                    : ahvp_rollout(p, den, sch, cfg, test[i].y, rs);
        MetricsRow& r = rep.rows[i];
        r.method = to_string(mode);
        r.obs_id = i;
        Tensor err = traj.x0() - test[i].x0_truth;
        r.mse = sum_sq(err) / static_cast<double>(err.size());
        r.psnr = -10.0 * std::log10(std::max(r.mse, 1e-300));
        r.measurement_residual = norm2(apply(task, traj.x0()) - test[i].y);
        r.terminal_loglik = log_likelihood(task, test[i].y, traj.x0());
        r.denoiser_calls = traj.calls.denoiser;
        r.policy_calls = traj.calls.policy;
        r.noise_policy_calls = traj.calls.noise_policy;
        if (want_elbo) {
            r.elbo = elbo_terms(traj, task, test[i].y, sch, /*exact=*/false).elbo();
            r.has_elbo = true;
        }
    });
    for (const MetricsRow& r : rep.rows) {
        rep.mean_mse += r.mse;
        rep.mean_psnr += r.psnr;
        rep.mean_residual += r.measurement_residual;
        rep.mean_loglik += r.terminal_loglik;
    }
    double inv = test.empty() ? 0.0 : 1.0 / static_cast<double>(test.size());
    rep.mean_mse *= inv;
    rep.mean_psnr *= inv;
    rep.mean_residual *= inv;
    rep.mean_loglik *= inv;
    return rep;
}

}  // namespace hvp
