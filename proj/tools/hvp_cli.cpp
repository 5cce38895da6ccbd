#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <string>

#include "CLI11.hpp"
#include "hvp/hvp.hpp"

namespace fs = std::filesystem;
using namespace hvp;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::string checkpoint;
    std::uint64_t seed = 0;
    bool seed_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool config_required = true) {
    auto* c = cmd->add_option("--config", o.config_path, "experiment config file");
    if (config_required) c->required();
    cmd->add_option("--out", o.out_dir, "output directory");
    cmd->add_option("--checkpoint", o.checkpoint, "checkpoint file");
    cmd->add_option("--seed", o.seed, "override the config seed")->each([&](const std::string&) {
        o.seed_set = true;
    });
}

ExperimentConfig load_config(const CommonOpts& o) {
    ExperimentConfig c = o.config_path.empty() ? ExperimentConfig()
                                               : ExperimentConfig::from_file(o.config_path);
    if (o.seed_set) {
        c.seed = o.seed;
        c.train.seed = o.seed;
    }
    return c;
}

std::unique_ptr<Denoiser> make_denoiser(const ExperimentConfig& c, const GmmPrior& prior,
                                        const NoiseSchedule& sch) {
    if (c.denoiser_kind == "oracle") return std::make_unique<GmmOracleDenoiser>(prior);
    auto mlp = std::make_unique<MlpDenoiser>(prior.dim, c.denoiser_hidden, c.seed ^ 0xd1ceULL);
    train_mlp_denoiser(*mlp, prior, sch, c.denoiser_train_steps, c.denoiser_lr,
                       c.seed ^ 0xd1ceULL);
    return mlp;
}

std::string out_path(const CommonOpts& o, const std::string& name) {
    fs::create_directories(o.out_dir);
    return (fs::path(o.out_dir) / name).string();
}

void write_loss_curve(const TrainResult& res, const std::string& path) {
    CsvWriter csv({"epoch", "mean_loss"});
    for (std::size_t e = 0; e < res.loss_curve.size(); ++e)
        csv.row({std::to_string(e), fmt_f64(res.loss_curve[e])});
    csv.write(path);
}

void write_metrics(const EvalReport& rep, const std::string& path) {
    CsvWriter csv({"method", "obs_id", "mse", "psnr", "measurement_residual", "terminal_loglik",
                   "denoiser_calls", "policy_calls", "noise_policy_calls", "elbo"});
    for (const MetricsRow& r : rep.rows)
        csv.row({r.method, std::to_string(r.obs_id), fmt_f64(r.mse), fmt_f64(r.psnr),
                 fmt_f64(r.measurement_residual), fmt_f64(r.terminal_loglik),
                 std::to_string(r.denoiser_calls), std::to_string(r.policy_calls),
                 std::to_string(r.noise_policy_calls), r.has_elbo ? fmt_f64(r.elbo) : ""});
    csv.write(path);
}

PolicyPair load_or_init_policies(const ExperimentConfig& c, const ForwardTask& task,
                                 const CommonOpts& o) {
    if (!o.checkpoint.empty()) return load_checkpoint(o.checkpoint).to_policies();
    return c.make_policies(task);
}

void save_policies(const ExperimentConfig& c, const PolicyPair& pols, const std::string& path) {
    save_checkpoint(Checkpoint::from_policies(pols, c.gamma, c.sched_T, c.sched_eta,
                                              c.sched_beta_min, c.sched_beta_max),
                    path);
}

int cmd_train(const CommonOpts& o, int stage) {
    ExperimentConfig c = load_config(o);
    GmmPrior prior = c.make_prior();
    ForwardTask task = c.make_task();
    NoiseSchedule sch = c.make_schedule();
    auto den = make_denoiser(c, prior, sch);
    std::vector<Observation> ds = make_dataset(prior, task, c.train.dataset_size, c.seed);
    PolicyPair pols = load_or_init_policies(c, task, o);
    TrainConfig tc = c.train;
    tc.stage = stage;
    TrainResult res;
    if (stage == 1) {
        res = train_stage1(tc, task, ds, pols.noise, *den, sch, c.loss);
    } else {
        GuidanceConfig g = c.make_guidance();
        res = train_stage2(tc, task, ds, pols, pols.step, *den, sch, c.loss, g);
    }
    std::string ck = out_path(o, stage == 1 ? "stage1.ckpt" : "stage2.ckpt");
    save_policies(c, pols, ck);
    write_loss_curve(res, out_path(o, stage == 1 ? "stage1_loss.csv" : "stage2_loss.csv"));
    write_manifest(out_path(o, "manifest.txt"), c.serialize(), c.seed, ck);
    if (res.aborted_epoch >= 0) {
        std::cerr << "training aborted at epoch " << res.aborted_epoch
                  << ": non-finite loss; last finite parameters kept\n";
        return 1;
    }
    return 0;
}

int cmd_sample(const CommonOpts& o, bool refine) {
    ExperimentConfig c = load_config(o);
    GmmPrior prior = c.make_prior();
    ForwardTask task = c.make_task();
    NoiseSchedule sch = c.make_schedule();
    auto den = make_denoiser(c, prior, sch);
    PolicyPair pols = load_or_init_policies(c, task, o);
    GuidanceConfig g = c.make_guidance();
    std::vector<Observation> test = make_dataset(prior, task, c.eval_n_obs, c.seed ^ 0x7e57ULL);
    std::vector<Tensor> samples(test.size());
    parallel_for(test.size(), [&](std::size_t i) {
        std::uint64_t rs = detail::mix_seed(c.seed, i, 0);
        GuidedTrajectory traj = refine
                                    ? shvp_refine(pols, *den, sch, g, task, test[i].y, c.refine, rs)
                                    : ahvp_rollout(pols, *den, sch, g, test[i].y, rs);
        samples[i] = traj.x0();
    });
    std::string bin = out_path(o, refine ? "refined_samples.bin" : "samples.bin");
    save_samples(samples, bin);
    save_sample_index(samples, bin, bin + ".csv");
    write_manifest(out_path(o, "manifest.txt"), c.serialize(), c.seed, o.checkpoint);
    return 0;
}

int cmd_eval(const CommonOpts& o) {
    ExperimentConfig c = load_config(o);
    GmmPrior prior = c.make_prior();
    ForwardTask task = c.make_task();
    NoiseSchedule sch = c.make_schedule();
    auto den = make_denoiser(c, prior, sch);
    PolicyPair pols = load_or_init_policies(c, task, o);
    EvalMode mode = o.checkpoint.empty() ? EvalMode::Unguided : eval_mode_from_string(c.eval_mode);
    GuidanceConfig g = c.make_guidance();
    std::vector<Observation> test = make_dataset(prior, task, c.eval_n_obs, c.seed ^ 0x7e57ULL);
    EvalReport rep = evaluate(pols, *den, sch, g, task, test, mode, c.refine, c.seed,
                              c.eval_want_elbo);
    write_metrics(rep, out_path(o, "metrics.csv"));
    write_manifest(out_path(o, "manifest.txt"), c.serialize(), c.seed, o.checkpoint);
    std::cout << to_string(mode) << ": mean mse " << rep.mean_mse << ", mean residual "
              << rep.mean_residual << ", mean loglik " << rep.mean_loglik << "\n";
    return 0;
}

bool report(const char* name, bool ok) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
    return ok;
}

int cmd_oracle_check(const CommonOpts& o) {
    std::uint64_t seed = o.seed_set ? o.seed : 0;
    bool all = true;

    // evidence cross-check on 10 random Gaussian-linear instances
    {
        bool ok = true;
        for (int k = 0; k < 10; ++k) {
            NoiseStream rng(seed + static_cast<std::uint64_t>(k), NoiseStream::kData);
            std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_u64() % 4);
            std::size_t m = 1 + static_cast<std::size_t>(rng.uniform_u64() % d);
            GaussianLinearInstance inst;
            inst.mu0 = rng.normal_vec(d);
            inst.var0 = Tensor::zeros({d});
            for (auto& x : inst.var0.v) x = 0.3 + rng.uniform();
            inst.A = Tensor::zeros({m, d});
            for (auto& x : inst.A.v) x = rng.normal();
            inst.sigma_y = 0.3 + 0.5 * rng.uniform();
            inst.y = rng.normal_vec(m);
            double exact = log_evidence(inst);

            GmmPrior prior;
            prior.dim = d;
            prior.w = {1.0};
            prior.m = {inst.mu0};
            // oracle priors are isotropic; restrict to a shared variance
            double var = inst.var0.v[0];
            for (auto& x : inst.var0.v) x = var;
            exact = log_evidence(inst);
            prior.v = {var};
            ForwardTask task = ForwardTask::dense(inst.A, inst.sigma_y);
            McEvidence mc = mc_evidence(prior, task, inst.y, 200000, seed + 99 + k);
            if (std::abs(mc.estimate - exact) > 3.0 * mc.std_error) ok = false;
        }
        all &= report("log_evidence vs mc_evidence within 3 SE (10 instances)", ok);
    }

    // tweedie vs quadrature on 20 1D instances
    {
        bool ok = true;
        NoiseSchedule sch = build_schedule(8);
        for (int k = 0; k < 20; ++k) {
            NoiseStream rng(seed + 500 + static_cast<std::uint64_t>(k), NoiseStream::kData);
            GmmPrior prior;
            prior.dim = 1;
            std::size_t K = 1 + static_cast<std::size_t>(rng.uniform_u64() % 3);
            double wsum = 0.0;
            for (std::size_t j = 0; j < K; ++j) {
                prior.w.push_back(0.2 + rng.uniform());
                wsum += prior.w.back();
                prior.m.push_back(Tensor::vec({2.0 * rng.normal()}));
                prior.v.push_back(0.3 + rng.uniform());
            }
            for (auto& x : prior.w) x /= wsum;
            int t = 1 + static_cast<int>(rng.uniform_u64() % 8);
            double x_t = 2.0 * rng.normal();
            Tensor closed = gmm_tweedie(prior, sch, Tensor::vec({x_t}), t);
            double quad = quadrature_tweedie_1d(prior, sch, x_t, t);
            if (std::abs(closed.v[0] - quad) > 1e-6) ok = false;
        }
        all &= report("gmm_tweedie vs quadrature abs err < 1e-6 (20 instances)", ok);
    }

    // Bayes identity at 5 random points
    {
        bool ok = true;
        NoiseStream rng(seed + 1000, NoiseStream::kData);
        GaussianLinearInstance inst;
        std::size_t d = 3;
        inst.mu0 = rng.normal_vec(d);
        inst.var0 = Tensor::zeros({d});
        for (auto& x : inst.var0.v) x = 0.4 + rng.uniform();
        inst.A = Tensor::zeros({2, d});
        for (auto& x : inst.A.v) x = rng.normal();
        inst.sigma_y = 0.5;
        inst.y = rng.normal_vec(2);
        double ev = log_evidence(inst);
        PosteriorMoments pm = posterior_moments(inst);
        Tensor prior_cov = Tensor::zeros({d, d});
        for (std::size_t i = 0; i < d; ++i) prior_cov.at(i, i) = inst.var0.v[i];
        ForwardTask task = ForwardTask::dense(inst.A, inst.sigma_y);
        for (int k = 0; k < 5; ++k) {
            Tensor x = rng.normal_vec(d);
            double lhs = ev + log_gaussian(x, pm.mean, pm.cov);
            double rhs = log_gaussian(x, inst.mu0, prior_cov) + log_likelihood(task, inst.y, x);
            if (std::abs(lhs - rhs) > 1e-8) ok = false;
        }
        all &= report("posterior Bayes identity abs err < 1e-8 (5 points)", ok);
    }

    return all ? 0 : 1;
}

int cmd_gradcheck(const CommonOpts& o) {
    std::uint64_t seed = o.seed_set ? o.seed : 0;
    const double tol = 1e-4;
    bool all = true;
    NoiseSchedule sch = build_schedule(4);
    GmmPrior prior;
    prior.dim = 2;
    prior.w = {0.5, 0.5};
    prior.m = {Tensor::vec({1.0, 0.5}), Tensor::vec({-1.0, -0.5})};
    prior.v = {0.6, 0.8};
    GmmOracleDenoiser den(prior);
    ForwardTask task = ForwardTask::pool(2, 2, 0.1);
    NoiseStream rng(seed, NoiseStream::kData);
    Tensor x0_truth = prior.sample(rng);
    Observation obs = make_observation(task, x0_truth, seed + 7);
    LossWeights w;
    w.w_T = 2.0;

    PolicyPair pols;
    pols.noise = NoisePolicy::make(task.m, task.d, {8}, seed + 1);
    pols.step = StepPolicy::make(task.m, task.d, {8}, seed + 2);
    for (Tensor* p : pols.noise.net.params())
        for (double& x : p->v) x += 0.05 * rng.normal();
    for (Tensor* p : pols.step.net.params())
        for (double& x : p->v) x += 0.05 * rng.normal();

    {
        std::vector<Observation> batch{obs};
        auto f = [&] { return stage1_loss(pols.noise, den, sch, task, batch, w, seed, false).value; };
        LossEval le = stage1_loss(pols.noise, den, sch, task, batch, w, seed);
        GradCheckResult r = gradcheck(f, pols.noise.net.params(), le.grads);
        std::printf("%s stage1_loss (max rel err %.3g)\n", r.ok(tol) ? "PASS" : "FAIL",
                    r.max_rel_err);
        all &= r.ok(tol);
    }
    {
        GuidanceConfig g;
        g.T = sch.T;
        g.record_kl = true;
        GuidedTrajectory traj = ahvp_rollout(pols, den, sch, g, obs.y, seed + 11);
        auto f = [&] {
            return stage2_loss(pols.step, den, sch, task, obs.y, traj, w, g.gamma, false).value;
        };
        LossEval le = stage2_loss(pols.step, den, sch, task, obs.y, traj, w, g.gamma);
        GradCheckResult r = gradcheck(f, pols.step.net.params(), le.grads);
        std::printf("%s stage2_loss (max rel err %.3g)\n", r.ok(tol) ? "PASS" : "FAIL",
                    r.max_rel_err);
        all &= r.ok(tol);
    }
    {
        Tensor x_t = rng.normal_vec(2);
        Tensor u = rng.normal_vec(2) * 0.1;
        int t = 3;
        Tensor mu_free = denoiser_mean(den, sch, x_t, t);
        auto f = [&] {
            return shvp_step_objective(x_t, u, t, task, obs.y, den, sch, w, 1.0, mu_free, false)
                .value;
        };
        StepObjective so = shvp_step_objective(x_t, u, t, task, obs.y, den, sch, w, 1.0, mu_free);
        GradCheckResult r = gradcheck(f, u, so.grad_u);
        std::printf("%s shvp_step_objective (max rel err %.3g)\n", r.ok(tol) ? "PASS" : "FAIL",
                    r.max_rel_err);
        all &= r.ok(tol);
    }
    {
        Tensor x0 = rng.normal_vec(2);
        auto f = [&] { return log_likelihood(task, obs.y, x0); };
        Tape tp;
        Var xv = tp.leaf(x0);
        tp.backward(log_likelihood(tp, task, obs.y, xv));
        GradCheckResult r = gradcheck(f, x0, tp.grad(xv));
        std::printf("%s log_likelihood (max rel err %.3g)\n", r.ok(tol) ? "PASS" : "FAIL",
                    r.max_rel_err);
        all &= r.ok(tol);
    }
    {
        GuidanceConfig g;
        g.T = sch.T;
        auto f = [&] {
            return surrogate_elbo_rollout(pols, den, sch, g, task, obs.y, seed + 21, false).value;
        };
        LossEval le = surrogate_elbo_rollout(pols, den, sch, g, task, obs.y, seed + 21);
        std::vector<Tensor*> params;
        for (Tensor* p : pols.noise.net.params()) params.push_back(p);
        for (Tensor* p : pols.step.net.params()) params.push_back(p);
        GradCheckResult r = gradcheck(f, params, le.grads);
        std::printf("%s surrogate elbo rollout (max rel err %.3g)\n", r.ok(tol) ? "PASS" : "FAIL",
                    r.max_rel_err);
        all &= r.ok(tol);
    }
    return all ? 0 : 1;
}

int cmd_ablate(const CommonOpts& o, const std::string& which) {
    ExperimentConfig c = load_config(o);
    GmmPrior prior = c.make_prior();
    ForwardTask task = c.make_task();
    NoiseSchedule sch = c.make_schedule();
    auto den = make_denoiser(c, prior, sch);
    std::vector<Observation> train_ds = make_dataset(prior, task, c.train.dataset_size, c.seed);
    std::vector<Observation> test = make_dataset(prior, task, c.eval_n_obs, c.seed ^ 0x7e57ULL);
    GuidanceConfig g = c.make_guidance();

    PolicyPair pols = load_or_init_policies(c, task, o);
    if (o.checkpoint.empty()) {
        TrainConfig tc = c.train;
        tc.stage = 1;
        train_stage1(tc, task, train_ds, pols.noise, *den, sch, c.loss);
        tc.stage = 2;
        train_stage2(tc, task, train_ds, pols, pols.step, *den, sch, c.loss, g);
    }

    if (which == "two-stage") {
        CsvWriter csv({"method", "mean_mse", "mean_residual", "mean_loglik"});
        for (EvalMode m : {EvalMode::Unguided, EvalMode::Stage1Only, EvalMode::Ahvp}) {
            EvalReport rep = evaluate(pols, *den, sch, g, task, test, m, c.refine, c.seed);
            csv.row({to_string(m), fmt_f64(rep.mean_mse), fmt_f64(rep.mean_residual),
                     fmt_f64(rep.mean_loglik)});
        }
        csv.write(out_path(o, "ablate_two_stage.csv"));
    } else if (which == "stochastic") {
        CsvWriter csv({"method", "obs_id", "sample_std"});
        for (EvalMode m : {EvalMode::Ahvp, EvalMode::AhvpDet}) {
            PolicyPair p = pols;
            if (m == EvalMode::AhvpDet) p.step.stochastic = false;
            for (std::size_t i = 0; i < std::min<std::size_t>(test.size(), 10); ++i) {
                // spread of x0 across 100 rollouts of the same y
                std::vector<Tensor> xs;
                for (int r = 0; r < 100; ++r)
                    xs.push_back(ahvp_rollout(p, *den, sch, g, test[i].y,
                                              detail::mix_seed(c.seed, i, 1000 + r))
                                     .x0());
                Tensor mean = Tensor::zeros(xs[0].shape);
                for (const Tensor& x : xs)
                    for (std::size_t j = 0; j < x.size(); ++j) mean.v[j] += x.v[j] / 100.0;
                double var = 0.0;
                for (const Tensor& x : xs) var += sum_sq(x - mean);
                var /= 100.0 * static_cast<double>(xs[0].size());
                csv.row({to_string(m), std::to_string(i), fmt_f64(std::sqrt(var))});
            }
        }
        csv.write(out_path(o, "ablate_stochastic.csv"));
    } else {
        throw config_error("ablate: --which must be two-stage or stochastic");
    }
    write_manifest(out_path(o, "manifest.txt"), c.serialize(), c.seed, o.checkpoint);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical variational policies for guided diffusion sampling"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string which = "two-stage";
    auto* s1 = app.add_subcommand("train-stage1", "train the initial-noise policy");
    add_common(s1, o);
    auto* s2 = app.add_subcommand("train-stage2", "train the per-step controller");
    add_common(s2, o);
    auto* sample = app.add_subcommand("sample", "draw amortized conditional samples");
    add_common(sample, o);
    auto* refine = app.add_subcommand("refine", "draw semi-amortized (refined) samples");
    add_common(refine, o);
    auto* eval = app.add_subcommand("eval", "compute metrics for one method");
    add_common(eval, o);
    auto* oc = app.add_subcommand("oracle-check", "cross-validate the exact oracles");
    add_common(oc, o, false);
    auto* ab = app.add_subcommand("ablate", "run an ablation comparison");
    add_common(ab, o);
    ab->add_option("--which", which, "two-stage | stochastic");
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check every loss");
    add_common(gc, o, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (s1->parsed()) return cmd_train(o, 1);
        if (s2->parsed()) return cmd_train(o, 2);
        if (sample->parsed()) return cmd_sample(o, false);
        if (refine->parsed()) return cmd_sample(o, true);
        if (eval->parsed()) return cmd_eval(o);
        if (oc->parsed()) return cmd_oracle_check(o);
        if (ab->parsed()) return cmd_ablate(o, which);
        if (gc->parsed()) return cmd_gradcheck(o);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const param_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
