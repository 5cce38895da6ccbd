#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hvp/oracle.hpp"

using namespace hvp;

namespace {

GaussianLinearInstance random_instance(std::uint64_t seed, std::size_t d, std::size_t m,
                                       bool isotropic = false) {
    NoiseStream rng(seed, NoiseStream::kData);
    GaussianLinearInstance inst;
    inst.mu0 = rng.normal_vec(d);
    inst.var0 = Tensor::zeros({d});
    double shared = 0.3 + rng.uniform();
    for (auto& x : inst.var0.v) x = isotropic ? shared : 0.3 + rng.uniform();
    inst.A = Tensor::zeros({m, d});
    for (auto& x : inst.A.v) x = rng.normal();
    inst.sigma_y = 0.3 + 0.5 * rng.uniform();
    inst.y = rng.normal_vec(m);
    return inst;
}

GmmPrior to_prior(const GaussianLinearInstance& inst) {
    GmmPrior p;
    p.dim = inst.d();
    p.w = {1.0};
    p.m = {inst.mu0};
    p.v = {inst.var0.v[0]};
    p.validate();
    return p;
}

}  // namespace

TEST_CASE("log_evidence of two convolved unit Gaussians") {
    GaussianLinearInstance inst;
    inst.mu0 = Tensor::vec({0.0});
    inst.var0 = Tensor::vec({1.0});
    inst.A = Tensor({1, 1}, {1.0});
    inst.sigma_y = 1.0;
    inst.y = Tensor::vec({0.0});
    CHECK(log_evidence(inst) == doctest::Approx(-0.5 * std::log(4.0 * M_PI)).epsilon(1e-14));
    CHECK(log_evidence(inst) == doctest::Approx(-1.2655).epsilon(1e-4));
}

TEST_CASE("log_evidence prior-dominated limit at huge sigma_y") {
    GaussianLinearInstance inst = random_instance(1, 3, 2, true);
    for (double& v : inst.var0.v) v *= 0.1;  // keep the O(trace/sigma^2) gap below tolerance
    inst.sigma_y = 1e3;
    double full = log_evidence(inst);
    // noise dominates: log N(y; A mu0, sigma_y^2 I)
    Tensor noise_cov = Tensor::zeros({2, 2});
    noise_cov.at(0, 0) = noise_cov.at(1, 1) = 1e6;
    double limit = log_gaussian(inst.y, matvec(inst.A, inst.mu0), noise_cov);
    CHECK(std::abs(full - limit) < 1e-6);
}

TEST_CASE("log_evidence rejects a singular covariance") {
    GaussianLinearInstance inst;
    inst.mu0 = Tensor::vec({0.0});
    inst.var0 = Tensor::vec({1.0});
    inst.A = Tensor({2, 1}, {1.0, 1.0});  // rank-deficient rows
    inst.sigma_y = 0.0;
    inst.y = Tensor::vec({0.0, 0.0});
    CHECK_THROWS_AS(log_evidence(inst), numeric_error);
}

TEST_CASE("log_evidence matches Monte-Carlo evidence at d=4") {
    GaussianLinearInstance inst = random_instance(7, 4, 3, true);
    double exact = log_evidence(inst);
    McEvidence mc = mc_evidence(to_prior(inst), ForwardTask::dense(inst.A, inst.sigma_y), inst.y,
                                1000000, 77);
    CHECK(std::abs(mc.estimate - exact) <= 3.0 * mc.std_error);
    CHECK(mc.std_error > 0.0);
}

TEST_CASE("evidence cross-check on 10 random instances") {
    for (std::uint64_t k = 0; k < 10; ++k) {
        GaussianLinearInstance inst =
            random_instance(100 + k, 1 + k % 4, 1 + k % 2, /*isotropic=*/true);
        double exact = log_evidence(inst);
        McEvidence mc = mc_evidence(to_prior(inst), ForwardTask::dense(inst.A, inst.sigma_y),
                                    inst.y, 200000, 500 + k);
        INFO("instance ", k, " exact ", exact, " mc ", mc.estimate, " se ", mc.std_error);
        CHECK(std::abs(mc.estimate - exact) <= 3.0 * mc.std_error);
    }
}

TEST_CASE("posterior conjugate update, scalar") {
    GaussianLinearInstance inst;
    inst.mu0 = Tensor::vec({0.0});
    inst.var0 = Tensor::vec({1.0});
    inst.A = Tensor({1, 1}, {1.0});
    inst.sigma_y = 1.0;
    inst.y = Tensor::vec({2.0});
    PosteriorMoments pm = posterior_moments(inst);
    CHECK(pm.mean.v[0] == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(pm.cov.at(0, 0) == doctest::Approx(0.5).epsilon(1e-14));
}

TEST_CASE("posterior of an unobserved coordinate equals the prior marginal") {
    GaussianLinearInstance inst;
    inst.mu0 = Tensor::vec({0.3, -0.4});
    inst.var0 = Tensor::vec({0.7, 1.3});
    inst.A = Tensor({2, 2}, {1.0, 0.0, 0.0, 0.0});  // diag(1, 0)
    inst.sigma_y = 0.2;
    inst.y = Tensor::vec({0.5, 0.0});
    PosteriorMoments pm = posterior_moments(inst);
    CHECK(pm.mean.v[1] == doctest::Approx(-0.4).epsilon(1e-12));
    CHECK(pm.cov.at(1, 1) == doctest::Approx(1.3).epsilon(1e-12));
    CHECK(std::abs(pm.cov.at(0, 1)) < 1e-12);
}

TEST_CASE("posterior mean matches self-normalized importance sampling at d=4") {
    GaussianLinearInstance inst = random_instance(11, 4, 2, true);
    PosteriorMoments pm = posterior_moments(inst);
    GmmPrior prior = to_prior(inst);
    ForwardTask task = ForwardTask::dense(inst.A, inst.sigma_y);
    const long n = 400000;
    constexpr std::size_t kBlocks = 50;
    NoiseStream rng(321, NoiseStream::kData);
    std::vector<Tensor> num_b(kBlocks, Tensor::zeros({4}));
    std::vector<double> den_b(kBlocks, 0.0);
    // weights are O(1) here (sigma_y ~ 0.5): plain exp is safe
    for (long i = 0; i < n; ++i) {
        Tensor x = prior.sample(rng);
        double w = std::exp(log_likelihood(task, inst.y, x));
        std::size_t b = static_cast<std::size_t>(i) % kBlocks;
        den_b[b] += w;
        for (std::size_t j = 0; j < 4; ++j) num_b[b].v[j] += w * x.v[j];
    }
    for (std::size_t j = 0; j < 4; ++j) {
        double num = 0.0, den = 0.0;
        for (std::size_t b = 0; b < kBlocks; ++b) {
            num += num_b[b].v[j];
            den += den_b[b];
        }
        double est = num / den;
        // jackknife SE over blocks
        double mean_loo = 0.0;
        std::vector<double> loo(kBlocks);
        for (std::size_t b = 0; b < kBlocks; ++b) {
            loo[b] = (num - num_b[b].v[j]) / (den - den_b[b]);
            mean_loo += loo[b] / kBlocks;
        }
        double ss = 0.0;
        for (double l : loo) ss += (l - mean_loo) * (l - mean_loo);
        double se = std::sqrt(ss * (kBlocks - 1.0) / kBlocks);
        INFO("coord ", j, " est ", est, " exact ", pm.mean.v[j], " se ", se);
        CHECK(std::abs(est - pm.mean.v[j]) <= 3.0 * se);
    }
}

TEST_CASE("Bayes identity: evidence x posterior = prior x likelihood") {
    GaussianLinearInstance inst = random_instance(13, 3, 2);
    double ev = log_evidence(inst);
    PosteriorMoments pm = posterior_moments(inst);
    Tensor prior_cov = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i) prior_cov.at(i, i) = inst.var0.v[i];
    ForwardTask task = ForwardTask::dense(inst.A, inst.sigma_y);
    NoiseStream rng(999, NoiseStream::kData);
    for (int k = 0; k < 5; ++k) {
        Tensor x = rng.normal_vec(3);
        double lhs = ev + log_gaussian(x, pm.mean, pm.cov);
        double rhs = log_gaussian(x, inst.mu0, prior_cov) + log_likelihood(task, inst.y, x);
        CHECK(std::abs(lhs - rhs) < 1e-8);
    }
}

TEST_CASE("quadrature matches the conjugate formula for K=1") {
    GmmPrior prior = GmmPrior::single(Tensor::vec({0.4}), 0.8);
    NoiseSchedule sch = build_schedule(8);
    int t = 4;
    double at = sch.a[4], st = sch.s[4];
    double x_t = 0.9;
    double expect = (at * 0.8 * x_t + st * st * 0.4) / (at * at * 0.8 + st * st);
    CHECK(std::abs(quadrature_tweedie_1d(prior, sch, x_t, t) - expect) < 1e-9);
}

TEST_CASE("quadrature symmetry zero") {
    GmmPrior prior;
    prior.dim = 1;
    prior.w = {0.5, 0.5};
    prior.m = {Tensor::vec({1.2}), Tensor::vec({-1.2})};
    prior.v = {0.4, 0.4};
    NoiseSchedule sch = build_schedule(8);
    CHECK(std::abs(quadrature_tweedie_1d(prior, sch, 0.0, 6)) < 1e-9);
}

TEST_CASE("quadrature two-resolution self-consistency on an asymmetric K=3 prior") {
    GmmPrior prior;
    prior.dim = 1;
    prior.w = {0.5, 0.3, 0.2};
    prior.m = {Tensor::vec({-1.0}), Tensor::vec({0.4}), Tensor::vec({2.2})};
    prior.v = {0.5, 0.2, 0.9};
    NoiseSchedule sch = build_schedule(8);
    double a = quadrature_tweedie_1d(prior, sch, 0.7, 5, 100001);
    double b = quadrature_tweedie_1d(prior, sch, 0.7, 5, 200001);
    CHECK(std::abs(a - b) < 1e-8);
    Tensor closed = gmm_tweedie(prior, sch, Tensor::vec({0.7}), 5);
    CHECK(std::abs(a - closed.v[0]) < 1e-6);
}

TEST_CASE("quadrature refines toward the closed form") {
    GmmPrior prior;
    prior.dim = 1;
    prior.w = {0.6, 0.4};
    prior.m = {Tensor::vec({-0.8}), Tensor::vec({1.1})};
    prior.v = {0.3, 0.6};
    NoiseSchedule sch = build_schedule(8);
    double closed = gmm_tweedie(prior, sch, Tensor::vec({0.3}), 3).v[0];
    // the integrand decays smoothly, so trapezoid error collapses fast with n
    double coarse = std::abs(quadrature_tweedie_1d(prior, sch, 0.3, 3, 15, 1e9) - closed);
    double fine = std::abs(quadrature_tweedie_1d(prior, sch, 0.3, 3, 100001, 1e-5) - closed);
    CHECK(fine <= coarse);
    CHECK(fine < 1e-6);
}

TEST_CASE("quadrature grid-too-coarse self check") {
    GmmPrior prior;
    prior.dim = 1;
    prior.w = {0.5, 0.5};
    prior.m = {Tensor::vec({-3.0}), Tensor::vec({3.0})};
    prior.v = {0.005, 0.005};
    NoiseSchedule sch = build_schedule(8);
    CHECK_THROWS_AS(quadrature_tweedie_1d(prior, sch, 0.4, 1, 101, 1e-12), numeric_error);
}

TEST_CASE("tweedie closed form vs quadrature on 20 random 1D instances") {
    NoiseSchedule sch = build_schedule(8);
    for (std::uint64_t k = 0; k < 20; ++k) {
        NoiseStream rng(700 + k, NoiseStream::kData);
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
        double quad = quadrature_tweedie_1d(prior, sch, x_t, t);
        Tensor closed = gmm_tweedie(prior, sch, Tensor::vec({x_t}), t);
        INFO("instance ", k, " t ", t, " x_t ", x_t);
        CHECK(std::abs(closed.v[0] - quad) < 1e-6);
    }
}

TEST_CASE("mc_evidence flat-likelihood limit") {
    GmmPrior prior = GmmPrior::standard(1);
    Tensor mask = Tensor::vec({1.0});
    ForwardTask task = ForwardTask::inpaint(mask, 1e3);
    McEvidence mc = mc_evidence(prior, task, Tensor::vec({0.0}), 50000, 5);
    double limit = -0.5 * std::log(2.0 * M_PI * 1e6);
    CHECK(std::abs(mc.estimate - limit) < 1e-3);
}

TEST_CASE("mc_evidence requires at least 1e4 samples") {
    GmmPrior prior = GmmPrior::standard(1);
    ForwardTask task = ForwardTask::inpaint(Tensor::vec({1.0}), 1.0);
    CHECK_THROWS_AS(mc_evidence(prior, task, Tensor::vec({0.0}), 100, 0), param_error);
}

TEST_CASE("mc_evidence HDR frozen reference (seed 2024, 1e6 samples)") {
    GmmPrior prior;
    prior.dim = 1;
    prior.w = {0.5, 0.5};
    prior.m = {Tensor::vec({0.2}), Tensor::vec({0.6})};
    prior.v = {0.02, 0.02};
    ForwardTask task = ForwardTask::hdr(1, 2.0, 0.0, 0.05);
    McEvidence mc = mc_evidence(prior, task, Tensor::vec({0.9}), 1000000, 2024);
    CHECK(mc.estimate == doctest::Approx(-0.039051162661788652).epsilon(1e-12));
    CHECK(mc.std_error == doctest::Approx(0.001556787278709251).epsilon(1e-9));
}

TEST_CASE("cholesky round trip and solve") {
    NoiseStream rng(21, NoiseStream::kData);
    Tensor B = Tensor::zeros({3, 3});
    for (double& x : B.v) x = rng.normal();
    Tensor C = Tensor::zeros({3, 3});
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            for (std::size_t k = 0; k < 3; ++k) C.at(i, j) += B.at(i, k) * B.at(j, k);
            if (i == j) C.at(i, j) += 0.5;
        }
    Tensor L = cholesky(C);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < 3; ++k) s += L.at(i, k) * L.at(j, k);
            CHECK(s == doctest::Approx(C.at(i, j)).epsilon(1e-12));
        }
    Tensor b = rng.normal_vec(3);
    Tensor x = chol_solve(L, b);
    Tensor back = matvec(C, x);
    for (std::size_t i = 0; i < 3; ++i) CHECK(back.v[i] == doctest::Approx(b.v[i]).epsilon(1e-10));
}

TEST_CASE("task_matrix reproduces structured operators") {
    ForwardTask pool = ForwardTask::pool(4, 2, 0.01);
    Tensor A = task_matrix(pool);
    NoiseStream rng(31, NoiseStream::kData);
    Tensor x = rng.normal_vec(4);
    Tensor direct = apply(pool, x);
    Tensor via = matvec(A, x);
    for (std::size_t i = 0; i < 2; ++i) CHECK(direct.v[i] == doctest::Approx(via.v[i]).epsilon(1e-14));
    CHECK_THROWS_AS(task_matrix(ForwardTask::hdr(2, 2.0, 0.0, 0.01)), param_error);
}
