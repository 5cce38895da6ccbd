#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "hvp/adam.hpp"
#include "hvp/gradcheck.hpp"
#include "hvp/mlp.hpp"
#include "hvp/rng.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"

using namespace hvp;

TEST_CASE("tensor shape contract") {
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), dim_error);
    Tensor t = Tensor::vec({1.0, 2.0});
    CHECK(t.finite());
    t.v[0] = std::nan("");
    CHECK_FALSE(t.finite());
    CHECK_THROWS_AS(t.check_finite("test"), numeric_error);
    CHECK_THROWS_AS(matvec(Tensor::zeros({2, 3}), Tensor::zeros({2})), dim_error);
}

TEST_CASE("mlp single affine layer") {
    Mlp net = Mlp::make({1, 1}, 0, /*zero_last=*/false);
    net.W[0] = Tensor({1, 1}, {2.0});
    net.b[0] = Tensor::vec({1.0});
    Tensor out = net.forward(Tensor::vec({3.0}));
    CHECK(out.v[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("mlp zero-initialized final layer gives zero output") {
    Mlp net = Mlp::make({3, 8, 2}, 42, /*zero_last=*/true);
    Tensor out = net.forward(Tensor::vec({0.3, -1.2, 2.5}));
    CHECK(out.v[0] == 0.0);
    CHECK(out.v[1] == 0.0);
}

TEST_CASE("mlp 2-16-2 seed-0 frozen forward value") {
    Mlp net = Mlp::make({2, 16, 2}, 0, /*zero_last=*/false);
    Tensor out = net.forward(Tensor::vec({1.0, 0.0}));
    CHECK(out.v[0] == doctest::Approx(0.24612424966078947).epsilon(1e-14));
    CHECK(out.v[1] == doctest::Approx(0.94614387371223241).epsilon(1e-14));
}

TEST_CASE("mlp forward is pure") {
    Mlp net = Mlp::make({2, 8, 2}, 5, false);
    Tensor in = Tensor::vec({0.7, -0.4});
    Tensor a = net.forward(in), b = net.forward(in);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.v[i] == b.v[i]);
}

TEST_CASE("mlp wrong input width throws") {
    Mlp net = Mlp::make({2, 4, 1}, 0);
    CHECK_THROWS_AS(net.forward(Tensor::vec({1.0, 2.0, 3.0})), dim_error);
}

TEST_CASE("backward of w^2 at w=3 is 6") {
    Tape tp;
    Var w = tp.leaf(Tensor::scalar(3.0));
    Var f = tp.sum_sq(w);
    tp.backward(f);
    CHECK(tp.grad(w).v[0] == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward of a constant is zero") {
    Tape tp;
    Var w = tp.leaf(Tensor::scalar(3.0));
    Var c = tp.constant(Tensor::scalar(5.0));
    Var f = tp.sum(c);
    tp.backward(f);
    CHECK(tp.grad(w).v[0] == 0.0);
}

TEST_CASE("backward rejects non-scalar root") {
    Tape tp;
    Var w = tp.leaf(Tensor::vec({1.0, 2.0}));
    CHECK_THROWS_AS(tp.backward(w), contract_error);
}

TEST_CASE("tape primitives match finite differences on a composite function") {
    NoiseStream rng(3, NoiseStream::kData);
    Tensor x0 = rng.normal_vec(4);
    Tensor W0 = Tensor::zeros({3, 4});
    for (double& v : W0.v) v = rng.normal();
    auto eval = [&](bool grad, Tensor* gx, Tensor* gW) {
        Tape tp;
        Var x = tp.leaf(x0);
        Var W = tp.leaf(W0);
        Var h = tp.silu(tp.matvec(W, x));
        Var sm = tp.softmax(h);
        Var c = tp.concat({sm, tp.clip01(x)});
        Var p = tp.avgpool1d(tp.mul(c, c), 7);
        Var s = tp.smul(p, tp.slice(sm, 0, 1));
        Var f = tp.add(tp.sum_sq(s), tp.dot(h, sm));
        double v = tp.val(f).v[0];
        if (grad) {
            tp.backward(f);
            *gx = tp.grad(x);
            *gW = tp.grad(W);
        }
        return v;
    };
    Tensor gx, gW;
    eval(true, &gx, &gW);
    std::vector<Tensor*> params{&x0, &W0};
    std::vector<Tensor> analytic{gx, gW};
    GradCheckResult r = gradcheck([&] { return eval(false, nullptr, nullptr); }, params, analytic);
    INFO(r.worst);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("mlp gradient matches finite differences on 5 random points") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Mlp net = Mlp::make({3, 6, 2}, seed, false);
        NoiseStream rng(seed + 100, NoiseStream::kData);
        Tensor in = rng.normal_vec(3);
        Tensor tgt = rng.normal_vec(2);
        auto loss = [&] {
            Tensor out = net.forward(in);
            return sum_sq(out - tgt);
        };
        Tape tp;
        std::vector<Var> pv = net.leaves(tp);
        Var out = net.forward(tp, tp.constant(in), pv);
        Var f = tp.sum_sq(tp.addt(out, tgt * -1.0));
        tp.backward(f);
        std::vector<Tensor> analytic;
        for (Var p : pv) analytic.push_back(tp.grad(p));
        GradCheckResult r = gradcheck(loss, net.params(), analytic);
        INFO("seed ", seed, " worst ", r.worst);
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("adam zero gradient is identity") {
    Mlp net = Mlp::make({2, 3, 1}, 1, false);
    std::vector<Tensor> before;
    for (Tensor* p : net.params()) before.push_back(*p);
    AdamState st;
    std::vector<Tensor> zeros;
    for (Tensor* p : net.params()) zeros.push_back(Tensor::zeros(p->shape));
    adam_step(st, net.params(), zeros);
    auto after = net.params();
    for (std::size_t i = 0; i < after.size(); ++i)
        for (std::size_t j = 0; j < after[i]->size(); ++j)
            CHECK(after[i]->v[j] == before[i].v[j]);
}

TEST_CASE("adam first step has bias-corrected unit magnitude") {
    Tensor w = Tensor::scalar(1.0);
    AdamState st;
    st.lr = 1e-2;
    std::vector<Tensor*> ps{&w};
    std::vector<Tensor> gs{Tensor::scalar(0.37)};
    adam_step(st, ps, gs);
    CHECK(w.v[0] == doctest::Approx(1.0 - 1e-2).epsilon(1e-6));
}

TEST_CASE("adam converges on a scalar quadratic") {
    Tensor w = Tensor::scalar(0.0);
    AdamState st;
    st.lr = 0.1;
    std::vector<Tensor*> ps{&w};
    for (int i = 0; i < 100; ++i) {
        std::vector<Tensor> gs{Tensor::scalar(2.0 * (w.v[0] - 5.0))};
        adam_step(st, ps, gs);
    }
    CHECK(std::abs(w.v[0] - 5.0) < 0.5);
}

TEST_CASE("adam rejects NaN gradient naming the parameter") {
    Tensor w = Tensor::scalar(1.0);
    AdamState st;
    std::vector<Tensor*> ps{&w};
    std::vector<Tensor> gs{Tensor::scalar(std::nan(""))};
    CHECK_THROWS_WITH_AS(adam_step(st, ps, gs, {"weight0"}),
                         "adam_step: non-finite gradient for weight0", numeric_error);
}

TEST_CASE("noise streams are deterministic and role-split") {
    NoiseStream a(7, NoiseStream::kStepNoise), b(7, NoiseStream::kStepNoise);
    NoiseStream c(7, NoiseStream::kControlNoise);
    bool any_diff = false;
    for (int i = 0; i < 32; ++i) {
        double xa = a.normal(), xb = b.normal(), xc = c.normal();
        CHECK(xa == xb);
        if (xa != xc) any_diff = true;
    }
    CHECK(any_diff);
}

TEST_CASE("noise stream moments are sane") {
    NoiseStream rng(11, NoiseStream::kData);
    double s = 0.0, s2 = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.02);
    CHECK(std::abs(s2 / n - 1.0) < 0.02);
}
