#pragma once

#include <cmath>
#include <memory>

#include "hvp/gmm.hpp"
#include "hvp/mlp.hpp"
#include "hvp/rng.hpp"
#include "hvp/schedule.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Stand-in for the pretrained model: exposes the Tweedie estimate
// E[x0 | x_t]. The reverse-step mean is derived from it below.
class Denoiser {
  public:
    virtual ~Denoiser() = default;
    virtual std::size_t dim() const = 0;
    virtual Tensor tweedie(const NoiseSchedule& sch, const Tensor& x_t, int t) const = 0;
    virtual Var tweedie(Tape& tp, const NoiseSchedule& sch, Var x_t, int t) const = 0;
};

class GmmOracleDenoiser final : public Denoiser {
  public:
    explicit GmmOracleDenoiser(GmmPrior prior) : prior_(std::move(prior)) { prior_.validate(); }
    std::size_t dim() const override { return prior_.dim; }
    const GmmPrior& prior() const { return prior_; }
    Tensor tweedie(const NoiseSchedule& sch, const Tensor& x_t, int t) const override {
        return gmm_tweedie(prior_, sch, x_t, t);
    }
    Var tweedie(Tape& tp, const NoiseSchedule& sch, Var x_t, int t) const override {
        return gmm_tweedie(tp, prior_, sch, x_t, t);
    }

  private:
    GmmPrior prior_;
};

// MLP predicting x0 from (x_t, a_t, s_t), trained by denoising regression on
// prior samples. Same interface as the oracle for end-to-end realism tests.
class MlpDenoiser final : public Denoiser {
  public:
    MlpDenoiser(std::size_t d, std::vector<std::size_t> hidden, std::uint64_t seed) : d_(d) {
        std::vector<std::size_t> widths;
        widths.push_back(d + 2);
        for (auto h : hidden) widths.push_back(h);
        widths.push_back(d);
        net_ = Mlp::make(widths, seed, /*zero_last=*/false);
    }

    std::size_t dim() const override { return d_; }
    Mlp& net() { return net_; }

    Tensor tweedie(const NoiseSchedule& sch, const Tensor& x_t, int t) const override {
        return net_.forward(embed(sch, x_t, t));
    }
    Var tweedie(Tape& tp, const NoiseSchedule& sch, Var x_t, int t) const override {
        double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
        Var in = tp.concat({x_t, tp.constant(Tensor::vec({at, st}))});
        return net_.forward(tp, in, net_.leaves(tp));
    }

  private:
    Tensor embed(const NoiseSchedule& sch, const Tensor& x_t, int t) const {
        double at = sch.a[static_cast<std::size_t>(t)], st = sch.s[static_cast<std::size_t>(t)];
        return concat(x_t, Tensor::vec({at, st}));
    }

    std::size_t d_;
    Mlp net_;
};

// Deterministic-interpolation reverse-step mean:
//   mu = a_{t-1} x0hat + sqrt(s_{t-1}^2 - rsigma^2) (x_t - a_t x0hat) / s_t
inline Tensor denoiser_mean(const Denoiser& den, const NoiseSchedule& sch, const Tensor& x_t,
                            int t) {
    if (t < 1 || t > sch.T) throw param_error("denoiser_mean: t out of range");
    double at = sch.a[static_cast<std::size_t>(t)], atp = sch.a[static_cast<std::size_t>(t - 1)];
    double st = sch.s[static_cast<std::size_t>(t)], stp = sch.s[static_cast<std::size_t>(t - 1)];
    double rs = sch.rsigma[static_cast<std::size_t>(t - 1)];
    if (!(st > 0.0)) throw numeric_error("denoiser_mean: s_t = 0 at t >= 1");
    double dir = std::sqrt(std::max(0.0, stp * stp - rs * rs)) / st;
    Tensor x0 = den.tweedie(sch, x_t, t);
    Tensor mu = Tensor::zeros(x_t.shape);
    double cx0 = atp - dir * at;
    for (std::size_t i = 0; i < mu.size(); ++i) mu.v[i] = cx0 * x0.v[i] + dir * x_t.v[i];
    return mu;
}

inline Var denoiser_mean(Tape& tp, const Denoiser& den, const NoiseSchedule& sch, Var x_t, int t) {
    if (t < 1 || t > sch.T) throw param_error("denoiser_mean: t out of range");
    double at = sch.a[static_cast<std::size_t>(t)], atp = sch.a[static_cast<std::size_t>(t - 1)];
    double st = sch.s[static_cast<std::size_t>(t)], stp = sch.s[static_cast<std::size_t>(t - 1)];
    double rs = sch.rsigma[static_cast<std::size_t>(t - 1)];
    if (!(st > 0.0)) throw numeric_error("denoiser_mean: s_t = 0 at t >= 1");
    double dir = std::sqrt(std::max(0.0, stp * stp - rs * rs)) / st;
    Var x0 = den.tweedie(tp, sch, x_t, t);
    return tp.axpy(dir, x_t, tp.scale(x0, atp - dir * at));
}

// One unguided reverse step; the caller supplies standard-normal noise and
// owns the denoiser-call accounting.
inline Tensor reverse_sample(const Denoiser& den, const NoiseSchedule& sch, const Tensor& x_t,
                             int t, const Tensor& noise, long* denoiser_calls = nullptr) {
    Tensor mu = denoiser_mean(den, sch, x_t, t);
    if (denoiser_calls) ++*denoiser_calls;
    double rs = sch.rsigma[static_cast<std::size_t>(t - 1)];
    for (std::size_t i = 0; i < mu.size(); ++i) mu.v[i] += rs * noise.v[i];
    return mu;
}

}  // namespace hvp
