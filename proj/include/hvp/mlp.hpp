#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "hvp/rng.hpp"
#include "hvp/tape.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Fully connected network, SiLU hidden activations, identity output.
// Policy networks zero-initialize the final layer so the untrained guided
// process reduces exactly to the unguided chain.
struct Mlp {
    std::vector<std::size_t> widths;
    std::vector<Tensor> W;  // W[l] has shape [widths[l+1], widths[l]]
    std::vector<Tensor> b;

    static Mlp make(std::vector<std::size_t> widths, std::uint64_t seed, bool zero_last = true) {
        if (widths.size() < 2) throw param_error("mlp: need at least input and output widths");
        Mlp net;
        net.widths = widths;
        NoiseStream rng(seed, NoiseStream::kInit);
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            std::size_t nin = widths[l], nout = widths[l + 1];
            Tensor w = Tensor::zeros({nout, nin});
            bool last = (l + 2 == widths.size());
            if (!(last && zero_last)) {
                double sc = std::sqrt(2.0 / static_cast<double>(nin));
                for (double& x : w.v) x = sc * rng.normal();
            }
            net.W.push_back(std::move(w));
            net.b.push_back(Tensor::zeros({nout}));
        }
        return net;
    }

    std::size_t in_width() const { return widths.front(); }
    std::size_t out_width() const { return widths.back(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) n += widths[l] * widths[l + 1] + widths[l + 1];
        return n;
    }

    // Flat parameter list, weights and biases interleaved per layer.
    std::vector<Tensor*> params() {
        std::vector<Tensor*> ps;
        for (std::size_t l = 0; l < W.size(); ++l) {
            ps.push_back(&W[l]);
            ps.push_back(&b[l]);
        }
        return ps;
    }
    std::vector<const Tensor*> params() const {
        std::vector<const Tensor*> ps;
        for (std::size_t l = 0; l < W.size(); ++l) {
            ps.push_back(&W[l]);
            ps.push_back(&b[l]);
        }
        return ps;
    }

    Tensor forward(const Tensor& x) const {
        if (x.shape.size() != 1 || x.shape[0] != in_width())
            throw dim_error("mlp forward: input width mismatch");
        Tensor h = x;
        for (std::size_t l = 0; l < W.size(); ++l) {
            h = matvec(W[l], h) + b[l];
            if (l + 1 < W.size())
                for (double& z : h.v) z = z / (1.0 + std::exp(-z));
        }
        return h;
    }

    // Tape forward with parameters supplied as tape leaves (same order as
    // params()). Records all intermediates.
    Var forward(Tape& t, Var x, const std::vector<Var>& param_vars) const {
        if (t.val(x).size() != in_width()) throw dim_error("mlp forward: input width mismatch");
        if (param_vars.size() != 2 * W.size()) throw contract_error("mlp forward: param var count");
        Var h = x;
        for (std::size_t l = 0; l < W.size(); ++l) {
            h = t.add(t.matvec(param_vars[2 * l], h), param_vars[2 * l + 1]);
            if (l + 1 < W.size()) h = t.silu(h);
        }
        return h;
    }

    // Convenience: push this net's parameters as leaves onto a tape.
    std::vector<Var> leaves(Tape& t) const {
        std::vector<Var> vs;
        for (std::size_t l = 0; l < W.size(); ++l) {
            vs.push_back(t.leaf(W[l]));
            vs.push_back(t.leaf(b[l]));
        }
        return vs;
    }
};

}  // namespace hvp
