#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "hvp/errors.hpp"
#include "hvp/tensor.hpp"

namespace hvp {

// Handle into a Tape node.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense tensors. Nodes are appended in evaluation
// order, so node index order is a topological order and the backward pass is
// a single reverse sweep. Scalar-loss roots only. A tape is single-threaded;
// distinct tapes are independent.
class Tape {
  public:
    Var leaf(Tensor t) { return push(std::move(t), nullptr); }
    Var constant(Tensor t) { return push(std::move(t), nullptr); }

    const Tensor& val(Var x) const { return nodes_[check(x)].val; }

    Var add(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        return push(ta + tb, [a, b](Tape& t, const Tensor& g) {
            t.acc(a, g);
            t.acc(b, g);
        });
    }

    Var sub(Var a, Var b) {
        return push(val(a) - val(b), [a, b](Tape& t, const Tensor& g) {
            t.acc(a, g);
            t.acc(b, g * -1.0);
        });
    }

    Var mul(Var a, Var b) {
        const Tensor& ta = val(a);
        const Tensor& tb = val(b);
        if (!ta.same_shape(tb)) throw dim_error("tape mul: shape mismatch");
        Tensor r = ta;
        for (std::size_t i = 0; i < r.size(); ++i) r.v[i] *= tb.v[i];
        return push(std::move(r), [a, b](Tape& t, const Tensor& g) {
            Tensor ga = g, gb = g;
            const Tensor& ta2 = t.val(a);
            const Tensor& tb2 = t.val(b);
            for (std::size_t i = 0; i < g.size(); ++i) {
                ga.v[i] *= tb2.v[i];
                gb.v[i] *= ta2.v[i];
            }
            t.acc(a, ga);
            t.acc(b, gb);
        });
    }

    Var scale(Var a, double c) {
        return push(val(a) * c, [a, c](Tape& t, const Tensor& g) { t.acc(a, g * c); });
    }

    // elementwise add of a constant scalar
    Var shift(Var a, double c) {
        Tensor r = val(a);
        for (double& x : r.v) x += c;
        return push(std::move(r), [a](Tape& t, const Tensor& g) { t.acc(a, g); });
    }

    // add a constant tensor
    Var addt(Var a, const Tensor& c) {
        return push(val(a) + c, [a](Tape& t, const Tensor& g) { t.acc(a, g); });
    }

    // a*x + y (linear blend of two nodes)
    Var axpy(double c, Var x, Var y) {
        Tensor r = val(y);
        const Tensor& tx = val(x);
        if (!r.same_shape(tx)) throw dim_error("tape axpy: shape mismatch");
        for (std::size_t i = 0; i < r.size(); ++i) r.v[i] += c * tx.v[i];
        return push(std::move(r), [c, x, y](Tape& t, const Tensor& g) {
            t.acc(x, g * c);
            t.acc(y, g);
        });
    }

    // W [m,n] times x [n]
    Var matvec(Var W, Var x) {
        Tensor r = hvp::matvec(val(W), val(x));
        return push(std::move(r), [W, x](Tape& t, const Tensor& g) {
            const Tensor& tw = t.val(W);
            const Tensor& tx = t.val(x);
            std::size_t m = tw.shape[0], n = tw.shape[1];
            Tensor gW = Tensor::zeros({m, n});
            Tensor gx = Tensor::zeros({n});
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    gW.v[i * n + j] = g.v[i] * tx.v[j];
                    gx.v[j] += g.v[i] * tw.v[i * n + j];
                }
            t.acc(W, gW);
            t.acc(x, gx);
        });
    }

    Var concat(const std::vector<Var>& parts) {
        std::size_t n = 0;
        for (Var p : parts) n += val(p).size();
        Tensor r = Tensor::zeros({n});
        std::size_t off = 0;
        for (Var p : parts) {
            const Tensor& tp = val(p);
            std::copy(tp.v.begin(), tp.v.end(), r.v.begin() + static_cast<std::ptrdiff_t>(off));
            off += tp.size();
        }
        std::vector<Var> ps = parts;
        return push(std::move(r), [ps](Tape& t, const Tensor& g) {
            std::size_t off2 = 0;
            for (Var p : ps) {
                std::size_t np = t.val(p).size();
                Tensor gp = Tensor::zeros({np});
                std::copy(g.v.begin() + static_cast<std::ptrdiff_t>(off2),
                          g.v.begin() + static_cast<std::ptrdiff_t>(off2 + np), gp.v.begin());
                t.acc(p, gp);
                off2 += np;
            }
        });
    }

    Var slice(Var a, std::size_t start, std::size_t len) {
        const Tensor& ta = val(a);
        if (start + len > ta.size()) throw dim_error("tape slice: out of range");
        Tensor r = Tensor::zeros({len});
        std::copy(ta.v.begin() + static_cast<std::ptrdiff_t>(start),
                  ta.v.begin() + static_cast<std::ptrdiff_t>(start + len), r.v.begin());
        return push(std::move(r), [a, start, len](Tape& t, const Tensor& g) {
            Tensor ga = Tensor::zeros({t.val(a).size()});
            for (std::size_t i = 0; i < len; ++i) ga.v[start + i] = g.v[i];
            t.acc(a, ga);
        });
    }

    Var sum(Var a) {
        double s = 0.0;
        for (double x : val(a).v) s += x;
        return push(Tensor::scalar(s), [a](Tape& t, const Tensor& g) {
            t.acc(a, Tensor::full(t.val(a).shape, g.v[0]));
        });
    }

    Var dot(Var a, Var b) {
        double s = hvp::dot(val(a), val(b));
        return push(Tensor::scalar(s), [a, b](Tape& t, const Tensor& g) {
            t.acc(a, t.val(b) * g.v[0]);
            t.acc(b, t.val(a) * g.v[0]);
        });
    }

    Var sum_sq(Var a) {
        double s = hvp::sum_sq(val(a));
        return push(Tensor::scalar(s), [a](Tape& t, const Tensor& g) {
            t.acc(a, t.val(a) * (2.0 * g.v[0]));
        });
    }

    Var silu(Var a) {
        Tensor r = val(a);
        for (double& x : r.v) x = x / (1.0 + std::exp(-x));
        return push(std::move(r), [a](Tape& t, const Tensor& g) {
            const Tensor& ta = t.val(a);
            Tensor ga = g;
            for (std::size_t i = 0; i < g.size(); ++i) {
                double x = ta.v[i];
                double s = 1.0 / (1.0 + std::exp(-x));
                ga.v[i] *= s * (1.0 + x * (1.0 - s));
            }
            t.acc(a, ga);
        });
    }

    // clip to [0,1]; a.e. subgradient (zero where saturated)
    Var clip01(Var a) {
        Tensor r = val(a);
        for (double& x : r.v) x = x < 0.0 ? 0.0 : (x > 1.0 ? 1.0 : x);
        return push(std::move(r), [a](Tape& t, const Tensor& g) {
            const Tensor& ta = t.val(a);
            Tensor ga = g;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (ta.v[i] < 0.0 || ta.v[i] > 1.0) ga.v[i] = 0.0;
            t.acc(a, ga);
        });
    }

    // softmax over a rank-1 node, max-subtracted
    Var softmax(Var a) {
        const Tensor& ta = val(a);
        Tensor r = ta;
        double mx = r.v[0];
        for (double x : r.v) mx = std::max(mx, x);
        double z = 0.0;
        for (double& x : r.v) {
            x = std::exp(x - mx);
            z += x;
        }
        for (double& x : r.v) x /= z;
        return push(std::move(r), [a, self = next_id()](Tape& t, const Tensor& g) {
            const Tensor& s = t.nodes_[self].val;
            double gs = 0.0;
            for (std::size_t i = 0; i < g.size(); ++i) gs += g.v[i] * s.v[i];
            Tensor ga = g;
            for (std::size_t i = 0; i < g.size(); ++i) ga.v[i] = s.v[i] * (g.v[i] - gs);
            t.acc(a, ga);
        });
    }

    // block-mean pooling over contiguous blocks of length f
    Var avgpool1d(Var a, std::size_t f) {
        const Tensor& ta = val(a);
        if (f == 0 || ta.size() % f != 0) throw param_error("avgpool1d: size not divisible by factor");
        std::size_t m = ta.size() / f;
        Tensor r = Tensor::zeros({m});
        for (std::size_t i = 0; i < m; ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < f; ++j) s += ta.v[i * f + j];
            r.v[i] = s / static_cast<double>(f);
        }
        return push(std::move(r), [a, f](Tape& t, const Tensor& g) {
            Tensor ga = Tensor::zeros(t.val(a).shape);
            for (std::size_t i = 0; i < g.size(); ++i)
                for (std::size_t j = 0; j < f; ++j) ga.v[i * f + j] = g.v[i] / static_cast<double>(f);
            t.acc(a, ga);
        });
    }

    // f x f block-mean pooling of a side x side grid stored row-major
    Var avgpool2d(Var a, std::size_t side, std::size_t f) {
        const Tensor& ta = val(a);
        if (side * side != ta.size() || f == 0 || side % f != 0)
            throw param_error("avgpool2d: bad grid/factor");
        std::size_t ms = side / f;
        Tensor r = Tensor::zeros({ms * ms});
        double inv = 1.0 / static_cast<double>(f * f);
        for (std::size_t bi = 0; bi < ms; ++bi)
            for (std::size_t bj = 0; bj < ms; ++bj) {
                double s = 0.0;
                for (std::size_t di = 0; di < f; ++di)
                    for (std::size_t dj = 0; dj < f; ++dj)
                        s += ta.v[(bi * f + di) * side + bj * f + dj];
                r.v[bi * ms + bj] = s * inv;
            }
        return push(std::move(r), [a, side, f](Tape& t, const Tensor& g) {
            std::size_t ms = side / f;
            double inv = 1.0 / static_cast<double>(f * f);
            Tensor ga = Tensor::zeros(t.val(a).shape);
            for (std::size_t bi = 0; bi < ms; ++bi)
                for (std::size_t bj = 0; bj < ms; ++bj)
                    for (std::size_t di = 0; di < f; ++di)
                        for (std::size_t dj = 0; dj < f; ++dj)
                            ga.v[(bi * f + di) * side + bj * f + dj] = g.v[bi * ms + bj] * inv;
            t.acc(a, ga);
        });
    }

    // vector node times scalar node
    Var smul(Var x, Var s) {
        const Tensor& ts = val(s);
        if (ts.size() != 1) throw contract_error("smul: scalar node expected");
        Tensor r = val(x) * ts.v[0];
        return push(std::move(r), [x, s](Tape& t, const Tensor& g) {
            double sv = t.val(s).v[0];
            t.acc(x, g * sv);
            t.acc(s, Tensor::scalar(hvp::dot(g, t.val(x))));
        });
    }

    // Runs the reverse sweep from a scalar root. Gradients of unreached
    // nodes are zero.
    void backward(Var out) {
        if (val(out).size() != 1) throw contract_error("backward: root must be scalar");
        grads_.assign(nodes_.size(), Tensor());
        acc(out, Tensor::scalar(1.0));
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            if (grads_[static_cast<std::size_t>(i)].empty()) continue;
            if (nodes_[static_cast<std::size_t>(i)].back)
                nodes_[static_cast<std::size_t>(i)].back(*this, grads_[static_cast<std::size_t>(i)]);
        }
    }

    // Valid after backward(); zero tensor for unreached nodes.
    Tensor grad(Var x) const {
        std::size_t i = static_cast<std::size_t>(check(x));
        if (i < grads_.size() && !grads_[i].empty()) return grads_[i];
        return Tensor::zeros(nodes_[i].val.shape);
    }

    std::size_t node_count() const { return nodes_.size(); }

  private:
    using BackFn = std::function<void(Tape&, const Tensor&)>;
    struct Node {
        Tensor val;
        BackFn back;
    };

    int next_id() const { return static_cast<int>(nodes_.size()); }

    Var push(Tensor t, BackFn back) {
        nodes_.push_back({std::move(t), std::move(back)});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    int check(Var x) const {
        if (!x.valid() || x.id >= static_cast<int>(nodes_.size()))
            throw contract_error("invalid tape var");
        return x.id;
    }

    void acc(Var x, const Tensor& g) {
        std::size_t i = static_cast<std::size_t>(check(x));
        if (grads_[i].empty())
            grads_[i] = g;
        else
            for (std::size_t k = 0; k < g.size(); ++k) grads_[i].v[k] += g.v[k];
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
};

}  // namespace hvp
