#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "hvp/errors.hpp"

namespace hvp {

// Dense row-major tensor of doubles. Rank 1 (vectors) and rank 2 (matrices)
// are all this project needs.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<std::size_t> sh, std::vector<double> vals)
        : shape(std::move(sh)), v(std::move(vals)) {
        if (count(shape) != v.size()) throw dim_error("tensor: shape/value count mismatch");
    }

    static std::size_t count(const std::vector<std::size_t>& sh) {
        std::size_t n = 1;
        for (auto d : sh) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> sh) {
        std::size_t n = count(sh);
        return Tensor(std::move(sh), std::vector<double>(n, 0.0));
    }
    static Tensor full(std::vector<std::size_t> sh, double x) {
        std::size_t n = count(sh);
        return Tensor(std::move(sh), std::vector<double>(n, x));
    }
    static Tensor scalar(double x) { return Tensor({1}, {x}); }
    static Tensor vec(std::vector<double> vals) {
        std::size_t n = vals.size();
        return Tensor({n}, std::move(vals));
    }

    std::size_t size() const { return v.size(); }
    bool empty() const { return v.empty(); }
    double& operator[](std::size_t i) { return v[i]; }
    double operator[](std::size_t i) const { return v[i]; }

    // Rank-2 access, row-major.
    double& at(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }
    void check_finite(const char* where) const {
        if (!finite()) throw numeric_error(std::string("non-finite value in ") + where);
    }
};

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dim_error("tensor add: shape mismatch");
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.v[i] += b.v[i];
    return r;
}
inline Tensor operator-(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw dim_error("tensor sub: shape mismatch");
    Tensor r = a;
    for (std::size_t i = 0; i < r.size(); ++i) r.v[i] -= b.v[i];
    return r;
}
inline Tensor operator*(const Tensor& a, double c) {
    Tensor r = a;
    for (double& x : r.v) x *= c;
    return r;
}
inline Tensor operator*(double c, const Tensor& a) { return a * c; }

inline double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size()) throw dim_error("dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a.v[i] * b.v[i];
    return s;
}

inline double sum_sq(const Tensor& a) { return dot(a, a); }

inline double norm2(const Tensor& a) { return std::sqrt(sum_sq(a)); }

// W [m,n] times x [n].
inline Tensor matvec(const Tensor& W, const Tensor& x) {
    if (W.shape.size() != 2 || x.shape.size() != 1 || W.shape[1] != x.shape[0])
        throw dim_error("matvec: shape mismatch");
    std::size_t m = W.shape[0], n = W.shape[1];
    Tensor r = Tensor::zeros({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += W.v[i * n + j] * x.v[j];
        r.v[i] = s;
    }
    return r;
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
    Tensor r = Tensor::zeros({a.size() + b.size()});
    std::copy(a.v.begin(), a.v.end(), r.v.begin());
    std::copy(b.v.begin(), b.v.end(), r.v.begin() + static_cast<std::ptrdiff_t>(a.size()));
    return r;
}

}  // namespace hvp
