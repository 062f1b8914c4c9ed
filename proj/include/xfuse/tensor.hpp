#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/rng.hpp"

namespace xfuse {

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::runtime_error("tensor: non-positive shape extent");
        n *= d;
    }
    return n;
}

// Dense row-major 64-bit float tensor. Plain value type; all math lives in
// the autodiff graph and the free helpers below.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), v(numel_of(shape), 0.0) {}
    Tensor(std::vector<int> s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != numel_of(shape))
            throw std::runtime_error("tensor: shape/value count mismatch");
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, double c) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = c;
        return t;
    }

    static Tensor scalar(double x) { return Tensor({1}, {x}); }

    static Tensor randn(std::vector<int> s, RngStream& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = stddev * rng.normal();
        return t;
    }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }

    double* data() { return v.data(); }
    const double* data() const { return v.data(); }

    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }

    // 2-D accessors (rows x cols).
    int rows() const { return shape.at(0); }
    int cols() const { return shape.at(1); }
    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols() + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double x : v)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
        os << "]";
        return os.str();
    }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::runtime_error(std::string(op) + ": shape mismatch " + a.shape_str() +
                                 " vs " + b.shape_str());
}

// C[m,n] += A[m,k] * B[k,n].  The j-inner form keeps the hot loop free of
// reductions so the compiler can vectorize it without reassociation.
inline void mm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<size_t>(i) * k;
        double* ci = c + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = ai[kk];
            const double* bk = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bk[j];
        }
    }
}

inline Tensor matmul_val(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw std::runtime_error("matmul: incompatible shapes " + a.shape_str() + " x " +
                                 b.shape_str());
    Tensor c({a.rows(), b.cols()});
    mm_acc(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
    return c;
}

inline Tensor transpose_val(const Tensor& a) {
    Tensor t({a.cols(), a.rows()});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

}  // namespace xfuse
