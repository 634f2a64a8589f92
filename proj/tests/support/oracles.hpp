// Independent reference implementations used to verify library results.
// Everything here is deliberately written the slow, obvious way and shares
// no code with the library under test.
#pragma once

#include "flowood/random.hpp"
#include "flowood/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace oracle {

inline bool close_rel(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

// Scalar function of a flat list of leaf value vectors.
using LeafFn = std::function<double(const std::vector<std::vector<double>>&)>;

inline double fd_partial(const LeafFn& f, std::vector<std::vector<double>> values,
                         std::size_t leaf, std::size_t idx, double h = 1e-5) {
    values[leaf][idx] += h;
    const double up = f(values);
    values[leaf][idx] -= 2.0 * h;
    const double down = f(values);
    return (up - down) / (2.0 * h);
}

struct GradCheckResult {
    bool ok = true;
    double worst = 0.0; // worst relative discrepancy
    std::string detail;
};

// Compares reverse-mode gradients of a scalar-valued builder against central
// finite differences over every element of every leaf.
inline GradCheckResult check_gradients(
    const std::function<flowood::Tensor(std::vector<flowood::Tensor>&)>& build,
    const std::vector<flowood::Shape>& shapes,
    const std::vector<std::vector<double>>& values,
    double h = 1e-5, double tol = 1e-4) {
    using flowood::Tensor;

    std::vector<Tensor> leaves;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        Tensor t = Tensor::from_data(shapes[i], values[i]);
        t.set_requires_grad(true);
        leaves.push_back(t);
    }
    std::vector<Tensor> work = leaves;
    Tensor loss = build(work);
    flowood::backward(loss);

    LeafFn eval = [&](const std::vector<std::vector<double>>& vals) {
        flowood::NoGradGuard ng;
        std::vector<Tensor> fresh;
        for (std::size_t i = 0; i < shapes.size(); ++i)
            fresh.push_back(Tensor::from_data(shapes[i], vals[i]));
        return build(fresh).item();
    };

    GradCheckResult res;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        if (!leaves[l].has_grad()) {
            res.ok = false;
            res.detail = "leaf " + std::to_string(l) + " received no gradient";
            return res;
        }
        auto g = leaves[l].grad_data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double fd = fd_partial(eval, values, l, i, h);
            const double ad = g[i];
            const double rel = std::abs(ad - fd) / std::max({1.0, std::abs(ad), std::abs(fd)});
            res.worst = std::max(res.worst, rel);
            if (rel > tol) {
                res.ok = false;
                res.detail = "leaf " + std::to_string(l) + "[" + std::to_string(i) + "]: ad=" +
                             std::to_string(ad) + " fd=" + std::to_string(fd);
            }
        }
    }
    return res;
}

// Per-sample log-likelihood as a function of a flat input image; used to
// verify flow log-determinants: log p(x) must differentiate consistently, and
// the Jacobian of the forward map must reproduce the claimed logdet.
inline std::vector<std::vector<double>> fd_jacobian(
    const std::function<std::vector<double>(const std::vector<double>&)>& f,
    const std::vector<double>& x, double h = 1e-5) {
    const std::vector<double> y0 = f(x);
    std::vector<std::vector<double>> J(y0.size(), std::vector<double>(x.size(), 0.0));
    std::vector<double> xp = x;
    for (std::size_t j = 0; j < x.size(); ++j) {
        xp[j] = x[j] + h;
        const std::vector<double> up = f(xp);
        xp[j] = x[j] - h;
        const std::vector<double> dn = f(xp);
        xp[j] = x[j];
        for (std::size_t i = 0; i < y0.size(); ++i) J[i][j] = (up[i] - dn[i]) / (2.0 * h);
    }
    return J;
}

// ---------------------------------------------------------------------------
// Dense determinant (partial-pivot Gaussian elimination)
// ---------------------------------------------------------------------------

inline double log_abs_det(std::vector<std::vector<double>> a) {
    const std::size_t n = a.size();
    double log_det = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        std::size_t piv = k;
        for (std::size_t i = k + 1; i < n; ++i)
            if (std::abs(a[i][k]) > std::abs(a[piv][k])) piv = i;
        if (a[piv][k] == 0.0) return -std::numeric_limits<double>::infinity();
        if (piv != k) std::swap(a[piv], a[k]);
        log_det += std::log(std::abs(a[k][k]));
        for (std::size_t i = k + 1; i < n; ++i) {
            const double m = a[i][k] / a[k][k];
            for (std::size_t j = k; j < n; ++j) a[i][j] -= m * a[k][j];
        }
    }
    return log_det;
}

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

inline double trapezoid(const std::function<double(double)>& f, double lo, double hi, int steps) {
    const double dx = (hi - lo) / steps;
    double acc = 0.5 * (f(lo) + f(hi));
    for (int i = 1; i < steps; ++i) acc += f(lo + i * dx);
    return acc * dx;
}

// ---------------------------------------------------------------------------
// Mann-Whitney AUC (pair counting, ties worth one half)
// ---------------------------------------------------------------------------

inline double mann_whitney_auc(const std::vector<double>& pos, const std::vector<double>& neg) {
    double wins = 0.0;
    for (double p : pos)
        for (double q : neg) {
            if (p > q) wins += 1.0;
            else if (p == q) wins += 0.5;
        }
    return wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

// ---------------------------------------------------------------------------
// Closed-form two-component Gaussian mixture
// ---------------------------------------------------------------------------

inline double mixture_nll(const std::vector<double>& xs, double m1, double m2, double sigma, double w1 = 0.5) {
    double acc = 0.0;
    const double norm = 1.0 / (sigma * std::sqrt(2.0 * 3.14159265358979323846));
    for (double x : xs) {
        const double p = w1 * norm * std::exp(-0.5 * (x - m1) * (x - m1) / (sigma * sigma)) +
                         (1.0 - w1) * norm * std::exp(-0.5 * (x - m2) * (x - m2) / (sigma * sigma));
        acc += -std::log(p);
    }
    return acc / static_cast<double>(xs.size());
}

} // namespace oracle
