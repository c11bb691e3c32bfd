#pragma once

// Independent reference implementations used to validate library results.
// These are deliberately written in the most literal way possible (double
// precision, brute force, no shared code with the library internals).

#include <cmath>
#include <functional>
#include <vector>

#include "wsf/tensor.hpp"

namespace oracle {

/// Central finite-difference gradient of `loss` with respect to `param`.
/// `loss` must re-evaluate the full computation from current tensor contents.
inline wsf::Tensor finite_diff_grad(wsf::Tensor& param, const std::function<double()>& loss, double h = 1e-3) {
    wsf::Tensor g(param.shape());
    for (int64_t i = 0; i < param.numel(); ++i) {
        float keep = param[i];
        double step = h * std::max(1.0, double(std::fabs(keep)));
        param[i] = float(keep + step);
        double up = loss();
        param[i] = float(keep - step);
        double dn = loss();
        param[i] = keep;
        g[i] = float((up - dn) / (2.0 * step));
    }
    return g;
}

/// Largest absolute elementwise difference.
inline double max_abs_diff(const wsf::Tensor& a, const wsf::Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, double(std::fabs(a[i] - b[i])));
    return m;
}

/// Largest relative elementwise difference max(|a-b| / max(1, |a|, |b|)).
inline double max_rel_diff(const wsf::Tensor& a, const wsf::Tensor& b) {
    double m = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double den = std::max({1.0, double(std::fabs(a[i])), double(std::fabs(b[i]))});
        m = std::max(m, double(std::fabs(a[i] - b[i])) / den);
    }
    return m;
}

/// Plain O(n^2) mean of squared nearest-neighbour distance from each point of
/// `from` to the set `to`. Points are flat arrays of `dim`-vectors.
inline double mean_sq_nn(const std::vector<float>& from, const std::vector<float>& to, int dim) {
    const size_t nf = from.size() / size_t(dim), nt = to.size() / size_t(dim);
    double acc = 0.0;
    for (size_t i = 0; i < nf; ++i) {
        double best = 1e300;
        for (size_t j = 0; j < nt; ++j) {
            double d = 0.0;
            for (int k = 0; k < dim; ++k) {
                double t = double(from[i * dim + k]) - double(to[j * dim + k]);
                d += t * t;
            }
            best = std::min(best, d);
        }
        acc += best;
    }
    return acc / double(nf);
}

} // namespace oracle
