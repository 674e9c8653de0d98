#pragma once

#include "sora/errors.hpp"
#include "sora/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace sora {

inline double l2_norm(const double* p, std::size_t n) {
    return std::sqrt(kernels::dot(p, p, n));
}

// Single-sqrt form so exactly (anti)parallel inputs give exactly +/-1.
inline double cosine(const double* a, const double* b, std::size_t n) {
    const double aa = kernels::dot(a, a, n);
    const double bb = kernels::dot(b, b, n);
    if (!(std::sqrt(aa) >= 1e-12) || !(std::sqrt(bb) >= 1e-12)) {
        throw DegenerateVectorError("cosine: vector norm below 1e-12");
    }
    double c = kernels::dot(a, b, n) / std::sqrt(aa * bb);
    if (c > 1.0) c = 1.0;
    if (c < -1.0) c = -1.0;
    return c;
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("cosine: size mismatch");
    }
    return cosine(a.data(), b.data(), a.size());
}

inline void normalize_in_place(std::vector<double>& v) {
    const double n = l2_norm(v.data(), v.size());
    if (!(n >= 1e-12)) {
        throw DegenerateVectorError("normalize: vector norm below 1e-12");
    }
    kernels::scale(v.data(), v.data(), 1.0 / n, v.size());
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw DimensionError("mean_of: empty vector");
    return kernels::sum(v.data(), v.size()) / static_cast<double>(v.size());
}

// Average ranks; ties get the mean of the positions they span.
inline std::vector<double> fractional_ranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw DimensionError("pearson: need two equal-length vectors of size >= 2");
    }
    const double mx = mean_of(x), my = mean_of(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) {
        throw DegenerateVectorError("pearson: zero variance input");
    }
    return sxy / std::sqrt(sxx * syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(fractional_ranks(x), fractional_ranks(y));
}

}  // namespace sora
