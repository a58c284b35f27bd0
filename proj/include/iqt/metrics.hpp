// SPDX-License-Identifier: Apache-2.0
//
// Rank and linear correlation metrics used for benchmark evaluation:
// SRCC (Pearson on average-tie fractional ranks), KRCC (tau-b), and PLCC
// computed after a third-order polynomial regression of predictions onto MOS.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace iqt {

// 1-based fractional ranks; tied values share the average of their ranks.
inline std::vector<double> fractional_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        // positions i..j (0-based) tie; average rank = (i + j) / 2 + 1
        const double r = (static_cast<double>(i) + static_cast<double>(j)) * 0.5 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

// Pearson correlation; throws on constant input.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw std::invalid_argument("pearson: length mismatch: " + std::to_string(x.size()) + " vs " +
                                    std::to_string(y.size()));
    const std::size_t n = x.size();
    if (n < 2) throw std::invalid_argument("pearson: need at least 2 samples");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw std::invalid_argument("pearson: constant input");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace detail {

inline void check_rank_args(const char* op, const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size())
        throw std::invalid_argument(std::string(op) + ": length mismatch: " + std::to_string(x.size()) + " vs " +
                                    std::to_string(y.size()));
    if (x.size() < 3) throw std::invalid_argument(std::string(op) + ": need at least 3 samples");
}

} // namespace detail

// Spearman rank correlation with average-tie ranks.
inline double srcc(const std::vector<double>& x, const std::vector<double>& y) {
    detail::check_rank_args("srcc", x, y);
    return pearson(fractional_ranks(x), fractional_ranks(y));
}

// Kendall tau-b: tie-corrected concordant/discordant pair statistic.
inline double krcc(const std::vector<double>& x, const std::vector<double>& y) {
    detail::check_rank_args("krcc", x, y);
    const std::size_t n = x.size();
    long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = x[i] - x[j];
            const double dy = y[i] - y[j];
            if (dx == 0.0 && dy == 0.0) {
                ++ties_x;
                ++ties_y;
            } else if (dx == 0.0) {
                ++ties_x;
            } else if (dy == 0.0) {
                ++ties_y;
            } else if (dx * dy > 0.0) {
                ++concordant;
            } else {
                ++discordant;
            }
        }
    }
    const long long n0 = static_cast<long long>(n) * static_cast<long long>(n - 1) / 2;
    if (n0 == ties_x || n0 == ties_y) throw std::invalid_argument("krcc: constant input");
    return std::clamp(static_cast<double>(concordant - discordant) /
                          std::sqrt(static_cast<double>(n0 - ties_x) * static_cast<double>(n0 - ties_y)),
                      -1.0, 1.0);
}

// Least-squares cubic fit mos ~ a0 + a1 p + a2 p^2 + a3 p^3 with the
// predictions standardized first (raw normal equations on large scores are
// ill-conditioned), then Pearson between fitted values and MOS.
inline double plcc_poly3(const std::vector<double>& pred, const std::vector<double>& mos) {
    if (pred.size() != mos.size())
        throw std::invalid_argument("plcc_poly3: length mismatch: " + std::to_string(pred.size()) + " vs " +
                                    std::to_string(mos.size()));
    const std::size_t n = pred.size();
    if (n < 5) throw std::invalid_argument("plcc_poly3: need at least 5 samples");

    double mu = 0.0;
    for (double p : pred) mu += p;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double p : pred) var += (p - mu) * (p - mu);
    var /= static_cast<double>(n);
    if (var == 0.0) throw std::invalid_argument("plcc_poly3: constant predictions, fit is singular");
    const double sigma = std::sqrt(var);

    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = (pred[i] - mu) / sigma;

    // normal equations over the standardized cubic basis
    double s[7] = {0, 0, 0, 0, 0, 0, 0};
    double b[4] = {0, 0, 0, 0};
    for (std::size_t i = 0; i < n; ++i) {
        double zp = 1.0;
        double powers[7];
        for (int k = 0; k < 7; ++k) {
            powers[k] = zp;
            zp *= z[i];
        }
        for (int k = 0; k < 7; ++k) s[k] += powers[k];
        for (int k = 0; k < 4; ++k) b[k] += powers[k] * mos[i];
    }
    double a[4][5];
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < 4; ++c) a[r][c] = s[r + c];
        a[r][4] = b[r];
    }
    // Gaussian elimination with partial pivoting
    for (int col = 0; col < 4; ++col) {
        int pivot = col;
        for (int r = col + 1; r < 4; ++r)
            if (std::fabs(a[r][col]) > std::fabs(a[pivot][col])) pivot = r;
        if (std::fabs(a[pivot][col]) < 1e-12)
            throw std::invalid_argument("plcc_poly3: singular normal equations");
        if (pivot != col)
            for (int c = 0; c < 5; ++c) std::swap(a[pivot][c], a[col][c]);
        for (int r = 0; r < 4; ++r) {
            if (r == col) continue;
            const double f = a[r][col] / a[col][col];
            for (int c = col; c < 5; ++c) a[r][c] -= f * a[col][c];
        }
    }
    double coef[4];
    for (int r = 0; r < 4; ++r) coef[r] = a[r][4] / a[r][r];

    std::vector<double> fitted(n);
    for (std::size_t i = 0; i < n; ++i)
        fitted[i] = coef[0] + z[i] * (coef[1] + z[i] * (coef[2] + z[i] * coef[3]));
    return pearson(fitted, mos);
}

// SRCC, KRCC, PLCC (post polynomial fit) and the challenge main score
// (PLCC + SRCC) for one prediction/MOS list pair.
struct CorrelationReport {
    double srcc = 0.0;
    double krcc = 0.0;
    double plcc = 0.0;
    double main_score = 0.0;
    std::size_t n_samples = 0;
};

inline CorrelationReport correlation_report(const std::vector<double>& pred, const std::vector<double>& mos) {
    CorrelationReport r;
    r.srcc = srcc(pred, mos);
    r.krcc = krcc(pred, mos);
    r.plcc = plcc_poly3(pred, mos);
    r.main_score = r.plcc + r.srcc;
    r.n_samples = pred.size();
    return r;
}

} // namespace iqt
