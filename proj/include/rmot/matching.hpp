// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "rmot/tensor.hpp"

namespace rmot {

/// Row-major cost matrix, predictions x targets.
struct CostMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}
    CostMatrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
        if (values.size() != r * c) throw DimensionError("cost matrix: value count does not match extents");
    }

    double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

/// Injective prediction -> target assignment.
struct Assignment {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // sorted by prediction index
    std::vector<std::size_t> unmatched_predictions;
    double total_cost = 0.0;

    /// Target index for prediction i, or -1.
    std::ptrdiff_t target_of(std::size_t pred) const {
        for (const auto& [p, t] : pairs)
            if (p == pred) return static_cast<std::ptrdiff_t>(t);
        return -1;
    }
};

namespace detail {

// Kuhn-Munkres with potentials for n <= m (rows are the smaller side).
// Rows/columns flagged inactive are skipped. Returns column chosen per row.
inline std::vector<std::ptrdiff_t> solve_lap(const CostMatrix& c, const std::vector<char>& row_on,
                                             const std::vector<char>& col_on) {
    std::vector<std::size_t> rows, cols;
    for (std::size_t i = 0; i < c.rows; ++i)
        if (row_on[i]) rows.push_back(i);
    for (std::size_t j = 0; j < c.cols; ++j)
        if (col_on[j]) cols.push_back(j);
    const std::size_t n = rows.size(), m = cols.size();
    std::vector<std::ptrdiff_t> result(c.rows, -1);
    if (n == 0) return result;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = c(rows[i0 - 1], cols[j - 1]) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) result[rows[p[j] - 1]] = static_cast<std::ptrdiff_t>(cols[j - 1]);
    return result;
}

inline double lap_cost(const CostMatrix& c, const std::vector<std::ptrdiff_t>& pick) {
    double s = 0.0;
    for (std::size_t i = 0; i < pick.size(); ++i)
        if (pick[i] >= 0) s += c(i, static_cast<std::size_t>(pick[i]));
    return s;
}

inline CostMatrix transposed(const CostMatrix& c) {
    CostMatrix t(c.cols, c.rows);
    for (std::size_t i = 0; i < c.rows; ++i)
        for (std::size_t j = 0; j < c.cols; ++j) t(j, i) = c(i, j);
    return t;
}

// Optimal cost of matching the active rows/cols (smaller side fully matched).
inline double optimal_subcost(const CostMatrix& c, const std::vector<char>& row_on, const std::vector<char>& col_on) {
    std::size_t nr = 0, nc = 0;
    for (char r : row_on) nr += r ? 1 : 0;
    for (char k : col_on) nc += k ? 1 : 0;
    if (nr == 0 || nc == 0) return 0.0;
    if (nr <= nc) return lap_cost(c, solve_lap(c, row_on, col_on));
    return lap_cost(transposed(c), solve_lap(transposed(c), col_on, row_on));
}

}  // namespace detail

/// Minimum-cost injective assignment matching min(p, t) pairs. Among optimal
/// assignments the lexicographically smallest (pred, target) pair list wins.
inline Assignment hungarian(const CostMatrix& cost) {
    for (double v : cost.values) {
        if (std::isnan(v)) throw ContractError("hungarian: NaN cost");
        if (!std::isfinite(v)) throw ContractError("hungarian: non-finite cost");
    }
    Assignment out;
    const std::size_t p = cost.rows, t = cost.cols;
    if (p == 0 || t == 0) {
        for (std::size_t i = 0; i < p; ++i) out.unmatched_predictions.push_back(i);
        return out;
    }
    std::vector<char> row_on(p, 1), col_on(t, 1);
    double remaining = detail::optimal_subcost(cost, row_on, col_on);
    double scale_ref = 1.0;
    for (double v : cost.values) scale_ref = std::max(scale_ref, std::fabs(v));
    const double tol = 1e-12 * scale_ref * static_cast<double>(p + t);
    std::size_t targets_left = t;
    std::size_t preds_left = p;
    // Greedy lexicographic refinement: fix the smallest feasible target for
    // each prediction in turn, keeping the remainder optimal.
    for (std::size_t i = 0; i < p; ++i) {
        row_on[i] = 0;
        --preds_left;
        bool taken = false;
        if (targets_left > 0) {
            for (std::size_t j = 0; j < t && !taken; ++j) {
                if (!col_on[j]) continue;
                col_on[j] = 0;
                const double rest = detail::optimal_subcost(cost, row_on, col_on);
                if (std::fabs(cost(i, j) + rest - remaining) <= tol) {
                    out.pairs.emplace_back(i, j);
                    remaining = rest;
                    --targets_left;
                    taken = true;
                } else {
                    col_on[j] = 1;
                }
            }
        }
        if (!taken) {
            // leaving i unmatched must keep a full-size matching available
            const bool count_ok = (std::min(p, t) - out.pairs.size()) == std::min(preds_left, targets_left);
            if (!count_ok) {
                throw ContractError("hungarian: internal refinement failed");  // unreachable for finite costs
            }
            out.unmatched_predictions.push_back(i);
        }
    }
    for (const auto& [i, j] : out.pairs) out.total_cost += cost(i, j);
    return out;
}

}  // namespace rmot
