// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "linedet/model.hpp"

namespace linedet {

/// Ground-truth box: top-left corner plus size, normalized page units.
struct BoxTarget {
    double x = 0, y = 0, w = 0, h = 0;
};

/// Injective assignment of targets to predictors.
/// pairs holds (target index n, predictor index m), sorted by n;
/// unmatched_predictors holds every m that no target claimed, ascending.
struct MatchResult {
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> unmatched_predictors;
    double total_cost = 0.0;
};

struct MatchCostParams {
    double alpha_match = 1000.0;
    double alpha_loss = 100.0;
};

/// Cost change of matching predictor (l, c) to target t relative to leaving
/// the predictor unmatched:  alpha * ||l - t||^2 - log c + log(1 - c).
/// The constant unmatched baseline -sum_m log(1-c_m) is factored out, so an
/// assignment minimizing the sum of these deltas minimizes the full cost.
inline double pair_cost_delta(const std::array<double, 4>& l, double c,
                              const std::array<double, 4>& t, double alpha) {
    if (!(c > 0.0 && c < 1.0))
        throw std::invalid_argument("pair_cost_delta: confidence must lie in (0,1), got " +
                                    std::to_string(c));
    double d2 = 0.0;
    for (int q = 0; q < 4; ++q) {
        const double d = l[q] - t[q];
        d2 += d * d;
    }
    return alpha * d2 - std::log(c) + std::log(1.0 - c);
}

inline double pair_cost_delta(const BoxPrediction& p, const BoxTarget& t, double alpha) {
    return pair_cost_delta({p.x, p.y, p.w, p.h}, p.confidence, {t.x, t.y, t.w, t.h}, alpha);
}

namespace detail {

inline std::vector<double> build_cost_matrix(const std::vector<BoxPrediction>& preds,
                                             const std::vector<BoxTarget>& targets, double alpha) {
    const std::size_t n = targets.size(), m = preds.size();
    std::vector<double> cost(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
            cost[i * m + j] = pair_cost_delta(preds[j], targets[i], alpha);
    return cost;
}

inline MatchResult finish_match(std::vector<int> target_to_pred, std::size_t n_preds,
                                const std::vector<double>& cost) {
    MatchResult res;
    const std::size_t m = n_preds;
    std::vector<char> used(m, 0);
    for (std::size_t n = 0; n < target_to_pred.size(); ++n) {
        res.pairs.emplace_back(static_cast<int>(n), target_to_pred[n]);
        used[static_cast<std::size_t>(target_to_pred[n])] = 1;
    }
    for (std::size_t j = 0; j < m; ++j)
        if (!used[j]) res.unmatched_predictors.push_back(static_cast<int>(j));
    res.total_cost = 0.0;
    for (const auto& [n, mm] : res.pairs) res.total_cost += cost[static_cast<std::size_t>(n) * m + mm];
    return res;
}

/// Exchange pass toward the lexicographically smallest (n, m) pair sequence
/// among assignments with per-entry equal costs. Only swaps whose pairwise
/// costs are exactly equal are taken, so the total never changes.
inline void canonicalize_ties(std::vector<int>& t2p, const std::vector<double>& cost,
                              std::size_t n_preds) {
    const std::size_t n = t2p.size(), m = n_preds;
    if (n == 0) return;
    std::vector<char> used(m, 0);
    for (int j : t2p) used[static_cast<std::size_t>(j)] = 1;
    bool changed = true;
    int guard = 0;
    while (changed && guard++ < 64) {
        changed = false;
        // swap a matched predictor for an equal-cost unmatched one with smaller index
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t mi = static_cast<std::size_t>(t2p[i]);
            for (std::size_t j = 0; j < mi; ++j) {
                if (used[j]) continue;
                if (cost[i * m + j] == cost[i * m + mi]) {
                    used[mi] = 0;
                    used[j] = 1;
                    t2p[i] = static_cast<int>(j);
                    changed = true;
                    break;
                }
            }
        }
        // exchange between two matched pairs when both entries tie exactly
        for (std::size_t a = 0; a < n; ++a) {
            for (std::size_t b = a + 1; b < n; ++b) {
                const std::size_t ma = static_cast<std::size_t>(t2p[a]);
                const std::size_t mb = static_cast<std::size_t>(t2p[b]);
                if (mb < ma && cost[a * m + mb] == cost[a * m + ma] &&
                    cost[b * m + ma] == cost[b * m + mb]) {
                    std::swap(t2p[a], t2p[b]);
                    changed = true;
                }
            }
        }
    }
}

}  // namespace detail

/// Minimum-cost injective assignment of all N targets to the M predictors
/// (Jonker-Volgenant shortest-augmenting-path form of the Hungarian method,
/// run directly on the rectangular N x M matrix; columns beyond the real
/// targets behave exactly like zero-cost dummy rows).
inline MatchResult match_hungarian(const std::vector<BoxPrediction>& preds,
                                   const std::vector<BoxTarget>& targets, double alpha) {
    const std::size_t n = targets.size(), m = preds.size();
    if (n > m)
        throw std::invalid_argument("match_hungarian: " + std::to_string(n) + " targets exceed " +
                                    std::to_string(m) + " predictors");
    const auto cost = detail::build_cost_matrix(preds, targets, alpha);
    if (n == 0) return detail::finish_match({}, m, cost);

    constexpr double kInf = std::numeric_limits<double>::infinity();
    // 1-based potentials/links per the classic formulation
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = static_cast<int>(i);
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, kInf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = static_cast<std::size_t>(p[j0]);
            double delta = kInf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * m + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = static_cast<int>(j0);
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[static_cast<std::size_t>(p[j])] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = static_cast<std::size_t>(way[j0]);
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> t2p(n, -1);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) t2p[static_cast<std::size_t>(p[j]) - 1] = static_cast<int>(j) - 1;
    detail::canonicalize_ties(t2p, cost, m);
    return detail::finish_match(std::move(t2p), m, cost);
}

/// Exhaustive-enumeration oracle. Walks injective assignments in
/// lexicographic order of (m_0, m_1, ...), keeping the strictly best one, so
/// ties resolve to the lexicographically smallest pair sequence.
inline MatchResult match_bruteforce(const std::vector<BoxPrediction>& preds,
                                    const std::vector<BoxTarget>& targets, double alpha) {
    const std::size_t n = targets.size(), m = preds.size();
    if (n > m)
        throw std::invalid_argument("match_bruteforce: " + std::to_string(n) +
                                    " targets exceed " + std::to_string(m) + " predictors");
    if (n > 8)
        throw std::invalid_argument("match_bruteforce: instance too large (N = " +
                                    std::to_string(n) + " > 8)");
    double combos = 1.0;
    for (std::size_t i = 0; i < n; ++i) combos *= static_cast<double>(m - i);
    if (combos > 1e7)
        throw std::invalid_argument("match_bruteforce: instance too large (" +
                                    std::to_string(combos) + " assignments)");
    const auto cost = detail::build_cost_matrix(preds, targets, alpha);

    std::vector<int> cur(n, -1), best(n, -1);
    std::vector<char> used(m, 0);
    double best_cost = std::numeric_limits<double>::infinity();
    auto rec = [&](auto&& self, std::size_t i, double acc) -> void {
        if (i == n) {
            if (acc < best_cost) {
                best_cost = acc;
                best = cur;
            }
            return;
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (used[j]) continue;
            used[j] = 1;
            cur[i] = static_cast<int>(j);
            self(self, i + 1, acc + cost[i * m + j]);
            used[j] = 0;
        }
    };
    rec(rec, 0, 0.0);
    return detail::finish_match(std::move(best), m, cost);
}

}  // namespace linedet
