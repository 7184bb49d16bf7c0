#pragma once

// Marginal sensitivity model: per-row intervals on the inverse true
// propensity, and the exact worst case of a self-normalized weighted mean
// over those intervals (a box-constrained linear fractional program).

#include "confhai/core.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>
#include <utility>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace confhai {

// a_i <= W_i <= b_i with W_i = 1 / π₀(T_i | X_i, U_i).
struct WeightBounds {
    Vector lower;
    Vector upper;
    bool per_expert = false;  // built from an expert-specific GammaSpec

    std::size_t size() const noexcept { return static_cast<std::size_t>(lower.size()); }
};

inline WeightBounds weight_bounds(const Vector& nominal, const GammaSpec& gamma,
                                  const std::vector<int>* expert_ids = nullptr) {
    if (gamma.is_per_expert() && expert_ids == nullptr)
        throw std::invalid_argument("per-expert gamma requires expert ids");
    if (expert_ids && static_cast<Eigen::Index>(expert_ids->size()) != nominal.size())
        throw std::invalid_argument("expert id count does not match nominal propensities");
    WeightBounds b;
    b.per_expert = gamma.is_per_expert();
    b.lower.resize(nominal.size());
    b.upper.resize(nominal.size());
    for (Eigen::Index i = 0; i < nominal.size(); ++i) {
        const double p = nominal(i);
        if (!(p > 0.0 && p <= 1.0))
            throw std::invalid_argument("nominal propensity must lie in (0, 1], got " + std::to_string(p) +
                                        " at row " + std::to_string(i));
        const double g = gamma.is_per_expert() ? gamma.at((*expert_ids)[static_cast<std::size_t>(i)]) : gamma.at(0);
        const double excess = 1.0 / p - 1.0;
        b.lower(i) = 1.0 + excess / g;
        b.upper(i) = 1.0 + g * excess;
    }
    return b;
}

inline WeightBounds weight_bounds(const Vector& nominal, const GammaSpec& gamma, const LoggedDataset& ds) {
    return weight_bounds(nominal, gamma, ds.expert_ids ? &*ds.expert_ids : nullptr);
}

struct LfpSolution {
    Vector weights;            // each equal to its lower or upper bound
    double value = 0.0;        // Σ r W / Σ W at `weights`
    std::size_t threshold = 0; // rows at sorted positions < threshold take the lower bound
};

namespace detail {

inline void check_lfp_inputs(std::span<const double> r, std::span<const double> lower,
                             std::span<const double> upper) {
    if (r.empty()) throw std::invalid_argument("solve_lfp: need at least one row");
    if (lower.size() != r.size() || upper.size() != r.size())
        throw std::invalid_argument("solve_lfp: bounds length mismatch");
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!std::isfinite(r[i])) throw std::invalid_argument("solve_lfp: non-finite r");
        if (!(lower[i] > 0.0 && lower[i] <= upper[i]) || !std::isfinite(upper[i]))
            throw std::invalid_argument("solve_lfp: invalid bounds at row " + std::to_string(i));
    }
}

}  // namespace detail

// max_W Σ r_i W_i / Σ W_i over a_i <= W_i <= b_i.
//
// The maximizer puts the lower bound on a prefix of rows sorted by r and the
// upper bound on the remaining suffix. All n + 1 split points are scored in
// one pass with prefix sums and the best one is returned (the first on ties,
// i.e. the largest upper-bound suffix).
inline LfpSolution solve_lfp_sorted(std::span<const double> r, std::span<const double> lower,
                                    std::span<const double> upper) {
    detail::check_lfp_inputs(r, lower, upper);
    const std::size_t n = r.size();

    // (r, index) pairs: ties keep input order
    std::vector<std::pair<double, std::size_t>> keyed(n);
    for (std::size_t i = 0; i < n; ++i) keyed[i] = {r[i], i};
    std::sort(keyed.begin(), keyed.end());
    std::vector<std::size_t> order(n);
    for (std::size_t k = 0; k < n; ++k) order[k] = keyed[k].second;

    LfpSolution sol;
    sol.weights.resize(static_cast<Eigen::Index>(n));

    const auto [rmin, rmax] = std::minmax_element(r.begin(), r.end());
    if (*rmin == *rmax) {
        // constant objective: every feasible W attains r
        for (std::size_t i = 0; i < n; ++i) sol.weights(static_cast<Eigen::Index>(i)) = lower[i];
        sol.value = *rmin;
        sol.threshold = n;
        return sol;
    }

    // suffix sums of b r and b over sorted positions [k, n)
    std::vector<double> suffix_num(n + 1, 0.0), suffix_den(n + 1, 0.0);
    for (std::size_t k = n; k-- > 0;) {
        const std::size_t i = order[k];
        suffix_num[k] = suffix_num[k + 1] + upper[i] * r[i];
        suffix_den[k] = suffix_den[k + 1] + upper[i];
    }
    double prefix_num = 0.0, prefix_den = 0.0;
    double best = -std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t k = 0; k <= n; ++k) {
        if (k > 0) {
            const std::size_t i = order[k - 1];
            prefix_num += lower[i] * r[i];
            prefix_den += lower[i];
        }
        const double value = (prefix_num + suffix_num[k]) / (prefix_den + suffix_den[k]);
        if (value > best) {
            best = value;
            best_k = k;
        }
    }

    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = order[k];
        sol.weights(static_cast<Eigen::Index>(i)) = k < best_k ? lower[i] : upper[i];
    }
    sol.threshold = best_k;
    sol.value = best;
    return sol;
}

// Same optimum without sorting. For a level λ the best weights are b_i on
// rows with r_i >= λ and a_i elsewhere; re-centering λ on the value of those
// weights never decreases it and stops once the assignment repeats
// (Dinkelbach's method). Each round is O(n) and a handful of rounds suffice
// in practice; a round cap hands over to the sorted scan.
inline LfpSolution solve_lfp(std::span<const double> r, std::span<const double> lower,
                             std::span<const double> upper) {
    detail::check_lfp_inputs(r, lower, upper);
    const std::size_t n = r.size();
    const auto [rmin, rmax] = std::minmax_element(r.begin(), r.end());
    if (*rmin == *rmax) return solve_lfp_sorted(r, lower, upper);

    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += lower[i] * r[i];
        den += lower[i];
    }
    double level = num / den;
    std::vector<char> at_upper(n, 0), next(n, 0);
    const std::size_t max_rounds = n + 2;
    for (std::size_t round = 0; round < max_rounds; ++round) {
        num = den = 0.0;
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            next[i] = r[i] >= level ? 1 : 0;
            const double w = next[i] ? upper[i] : lower[i];
            num += w * r[i];
            den += w;
            changed |= next[i] != at_upper[i];
        }
        at_upper.swap(next);
        const double value = num / den;
        if (!changed || !(value > level)) {
            // a step down can only come from rounding; defer to the scan
            if (value < level) break;
            LfpSolution sol;
            sol.weights.resize(static_cast<Eigen::Index>(n));
            for (std::size_t i = 0; i < n; ++i) {
                sol.weights(static_cast<Eigen::Index>(i)) = at_upper[i] ? upper[i] : lower[i];
                sol.threshold += at_upper[i] ? 0 : 1;
            }
            sol.value = value;
            return sol;
        }
        level = value;
    }
    return solve_lfp_sorted(r, lower, upper);
}

inline LfpSolution solve_lfp(const Vector& r, const WeightBounds& bounds) {
    if (static_cast<std::size_t>(r.size()) != bounds.size()) throw std::invalid_argument("solve_lfp: size mismatch");
    return solve_lfp(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                     std::span<const double>(bounds.lower.data(), bounds.size()),
                     std::span<const double>(bounds.upper.data(), bounds.size()));
}

inline LfpSolution solve_lfp_sorted(const Vector& r, const WeightBounds& bounds) {
    if (static_cast<std::size_t>(r.size()) != bounds.size()) throw std::invalid_argument("solve_lfp: size mismatch");
    return solve_lfp_sorted(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                            std::span<const double>(bounds.lower.data(), bounds.size()),
                            std::span<const double>(bounds.upper.data(), bounds.size()));
}

// Enumerates all 2^n corner assignments. Test-scale oracle, n <= 20.
inline LfpSolution solve_lfp_bruteforce(std::span<const double> r, std::span<const double> lower,
                                        std::span<const double> upper) {
    detail::check_lfp_inputs(r, lower, upper);
    const std::size_t n = r.size();
    if (n > 20) throw std::invalid_argument("solve_lfp_bruteforce: n > 20");

    LfpSolution sol;
    sol.value = -std::numeric_limits<double>::infinity();
    sol.weights.resize(static_cast<Eigen::Index>(n));
    std::uint64_t best_mask = 0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double w = (mask >> i) & 1U ? upper[i] : lower[i];
            num += w * r[i];
            den += w;
        }
        if (num / den > sol.value) {
            sol.value = num / den;
            best_mask = mask;
        }
    }
    std::size_t at_lower = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const bool up = (best_mask >> i) & 1U;
        sol.weights(static_cast<Eigen::Index>(i)) = up ? upper[i] : lower[i];
        at_lower += up ? 0 : 1;
    }
    sol.threshold = at_lower;
    return sol;
}

inline LfpSolution solve_lfp_bruteforce(const Vector& r, const WeightBounds& bounds) {
    return solve_lfp_bruteforce(std::span<const double>(r.data(), static_cast<std::size_t>(r.size())),
                                std::span<const double>(bounds.lower.data(), bounds.size()),
                                std::span<const double>(bounds.upper.data(), bounds.size()));
}

}  // namespace confhai
