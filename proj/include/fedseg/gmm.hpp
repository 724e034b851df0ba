#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

struct GmmComponent {
    std::array<double, 2> mean{0.0, 0.0};
    std::array<double, 2> var{1.0, 1.0};  // diagonal covariance entries
    double weight = 0.5;
};

struct TwoComponentGmm {
    std::array<GmmComponent, 2> components;
    std::vector<std::array<double, 2>> responsibilities;  // N x 2
    std::vector<int> assignments;                         // hard, by max responsibility
    double log_likelihood = 0.0;
    int iterations = 0;
};

namespace detail {

inline double sq_dist2(const std::array<double, 2>& a, const std::array<double, 2>& b) {
    const double d0 = a[0] - b[0];
    const double d1 = a[1] - b[1];
    return d0 * d0 + d1 * d1;
}

inline double diag_gauss_log_pdf(const std::array<double, 2>& x, const GmmComponent& c) {
    constexpr double kLog2Pi = 1.8378770664093454836;
    const double d0 = x[0] - c.mean[0];
    const double d1 = x[1] - c.mean[1];
    return -kLog2Pi - 0.5 * (std::log(c.var[0]) + std::log(c.var[1])) -
           0.5 * (d0 * d0 / c.var[0] + d1 * d1 / c.var[1]);
}

}  // namespace detail

// Two-component EM on 2-D points, diagonal covariances, seeded k-means++
// start. Deterministic in (points, seed). Throws DegenerateInputError when
// every point is identical; callers supply their own fallback for that.
inline TwoComponentGmm fit_two_component_gmm(const std::vector<std::array<double, 2>>& pts,
                                             std::uint64_t seed, double tol = 1e-8,
                                             int max_iters = 500, double var_floor = 1e-6) {
    const std::size_t n = pts.size();
    if (n < 2) throw DegenerateInputError("gmm: need at least 2 points");
    bool all_same = true;
    for (const auto& p : pts) all_same = all_same && p[0] == pts[0][0] && p[1] == pts[0][1];
    if (all_same) throw DegenerateInputError("gmm: all points identical");

    Rng rng(seed);

    // k-means++: first center uniform, second proportional to squared distance.
    std::array<std::array<double, 2>, 2> centers;
    centers[0] = pts[rng.uniform_index(n)];
    std::vector<double> d2(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d2[i] = detail::sq_dist2(pts[i], centers[0]);
        total += d2[i];
    }
    double pick = rng.uniform() * total;
    std::size_t second = n;
    for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;  // never re-pick the first center
        if (pick <= d2[i]) {
            second = i;
            break;
        }
        pick -= d2[i];
    }
    if (second == n) {  // numeric leftovers: fall back to the farthest point
        second = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (d2[i] > d2[second]) second = i;
    }
    centers[1] = pts[second];

    // Lloyd iterations to a stable hard split.
    std::vector<int> assign(n, 0);
    for (int it = 0; it < 100; ++it) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const int a =
                detail::sq_dist2(pts[i], centers[0]) <= detail::sq_dist2(pts[i], centers[1]) ? 0 : 1;
            changed = changed || a != assign[i];
            assign[i] = a;
        }
        for (int k = 0; k < 2; ++k) {
            std::array<double, 2> acc{0.0, 0.0};
            int count = 0;
            for (std::size_t i = 0; i < n; ++i) {
                if (assign[i] != k) continue;
                acc[0] += pts[i][0];
                acc[1] += pts[i][1];
                ++count;
            }
            if (count > 0) centers[k] = {acc[0] / count, acc[1] / count};
        }
        if (!changed && it > 0) break;
    }

    TwoComponentGmm fit;
    for (int k = 0; k < 2; ++k) {
        auto& comp = fit.components[k];
        comp.mean = centers[k];
        std::array<double, 2> acc{0.0, 0.0};
        int count = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (assign[i] != k) continue;
            const double d0 = pts[i][0] - comp.mean[0];
            const double d1 = pts[i][1] - comp.mean[1];
            acc[0] += d0 * d0;
            acc[1] += d1 * d1;
            ++count;
        }
        comp.var = {std::max(count > 0 ? acc[0] / count : 0.0, var_floor),
                    std::max(count > 0 ? acc[1] / count : 0.0, var_floor)};
        comp.weight = std::max(static_cast<double>(count), 1.0) / static_cast<double>(n);
    }
    const double wsum = fit.components[0].weight + fit.components[1].weight;
    fit.components[0].weight /= wsum;
    fit.components[1].weight /= wsum;

    fit.responsibilities.assign(n, {0.5, 0.5});
    double prev_ll = -std::numeric_limits<double>::infinity();
    for (int it = 1; it <= max_iters; ++it) {
        fit.iterations = it;
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double l0 = std::log(fit.components[0].weight) +
                              detail::diag_gauss_log_pdf(pts[i], fit.components[0]);
            const double l1 = std::log(fit.components[1].weight) +
                              detail::diag_gauss_log_pdf(pts[i], fit.components[1]);
            const double m = std::max(l0, l1);
            const double e0 = std::exp(l0 - m);
            const double e1 = std::exp(l1 - m);
            ll += m + std::log(e0 + e1);
            fit.responsibilities[i] = {e0 / (e0 + e1), e1 / (e0 + e1)};
        }
        for (int k = 0; k < 2; ++k) {
            auto& comp = fit.components[k];
            double nk = 0.0;
            std::array<double, 2> mean_acc{0.0, 0.0};
            for (std::size_t i = 0; i < n; ++i) {
                const double r = fit.responsibilities[i][k];
                nk += r;
                mean_acc[0] += r * pts[i][0];
                mean_acc[1] += r * pts[i][1];
            }
            if (nk < 1e-12) {  // starved component: freeze it, weight to dust
                comp.weight = 1e-12;
                continue;
            }
            comp.mean = {mean_acc[0] / nk, mean_acc[1] / nk};
            std::array<double, 2> var_acc{0.0, 0.0};
            for (std::size_t i = 0; i < n; ++i) {
                const double r = fit.responsibilities[i][k];
                const double d0 = pts[i][0] - comp.mean[0];
                const double d1 = pts[i][1] - comp.mean[1];
                var_acc[0] += r * d0 * d0;
                var_acc[1] += r * d1 * d1;
            }
            comp.var = {std::max(var_acc[0] / nk, var_floor), std::max(var_acc[1] / nk, var_floor)};
            comp.weight = nk / static_cast<double>(n);
        }
        fit.log_likelihood = ll;
        if (std::abs(ll - prev_ll) < tol) break;
        prev_ll = ll;
    }

    fit.assignments.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        fit.assignments[i] = fit.responsibilities[i][1] > fit.responsibilities[i][0] ? 1 : 0;
    return fit;
}

}  // namespace fedseg
