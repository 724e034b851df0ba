#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fedseg/errors.hpp"
#include "fedseg/geometry.hpp"
#include "fedseg/mask.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

// Contour evolution noise: l_sub control values ~ N(mu, sigma^2) at evenly
// spaced contour indices, smoothed into a per-pixel bias curve by a
// least-squares polynomial. mu shifts the whole contour outward (positive)
// or inward (negative); sigma adds correlated wobble. l_sub = 0 derives the
// control-point count from the contour length.
struct CemParams {
    double mu = 0.0;
    double sigma = 0.0;
    int l_sub = 0;      // 0: use max(8, ceil(l / 25))
    int degree_p = 5;

    void validate() const {
        if (sigma < 0.0) throw ConfigError("CemParams: sigma must be >= 0");
        if (degree_p < 1) throw ConfigError("CemParams: degree_p must be positive");
        if (l_sub < 0) throw ConfigError("CemParams: l_sub must be >= 0");
        if (l_sub > 0 && degree_p > l_sub - 1)
            throw DegreeTooHighError("CemParams: degree_p must be <= l_sub - 1");
    }
};

// Population the per-client noise profiles are drawn from: biased outward
// with probability p_d, inward otherwise.
struct HeteroNoiseParams {
    double mu_max = 0.0;
    double mu_min = 0.0;
    double sigma_max = 0.0;
    double p_d = 0.0;

    void validate() const {
        if (!(mu_min < 0.0 && 0.0 < mu_max))
            throw ConfigError("HeteroNoiseParams: need mu_min < 0 < mu_max");
        if (sigma_max <= 0.0) throw ConfigError("HeteroNoiseParams: sigma_max must be > 0");
        if (p_d < 0.0 || p_d > 1.0) throw ConfigError("HeteroNoiseParams: p_d must lie in [0, 1]");
    }
};

// Least-squares polynomial over indices internally rescaled to [-1, 1];
// coefficients are stored in the rescaled basis, evaluate() hides that.
struct FittedPolynomial {
    double lo = 0.0;
    double hi = 1.0;
    std::vector<double> coeffs;  // coeffs[k] multiplies t^k, t in [-1, 1]

    double to_scaled(double x) const { return hi == lo ? 0.0 : (2.0 * x - (lo + hi)) / (hi - lo); }

    double evaluate(double x) const {
        const double t = to_scaled(x);
        double acc = 0.0;
        for (std::size_t k = coeffs.size(); k-- > 0;) acc = acc * t + coeffs[k];
        return acc;
    }

    // Expansion back to the raw-index basis, for comparison against direct
    // normal-equation solves. Numerically sensible only for modest domains.
    std::vector<double> raw_coefficients() const {
        const double alpha = hi == lo ? 0.0 : 2.0 / (hi - lo);
        const double gamma = hi == lo ? 0.0 : -(lo + hi) / (hi - lo);
        std::vector<double> raw(coeffs.size(), 0.0);
        for (std::size_t k = 0; k < coeffs.size(); ++k) {
            // coeffs[k] * (alpha x + gamma)^k, expanded binomially
            double binom = 1.0;
            for (std::size_t j = 0; j <= k; ++j) {
                const double term =
                    coeffs[k] * binom * std::pow(alpha, static_cast<double>(j)) *
                    std::pow(gamma, static_cast<double>(k - j));
                raw[j] += term;
                binom = binom * static_cast<double>(k - j) / static_cast<double>(j + 1);
            }
        }
        return raw;
    }
};

// Bias per contour pixel (index 1..l), positive meaning outward. Knots are
// kept for manifests and diagnostics.
struct BiasSequence {
    std::vector<double> values;
    std::vector<int> knot_indices;
    std::vector<double> knot_samples;
};

struct NoisySample {
    std::vector<double> image;  // H*W*C row-major, values in [0, 1]
    BinaryMask clean_mask;
    BinaryMask noisy_mask;
    BinaryMask noise_map;  // clean XOR noisy, exactly
};

struct CorruptionResult {
    BinaryMask noisy_mask;
    BinaryMask noise_map;
    int annihilated_components = 0;
};

namespace detail {

// Least squares via twice-reorthogonalized modified Gram-Schmidt; plenty for
// the tiny, well-scaled Vandermonde systems used here.
inline std::vector<double> mgs_lstsq(const std::vector<double>& a, int n, int m,
                                     const std::vector<double>& b) {
    std::vector<double> q(a);
    std::vector<double> r(static_cast<std::size_t>(m) * m, 0.0);
    for (int j = 0; j < m; ++j) {
        double col_norm = 0.0;
        for (int i = 0; i < n; ++i) col_norm += a[static_cast<std::size_t>(i) * m + j] * a[static_cast<std::size_t>(i) * m + j];
        col_norm = std::sqrt(col_norm);
        for (int pass = 0; pass < 2; ++pass) {
            for (int i = 0; i < j; ++i) {
                double dot = 0.0;
                for (int k = 0; k < n; ++k)
                    dot += q[static_cast<std::size_t>(k) * m + i] * q[static_cast<std::size_t>(k) * m + j];
                r[static_cast<std::size_t>(i) * m + j] += dot;
                for (int k = 0; k < n; ++k)
                    q[static_cast<std::size_t>(k) * m + j] -= dot * q[static_cast<std::size_t>(k) * m + i];
            }
        }
        double norm = 0.0;
        for (int k = 0; k < n; ++k)
            norm += q[static_cast<std::size_t>(k) * m + j] * q[static_cast<std::size_t>(k) * m + j];
        norm = std::sqrt(norm);
        if (!(norm > 1e-13 * std::max(col_norm, 1.0)))
            throw SingularSystemError("polynomial fit: rank-deficient design matrix");
        r[static_cast<std::size_t>(j) * m + j] = norm;
        for (int k = 0; k < n; ++k) q[static_cast<std::size_t>(k) * m + j] /= norm;
    }
    std::vector<double> qtb(m, 0.0);
    for (int j = 0; j < m; ++j)
        for (int k = 0; k < n; ++k) qtb[j] += q[static_cast<std::size_t>(k) * m + j] * b[k];
    std::vector<double> c(m, 0.0);
    for (int j = m - 1; j >= 0; --j) {
        double acc = qtb[j];
        for (int k = j + 1; k < m; ++k) acc -= r[static_cast<std::size_t>(j) * m + k] * c[k];
        c[j] = acc / r[static_cast<std::size_t>(j) * m + j];
    }
    return c;
}

}  // namespace detail

// Least-squares fit of a degree_p polynomial to (indices, samples). Unique
// minimizer of the squared residual whenever the indices are distinct and
// degree_p <= count - 1.
inline FittedPolynomial fit_bias_polynomial(const std::vector<int>& indices,
                                            const std::vector<double>& samples, int degree_p) {
    if (indices.size() != samples.size())
        throw ShapeMismatchError("fit_bias_polynomial: indices/samples length mismatch");
    const int n = static_cast<int>(indices.size());
    if (degree_p < 0 || degree_p > n - 1)
        throw DegreeTooHighError("fit_bias_polynomial: degree must be <= count - 1");
    {
        std::vector<int> sorted(indices);
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw DuplicateIndicesError("fit_bias_polynomial: duplicate indices");
    }

    FittedPolynomial poly;
    poly.lo = *std::min_element(indices.begin(), indices.end());
    poly.hi = *std::max_element(indices.begin(), indices.end());
    const int m = degree_p + 1;
    std::vector<double> a(static_cast<std::size_t>(n) * m);
    for (int i = 0; i < n; ++i) {
        const double t = poly.to_scaled(indices[i]);
        double p = 1.0;
        for (int j = 0; j < m; ++j) {
            a[static_cast<std::size_t>(i) * m + j] = p;
            p *= t;
        }
    }
    poly.coeffs = detail::mgs_lstsq(a, n, m, samples);
    return poly;
}

// Control indices 1, ..., l at equal intervals with both endpoints, one
// N(mu, sigma^2) sample per index, polynomial smoothing, then evaluation at
// every contour index.
inline BiasSequence generate_bias(int l, const CemParams& params, Rng& rng) {
    params.validate();
    int l_sub = params.l_sub > 0 ? params.l_sub : std::max(8, (l + 24) / 25);
    if (l_sub < params.degree_p + 1) l_sub = params.degree_p + 1;
    if (l < l_sub) throw ContourTooShortError("generate_bias: contour shorter than l_sub");

    std::vector<int> indices;
    indices.reserve(l_sub);
    for (int k = 0; k < l_sub; ++k) {
        const int idx = 1 + static_cast<int>((static_cast<long long>(k) * (l - 1)) / (l_sub - 1));
        if (indices.empty() || indices.back() != idx) indices.push_back(idx);
    }
    if (static_cast<int>(indices.size()) < params.degree_p + 1)
        throw ContourTooShortError("generate_bias: too few distinct control indices");

    BiasSequence seq;
    seq.knot_indices = indices;
    seq.knot_samples.reserve(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) seq.knot_samples.push_back(rng.normal(params.mu, params.sigma));

    const FittedPolynomial poly = fit_bias_polynomial(indices, seq.knot_samples, params.degree_p);
    seq.values.reserve(l);
    for (int j = 1; j <= l; ++j) seq.values.push_back(poly.evaluate(j));
    return seq;
}

namespace detail {

inline double polygon_signed_area(const std::vector<std::array<double, 2>>& pts) {
    double acc = 0.0;
    const std::size_t n = pts.size();
    for (std::size_t i = 0; i < n; ++i) {
        const auto& a = pts[i];
        const auto& b = pts[(i + 1) % n];
        acc += a[1] * b[0] - b[1] * a[0];
    }
    return 0.5 * acc;
}

}  // namespace detail

// Corrupts one mask: every component's contour is displaced along its
// normals by a fresh bias curve and re-rasterized. A component is dropped
// as annihilated when the displaced boundary turns inside out (its own
// outward direction anti-aligns with the original normals; a point
// reflection in 2D preserves orientation and signed area, so those cannot
// detect the flip), when it collapses below half a pixel of area, or when
// its rasterization comes out empty.
inline CorruptionResult apply_cem(const BinaryMask& mask, const CemParams& params, Rng& rng) {
    params.validate();
    const std::vector<Contour> contours = trace_contours(mask);

    CorruptionResult result{BinaryMask(mask.height(), mask.width()),
                            BinaryMask(mask.height(), mask.width()), 0};
    for (const Contour& traced : contours) {
        // Normals are taken against the component in isolation so nearby
        // components cannot flip the outward direction.
        BinaryMask comp_mask(mask.height(), mask.width());
        {
            BinaryMask filled = rasterize_polygon(
                [&] {
                    std::vector<std::array<double, 2>> poly;
                    poly.reserve(traced.points.size());
                    for (const Pixel& p : traced.points)
                        poly.push_back({static_cast<double>(p[0]), static_cast<double>(p[1])});
                    return poly;
                }(),
                mask.height(), mask.width());
            // The traced polygon covers the component interior; intersect
            // with the mask to stay exact for non-convex shapes.
            for (int r = 0; r < mask.height(); ++r)
                for (int c = 0; c < mask.width(); ++c)
                    if (filled.at(r, c) && mask.at(r, c)) comp_mask.set(r, c, true);
        }
        Contour contour = traced;
        compute_normals(contour, comp_mask);

        const int l = static_cast<int>(contour.points.size());
        const BiasSequence bias = generate_bias(l, params, rng);
        std::vector<std::array<double, 2>> displaced(static_cast<std::size_t>(l));
        for (int i = 0; i < l; ++i) {
            displaced[i] = {contour.points[i][0] + bias.values[i] * contour.normals[i][0],
                            contour.points[i][1] + bias.values[i] * contour.normals[i][1]};
        }

        // Outward direction of a clockwise loop is the local tangent rotated
        // left: tangent (tr, tc) -> (-tc, tr). Net anti-alignment with the
        // pre-displacement normals marks an inside-out boundary.
        double alignment = 0.0;
        for (int i = 0; i < l; ++i) {
            const auto& prev = displaced[(i + l - 1) % l];
            const auto& next = displaced[(i + 1) % l];
            const double tr = next[0] - prev[0];
            const double tc = next[1] - prev[1];
            alignment += -tc * contour.normals[i][0] + tr * contour.normals[i][1];
        }
        if (alignment <= 0.0 || detail::polygon_signed_area(displaced) < 0.5) {
            ++result.annihilated_components;
            continue;
        }
        const BinaryMask evolved = rasterize_polygon(displaced, mask.height(), mask.width());
        if (evolved.empty_foreground()) {
            ++result.annihilated_components;
            continue;
        }
        for (int r = 0; r < mask.height(); ++r)
            for (int c = 0; c < mask.width(); ++c)
                if (evolved.at(r, c)) result.noisy_mask.set(r, c, true);
    }
    result.noise_map = mask_xor(mask, result.noisy_mask);
    return result;
}

// One noise profile per client: outward mean with probability p_d, inward
// otherwise; scale in the upper half of [0, sigma_max].
inline std::vector<CemParams> assign_client_cems(int num_clients, const HeteroNoiseParams& params,
                                                 Rng& rng, int l_sub = 0, int degree_p = 5) {
    params.validate();
    if (num_clients < 1) throw ConfigError("assign_client_cems: need at least one client");
    std::vector<CemParams> cems;
    cems.reserve(num_clients);
    for (int i = 0; i < num_clients; ++i) {
        CemParams cem;
        const bool dilating = rng.uniform() < params.p_d;
        cem.mu = dilating ? rng.uniform(0.0, params.mu_max) : rng.uniform(params.mu_min, 0.0);
        cem.sigma = rng.uniform(params.sigma_max / 2.0, params.sigma_max);
        cem.l_sub = l_sub;
        cem.degree_p = degree_p;
        cem.validate();
        cems.push_back(cem);
    }
    return cems;
}

struct PdnReport {
    double band_noise_rate_inside_eps = 0.0;
    double band_noise_rate_outside_eps = 0.0;
    double per_locus_frequency_ratio = 1.0;  // Laplace-smoothed max/min over contour loci
    bool no_noise = false;
    int trials = 0;
    double epsilon = 0.0;
};

// Monte Carlo check that repeated corruptions of one mask put their noise in
// a band around the contour (rate inside |distance| < epsilon vs outside)
// and hit the individual contour pixels at unequal frequencies.
inline PdnReport verify_pdn(const CemParams& params, const BinaryMask& mask, int trials,
                            double epsilon, Rng& rng) {
    if (trials < 100) throw ConfigError("verify_pdn: need at least 100 trials");
    if (epsilon <= 0.0) throw ConfigError("verify_pdn: epsilon must be positive");
    params.validate();

    const SignedDistanceField sdf = signed_distance(mask);
    std::vector<Pixel> loci;
    for (const Contour& contour : trace_contours(mask))
        loci.insert(loci.end(), contour.points.begin(), contour.points.end());

    const std::size_t total = static_cast<std::size_t>(mask.height()) * mask.width();
    std::vector<long long> noise_count(total, 0);
    for (int t = 0; t < trials; ++t) {
        const CorruptionResult res = apply_cem(mask, params, rng);
        const auto& bits = res.noise_map.data();
        for (std::size_t i = 0; i < total; ++i) noise_count[i] += bits[i];
    }

    PdnReport report;
    report.trials = trials;
    report.epsilon = epsilon;
    long long inside_noise = 0, outside_noise = 0;
    std::size_t inside_px = 0, outside_px = 0;
    for (int r = 0; r < mask.height(); ++r) {
        for (int c = 0; c < mask.width(); ++c) {
            const std::size_t i = static_cast<std::size_t>(r) * mask.width() + c;
            if (std::abs(sdf.at(r, c)) < epsilon) {
                ++inside_px;
                inside_noise += noise_count[i];
            } else {
                ++outside_px;
                outside_noise += noise_count[i];
            }
        }
    }
    if (inside_px > 0)
        report.band_noise_rate_inside_eps =
            static_cast<double>(inside_noise) / (static_cast<double>(inside_px) * trials);
    if (outside_px > 0)
        report.band_noise_rate_outside_eps =
            static_cast<double>(outside_noise) / (static_cast<double>(outside_px) * trials);

    long long locus_min = -1, locus_max = -1;
    for (const Pixel& p : loci) {
        const long long cnt = noise_count[static_cast<std::size_t>(p[0]) * mask.width() + p[1]];
        if (locus_min < 0 || cnt < locus_min) locus_min = cnt;
        if (locus_max < 0 || cnt > locus_max) locus_max = cnt;
    }
    if (locus_min >= 0)
        report.per_locus_frequency_ratio =
            static_cast<double>(locus_max + 1) / static_cast<double>(locus_min + 1);
    report.no_noise = inside_noise == 0 && outside_noise == 0;
    return report;
}

}  // namespace fedseg
