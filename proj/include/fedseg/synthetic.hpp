#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "fedseg/config.hpp"
#include "fedseg/geometry.hpp"
#include "fedseg/learner.hpp"
#include "fedseg/mask.hpp"
#include "fedseg/noise.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

struct SyntheticSample {
    std::vector<double> image;  // height*width, single channel, values in [0, 1]
    BinaryMask clean_mask;
};

namespace detail {

// Child-stream tags. Every random decision in a run hangs off one of these,
// keyed so that per-client and per-round work is order-independent.
enum StreamTag : std::uint64_t {
    kTagSizes = 1,
    kTagData = 2,
    kTagTest = 3,
    kTagCems = 4,
    kTagCorrupt = 5,
    kTagInit = 6,
    kTagLocal = 7,
    kTagGmm = 8,
};

inline SyntheticSample make_synthetic_sample(const DataParams& d, Rng& rng) {
    const int h = d.height;
    const int w = d.width;
    const double margin = d.axis_max * (1.0 + d.wobble) + 1.0;
    if (2.0 * margin >= h - 1 || 2.0 * margin >= w - 1)
        throw ConfigError("data.axis_max: largest blob does not fit inside the image");

    for (int attempt = 0; attempt < 100; ++attempt) {
        const double cy = rng.uniform(margin, h - 1 - margin);
        const double cx = rng.uniform(margin, w - 1 - margin);
        const double a = rng.uniform(d.axis_min, d.axis_max);
        const double b = rng.uniform(d.axis_min, d.axis_max);
        const double theta = rng.uniform(0.0, M_PI);
        // low-frequency radial modulation turns the ellipse into a blob
        const double amp2 = rng.uniform(0.0, d.wobble * 2.0 / 3.0);
        const double ph2 = rng.uniform(0.0, 2.0 * M_PI);
        const double amp3 = rng.uniform(0.0, d.wobble / 3.0);
        const double ph3 = rng.uniform(0.0, 2.0 * M_PI);

        BinaryMask mask(h, w);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                const double dx = c - cx;
                const double dy = r - cy;
                const double xe = (dx * ct + dy * st) / a;
                const double ye = (-dx * st + dy * ct) / b;
                const double rho = std::sqrt(xe * xe + ye * ye);
                if (rho > 1.0 + d.wobble) continue;
                const double phi = std::atan2(ye, xe);
                const double bound =
                    1.0 + amp2 * std::cos(2.0 * phi + ph2) + amp3 * std::cos(3.0 * phi + ph3);
                if (rho <= bound) mask.set(r, c, true);
            }
        }

        const double frac =
            static_cast<double>(mask.foreground_count()) / (static_cast<double>(h) * w);
        if (frac < 0.02 || frac > 0.60) continue;
        // wobble can pinch off slivers; keep only single-blob masks so the
        // contour machinery sees one well-formed boundary per sample
        if (connected_components(mask).size() != 1) continue;

        SyntheticSample sample;
        sample.clean_mask = std::move(mask);
        sample.image.resize(static_cast<std::size_t>(h) * w);
        const double bg = 0.5 - d.contrast / 2.0;
        const double fg = 0.5 + d.contrast / 2.0;
        for (int r = 0; r < h; ++r) {
            for (int c = 0; c < w; ++c) {
                double v = sample.clean_mask.at(r, c) ? fg : bg;
                if (d.pixel_noise_std > 0.0) v += d.pixel_noise_std * rng.normal();
                sample.image[static_cast<std::size_t>(r) * w + c] = std::clamp(v, 0.0, 1.0);
            }
        }
        return sample;
    }
    throw ConfigError(
        "data: foreground fraction [2%, 60%] not reachable in 100 attempts; widen axis range");
}

// Client sizes: equal, or lognormal with unit mean (mu = -spread^2/2) so the
// configured count stays the expected size.
inline std::vector<int> client_sample_counts(const ExperimentConfig& c, const Rng& root) {
    std::vector<int> counts(c.clients, c.samples_per_client);
    if (c.size_distribution == SizeDistribution::kLognormal) {
        Rng rng = root.child({kTagSizes});
        for (int i = 0; i < c.clients; ++i) {
            const double scale =
                std::exp(c.lognormal_spread * rng.normal() - c.lognormal_spread * c.lognormal_spread / 2.0);
            counts[i] = std::max(1, static_cast<int>(std::lround(c.samples_per_client * scale)));
        }
    }
    return counts;
}

}  // namespace detail

// Per-client clean datasets; every sample is deterministic in
// (seed, client, index) so regeneration order never matters.
inline std::vector<std::vector<SyntheticSample>> generate_synthetic_dataset(
    const ExperimentConfig& config, const Rng& root) {
    const std::vector<int> counts = detail::client_sample_counts(config, root);
    std::vector<std::vector<SyntheticSample>> clients(config.clients);
    for (int i = 0; i < config.clients; ++i) {
        clients[i].reserve(counts[i]);
        for (int s = 0; s < counts[i]; ++s) {
            Rng rng = root.child({detail::kTagData, static_cast<std::uint64_t>(i + 1),
                                  static_cast<std::uint64_t>(s)});
            clients[i].push_back(detail::make_synthetic_sample(config.data, rng));
        }
    }
    return clients;
}

// Held-out evaluation samples from an independent stream; never corrupted.
inline std::vector<SyntheticSample> generate_test_samples(const ExperimentConfig& config,
                                                          const Rng& root) {
    std::vector<SyntheticSample> test;
    test.reserve(config.test_samples);
    for (int s = 0; s < config.test_samples; ++s) {
        Rng rng = root.child({detail::kTagTest, static_cast<std::uint64_t>(s)});
        test.push_back(detail::make_synthetic_sample(config.data, rng));
    }
    return test;
}

struct CorruptionOutput {
    std::vector<std::vector<NoisySample>> clients;
    std::vector<CemParams> cems;  // evaluation-side ground truth, one per client
    std::vector<std::string> warnings;
};

// Draws one noise profile per client, then corrupts every training mask with
// it. Clean masks ride along for evaluation only.
inline CorruptionOutput corrupt_federation(const std::vector<std::vector<SyntheticSample>>& clean,
                                           const HeteroNoiseParams& hetero, const Rng& root,
                                           int l_sub = 0, int degree_p = 5) {
    if (clean.empty()) throw EmptyFederationError("corrupt_federation: no clients");
    CorruptionOutput out;
    Rng cem_rng = root.child({detail::kTagCems});
    out.cems = assign_client_cems(static_cast<int>(clean.size()), hetero, cem_rng, l_sub, degree_p);
    out.clients.resize(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
        out.clients[i].reserve(clean[i].size());
        for (std::size_t s = 0; s < clean[i].size(); ++s) {
            Rng rng = root.child({detail::kTagCorrupt, static_cast<std::uint64_t>(i + 1),
                                  static_cast<std::uint64_t>(s)});
            CorruptionResult res = apply_cem(clean[i][s].clean_mask, out.cems[i], rng);
            if (res.annihilated_components > 0)
                out.warnings.push_back("client " + std::to_string(i + 1) + " sample " +
                                       std::to_string(s) + ": " +
                                       std::to_string(res.annihilated_components) +
                                       " component(s) annihilated by noise");
            if (res.noisy_mask.empty_foreground())
                out.warnings.push_back("client " + std::to_string(i + 1) + " sample " +
                                       std::to_string(s) + ": noisy annotation is empty");
            NoisySample ns;
            ns.image = clean[i][s].image;
            ns.clean_mask = clean[i][s].clean_mask;
            ns.noisy_mask = std::move(res.noisy_mask);
            ns.noise_map = std::move(res.noise_map);
            out.clients[i].push_back(std::move(ns));
        }
    }
    return out;
}

}  // namespace fedseg
