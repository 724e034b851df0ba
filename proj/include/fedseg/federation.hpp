#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fedseg/config.hpp"
#include "fedseg/errors.hpp"
#include "fedseg/geometry.hpp"
#include "fedseg/gmm.hpp"
#include "fedseg/learner.hpp"
#include "fedseg/noise.hpp"
#include "fedseg/rng.hpp"
#include "fedseg/synthetic.hpp"

namespace fedseg {

// One client's private world. Only model parameters and the two difficulty
// scalars may leave it; cem_params is ground truth kept for evaluation.
struct ClientState {
    int client_id = 0;  // 1-based
    std::vector<NoisySample> dataset;
    ModelParams model;
    AdamState optimizer_state;
    CemParams cem_params;
};

struct DifficultyPair {
    double q1 = 0.0;  // inner-band mean CE under the frozen warm-up model
    double q2 = 0.0;  // outer-band mean CE
};

struct GmmFit {
    std::array<std::array<double, 2>, 2> means{};        // [0] = G_l, [1] = G_s
    std::array<std::array<double, 2>, 2> covariances{};  // diagonal entries
    std::array<double, 2> mixing{1.0, 0.0};
    std::vector<std::array<double, 2>> responsibilities;  // per client, col 0 = G_l
    std::vector<int> group_l;  // 1-based client ids, ascending
    std::vector<int> group_s;
    bool degenerate = false;  // single-group fallback was taken
};

struct AggregationPlan {
    std::vector<double> quantity_weights;
    std::vector<double> quality_weights;
    std::vector<double> strengths;
    std::vector<std::vector<double>> layer_weights;  // [client][layer]
    double balance_r = 0.5;
};

// Record of everything that crossed the client -> server channel.
struct Message {
    int client_id = 0;
    std::string kind;  // "model_update" or "difficulty"
    std::size_t payload_doubles = 0;
};

struct RoundMetrics {
    int round = 0;
    std::string mode;  // aggregation actually used this round
    double test_dice_mean = 0.0;
    double test_dice_std = 0.0;
};

struct ClientNoiseInfo {
    int client_id = 0;
    double mu = 0.0;
    double sigma = 0.0;
    int l_sub = 0;
    int degree_p = 0;
    std::vector<double> sample_noise_dice;  // Dice(noisy, clean) per sample
};

struct RunReport {
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string mode;
    std::vector<RoundMetrics> rounds;
    std::vector<double> quantity_weights;
    bool plan_computed = false;
    int plan_round = -1;  // round whose post-aggregation model fed the plan
    std::vector<DifficultyPair> difficulties;
    GmmFit gmm;
    AggregationPlan plan;
    double warmup_train_dice = 0.0;  // vs noisy annotations, frozen warm-up model
    std::vector<ClientNoiseInfo> noise_info;
    std::vector<std::string> warnings;
    std::vector<Message> messages;
    ModelParams final_model;
};

inline std::vector<double> fedavg_weights(const std::vector<int>& client_sizes) {
    if (client_sizes.empty()) throw EmptyFederationError("fedavg_weights: no clients");
    long long total = 0;
    for (int n : client_sizes) {
        if (n < 1) throw ConfigError("fedavg_weights: every client size must be >= 1");
        total += n;
    }
    std::vector<double> w;
    w.reserve(client_sizes.size());
    for (int n : client_sizes)
        w.push_back(static_cast<double>(n) / static_cast<double>(total));
    return w;
}

namespace detail {

inline void check_same_shapes(const std::vector<ModelParams>& models) {
    if (models.empty()) throw EmptyFederationError("aggregate: no models");
    const ModelParams& ref = models.front();
    for (const ModelParams& m : models) {
        if (m.num_layers() != ref.num_layers())
            throw ShapeMismatchError("aggregate: models disagree on layer count");
        for (int j = 0; j < ref.num_layers(); ++j) {
            if (!m.layers[j].weights.same_shape(ref.layers[j].weights) ||
                !m.layers[j].bias.same_shape(ref.layers[j].bias))
                throw ShapeMismatchError("aggregate: models disagree on layer shapes");
        }
    }
}

// out_j += w * (m_j - base_j), elementwise over weights and bias.
inline void add_weighted_delta(ParamLayer& out, const ParamLayer& m, const ParamLayer& base,
                               double w) {
    for (std::size_t e = 0; e < out.weights.data.size(); ++e)
        out.weights.data[e] += w * (m.weights.data[e] - base.weights.data[e]);
    for (std::size_t e = 0; e < out.bias.data.size(); ++e)
        out.bias.data[e] += w * (m.bias.data[e] - base.bias.data[e]);
}

inline Tensor sample_image_tensor(const NoisySample& s) {
    const int h = s.noisy_mask.height();
    const int w = s.noisy_mask.width();
    if (s.image.size() != static_cast<std::size_t>(h) * w)
        throw ShapeMismatchError("sample image does not match its mask dimensions");
    Tensor t({1, h, w});
    t.data = s.image;
    return t;
}

inline std::size_t param_count(const ModelParams& m) {
    std::size_t n = 0;
    for (const auto& layer : m.layers) n += layer.weights.numel() + layer.bias.numel();
    return n;
}

inline double band_ce_sum(const Tensor& probs, const BinaryMask& annotation,
                          const std::vector<Pixel>& band, double clamp) {
    const int w = annotation.width();
    double acc = 0.0;
    for (const Pixel& p : band) {
        double pr = probs.data[static_cast<std::size_t>(p[0]) * w + p[1]];
        pr = std::min(std::max(pr, clamp), 1.0 - clamp);
        acc += annotation.at(p[0], p[1]) ? -std::log(pr) : -std::log(1.0 - pr);
    }
    return acc;
}

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

namespace detail {

inline std::size_t heaviest_index(const std::vector<double>& w) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < w.size(); ++i)
        if (w[i] > w[best]) best = i;
    return best;
}

}  // namespace detail

// Convex combination of models, anchored at the heaviest weight a:
// out = m_a + sum_i w_i (m_i - m_a). On the weight simplex this equals
// sum_i w_i m_i, identical inputs reproduce themselves bit-exactly whatever
// the weights, and a one-hot weight vector returns that model bit-exactly.
// Summation runs in client order, so results never depend on completion
// order elsewhere.
inline ModelParams aggregate(const std::vector<ModelParams>& models,
                             const std::vector<double>& weights) {
    detail::check_same_shapes(models);
    if (weights.size() != models.size())
        throw ShapeMismatchError("aggregate: weight count does not match model count");
    double sum = 0.0;
    for (double w : weights) sum += w;
    if (std::abs(sum - 1.0) > 1e-6)
        throw WeightSimplexError("aggregate: weights sum to " + detail::format_g17(sum));
    const std::size_t anchor = detail::heaviest_index(weights);
    ModelParams out = models[anchor];
    for (std::size_t i = 0; i < models.size(); ++i) {
        if (i == anchor) continue;
        for (int j = 0; j < out.num_layers(); ++j)
            detail::add_weighted_delta(out.layers[j], models[i].layers[j],
                                       models[anchor].layers[j], weights[i]);
    }
    return out;
}

// Layer-wise variant: weight row per client, one entry per layer; each
// layer is anchored at its own column's heaviest client.
inline ModelParams aggregate(const std::vector<ModelParams>& models,
                             const std::vector<std::vector<double>>& layer_weights) {
    detail::check_same_shapes(models);
    if (layer_weights.size() != models.size())
        throw ShapeMismatchError("aggregate: weight row count does not match model count");
    const int layer_count = models.front().num_layers();
    for (const auto& row : layer_weights)
        if (static_cast<int>(row.size()) != layer_count)
            throw ShapeMismatchError("aggregate: weight row length does not match layer count");
    ModelParams out = models.front();
    std::vector<double> col(models.size());
    for (int j = 0; j < layer_count; ++j) {
        for (std::size_t i = 0; i < models.size(); ++i) col[i] = layer_weights[i][j];
        double sum = 0.0;
        for (double w : col) sum += w;
        if (std::abs(sum - 1.0) > 1e-6)
            throw WeightSimplexError("aggregate: layer " + std::to_string(j + 1) +
                                     " weights sum to " + detail::format_g17(sum));
        const std::size_t anchor = detail::heaviest_index(col);
        out.layers[j] = models[anchor].layers[j];
        for (std::size_t i = 0; i < models.size(); ++i) {
            if (i == anchor) continue;
            detail::add_weighted_delta(out.layers[j], models[i].layers[j],
                                       models[anchor].layers[j], col[i]);
        }
    }
    return out;
}

// Inner/outer-band mean CE of the frozen warm-up model against the noisy
// annotation. Default averages per-sample band means; pooled instead merges
// band pixels across samples before dividing.
inline DifficultyPair compute_difficulty(const ClientState& client, const ModelParams& warmup_model,
                                         bool pooled = false, double prob_clamp = 1e-7,
                                         std::vector<std::string>* warnings = nullptr) {
    double q1_acc = 0.0, q2_acc = 0.0;
    double inner_px = 0.0, outer_px = 0.0;
    int kept = 0;
    for (std::size_t s = 0; s < client.dataset.size(); ++s) {
        const NoisySample& sample = client.dataset[s];
        const auto note = [&](const char* why) {
            if (warnings)
                warnings->push_back("client " + std::to_string(client.client_id) + " sample " +
                                    std::to_string(s) + ": " + why +
                                    "; skipped in difficulty estimate");
        };
        if (sample.noisy_mask.empty_foreground()) {
            note("noisy annotation empty");
            continue;
        }
        if (sample.noisy_mask.full_foreground()) {
            note("noisy annotation covers the whole image");
            continue;
        }
        const BandRegions bands = maximal_bands(sample.noisy_mask);
        if (bands.inner.empty() || bands.outer.empty()) {
            note("degenerate contour bands");
            continue;
        }
        const Tensor probs = forward(warmup_model, detail::sample_image_tensor(sample)).probs;
        const double in_sum = detail::band_ce_sum(probs, sample.noisy_mask, bands.inner, prob_clamp);
        const double out_sum =
            detail::band_ce_sum(probs, sample.noisy_mask, bands.outer, prob_clamp);
        if (pooled) {
            q1_acc += in_sum;
            q2_acc += out_sum;
            inner_px += static_cast<double>(bands.inner.size());
            outer_px += static_cast<double>(bands.outer.size());
        } else {
            q1_acc += in_sum / static_cast<double>(bands.inner.size());
            q2_acc += out_sum / static_cast<double>(bands.outer.size());
        }
        ++kept;
    }
    if (kept == 0)
        throw AllSamplesDegenerateError("client " + std::to_string(client.client_id) +
                                        ": no usable sample for difficulty estimation");
    DifficultyPair d;
    if (pooled) {
        d.q1 = q1_acc / inner_px;
        d.q2 = q2_acc / outer_px;
    } else {
        d.q1 = q1_acc / kept;
        d.q2 = q2_acc / kept;
    }
    return d;
}

// Groups clients by their difficulty pairs. The component whose mean has the
// larger q1 - q2 margin becomes G_l (label-noise-dominant side). Fewer than
// four clients, or identical points, fall back to a flagged single group.
inline GmmFit fit_client_gmm(const std::vector<DifficultyPair>& difficulties, std::uint64_t seed) {
    const int k = static_cast<int>(difficulties.size());
    if (k == 0) throw EmptyFederationError("fit_client_gmm: no difficulties");
    std::vector<std::array<double, 2>> pts;
    pts.reserve(k);
    for (const auto& d : difficulties) pts.push_back({d.q1, d.q2});

    const auto fallback = [&]() {
        GmmFit f;
        f.degenerate = true;
        std::array<double, 2> mean{0.0, 0.0};
        for (const auto& p : pts) {
            mean[0] += p[0] / k;
            mean[1] += p[1] / k;
        }
        std::array<double, 2> var{0.0, 0.0};
        for (const auto& p : pts) {
            var[0] += (p[0] - mean[0]) * (p[0] - mean[0]) / k;
            var[1] += (p[1] - mean[1]) * (p[1] - mean[1]) / k;
        }
        var = {std::max(var[0], 1e-6), std::max(var[1], 1e-6)};
        f.means = {mean, mean};
        f.covariances = {var, var};
        f.mixing = {1.0, 0.0};
        f.responsibilities.assign(k, {1.0, 0.0});
        f.group_l.resize(k);
        std::iota(f.group_l.begin(), f.group_l.end(), 1);
        return f;
    };

    if (k < 4) return fallback();
    TwoComponentGmm raw;
    try {
        raw = fit_two_component_gmm(pts, seed);
    } catch (const DegenerateInputError&) {
        return fallback();
    }

    const double margin0 = raw.components[0].mean[0] - raw.components[0].mean[1];
    const double margin1 = raw.components[1].mean[0] - raw.components[1].mean[1];
    const int l_comp = margin0 >= margin1 ? 0 : 1;
    const int s_comp = 1 - l_comp;

    GmmFit f;
    f.means = {raw.components[l_comp].mean, raw.components[s_comp].mean};
    f.covariances = {raw.components[l_comp].var, raw.components[s_comp].var};
    f.mixing = {raw.components[l_comp].weight, raw.components[s_comp].weight};
    f.responsibilities.reserve(k);
    for (int i = 0; i < k; ++i) {
        f.responsibilities.push_back(
            {raw.responsibilities[i][l_comp], raw.responsibilities[i][s_comp]});
        if (raw.assignments[i] == l_comp)
            f.group_l.push_back(i + 1);
        else
            f.group_s.push_back(i + 1);
    }
    return f;
}

// s_i = q1 - q2 on the G_l side, q2 - q1 on the G_s side. Negative values
// are legitimate for borderline clients.
inline std::vector<double> noise_strengths(const std::vector<DifficultyPair>& difficulties,
                                           const GmmFit& gmm) {
    const int k = static_cast<int>(difficulties.size());
    std::vector<char> in_l(k, 0);
    for (int id : gmm.group_l) {
        if (id < 1 || id > k) throw ShapeMismatchError("noise_strengths: group id out of range");
        in_l[id - 1] = 1;
    }
    std::vector<double> s(k, 0.0);
    for (int i = 0; i < k; ++i)
        s[i] = in_l[i] ? difficulties[i].q1 - difficulties[i].q2
                       : difficulties[i].q2 - difficulties[i].q1;
    return s;
}

// Per-group rank weighting: stronger noise gets less mass, the group's total
// mass is r for G_l and 1 - r for G_s. A group with all-equal strengths is
// weighted uniformly; an empty group donates its mass to the other side.
inline std::vector<double> quality_weights(const std::vector<double>& s, const GmmFit& gmm,
                                           double r = 0.5) {
    if (r < 0.0 || r > 1.0) throw ConfigError("balance_r: must lie in [0, 1]");
    const int k = static_cast<int>(s.size());
    std::vector<double> w(k, 0.0);
    double mass_l = r;
    double mass_s = 1.0 - r;
    if (gmm.group_l.empty()) mass_s = 1.0;
    if (gmm.group_s.empty()) mass_l = 1.0;
    const auto spread = [&](const std::vector<int>& ids, double mass) {
        if (ids.empty()) return;
        double smax = s[ids.front() - 1];
        for (int id : ids) smax = std::max(smax, s[id - 1]);
        double denom = 0.0;
        for (int id : ids) denom += smax - s[id - 1];
        if (denom == 0.0) {
            for (int id : ids) w[id - 1] = mass / static_cast<double>(ids.size());
        } else {
            for (int id : ids) w[id - 1] = mass * (smax - s[id - 1]) / denom;
        }
    };
    spread(gmm.group_l, mass_l);
    spread(gmm.group_s, mass_s);
    return w;
}

// Linear blend from pure quantity weights at the first layer to pure quality
// weights at the last. L = 1 has no axis to move along; a fixed even blend
// stands in. Blends of bitwise-equal weight pairs return that value exactly,
// keeping the quality==quantity collapse an identity.
inline std::vector<std::vector<double>> layerwise_weights(const std::vector<double>& quantity,
                                                          const std::vector<double>& quality,
                                                          int layer_count) {
    if (quantity.size() != quality.size())
        throw ShapeMismatchError("layerwise_weights: weight vectors differ in length");
    if (layer_count < 1) throw ConfigError("layerwise_weights: layer count must be >= 1");
    const int k = static_cast<int>(quantity.size());
    std::vector<std::vector<double>> w(k, std::vector<double>(layer_count, 0.0));
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < layer_count; ++j) {
            if (layer_count == 1) {
                w[i][j] = quality[i] == quantity[i] ? quantity[i]
                                                    : 0.5 * quality[i] + 0.5 * quantity[i];
            } else if (j == 0) {
                w[i][j] = quantity[i];
            } else if (j == layer_count - 1) {
                w[i][j] = quality[i];
            } else if (quality[i] == quantity[i]) {
                w[i][j] = quantity[i];
            } else {
                const double t = static_cast<double>(j) / static_cast<double>(layer_count - 1);
                w[i][j] = t * quality[i] + (1.0 - t) * quantity[i];
            }
        }
    }
    return w;
}

// Internal consistency gate run on every frozen plan: simplex sums to 1e-9,
// no negative weight, exact quantity/quality columns at the ends.
inline void validate_plan(const AggregationPlan& plan) {
    const int k = static_cast<int>(plan.quantity_weights.size());
    const int layer_count = k > 0 ? static_cast<int>(plan.layer_weights.front().size()) : 0;
    const auto check_simplex = [](const std::vector<double>& w, const std::string& what) {
        double sum = 0.0;
        for (double v : w) {
            if (v < 0.0) throw WeightSimplexError(what + ": negative weight");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw WeightSimplexError(what + ": sums to " + detail::format_g17(sum));
    };
    check_simplex(plan.quantity_weights, "plan quantity weights");
    check_simplex(plan.quality_weights, "plan quality weights");
    if (static_cast<int>(plan.layer_weights.size()) != k ||
        static_cast<int>(plan.strengths.size()) != k)
        throw ShapeMismatchError("plan: field lengths disagree");
    for (int j = 0; j < layer_count; ++j) {
        std::vector<double> col(k);
        for (int i = 0; i < k; ++i) col[i] = plan.layer_weights[i][j];
        check_simplex(col, "plan layer " + std::to_string(j + 1) + " weights");
    }
    if (layer_count > 1) {
        for (int i = 0; i < k; ++i) {
            if (plan.layer_weights[i][0] != plan.quantity_weights[i] ||
                plan.layer_weights[i][layer_count - 1] != plan.quality_weights[i])
                throw WeightSimplexError("plan: endpoint columns must equal the base weights");
        }
    }
}

// One communication round of local work: fresh optimizer, E epochs of
// shuffled minibatch Adam on the client's own (noisy) annotations.
inline void train_client_round(ClientState& client, const LearnerConfig& lc, int epochs, Rng rng) {
    client.optimizer_state = init_adam(client.model);
    const int n = static_cast<int>(client.dataset.size());
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int e = 0; e < epochs; ++e) {
        rng.shuffle(order);
        for (int start = 0; start < n; start += lc.batch_size) {
            const int stop = std::min(n, start + lc.batch_size);
            ModelParams grads = zeros_like(client.model);
            for (int t = start; t < stop; ++t) {
                const NoisySample& s = client.dataset[order[t]];
                const LossGrad g = backward(client.model, detail::sample_image_tensor(s),
                                            s.noisy_mask, lc.loss_kind, lc.prob_clamp,
                                            lc.dice_smooth);
                params_add_scaled(grads, g.grads, 1.0 / static_cast<double>(stop - start));
            }
            adam_step(client.model, grads, client.optimizer_state, lc.lr, lc.beta1, lc.beta2);
        }
    }
}

inline std::pair<double, double> evaluate_on_clean(const ModelParams& model,
                                                   const std::vector<SyntheticSample>& test_set) {
    if (test_set.empty()) throw ConfigError("test_samples: empty test set");
    std::vector<double> scores;
    scores.reserve(test_set.size());
    for (const SyntheticSample& s : test_set) {
        Tensor img({1, s.clean_mask.height(), s.clean_mask.width()});
        img.data = s.image;
        const BinaryMask pred = threshold_probs(forward(model, img).probs, 0.5);
        scores.push_back(dice_score(pred, s.clean_mask));
    }
    double mean = 0.0;
    for (double v : scores) mean += v;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double v : scores) var += (v - mean) * (v - mean);
    const double sd = scores.size() > 1
                          ? std::sqrt(var / static_cast<double>(scores.size() - 1))
                          : 0.0;
    return {mean, sd};
}

// Seams for callers that watch a run. adjust_plan runs once, right after the
// plan is computed and before it is validated and frozen; adjustments must
// keep the plan internally consistent (matrix rebuilt from the edited weight
// vectors). on_round fires after each round's evaluation; throwing from it
// abandons the run.
struct RunHooks {
    std::function<void(AggregationPlan&)> adjust_plan;
    std::function<void(const RoundMetrics&)> on_round;
};

// The whole protocol: FedAvg warm-up for warmup_rounds, one difficulty /
// grouping / weighting pass on the post-aggregation warm-up model, then
// frozen layer-wise aggregation for the remaining rounds. Deterministic in
// the config alone; thread count never changes results because every client
// round draws from its own (seed, round, client) stream.
inline RunReport run_federation(const ExperimentConfig& config, const RunHooks* hooks = nullptr) {
    config.validate(/*allow_warmup_equal_rounds=*/true);
    const Rng root(config.seed);

    auto clean = generate_synthetic_dataset(config, root);
    auto corruption = corrupt_federation(clean, config.noise, root, config.cem_l_sub,
                                         config.cem_degree);
    const auto test_set = generate_test_samples(config, root);

    const int k = config.clients;
    const int layer_count = config.learner.num_layers();

    RunReport report;
    report.seed = config.seed;
    report.config_hash = config_hash(config);
    report.mode = to_string(config.mode);
    report.warnings = std::move(corruption.warnings);

    std::vector<ClientState> clients(k);
    std::vector<int> sizes(k);
    for (int i = 0; i < k; ++i) {
        clients[i].client_id = i + 1;
        clients[i].dataset = std::move(corruption.clients[i]);
        clients[i].cem_params = corruption.cems[i];
        sizes[i] = static_cast<int>(clients[i].dataset.size());
        ClientNoiseInfo info;
        info.client_id = i + 1;
        info.mu = corruption.cems[i].mu;
        info.sigma = corruption.cems[i].sigma;
        info.l_sub = corruption.cems[i].l_sub;
        info.degree_p = corruption.cems[i].degree_p;
        for (const NoisySample& s : clients[i].dataset)
            info.sample_noise_dice.push_back(dice_score(s.noisy_mask, s.clean_mask));
        report.noise_info.push_back(std::move(info));
    }

    Rng init_rng = root.child({detail::kTagInit});
    ModelParams global = init_params(config.learner, init_rng);
    const std::vector<double> wq = fedavg_weights(sizes);
    report.quantity_weights = wq;

    const auto compute_plan = [&](const ModelParams& warmup, int at_round) {
        report.plan_round = at_round;
        report.difficulties.clear();
        for (int i = 0; i < k; ++i) {
            report.difficulties.push_back(compute_difficulty(clients[i], warmup,
                                                             config.pooled_difficulty,
                                                             config.learner.prob_clamp,
                                                             &report.warnings));
            report.messages.push_back({i + 1, "difficulty", 2});
        }
        report.gmm = fit_client_gmm(report.difficulties,
                                    root.child({detail::kTagGmm}).base_seed());
        const std::vector<double> s = noise_strengths(report.difficulties, report.gmm);
        double r_eff = config.balance_r;
        if (config.mode == AggregationMode::kIntraGw)
            r_eff = static_cast<double>(report.gmm.group_l.size()) / static_cast<double>(k);
        AggregationPlan plan;
        plan.quantity_weights = wq;
        plan.quality_weights = quality_weights(s, report.gmm, r_eff);
        plan.strengths = s;
        plan.layer_weights = layerwise_weights(plan.quantity_weights, plan.quality_weights,
                                               layer_count);
        plan.balance_r = r_eff;
        if (hooks && hooks->adjust_plan) hooks->adjust_plan(plan);
        validate_plan(plan);
        report.plan = std::move(plan);
        report.plan_computed = true;

        double dice_acc = 0.0;
        int count = 0;
        for (const ClientState& c : clients) {
            for (const NoisySample& s2 : c.dataset) {
                const BinaryMask pred =
                    threshold_probs(forward(warmup, detail::sample_image_tensor(s2)).probs, 0.5);
                dice_acc += dice_score(pred, s2.noisy_mask);
                ++count;
            }
        }
        report.warmup_train_dice = dice_acc / std::max(count, 1);
    };

    const bool quality_mode = config.mode != AggregationMode::kFedavg;
    if (quality_mode && config.warmup_rounds == 0) compute_plan(global, 0);

    for (int round = 1; round <= config.rounds; ++round) {
        for (ClientState& c : clients) c.model = global;  // broadcast

        const auto train_one = [&](int i) {
            Rng rng = root.child({detail::kTagLocal, static_cast<std::uint64_t>(round),
                                  static_cast<std::uint64_t>(i + 1)});
            train_client_round(clients[i], config.learner, config.local_epochs, std::move(rng));
        };
        if (config.threads <= 1 || k == 1) {
            for (int i = 0; i < k; ++i) train_one(i);
        } else {
            const int pool_size = std::min(config.threads, k);
            std::vector<std::exception_ptr> failures(pool_size);
            std::vector<std::thread> pool;
            pool.reserve(pool_size);
            for (int t = 0; t < pool_size; ++t) {
                pool.emplace_back([&, t]() {
                    try {
                        for (int i = t; i < k; i += pool_size) train_one(i);
                    } catch (...) {
                        failures[t] = std::current_exception();
                    }
                });
            }
            for (auto& th : pool) th.join();
            for (const auto& f : failures)
                if (f) std::rethrow_exception(f);
        }

        std::vector<ModelParams> uploads;
        uploads.reserve(k);
        for (const ClientState& c : clients) {
            uploads.push_back(c.model);
            report.messages.push_back({c.client_id, "model_update",
                                       detail::param_count(c.model)});
        }
        const bool matrix_phase =
            quality_mode && report.plan_computed && round > config.warmup_rounds;
        global = matrix_phase ? aggregate(uploads, report.plan.layer_weights)
                              : aggregate(uploads, wq);
        if (quality_mode && round == config.warmup_rounds &&
            config.warmup_rounds < config.rounds)
            compute_plan(global, round);

        const auto [mean, sd] = evaluate_on_clean(global, test_set);
        report.rounds.push_back({round, matrix_phase ? to_string(config.mode)
                                                     : std::string("fedavg"),
                                 mean, sd});
        if (hooks && hooks->on_round) hooks->on_round(report.rounds.back());
    }
    report.final_model = global;
    return report;
}

inline nlohmann::json report_to_json(const RunReport& r) {
    nlohmann::json j;
    j["seed"] = r.seed;
    j["config_hash"] = r.config_hash;
    j["mode"] = r.mode;
    j["rounds"] = nlohmann::json::array();
    for (const RoundMetrics& m : r.rounds)
        j["rounds"].push_back({{"round", m.round},
                               {"mode", m.mode},
                               {"test_dice_mean", m.test_dice_mean},
                               {"test_dice_std", m.test_dice_std}});
    nlohmann::json fin;
    fin["quantity_weights"] = r.quantity_weights;
    if (!r.rounds.empty()) {
        fin["test_dice_mean"] = r.rounds.back().test_dice_mean;
        fin["test_dice_std"] = r.rounds.back().test_dice_std;
    }
    if (r.plan_computed) {
        fin["group_l"] = r.gmm.group_l;
        fin["group_s"] = r.gmm.group_s;
        fin["strengths"] = r.plan.strengths;
        fin["quality_weights"] = r.plan.quality_weights;
        fin["layer_weights"] = r.plan.layer_weights;
        fin["balance_r"] = r.plan.balance_r;
        fin["plan_round"] = r.plan_round;
        fin["warmup_train_dice"] = r.warmup_train_dice;
        nlohmann::json diffs = nlohmann::json::array();
        for (const DifficultyPair& d : r.difficulties) diffs.push_back({d.q1, d.q2});
        fin["difficulties"] = diffs;
        fin["gmm"] = {{"means", r.gmm.means},
                      {"covariances", r.gmm.covariances},
                      {"mixing", r.gmm.mixing},
                      {"responsibilities", r.gmm.responsibilities},
                      {"degenerate", r.gmm.degenerate}};
    }
    j["final"] = std::move(fin);
    j["warnings"] = r.warnings;
    nlohmann::json profiles = nlohmann::json::array();
    for (const ClientNoiseInfo& info : r.noise_info)
        profiles.push_back({{"client_id", info.client_id},
                            {"mu", info.mu},
                            {"sigma", info.sigma},
                            {"l_sub", info.l_sub},
                            {"degree_p", info.degree_p},
                            {"sample_noise_dice", info.sample_noise_dice}});
    j["noise_profiles"] = profiles;
    return j;
}

// Flat round,metric,value rows; 17 significant digits so every value
// round-trips to the exact double.
inline std::string metrics_csv(const RunReport& r) {
    std::string out = "round,metric,value\n";
    for (const RoundMetrics& m : r.rounds) {
        out += std::to_string(m.round) + ",test_dice_mean," +
               detail::format_g17(m.test_dice_mean) + "\n";
        out += std::to_string(m.round) + ",test_dice_std," +
               detail::format_g17(m.test_dice_std) + "\n";
    }
    if (r.plan_computed)
        out += std::to_string(r.plan_round) + ",warmup_train_dice," +
               detail::format_g17(r.warmup_train_dice) + "\n";
    return out;
}

}  // namespace fedseg
