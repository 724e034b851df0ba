#include "fedseg/federation.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "fedseg/config.hpp"
#include "fedseg/gmm.hpp"
#include "fedseg/learner.hpp"
#include "test_support.hpp"

namespace fedseg {
namespace {

ModelParams scalar_model(const std::vector<std::pair<double, double>>& layers) {
    ModelParams m;
    for (std::size_t j = 0; j < layers.size(); ++j) {
        ParamLayer layer;
        layer.layer_index = static_cast<int>(j) + 1;
        layer.weights = Tensor({1});
        layer.weights.data[0] = layers[j].first;
        layer.bias = Tensor({1});
        layer.bias.data[0] = layers[j].second;
        m.layers.push_back(std::move(layer));
    }
    return m;
}

NoisySample sample_from_mask(const BinaryMask& mask) {
    NoisySample s;
    s.clean_mask = mask;
    s.noisy_mask = mask;
    s.noise_map = BinaryMask(mask.height(), mask.width());
    s.image.resize(static_cast<std::size_t>(mask.height()) * mask.width());
    for (int r = 0; r < mask.height(); ++r)
        for (int c = 0; c < mask.width(); ++c)
            s.image[static_cast<std::size_t>(r) * mask.width() + c] = mask.at(r, c) ? 1.0 : 0.0;
    return s;
}

// Identity-style probe net: logits = 50 * pixel - 25, so a 0/1 image is
// reproduced nearly exactly after the sigmoid.
ModelParams probe_net() {
    LearnerConfig lc;
    lc.channels = {1, 1};
    Rng rng(1);
    ModelParams m = init_params(lc, rng);
    for (double& v : m.layers[0].weights.data) v = 0.0;
    m.layers[0].weights.data[4] = 50.0;  // kernel center
    m.layers[0].bias.data[0] = -25.0;
    return m;
}

ModelParams zero_net() {
    LearnerConfig lc;
    lc.channels = {1, 1};
    Rng rng(1);
    ModelParams m = init_params(lc, rng);
    for (auto& layer : m.layers) {
        for (double& v : layer.weights.data) v = 0.0;
        for (double& v : layer.bias.data) v = 0.0;
    }
    return m;
}

ExperimentConfig smoke_config() {
    ExperimentConfig c;
    c.seed = 11;
    c.clients = 4;
    c.samples_per_client = 2;
    c.test_samples = 2;
    c.rounds = 2;
    c.warmup_rounds = 1;
    c.local_epochs = 1;
    c.mode = AggregationMode::kFull;
    c.balance_r = 0.5;
    c.data.height = 32;
    c.data.width = 32;
    c.data.axis_min = 5.0;
    c.data.axis_max = 8.0;
    c.data.wobble = 0.1;
    c.data.contrast = 0.6;
    c.data.pixel_noise_std = 0.05;
    c.noise = HeteroNoiseParams{4.0, -3.0, 1.0, 0.5};
    c.learner.channels = {1, 4, 4, 1};
    return c;
}

TEST(FedavgWeights, EqualSizesAreUniform) {
    const auto w = fedavg_weights({5, 5, 5, 5});
    ASSERT_EQ(w.size(), 4u);
    for (double v : w) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(FedavgWeights, ProportionalToSize) {
    const auto w = fedavg_weights({10, 30});
    EXPECT_DOUBLE_EQ(w[0], 0.25);
    EXPECT_DOUBLE_EQ(w[1], 0.75);
}

TEST(FedavgWeights, SingleClientGetsEverything) {
    const auto w = fedavg_weights({7});
    ASSERT_EQ(w.size(), 1u);
    EXPECT_DOUBLE_EQ(w[0], 1.0);
}

TEST(FedavgWeights, RejectsEmptyAndNonPositive) {
    EXPECT_THROW(fedavg_weights({}), EmptyFederationError);
    EXPECT_THROW(fedavg_weights({3, 0}), ConfigError);
}

TEST(Aggregate, IdenticalModelsAreFixedPointForAnyWeights) {
    Rng rng(3);
    LearnerConfig lc;
    lc.channels = {1, 3, 1};
    ModelParams m = init_params(lc, rng);
    const std::vector<ModelParams> models{m, m, m};
    const std::vector<double> weights{0.123456, 0.654321, 0.222223};
    EXPECT_TRUE(params_equal(aggregate(models, weights), m));

    const std::vector<std::vector<double>> rows{
        {0.1, 0.9}, {0.5, 0.05}, {0.4, 0.05}};
    EXPECT_TRUE(params_equal(aggregate(models, rows), m));
}

TEST(Aggregate, DegenerateWeightsPickOneModel) {
    Rng rng(4);
    LearnerConfig lc;
    lc.channels = {1, 2, 1};
    const ModelParams a = init_params(lc, rng);
    const ModelParams b = init_params(lc, rng);
    EXPECT_TRUE(params_equal(aggregate({a, b}, std::vector<double>{1.0, 0.0}), a));
    EXPECT_TRUE(params_equal(aggregate({a, b}, std::vector<double>{0.0, 1.0}), b));
}

TEST(Aggregate, HandComputedLayerwiseCombination) {
    const ModelParams a = scalar_model({{1.0, 10.0}, {2.0, 20.0}});
    const ModelParams b = scalar_model({{3.0, 30.0}, {4.0, 40.0}});
    const std::vector<std::vector<double>> rows{{0.3, 0.6}, {0.7, 0.4}};
    const ModelParams out = aggregate({a, b}, rows);
    EXPECT_NEAR(out.layers[0].weights.data[0], 0.3 * 1.0 + 0.7 * 3.0, 1e-12);
    EXPECT_NEAR(out.layers[0].bias.data[0], 0.3 * 10.0 + 0.7 * 30.0, 1e-12);
    EXPECT_NEAR(out.layers[1].weights.data[0], 0.6 * 2.0 + 0.4 * 4.0, 1e-12);
    EXPECT_NEAR(out.layers[1].bias.data[0], 0.6 * 20.0 + 0.4 * 40.0, 1e-12);
}

TEST(Aggregate, RejectsWeightsOffTheSimplex) {
    const ModelParams a = scalar_model({{1.0, 0.0}});
    const ModelParams b = scalar_model({{2.0, 0.0}});
    EXPECT_THROW(aggregate({a, b}, std::vector<double>{0.6, 0.5}), WeightSimplexError);
    const std::vector<std::vector<double>> rows{{0.6}, {0.5}};
    EXPECT_THROW(aggregate({a, b}, rows), WeightSimplexError);
    EXPECT_NO_THROW(aggregate({a, b}, std::vector<double>{0.5, 0.5 + 5e-7}));
}

TEST(Aggregate, RejectsShapeMismatch) {
    const ModelParams a = scalar_model({{1.0, 0.0}});
    const ModelParams b = scalar_model({{1.0, 0.0}, {2.0, 0.0}});
    EXPECT_THROW(aggregate({a, b}, std::vector<double>{0.5, 0.5}), ShapeMismatchError);
    EXPECT_THROW(aggregate({a, a}, std::vector<double>{1.0}), ShapeMismatchError);
}

TEST(ComputeDifficulty, NearPerfectPredictionGivesNearZero) {
    ClientState client;
    client.client_id = 1;
    client.dataset.push_back(sample_from_mask(testsupport::make_disk_mask(16, 16, 8.0, 8.0, 4.5)));
    const DifficultyPair d = compute_difficulty(client, probe_net());
    EXPECT_LT(d.q1, 1e-6);
    EXPECT_LT(d.q2, 1e-6);
}

TEST(ComputeDifficulty, UninformativeModelGivesLogTwo) {
    ClientState client;
    client.client_id = 1;
    client.dataset.push_back(sample_from_mask(testsupport::make_disk_mask(16, 16, 8.0, 8.0, 4.5)));
    client.dataset.push_back(sample_from_mask(testsupport::make_rect_mask(16, 16, 4, 4, 11, 11)));
    const DifficultyPair d = compute_difficulty(client, zero_net());
    EXPECT_NEAR(d.q1, std::log(2.0), 1e-12);
    EXPECT_NEAR(d.q2, std::log(2.0), 1e-12);
}

// Brute-force oracle: recompute both band means with direct pixel loops.
TEST(ComputeDifficulty, MatchesDirectPixelSummation) {
    const BinaryMask mask = testsupport::make_disk_mask(16, 16, 7.0, 8.0, 4.0);
    ClientState client;
    client.client_id = 1;
    client.dataset.push_back(sample_from_mask(mask));

    LearnerConfig lc;
    lc.channels = {1, 3, 1};
    Rng rng(9);
    const ModelParams model = init_params(lc, rng);

    const DifficultyPair d = compute_difficulty(client, model);

    Tensor img({1, 16, 16});
    img.data = client.dataset[0].image;
    const Tensor probs = forward(model, img).probs;
    const BandRegions bands = maximal_bands(mask);
    ASSERT_FALSE(bands.inner.empty());
    ASSERT_FALSE(bands.outer.empty());
    double q1 = 0.0, q2 = 0.0;
    for (const Pixel& p : bands.inner) {
        const double pr = std::min(std::max(probs.data[p[0] * 16 + p[1]], 1e-7), 1.0 - 1e-7);
        q1 += mask.at(p[0], p[1]) ? -std::log(pr) : -std::log(1.0 - pr);
    }
    for (const Pixel& p : bands.outer) {
        const double pr = std::min(std::max(probs.data[p[0] * 16 + p[1]], 1e-7), 1.0 - 1e-7);
        q2 += mask.at(p[0], p[1]) ? -std::log(pr) : -std::log(1.0 - pr);
    }
    q1 /= static_cast<double>(bands.inner.size());
    q2 /= static_cast<double>(bands.outer.size());
    EXPECT_NEAR(d.q1, q1, 1e-12);
    EXPECT_NEAR(d.q2, q2, 1e-12);
    EXPECT_GE(d.q1, 0.0);
    EXPECT_GE(d.q2, 0.0);
}

TEST(ComputeDifficulty, SkipsDegenerateSamplesAndWarns) {
    const BinaryMask good = testsupport::make_disk_mask(16, 16, 8.0, 8.0, 4.0);
    ClientState one;
    one.client_id = 1;
    one.dataset.push_back(sample_from_mask(good));

    ClientState two = one;
    NoisySample empty = sample_from_mask(good);
    empty.noisy_mask = BinaryMask(16, 16);  // annotation lost entirely
    two.dataset.push_back(std::move(empty));

    std::vector<std::string> warnings;
    const DifficultyPair da = compute_difficulty(one, zero_net());
    const DifficultyPair db = compute_difficulty(two, zero_net(), false, 1e-7, &warnings);
    EXPECT_DOUBLE_EQ(da.q1, db.q1);
    EXPECT_DOUBLE_EQ(da.q2, db.q2);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("sample 1"), std::string::npos);

    ClientState hopeless;
    hopeless.client_id = 3;
    NoisySample bad = sample_from_mask(good);
    bad.noisy_mask = BinaryMask(16, 16);
    hopeless.dataset.push_back(std::move(bad));
    EXPECT_THROW(compute_difficulty(hopeless, zero_net()), AllSamplesDegenerateError);
}

std::vector<DifficultyPair> two_cluster_difficulties() {
    // 10 points near (2.0, 0.5), 10 near (0.5, 2.0); jitter sigma 0.15 keeps
    // the clusters ~10 within-cluster deviations apart.
    std::vector<DifficultyPair> d;
    Rng rng(21);
    for (int i = 0; i < 10; ++i)
        d.push_back({2.0 + 0.15 * rng.normal(), 0.5 + 0.15 * rng.normal()});
    for (int i = 0; i < 10; ++i)
        d.push_back({0.5 + 0.15 * rng.normal(), 2.0 + 0.15 * rng.normal()});
    return d;
}

TEST(FitClientGmm, SeparatedClustersAreRecoveredExactly) {
    const auto diffs = two_cluster_difficulties();
    const GmmFit fit = fit_client_gmm(diffs, 77);
    EXPECT_FALSE(fit.degenerate);
    ASSERT_EQ(fit.group_l.size(), 10u);
    ASSERT_EQ(fit.group_s.size(), 10u);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(fit.group_l[i], i + 1);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(fit.group_s[i], i + 11);
    EXPECT_GT(fit.means[0][0] - fit.means[0][1], fit.means[1][0] - fit.means[1][1]);
    EXPECT_NEAR(fit.means[0][0], 2.0, 0.2);
    EXPECT_NEAR(fit.means[1][1], 2.0, 0.2);
    for (int i = 0; i < 10; ++i) EXPECT_GT(fit.responsibilities[i][0], 0.99);
    for (int i = 10; i < 20; ++i) EXPECT_GT(fit.responsibilities[i][1], 0.99);
}

TEST(FitClientGmm, SwappingAxesSwapsGroupsExactly) {
    const auto diffs = two_cluster_difficulties();
    std::vector<DifficultyPair> mirrored;
    for (const auto& d : diffs) mirrored.push_back({d.q2, d.q1});
    const GmmFit a = fit_client_gmm(diffs, 77);
    const GmmFit b = fit_client_gmm(mirrored, 77);
    EXPECT_EQ(a.group_l, b.group_s);
    EXPECT_EQ(a.group_s, b.group_l);
}

TEST(FitClientGmm, PointMassesRecoverExactMeans) {
    const std::vector<DifficultyPair> diffs{{1.0, 0.0}, {1.0, 0.0}, {0.0, 1.0}, {0.0, 1.0}};
    const GmmFit fit = fit_client_gmm(diffs, 5);
    EXPECT_FALSE(fit.degenerate);
    EXPECT_NEAR(fit.means[0][0], 1.0, 1e-6);
    EXPECT_NEAR(fit.means[0][1], 0.0, 1e-6);
    EXPECT_NEAR(fit.means[1][0], 0.0, 1e-6);
    EXPECT_NEAR(fit.means[1][1], 1.0, 1e-6);
    EXPECT_EQ(fit.group_l, (std::vector<int>{1, 2}));
    EXPECT_EQ(fit.group_s, (std::vector<int>{3, 4}));
}

TEST(FitClientGmm, IdenticalPointsFallBackToSingleGroup) {
    const std::vector<DifficultyPair> diffs(6, DifficultyPair{0.7, 0.7});
    const GmmFit fit = fit_client_gmm(diffs, 5);
    EXPECT_TRUE(fit.degenerate);
    EXPECT_EQ(fit.group_l.size(), 6u);
    EXPECT_TRUE(fit.group_s.empty());
}

TEST(FitClientGmm, TinyFederationsFallBackToSingleGroup) {
    const std::vector<DifficultyPair> diffs{{1.0, 0.2}, {0.1, 0.9}, {0.4, 0.4}};
    const GmmFit fit = fit_client_gmm(diffs, 5);
    EXPECT_TRUE(fit.degenerate);
    EXPECT_EQ(fit.group_l, (std::vector<int>{1, 2, 3}));
    EXPECT_TRUE(fit.group_s.empty());
}

TEST(NoiseStrengths, SignFollowsGroupMembership) {
    GmmFit gmm;
    gmm.group_l = {1, 3};
    gmm.group_s = {2};
    const std::vector<DifficultyPair> diffs{{1.2, 0.4}, {0.4, 1.2}, {0.5, 0.6}};
    const auto s = noise_strengths(diffs, gmm);
    EXPECT_NEAR(s[0], 0.8, 1e-12);
    EXPECT_NEAR(s[1], 0.8, 1e-12);
    EXPECT_NEAR(s[2], -0.1, 1e-12);  // borderline client, negative is allowed
}

TEST(QualityWeights, RankWithinGroupsAndSingletonUniform) {
    GmmFit gmm;
    gmm.group_l = {1, 2};
    gmm.group_s = {3};
    const std::vector<double> s{2.0, 1.0, 0.3};
    const auto w = quality_weights(s, gmm, 0.5);
    EXPECT_DOUBLE_EQ(w[0], 0.0);  // strongest-noise client is zeroed out
    EXPECT_DOUBLE_EQ(w[1], 0.5);
    EXPECT_DOUBLE_EQ(w[2], 0.5);
}

TEST(QualityWeights, AllEqualStrengthsAreUniformWithinGroup) {
    GmmFit gmm;
    gmm.group_l = {1, 2, 3};
    gmm.group_s = {4, 5};
    const std::vector<double> s{0.7, 0.7, 0.7, 0.2, 0.2};
    const auto w = quality_weights(s, gmm, 0.3);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(w[i], 0.3 / 3.0);
    for (int i = 3; i < 5; ++i) EXPECT_DOUBLE_EQ(w[i], 0.7 / 2.0);
}

TEST(QualityWeights, BoundaryBalanceSendsAllMassToOneGroup) {
    GmmFit gmm;
    gmm.group_l = {1, 2};
    gmm.group_s = {3, 4};
    const std::vector<double> s{0.9, 0.1, 0.5, 0.2};
    const auto w = quality_weights(s, gmm, 1.0);
    EXPECT_DOUBLE_EQ(w[2], 0.0);
    EXPECT_DOUBLE_EQ(w[3], 0.0);
    EXPECT_NEAR(w[0] + w[1], 1.0, 1e-12);
}

TEST(QualityWeights, EmptyGroupDonatesItsMass) {
    GmmFit gmm;
    gmm.group_l = {1, 2, 3};
    const std::vector<double> s{0.5, 0.4, 0.1};
    const auto w = quality_weights(s, gmm, 0.5);
    double sum = 0.0;
    for (double v : w) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_DOUBLE_EQ(w[0], 0.0);  // still the strongest-noise client
}

TEST(QualityWeights, SimplexHoldsForRandomInputs) {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 4 + static_cast<int>(rng.uniform_index(8));
        GmmFit gmm;
        std::vector<double> s(k);
        for (int i = 0; i < k; ++i) {
            s[i] = rng.uniform(-1.0, 2.0);
            if (rng.uniform() < 0.5)
                gmm.group_l.push_back(i + 1);
            else
                gmm.group_s.push_back(i + 1);
        }
        const double r = rng.uniform();
        const auto w = quality_weights(s, gmm, r);
        double sum = 0.0;
        for (double v : w) {
            EXPECT_GE(v, 0.0);
            sum += v;
        }
        EXPECT_NEAR(sum, 1.0, 1e-9);
    }
}

TEST(LayerwiseWeights, HandComputedMidColumn) {
    const auto w = layerwise_weights({0.8, 0.2}, {0.3, 0.7}, 3);
    EXPECT_NEAR(w[0][1], 0.55, 1e-12);
    EXPECT_NEAR(w[1][1], 0.45, 1e-12);
}

TEST(LayerwiseWeights, EndpointColumnsAreExact) {
    Rng rng(8);
    std::vector<double> wq(5), wbar(5);
    double a = 0.0, b = 0.0;
    for (int i = 0; i < 5; ++i) {
        wq[i] = rng.uniform();
        wbar[i] = rng.uniform();
        a += wq[i];
        b += wbar[i];
    }
    for (int i = 0; i < 5; ++i) {
        wq[i] /= a;
        wbar[i] /= b;
    }
    const auto w = layerwise_weights(wq, wbar, 4);
    for (int i = 0; i < 5; ++i) {
        EXPECT_EQ(w[i][0], wq[i]);   // bitwise, by construction
        EXPECT_EQ(w[i][3], wbar[i]);
    }
}

TEST(LayerwiseWeights, BlendIsStrictlyMonotoneWhenQualityExceedsQuantity) {
    const auto w = layerwise_weights({0.2, 0.8}, {0.6, 0.4}, 5);
    for (int j = 1; j < 5; ++j) {
        EXPECT_GT(w[0][j], w[0][j - 1]);  // quality > quantity: increasing
        EXPECT_LT(w[1][j], w[1][j - 1]);  // quality < quantity: decreasing
    }
}

TEST(LayerwiseWeights, SingleLayerUsesEvenBlend) {
    const auto w = layerwise_weights({0.8, 0.2}, {0.2, 0.8}, 1);
    EXPECT_NEAR(w[0][0], 0.5, 1e-12);
    EXPECT_NEAR(w[1][0], 0.5, 1e-12);
}

TEST(LayerwiseWeights, EqualInputsCollapseBitwise) {
    const std::vector<double> wq{0.3, 0.45, 0.25};
    const auto w = layerwise_weights(wq, wq, 4);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_EQ(w[i][j], wq[i]);
}

TEST(ValidatePlan, CatchesBrokenPlans) {
    AggregationPlan plan;
    plan.quantity_weights = {0.5, 0.5};
    plan.quality_weights = {0.25, 0.75};
    plan.strengths = {0.1, -0.1};
    plan.layer_weights = layerwise_weights(plan.quantity_weights, plan.quality_weights, 3);
    EXPECT_NO_THROW(validate_plan(plan));
    AggregationPlan bad = plan;
    bad.layer_weights[0][1] += 1e-6;
    EXPECT_THROW(validate_plan(bad), WeightSimplexError);
    AggregationPlan negative = plan;
    negative.quality_weights = {-0.25, 1.25};
    negative.layer_weights = layerwise_weights(negative.quantity_weights,
                                               negative.quality_weights, 3);
    EXPECT_THROW(validate_plan(negative), WeightSimplexError);
}

TEST(RunFederation, WarmupSpanningAllRoundsMatchesPureFedavg) {
    ExperimentConfig quality = smoke_config();
    quality.warmup_rounds = quality.rounds;  // quality phase never fires
    ExperimentConfig plain = smoke_config();
    plain.mode = AggregationMode::kFedavg;

    const RunReport a = run_federation(quality);
    const RunReport b = run_federation(plain);
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i) {
        EXPECT_EQ(a.rounds[i].test_dice_mean, b.rounds[i].test_dice_mean);
        EXPECT_EQ(a.rounds[i].test_dice_std, b.rounds[i].test_dice_std);
    }
    EXPECT_TRUE(params_equal(a.final_model, b.final_model));
    EXPECT_FALSE(a.plan_computed);
}

TEST(RunFederation, SingleClientKeepsItsLocalModel) {
    ExperimentConfig c = smoke_config();
    c.clients = 1;
    c.samples_per_client = 3;
    const RunReport report = run_federation(c);

    // replay the same streams locally: every round must hand back exactly
    // the model the lone client trained
    const Rng root(c.seed);
    auto clean = generate_synthetic_dataset(c, root);
    auto corruption = corrupt_federation(clean, c.noise, root, c.cem_l_sub, c.cem_degree);
    ClientState client;
    client.client_id = 1;
    client.dataset = std::move(corruption.clients[0]);
    Rng init_rng = root.child({detail::kTagInit});
    ModelParams global = init_params(c.learner, init_rng);
    for (int round = 1; round <= c.rounds; ++round) {
        client.model = global;
        train_client_round(client, c.learner, c.local_epochs,
                           root.child({detail::kTagLocal, static_cast<std::uint64_t>(round), 1}));
        global = client.model;
    }
    EXPECT_TRUE(params_equal(report.final_model, global));
}

TEST(RunFederation, RepeatRunsAreBitIdentical) {
    const ExperimentConfig c = smoke_config();
    const RunReport a = run_federation(c);
    const RunReport b = run_federation(c);
    EXPECT_EQ(report_to_json(a).dump(), report_to_json(b).dump());
    EXPECT_EQ(metrics_csv(a), metrics_csv(b));
    EXPECT_TRUE(params_equal(a.final_model, b.final_model));
}

TEST(RunFederation, ThreadCountDoesNotChangeResults) {
    ExperimentConfig serial = smoke_config();
    ExperimentConfig threaded = smoke_config();
    threaded.threads = 3;
    const RunReport a = run_federation(serial);
    const RunReport b = run_federation(threaded);
    // configs differ only in thread count, which the report does not echo
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i)
        EXPECT_EQ(a.rounds[i].test_dice_mean, b.rounds[i].test_dice_mean);
    EXPECT_TRUE(params_equal(a.final_model, b.final_model));
}

TEST(RunFederation, ForcingQualityEqualToQuantityReproducesFedavg) {
    ExperimentConfig full = smoke_config();
    ExperimentConfig plain = smoke_config();
    plain.mode = AggregationMode::kFedavg;

    RunHooks hooks;
    hooks.adjust_plan = [](AggregationPlan& plan) {
        plan.quality_weights = plan.quantity_weights;
        plan.layer_weights = layerwise_weights(plan.quantity_weights, plan.quality_weights,
                                               static_cast<int>(plan.layer_weights[0].size()));
    };
    const RunReport a = run_federation(full, &hooks);
    const RunReport b = run_federation(plain);
    ASSERT_EQ(a.rounds.size(), b.rounds.size());
    for (std::size_t i = 0; i < a.rounds.size(); ++i) {
        EXPECT_EQ(a.rounds[i].test_dice_mean, b.rounds[i].test_dice_mean);
        EXPECT_EQ(a.rounds[i].test_dice_std, b.rounds[i].test_dice_std);
    }
    EXPECT_TRUE(params_equal(a.final_model, b.final_model));
    EXPECT_TRUE(a.plan_computed);
}

TEST(RunFederation, OnlyModelsAndDifficultyScalarsCrossTheChannel) {
    const ExperimentConfig c = smoke_config();
    const RunReport report = run_federation(c);
    const std::size_t params = detail::param_count(report.final_model);
    int updates = 0, difficulties = 0;
    for (const Message& m : report.messages) {
        ASSERT_TRUE(m.kind == "model_update" || m.kind == "difficulty") << m.kind;
        if (m.kind == "model_update") {
            EXPECT_EQ(m.payload_doubles, params);
            ++updates;
        } else {
            EXPECT_EQ(m.payload_doubles, 2u);  // q1 and q2, nothing else
            ++difficulties;
        }
        EXPECT_GE(m.client_id, 1);
        EXPECT_LE(m.client_id, c.clients);
    }
    EXPECT_EQ(updates, c.clients * c.rounds);
    EXPECT_EQ(difficulties, c.clients);
}

TEST(RunFederation, ReportStructureFollowsTheProtocol) {
    ExperimentConfig c = smoke_config();
    c.rounds = 3;
    c.warmup_rounds = 1;
    const RunReport report = run_federation(c);
    ASSERT_EQ(report.rounds.size(), 3u);
    EXPECT_EQ(report.rounds[0].mode, "fedavg");
    EXPECT_EQ(report.rounds[1].mode, "full");
    EXPECT_EQ(report.rounds[2].mode, "full");
    EXPECT_TRUE(report.plan_computed);
    EXPECT_EQ(report.plan_round, 1);
    ASSERT_EQ(report.plan.quantity_weights.size(), 4u);
    EXPECT_EQ(report.plan.layer_weights[0].size(), 3u);  // {1,4,4,1} has 3 layers
    EXPECT_EQ(report.gmm.group_l.size() + report.gmm.group_s.size(), 4u);
    ASSERT_EQ(report.noise_info.size(), 4u);
    for (const auto& info : report.noise_info)
        EXPECT_EQ(info.sample_noise_dice.size(), 2u);

    const nlohmann::json j = report_to_json(report);
    EXPECT_TRUE(j.contains("final"));
    EXPECT_TRUE(j["final"].contains("gmm"));
    EXPECT_EQ(j["rounds"].size(), 3u);

    ExperimentConfig plain = c;
    plain.mode = AggregationMode::kFedavg;
    const nlohmann::json jp = report_to_json(run_federation(plain));
    EXPECT_FALSE(jp["final"].contains("gmm"));
    EXPECT_FALSE(jp["final"].contains("quality_weights"));
}

TEST(RunFederation, ZeroWarmupPlansOnTheInitialModel) {
    ExperimentConfig c = smoke_config();
    c.warmup_rounds = 0;
    const RunReport report = run_federation(c);
    EXPECT_TRUE(report.plan_computed);
    EXPECT_EQ(report.plan_round, 0);
    for (const auto& m : report.rounds) EXPECT_EQ(m.mode, "full");
}

TEST(RunFederation, IntraGwUsesGroupSizeMasses) {
    ExperimentConfig c = smoke_config();
    c.mode = AggregationMode::kIntraGw;
    const RunReport report = run_federation(c);
    ASSERT_TRUE(report.plan_computed);
    const double expected =
        static_cast<double>(report.gmm.group_l.size()) / static_cast<double>(c.clients);
    EXPECT_DOUBLE_EQ(report.plan.balance_r, expected);
    double mass_l = 0.0;
    for (int id : report.gmm.group_l) mass_l += report.plan.quality_weights[id - 1];
    if (!report.gmm.group_l.empty() && !report.gmm.group_s.empty())
        EXPECT_NEAR(mass_l, expected, 1e-9);
}

TEST(MetricsCsv, RowsRoundTripExactly) {
    const ExperimentConfig c = smoke_config();
    const RunReport report = run_federation(c);
    const std::string csv = metrics_csv(report);
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "round,metric,value");
    std::size_t row = 0;
    while (std::getline(in, line)) {
        const auto c1 = line.find(',');
        const auto c2 = line.find(',', c1 + 1);
        ASSERT_NE(c2, std::string::npos);
        const int round = std::stoi(line.substr(0, c1));
        const std::string metric = line.substr(c1 + 1, c2 - c1 - 1);
        const double value = std::stod(line.substr(c2 + 1));
        if (metric == "test_dice_mean")
            EXPECT_EQ(value, report.rounds[round - 1].test_dice_mean);
        else if (metric == "test_dice_std")
            EXPECT_EQ(value, report.rounds[round - 1].test_dice_std);
        else if (metric == "warmup_train_dice")
            EXPECT_EQ(value, report.warmup_train_dice);
        else
            FAIL() << "unexpected metric " << metric;
        ++row;
    }
    EXPECT_EQ(row, report.rounds.size() * 2 + 1);
}

}  // namespace
}  // namespace fedseg
