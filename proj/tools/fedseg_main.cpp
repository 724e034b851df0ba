// Command-line driver: gen-data, corrupt, train, evaluate, sweep, verify-noise.
// Machine-readable rows go to stdout (CSV, or JSON lines with --json);
// diagnostics go to stderr. Exit codes: 0 ok, 2 config, 3 io, 4 numeric,
// 5 verification failure, 130 interrupted.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "fedseg/checkpoint.hpp"
#include "fedseg/config.hpp"
#include "fedseg/federation.hpp"
#include "fedseg/persist.hpp"
#include "fedseg/png_io.hpp"
#include "fedseg/synthetic.hpp"

namespace fs = std::filesystem;

namespace {

volatile std::sig_atomic_t g_interrupted = 0;
void handle_sigint(int) { g_interrupted = 1; }

struct Interrupted {};
void check_interrupt() {
    if (g_interrupted) throw Interrupted{};
}

std::string fmt(double v) { return fedseg::detail::format_g17(v); }

void emit_kv(bool json, const std::string& field, const nlohmann::json& value) {
    if (json) {
        std::cout << nlohmann::json{{"field", field}, {"value", value}}.dump() << "\n";
    } else {
        std::string text = value.is_string() ? value.get<std::string>()
                           : value.is_number_float() ? fmt(value.get<double>())
                                                     : value.dump();
        std::cout << field << "," << text << "\n";
    }
}

void emit_metric(bool json, int round, const std::string& metric, double value) {
    if (json)
        std::cout << nlohmann::json{{"round", round}, {"metric", metric}, {"value", value}}.dump()
                  << "\n";
    else
        std::cout << round << "," << metric << "," << fmt(value) << "\n";
    std::cout.flush();
}

std::string client_dir_name(int id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "client_%02d", id);
    return buf;
}

std::string sample_stem(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%04d", index);
    return buf;
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw fedseg::IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

std::vector<double> parse_value_list(const std::string& text) {
    std::vector<double> values;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        const std::string token = text.substr(pos, comma - pos);
        if (token.empty()) throw fedseg::ConfigError("--values: empty entry in list");
        try {
            std::size_t used = 0;
            values.push_back(std::stod(token, &used));
            if (used != token.size()) throw std::invalid_argument(token);
        } catch (const std::exception&) {
            throw fedseg::ConfigError("--values: cannot parse '" + token + "' as a number");
        }
        if (comma == text.size()) break;
        pos = comma + 1;
    }
    if (values.empty()) throw fedseg::ConfigError("--values: need at least one value");
    return values;
}

fedseg::ExperimentConfig effective_config(const CLI::App* sub, const std::string& config_path,
                                          std::uint64_t seed) {
    fedseg::ExperimentConfig config;
    if (!config_path.empty()) {
        config = fedseg::load_config(config_path);
    } else {
        config.validate();
    }
    if (sub->count("--seed") > 0) config.seed = seed;
    return config;
}

int cmd_gen_data(const fedseg::ExperimentConfig& config, const std::string& out, bool json) {
    const fedseg::Rng root(config.seed);
    const auto clients = fedseg::generate_synthetic_dataset(config, root);
    const auto test = fedseg::generate_test_samples(config, root);

    ensure_dir(out);
    if (!json) std::cout << "client,samples\n";
    for (std::size_t i = 0; i < clients.size(); ++i) {
        const fs::path dir = fs::path(out) / client_dir_name(static_cast<int>(i) + 1);
        ensure_dir(dir);
        for (std::size_t s = 0; s < clients[i].size(); ++s) {
            const std::string stem = (dir / sample_stem(static_cast<int>(s))).string();
            fedseg::write_image_png(stem + "_img.png", clients[i][s].image, config.data.height,
                                    config.data.width);
            fedseg::write_mask_png(stem + "_mask.png", clients[i][s].clean_mask);
        }
        if (json)
            std::cout << nlohmann::json{{"client", i + 1}, {"samples", clients[i].size()}}.dump()
                      << "\n";
        else
            std::cout << i + 1 << "," << clients[i].size() << "\n";
        check_interrupt();
    }
    const fs::path test_dir = fs::path(out) / "test";
    ensure_dir(test_dir);
    for (std::size_t s = 0; s < test.size(); ++s) {
        const std::string stem = (test_dir / sample_stem(static_cast<int>(s))).string();
        fedseg::write_image_png(stem + "_img.png", test[s].image, config.data.height,
                                config.data.width);
        fedseg::write_mask_png(stem + "_mask.png", test[s].clean_mask);
    }
    std::cerr << "wrote " << clients.size() << " client directories and " << test.size()
              << " test samples under " << out << "\n";
    return 0;
}

int cmd_corrupt(const fedseg::ExperimentConfig& config, const std::string& in,
                const std::string& out, bool json) {
    if (!fs::is_directory(in)) throw fedseg::IoError("not a directory: " + in);
    std::vector<fs::path> client_dirs;
    for (const auto& entry : fs::directory_iterator(in))
        if (entry.is_directory() && entry.path().filename().string().rfind("client", 0) == 0)
            client_dirs.push_back(entry.path());
    std::sort(client_dirs.begin(), client_dirs.end());
    if (client_dirs.empty()) client_dirs.push_back(in);  // flat layout: one client

    const int k = static_cast<int>(client_dirs.size());
    const fedseg::Rng root(config.seed);
    fedseg::Rng cem_rng = root.child({fedseg::detail::kTagCems});
    const auto cems = fedseg::assign_client_cems(k, config.noise, cem_rng, config.cem_l_sub,
                                                 config.cem_degree);

    ensure_dir(out);
    nlohmann::json manifest;
    manifest["clients"] = nlohmann::json::array();
    std::vector<std::string> warnings;
    if (!json) std::cout << "client,mu,sigma,mean_noise_dice\n";
    for (int i = 0; i < k; ++i) {
        const auto dataset = fedseg::load_external_masks(client_dirs[i].string());
        for (const std::string& w : dataset.warnings)
            warnings.push_back(client_dirs[i].filename().string() + ": " + w);
        const fs::path dir =
            client_dirs[i] == fs::path(in) ? fs::path(out) : fs::path(out) / client_dirs[i].filename();
        ensure_dir(dir);

        std::vector<double> sample_dice;
        for (std::size_t s = 0; s < dataset.pairs.size(); ++s) {
            const auto& pair = dataset.pairs[s];
            fedseg::Rng rng = root.child({fedseg::detail::kTagCorrupt,
                                          static_cast<std::uint64_t>(i + 1),
                                          static_cast<std::uint64_t>(s)});
            const auto res = fedseg::apply_cem(pair.mask, cems[i], rng);
            if (res.annihilated_components > 0)
                warnings.push_back(client_dirs[i].filename().string() + " " + pair.stem + ": " +
                                   std::to_string(res.annihilated_components) +
                                   " component(s) annihilated by noise");
            if (res.noisy_mask.empty_foreground())
                warnings.push_back(client_dirs[i].filename().string() + " " + pair.stem +
                                   ": noisy annotation is empty");
            sample_dice.push_back(fedseg::dice_score(res.noisy_mask, pair.mask));
            fedseg::write_mask_png((dir / (pair.stem + "_mask.png")).string(), res.noisy_mask);
            std::error_code ec;
            fs::copy_file(client_dirs[i] / (pair.stem + "_img.png"),
                          dir / (pair.stem + "_img.png"), fs::copy_options::overwrite_existing,
                          ec);
            if (ec)
                throw fedseg::IoError("cannot copy image for " + pair.stem + ": " + ec.message());
            check_interrupt();
        }
        double mean_dice = 0.0;
        for (double d : sample_dice) mean_dice += d;
        if (!sample_dice.empty()) mean_dice /= static_cast<double>(sample_dice.size());

        manifest["clients"].push_back({{"client_id", i + 1},
                                       {"directory", dir.filename().string()},
                                       {"mu", cems[i].mu},
                                       {"sigma", cems[i].sigma},
                                       {"l_sub", cems[i].l_sub},
                                       {"degree_p", cems[i].degree_p},
                                       {"sample_noise_dice", sample_dice}});
        if (json)
            std::cout << nlohmann::json{{"client", i + 1},
                                        {"mu", cems[i].mu},
                                        {"sigma", cems[i].sigma},
                                        {"mean_noise_dice", mean_dice}}
                             .dump()
                      << "\n";
        else
            std::cout << i + 1 << "," << fmt(cems[i].mu) << "," << fmt(cems[i].sigma) << ","
                      << fmt(mean_dice) << "\n";
    }
    manifest["warnings"] = warnings;
    fedseg::detail::write_text_file((fs::path(out) / "noise_manifest.json").string(),
                                    manifest.dump(2) + "\n");
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

int cmd_train(fedseg::ExperimentConfig config, const std::string& mode, const std::string& out,
              bool json) {
    if (!mode.empty()) config.mode = fedseg::mode_from_string(mode);
    config.validate();
    ensure_dir(out);  // fail before training, not after

    if (!json) std::cout << "round,metric,value\n";
    fedseg::RunHooks hooks;
    hooks.on_round = [json](const fedseg::RoundMetrics& m) {
        emit_metric(json, m.round, "test_dice_mean", m.test_dice_mean);
        emit_metric(json, m.round, "test_dice_std", m.test_dice_std);
        check_interrupt();
    };
    const fedseg::RunReport report = fedseg::run_federation(config, &hooks);
    if (report.plan_computed)
        emit_metric(json, report.plan_round, "warmup_train_dice", report.warmup_train_dice);

    const std::string manifest = fedseg::persist_run(report, config, out);
    const fs::path run_dir = fs::path(manifest).parent_path();
    // model weights sit beside the manifest but outside it: binary, float32
    fedseg::save_checkpoint((run_dir / "model.ckpt").string(), report.final_model,
                            fedseg::config_hash(config));
    for (const std::string& w : report.warnings) std::cerr << "warning: " << w << "\n";
    std::cerr << "run artifacts in " << run_dir.string() << "\n";
    return 0;
}

int cmd_evaluate(const fedseg::ExperimentConfig& config, const std::string& checkpoint_path,
                 bool json) {
    const fedseg::Checkpoint ckpt = fedseg::load_checkpoint(checkpoint_path);
    if (ckpt.config_hash != fedseg::config_hash(config))
        std::cerr << "note: checkpoint was trained under config " << ckpt.config_hash
                  << ", evaluating under " << fedseg::config_hash(config) << "\n";
    const auto test = fedseg::generate_test_samples(config, fedseg::Rng(config.seed));
    const auto [mean, sd] = fedseg::evaluate_on_clean(ckpt.params, test);
    if (!json) std::cout << "metric,value\n";
    emit_kv(json, "test_dice_mean", mean);
    emit_kv(json, "test_dice_std", sd);
    return 0;
}

int cmd_sweep(const fedseg::ExperimentConfig& base, const std::string& param,
              const std::string& values_text, int repeats, const std::string& out, bool json) {
    if (repeats < 1) throw fedseg::ConfigError("--repeats: must be >= 1");
    const std::vector<double> values = parse_value_list(values_text);

    std::string summary = "value,mean,std\n";
    if (!json) std::cout << "value,mean,std\n";
    for (double v : values) {
        fedseg::ExperimentConfig config = base;
        config.mode = fedseg::AggregationMode::kFull;
        if (param == "r") {
            config.balance_r = v;
        } else {  // T1
            if (v < 0.0 || v != std::floor(v))
                throw fedseg::ConfigError("--values: T1 values must be non-negative integers");
            config.warmup_rounds = static_cast<int>(v);
        }
        config.validate();

        std::vector<double> finals;
        for (int rep = 0; rep < repeats; ++rep) {
            config.seed = base.seed + static_cast<std::uint64_t>(rep);
            fedseg::RunHooks hooks;
            hooks.on_round = [](const fedseg::RoundMetrics&) { check_interrupt(); };
            const fedseg::RunReport report = fedseg::run_federation(config, &hooks);
            finals.push_back(report.rounds.back().test_dice_mean);
        }
        double mean = 0.0;
        for (double d : finals) mean += d;
        mean /= static_cast<double>(finals.size());
        double var = 0.0;
        for (double d : finals) var += (d - mean) * (d - mean);
        const double sd = finals.size() > 1
                              ? std::sqrt(var / (static_cast<double>(finals.size()) - 1.0))
                              : 0.0;

        if (json)
            std::cout << nlohmann::json{{"value", v}, {"mean", mean}, {"std", sd}}.dump() << "\n";
        else
            std::cout << fmt(v) << "," << fmt(mean) << "," << fmt(sd) << "\n";
        std::cout.flush();
        summary += fmt(v) + "," + fmt(mean) + "," + fmt(sd) + "\n";
    }
    if (!out.empty()) fedseg::detail::write_text_file(out, summary);
    return 0;
}

int cmd_verify_noise(const fedseg::ExperimentConfig& config, int trials, double mu, double sigma,
                     bool json) {
    if (trials < 100)
        throw fedseg::ConfigError("--trials: need at least 100 for a meaningful check");

    const fedseg::Rng root(config.seed);
    fedseg::Rng mask_rng = root.child({fedseg::detail::kTagTest, 0});
    const auto sample = fedseg::detail::make_synthetic_sample(config.data, mask_rng);

    // condition 1: noise concentrates in a band around the contour
    const double epsilon = std::max(1.0, std::abs(mu) + 3.0 * sigma);
    const fedseg::CemParams biased{mu, sigma, config.cem_l_sub, config.cem_degree};
    fedseg::Rng band_rng = root.child({fedseg::detail::kTagCorrupt, 1});
    const auto band = fedseg::verify_pdn(biased, sample.clean_mask, trials, epsilon, band_rng);
    const bool band_pass = !band.no_noise && band.band_noise_rate_inside_eps >
                                                 10.0 * band.band_noise_rate_outside_eps;

    emit_kv(json, "trials", trials);
    emit_kv(json, "epsilon", epsilon);
    emit_kv(json, "band_noise_rate_inside", band.band_noise_rate_inside_eps);
    emit_kv(json, "band_noise_rate_outside", band.band_noise_rate_outside_eps);
    emit_kv(json, "band_concentration", band_pass ? "pass" : "fail");

    // condition 2: contour pixels are hit at unequal frequencies, which needs
    // the random component; a pure bias shifts every locus identically
    bool all_pass = band_pass;
    if (sigma > 0.0) {
        const fedseg::CemParams jitter{0.0, sigma, config.cem_l_sub, config.cem_degree};
        fedseg::Rng locus_rng = root.child({fedseg::detail::kTagCorrupt, 2});
        const auto locus =
            fedseg::verify_pdn(jitter, sample.clean_mask, trials, epsilon, locus_rng);
        const bool locus_pass = locus.per_locus_frequency_ratio > 1.2;
        emit_kv(json, "per_locus_frequency_ratio", locus.per_locus_frequency_ratio);
        emit_kv(json, "pixel_dependence", locus_pass ? "pass" : "fail");

        // tangential structure: per-index variance of the smoothed bias is
        // uneven along the contour
        const int l = 400;
        fedseg::Rng bias_rng = root.child({fedseg::detail::kTagCorrupt, 3});
        std::vector<double> sum(l, 0.0), sumsq(l, 0.0);
        for (int t = 0; t < trials; ++t) {
            const auto seq = fedseg::generate_bias(l, jitter, bias_rng);
            for (int j = 0; j < l; ++j) {
                sum[j] += seq.values[j];
                sumsq[j] += seq.values[j] * seq.values[j];
            }
            check_interrupt();
        }
        double var_min = 0.0, var_max = 0.0;
        for (int j = 0; j < l; ++j) {
            const double m = sum[j] / trials;
            const double var = sumsq[j] / trials - m * m;
            if (j == 0 || var < var_min) var_min = var;
            if (j == 0 || var > var_max) var_max = var;
        }
        const double var_ratio = var_min > 0.0 ? var_max / var_min : 0.0;
        const bool var_pass = var_ratio > 1.2;
        emit_kv(json, "bias_variance_ratio", var_ratio);
        emit_kv(json, "tangential_unevenness", var_pass ? "pass" : "fail");
        all_pass = all_pass && locus_pass && var_pass;
    } else {
        emit_kv(json, "pixel_dependence", "not applicable (sigma = 0)");
        emit_kv(json, "tangential_unevenness", "not applicable (sigma = 0)");
    }
    emit_kv(json, "overall", all_pass ? "pass" : "fail");
    return all_pass ? 0 : 5;
}

}  // namespace

int main(int argc, char** argv) {
    std::signal(SIGINT, handle_sigint);

    CLI::App app{"federated binary segmentation under non-IID annotation noise"};
    app.require_subcommand(1);

    struct SubOpts {
        std::string config_path;
        std::uint64_t seed = 1;
        bool json = false;
        std::string out;
        std::string in;
        std::string mode;
        std::string checkpoint;
        std::string param;
        std::string values;
        int repeats = 1;
        int trials = 500;
        double mu = 0.0;
        double sigma = -1.0;
    };
    SubOpts opts;

    auto add_common = [&opts](CLI::App* sub) {
        sub->add_option("--config", opts.config_path,
                        "experiment config file, TOML or JSON (default: built-in defaults)");
        sub->add_option("--seed", opts.seed, "root rng seed, overrides the config value")
            ->capture_default_str();
        sub->add_flag("--json", opts.json, "emit JSON lines on stdout instead of CSV rows");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate the clean federation dataset");
    add_common(gen);
    gen->add_option("--out", opts.out, "output directory for client_NN/ and test/ PNG pairs")
        ->required();

    CLI::App* corrupt = app.add_subcommand(
        "corrupt", "draw per-client noise profiles and corrupt a gen-data directory");
    add_common(corrupt);
    corrupt->add_option("--in", opts.in, "input dataset directory (client_NN/ subdirs or flat)")
        ->required();
    corrupt->add_option("--out", opts.out, "output directory for noisy annotation PNG pairs")
        ->required();

    CLI::App* train = app.add_subcommand("train", "run the full federated training pipeline");
    add_common(train);
    train->add_option("--mode", opts.mode, "aggregation mode: fedavg, intra_gw or full")
        ->check(CLI::IsMember({"fedavg", "intra_gw", "full"}));
    train->add_option("--out", opts.out, "run directory for report, metrics and checkpoint")
        ->required();

    CLI::App* evaluate =
        app.add_subcommand("evaluate", "score a trained checkpoint on the clean held-out set");
    add_common(evaluate);
    evaluate->add_option("--checkpoint", opts.checkpoint, "model checkpoint written by train")
        ->required();

    CLI::App* sweep =
        app.add_subcommand("sweep", "train across a parameter grid and summarize final Dice");
    add_common(sweep);
    sweep->add_option("--param", opts.param, "swept parameter: r or T1")
        ->required()
        ->check(CLI::IsMember({"r", "T1"}));
    sweep->add_option("--values", opts.values, "comma-separated list of parameter values")
        ->required();
    sweep->add_option("--repeats", opts.repeats, "seeds per value for the mean/std summary")
        ->capture_default_str();
    sweep->add_option("--out", opts.out, "optional path for the summary CSV file");

    CLI::App* verify = app.add_subcommand(
        "verify-noise", "Monte Carlo check that the noise model is pixel-dependent");
    add_common(verify);
    verify->add_option("--trials", opts.trials, "corruption trials, at least 100")
        ->capture_default_str();
    verify->add_option("--mu", opts.mu, "probe bias in pixels (default: config mu_max)");
    verify->add_option("--sigma", opts.sigma,
                       "probe randomness in pixels (default: config sigma_max)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) {
            return cmd_gen_data(effective_config(gen, opts.config_path, opts.seed), opts.out,
                                opts.json);
        }
        if (corrupt->parsed()) {
            return cmd_corrupt(effective_config(corrupt, opts.config_path, opts.seed), opts.in,
                               opts.out, opts.json);
        }
        if (train->parsed()) {
            return cmd_train(effective_config(train, opts.config_path, opts.seed), opts.mode,
                             opts.out, opts.json);
        }
        if (evaluate->parsed()) {
            return cmd_evaluate(effective_config(evaluate, opts.config_path, opts.seed),
                                opts.checkpoint, opts.json);
        }
        if (sweep->parsed()) {
            return cmd_sweep(effective_config(sweep, opts.config_path, opts.seed), opts.param,
                             opts.values, opts.repeats, opts.out, opts.json);
        }
        const fedseg::ExperimentConfig config =
            effective_config(verify, opts.config_path, opts.seed);
        const double mu = verify->count("--mu") > 0 ? opts.mu : config.noise.mu_max;
        const double sigma = opts.sigma >= 0.0 ? opts.sigma : config.noise.sigma_max;
        return cmd_verify_noise(config, opts.trials, mu, sigma, opts.json);
    } catch (const Interrupted&) {
        std::cout.flush();
        std::cerr << "interrupted\n";
        return 130;
    } catch (const fedseg::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const fedseg::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const fedseg::NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 4;
    } catch (const fedseg::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}
