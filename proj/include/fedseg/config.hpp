#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedseg/errors.hpp"
#include "fedseg/learner.hpp"
#include "fedseg/noise.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

enum class SizeDistribution { kEqual, kLognormal };
enum class AggregationMode { kFedavg, kIntraGw, kFull };

inline std::string to_string(SizeDistribution d) {
    return d == SizeDistribution::kEqual ? "equal" : "lognormal";
}

inline std::string to_string(AggregationMode m) {
    switch (m) {
        case AggregationMode::kFedavg: return "fedavg";
        case AggregationMode::kIntraGw: return "intra_gw";
        default: return "full";
    }
}

inline AggregationMode mode_from_string(const std::string& s) {
    if (s == "fedavg") return AggregationMode::kFedavg;
    if (s == "intra_gw") return AggregationMode::kIntraGw;
    if (s == "full") return AggregationMode::kFull;
    throw ConfigError("mode: expected one of fedavg|intra_gw|full, got \"" + s + "\"");
}

// Synthetic image generator knobs: random (possibly wobbled) ellipses on a
// flat background, two-level intensity plus pixel noise.
struct DataParams {
    int height = 64;
    int width = 64;
    double axis_min = 8.0;
    double axis_max = 18.0;
    double wobble = 0.15;          // relative radial modulation amplitude
    double contrast = 0.6;         // foreground minus background intensity
    double pixel_noise_std = 0.1;

    void validate() const {
        if (height < 16 || width < 16)
            throw ConfigError("data.height/data.width: images must be at least 16x16");
        if (axis_min < 3.0) throw ConfigError("data.axis_min: must be >= 3 pixels");
        if (axis_max < axis_min) throw ConfigError("data.axis_max: must be >= data.axis_min");
        if (wobble < 0.0 || wobble > 0.4)
            throw ConfigError("data.wobble: must lie in [0, 0.4]");
        if (contrast <= 0.0 || contrast > 1.0)
            throw ConfigError("data.contrast: must lie in (0, 1]");
        if (pixel_noise_std < 0.0) throw ConfigError("data.pixel_noise_std: must be >= 0");
    }
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    int clients = 10;
    int samples_per_client = 20;
    int test_samples = 16;
    SizeDistribution size_distribution = SizeDistribution::kEqual;
    double lognormal_spread = 0.5;
    int rounds = 40;         // T
    int warmup_rounds = 8;   // T1, the FedAvg-only prefix
    int local_epochs = 5;    // E
    AggregationMode mode = AggregationMode::kFull;
    double balance_r = 0.5;
    bool pooled_difficulty = false;  // pool band pixels across samples instead of
                                     // averaging per-sample band means
    int threads = 1;
    DataParams data;
    HeteroNoiseParams noise{8.0, -8.0, 3.0, 0.2};
    int cem_l_sub = 0;   // 0: derived from contour length
    int cem_degree = 5;
    LearnerConfig learner;

    // warmup_rounds == rounds means the quality phase never runs; the config
    // file boundary (load_config) rejects it, direct library use tolerates it.
    void validate(bool allow_warmup_equal_rounds = false) const {
        if (clients < 1) throw ConfigError("clients: must be >= 1");
        if (samples_per_client < 1) throw ConfigError("samples_per_client: must be >= 1");
        if (test_samples < 1) throw ConfigError("test_samples: must be >= 1");
        if (size_distribution == SizeDistribution::kLognormal && lognormal_spread <= 0.0)
            throw ConfigError("lognormal_spread: must be > 0 for lognormal client sizes");
        if (lognormal_spread < 0.0) throw ConfigError("lognormal_spread: must be >= 0");
        if (rounds < 1) throw ConfigError("rounds: must be >= 1");
        if (warmup_rounds < 0) throw ConfigError("warmup_rounds: must be >= 0");
        if (warmup_rounds > rounds || (!allow_warmup_equal_rounds && warmup_rounds == rounds))
            throw ConfigError("warmup_rounds: must be less than rounds");
        if (local_epochs < 1) throw ConfigError("local_epochs: must be >= 1");
        if (balance_r < 0.0 || balance_r > 1.0)
            throw ConfigError("balance_r: must lie in [0, 1]");
        if (threads < 1) throw ConfigError("threads: must be >= 1");
        data.validate();
        try {
            noise.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("noise: ") + e.what());
        }
        if (cem_l_sub < 0) throw ConfigError("noise.l_sub: must be >= 0");
        if (cem_degree < 1) throw ConfigError("noise.degree_p: must be >= 1");
        try {
            learner.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("learner: ") + e.what());
        }
        if (learner.channels.front() != 1)
            throw ConfigError("learner.channels: first entry must be 1 (single-channel images)");
    }
};

// Canonical form: nlohmann keeps object keys sorted, so the dump is invariant
// to the ordering in the source file.
inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    j["clients"] = c.clients;
    j["samples_per_client"] = c.samples_per_client;
    j["test_samples"] = c.test_samples;
    j["size_distribution"] = to_string(c.size_distribution);
    j["lognormal_spread"] = c.lognormal_spread;
    j["rounds"] = c.rounds;
    j["warmup_rounds"] = c.warmup_rounds;
    j["local_epochs"] = c.local_epochs;
    j["mode"] = to_string(c.mode);
    j["balance_r"] = c.balance_r;
    j["pooled_difficulty"] = c.pooled_difficulty;
    j["threads"] = c.threads;
    j["data"] = {{"height", c.data.height},
                 {"width", c.data.width},
                 {"axis_min", c.data.axis_min},
                 {"axis_max", c.data.axis_max},
                 {"wobble", c.data.wobble},
                 {"contrast", c.data.contrast},
                 {"pixel_noise_std", c.data.pixel_noise_std}};
    j["noise"] = {{"mu_max", c.noise.mu_max},
                  {"mu_min", c.noise.mu_min},
                  {"sigma_max", c.noise.sigma_max},
                  {"p_d", c.noise.p_d},
                  {"l_sub", c.cem_l_sub},
                  {"degree_p", c.cem_degree}};
    j["learner"] = {{"channels", c.learner.channels},
                    {"lr", c.learner.lr},
                    {"beta1", c.learner.beta1},
                    {"beta2", c.learner.beta2},
                    {"batch_size", c.learner.batch_size},
                    {"loss", c.learner.loss_kind == LossKind::kCeDice ? "ce_dice" : "ce"},
                    {"prob_clamp", c.learner.prob_clamp},
                    {"dice_smooth", c.learner.dice_smooth}};
    return j;
}

namespace detail {

template <typename T>
T get_field(const nlohmann::json& j, const std::string& section, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    const std::string where = section.empty() ? key : section + "." + key;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + ": wrong type");
    }
}

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& section,
                                const std::vector<std::string>& known) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : known) ok = ok || k == it.key();
        if (!ok) {
            const std::string where = section.empty() ? it.key() : section + "." + it.key();
            throw ConfigError(where + ": unknown config key");
        }
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    using detail::get_field;
    if (!j.is_object()) throw ConfigError("config root must be an object");
    detail::reject_unknown_keys(
        j, "",
        {"seed", "clients", "samples_per_client", "test_samples", "size_distribution",
         "lognormal_spread", "rounds", "warmup_rounds", "local_epochs", "mode", "balance_r",
         "pooled_difficulty", "threads", "data", "noise", "learner"});
    ExperimentConfig c;
    c.seed = get_field<std::uint64_t>(j, "", "seed", c.seed);
    c.clients = get_field<int>(j, "", "clients", c.clients);
    c.samples_per_client = get_field<int>(j, "", "samples_per_client", c.samples_per_client);
    c.test_samples = get_field<int>(j, "", "test_samples", c.test_samples);
    if (j.contains("size_distribution")) {
        const auto s = get_field<std::string>(j, "", "size_distribution", "equal");
        if (s == "equal")
            c.size_distribution = SizeDistribution::kEqual;
        else if (s == "lognormal")
            c.size_distribution = SizeDistribution::kLognormal;
        else
            throw ConfigError("size_distribution: expected equal|lognormal, got \"" + s + "\"");
    }
    c.lognormal_spread = get_field<double>(j, "", "lognormal_spread", c.lognormal_spread);
    c.rounds = get_field<int>(j, "", "rounds", c.rounds);
    c.warmup_rounds = get_field<int>(j, "", "warmup_rounds", c.warmup_rounds);
    c.local_epochs = get_field<int>(j, "", "local_epochs", c.local_epochs);
    if (j.contains("mode")) c.mode = mode_from_string(get_field<std::string>(j, "", "mode", "full"));
    c.balance_r = get_field<double>(j, "", "balance_r", c.balance_r);
    c.pooled_difficulty = get_field<bool>(j, "", "pooled_difficulty", c.pooled_difficulty);
    c.threads = get_field<int>(j, "", "threads", c.threads);

    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown_keys(d, "data",
                                    {"height", "width", "axis_min", "axis_max", "wobble",
                                     "contrast", "pixel_noise_std"});
        c.data.height = get_field<int>(d, "data", "height", c.data.height);
        c.data.width = get_field<int>(d, "data", "width", c.data.width);
        c.data.axis_min = get_field<double>(d, "data", "axis_min", c.data.axis_min);
        c.data.axis_max = get_field<double>(d, "data", "axis_max", c.data.axis_max);
        c.data.wobble = get_field<double>(d, "data", "wobble", c.data.wobble);
        c.data.contrast = get_field<double>(d, "data", "contrast", c.data.contrast);
        c.data.pixel_noise_std =
            get_field<double>(d, "data", "pixel_noise_std", c.data.pixel_noise_std);
    }
    if (j.contains("noise")) {
        const auto& n = j.at("noise");
        detail::reject_unknown_keys(n, "noise",
                                    {"mu_max", "mu_min", "sigma_max", "p_d", "l_sub", "degree_p"});
        c.noise.mu_max = get_field<double>(n, "noise", "mu_max", c.noise.mu_max);
        c.noise.mu_min = get_field<double>(n, "noise", "mu_min", c.noise.mu_min);
        c.noise.sigma_max = get_field<double>(n, "noise", "sigma_max", c.noise.sigma_max);
        c.noise.p_d = get_field<double>(n, "noise", "p_d", c.noise.p_d);
        c.cem_l_sub = get_field<int>(n, "noise", "l_sub", c.cem_l_sub);
        c.cem_degree = get_field<int>(n, "noise", "degree_p", c.cem_degree);
    }
    if (j.contains("learner")) {
        const auto& l = j.at("learner");
        detail::reject_unknown_keys(l, "learner",
                                    {"channels", "lr", "beta1", "beta2", "batch_size", "loss",
                                     "prob_clamp", "dice_smooth"});
        c.learner.channels = get_field<std::vector<int>>(l, "learner", "channels", c.learner.channels);
        c.learner.lr = get_field<double>(l, "learner", "lr", c.learner.lr);
        c.learner.beta1 = get_field<double>(l, "learner", "beta1", c.learner.beta1);
        c.learner.beta2 = get_field<double>(l, "learner", "beta2", c.learner.beta2);
        c.learner.batch_size = get_field<int>(l, "learner", "batch_size", c.learner.batch_size);
        if (l.contains("loss")) {
            const auto s = get_field<std::string>(l, "learner", "loss", "ce");
            if (s == "ce")
                c.learner.loss_kind = LossKind::kCe;
            else if (s == "ce_dice")
                c.learner.loss_kind = LossKind::kCeDice;
            else
                throw ConfigError("learner.loss: expected ce|ce_dice, got \"" + s + "\"");
        }
        c.learner.prob_clamp = get_field<double>(l, "learner", "prob_clamp", c.learner.prob_clamp);
        c.learner.dice_smooth = get_field<double>(l, "learner", "dice_smooth", c.learner.dice_smooth);
    }
    return c;
}

namespace detail {

// Minimal TOML subset: [sections], key = value with integers, floats,
// booleans, quoted strings, flat arrays, and # comments. Enough for the
// config schema above; anything fancier should use the JSON form.
inline nlohmann::json parse_toml_subset(const std::string& text) {
    nlohmann::json root = nlohmann::json::object();
    nlohmann::json* current = &root;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;

    auto strip = [](std::string s) {
        std::size_t b = 0, e = s.size();
        while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
        while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
        return s.substr(b, e - b);
    };
    auto fail = [&](const std::string& msg) {
        throw ConfigError("config line " + std::to_string(lineno) + ": " + msg);
    };

    auto parse_scalar = [&](const std::string& tok) -> nlohmann::json {
        if (tok.empty()) fail("empty value");
        if (tok == "true") return true;
        if (tok == "false") return false;
        if (tok.front() == '"') {
            if (tok.size() < 2 || tok.back() != '"') fail("unterminated string");
            return tok.substr(1, tok.size() - 2);
        }
        const bool floaty = tok.find_first_of(".eE") != std::string::npos &&
                            tok.find_first_not_of("+-0123456789.eE") == std::string::npos;
        try {
            std::size_t used = 0;
            if (floaty) {
                const double v = std::stod(tok, &used);
                if (used == tok.size()) return v;
            } else if (tok.front() == '-') {
                const long long v = std::stoll(tok, &used);
                if (used == tok.size()) return v;
            } else {
                const unsigned long long v = std::stoull(tok, &used);
                if (used == tok.size()) return v;
            }
        } catch (const std::exception&) {
        }
        fail("cannot parse value \"" + tok + "\"");
        return nullptr;
    };

    while (std::getline(in, line)) {
        ++lineno;
        // strip comments, but not inside quotes
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line = line.substr(0, i);
                break;
            }
        }
        line = strip(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail("unterminated section header");
            const std::string name = strip(line.substr(1, line.size() - 2));
            if (name.empty()) fail("empty section name");
            current = &root[name];
            if (!current->is_object()) *current = nlohmann::json::object();
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) fail("expected key = value");
        const std::string key = strip(line.substr(0, eq));
        const std::string val = strip(line.substr(eq + 1));
        if (key.empty()) fail("empty key");
        if (!val.empty() && val.front() == '[') {
            if (val.back() != ']') fail("unterminated array");
            nlohmann::json arr = nlohmann::json::array();
            std::string body = val.substr(1, val.size() - 2);
            std::size_t pos = 0;
            while (pos <= body.size()) {
                std::size_t comma = body.find(',', pos);
                const std::string item =
                    strip(body.substr(pos, comma == std::string::npos ? std::string::npos
                                                                      : comma - pos));
                if (!item.empty()) arr.push_back(parse_scalar(item));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            (*current)[key] = std::move(arr);
        } else {
            (*current)[key] = parse_scalar(val);
        }
    }
    return root;
}

}  // namespace detail

// Reads JSON ('{' first) or the TOML subset; both funnel into the same
// canonical representation, so hashes are format-independent.
inline ExperimentConfig parse_config_text(const std::string& text) {
    std::size_t i = 0;
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    nlohmann::json j;
    if (i < text.size() && text[i] == '{') {
        try {
            j = nlohmann::json::parse(text);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("config JSON parse error: ") + e.what());
        }
    } else {
        j = detail::parse_toml_subset(text);
    }
    return config_from_json(j);
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    ExperimentConfig c = parse_config_text(buf.str());
    c.validate();
    return c;
}

inline std::string config_hash(const ExperimentConfig& c) {
    const std::string canon = config_to_json(c).dump();
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(canon)));
    return std::string(out, 16);
}

}  // namespace fedseg
