#pragma once

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedseg/config.hpp"
#include "fedseg/errors.hpp"
#include "fedseg/federation.hpp"
#include "fedseg/rng.hpp"

namespace fedseg {

namespace detail {

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << content;
    out.flush();
    if (!out) throw IoError("write failed for " + path.string());
}

inline std::string hash_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
    return std::string(buf, 16);
}

// run-YYYYMMDD-HHMMSS, suffixed when several runs land in the same second.
inline std::filesystem::path fresh_run_subdir(const std::filesystem::path& base) {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm_utc{};
    gmtime_r(&now, &tm_utc);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "run-%Y%m%d-%H%M%S", &tm_utc);
    std::filesystem::path candidate = base / stamp;
    for (int n = 1; std::filesystem::exists(candidate); ++n)
        candidate = base / (std::string(stamp) + "-" + std::to_string(n));
    return candidate;
}

}  // namespace detail

inline nlohmann::json noise_manifest_json(const RunReport& report) {
    nlohmann::json clients = nlohmann::json::array();
    for (const ClientNoiseInfo& info : report.noise_info)
        clients.push_back({{"client_id", info.client_id},
                           {"mu", info.mu},
                           {"sigma", info.sigma},
                           {"l_sub", info.l_sub},
                           {"degree_p", info.degree_p},
                           {"sample_noise_dice", info.sample_noise_dice}});
    return nlohmann::json{{"clients", clients}, {"warnings", report.warnings}};
}

// Writes config.json, metrics.csv, report.json, noise_manifest.json and a
// manifest listing their content hashes. A directory that already holds a
// run is left untouched; the new artifacts go to a timestamped subdirectory.
// Returns the manifest path.
inline std::string persist_run(const RunReport& report, const ExperimentConfig& config,
                               const std::string& out_dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::path dir(out_dir);
    if (fs::exists(dir) && !fs::is_directory(dir))
        throw IoError("not a directory: " + dir.string());
    if (fs::exists(dir / "manifest.json")) dir = detail::fresh_run_subdir(dir);
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    const std::string config_text = config_to_json(config).dump(2) + "\n";
    const std::string report_text = report_to_json(report).dump(2) + "\n";
    const std::string metrics_text = metrics_csv(report);
    const std::string noise_text = noise_manifest_json(report).dump(2) + "\n";

    detail::write_text_file(dir / "config.json", config_text);
    detail::write_text_file(dir / "report.json", report_text);
    detail::write_text_file(dir / "metrics.csv", metrics_text);
    detail::write_text_file(dir / "noise_manifest.json", noise_text);

    nlohmann::json manifest;
    manifest["config_hash"] = config_hash(config);
    manifest["seed"] = config.seed;
    manifest["files"] = {{"config.json", detail::hash_hex(config_text)},
                         {"report.json", detail::hash_hex(report_text)},
                         {"metrics.csv", detail::hash_hex(metrics_text)},
                         {"noise_manifest.json", detail::hash_hex(noise_text)}};
    const fs::path manifest_path = dir / "manifest.json";
    detail::write_text_file(manifest_path, manifest.dump(2) + "\n");
    return manifest_path.string();
}

}  // namespace fedseg
