#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedseg/config.hpp"

namespace {

namespace fs = std::filesystem;

struct CmdResult {
    int exit_code = -1;
    std::string output;
};

// Runs the built binary through the shell. Caller controls redirection;
// default merges stderr so error messages are inspectable.
CmdResult run_cmd(const std::string& args, const std::string& redirect = "2>&1") {
    const std::string cmd = std::string(FEDSEG_CLI_PATH) + " " + args + " " + redirect;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) throw std::runtime_error("popen failed");
    CmdResult res;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof(buf), pipe)) > 0) res.output.append(buf, n);
    const int status = pclose(pipe);
    res.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return res;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("fedseg_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string str() const { return path.string(); }
};

// Small but non-degenerate: 4 clients so the grouping stage actually runs.
std::string write_tiny_config(const TempDir& tmp) {
    const std::string path = tmp.str() + "/exp.toml";
    std::ofstream out(path);
    out << "seed = 3\nclients = 4\nsamples_per_client = 2\ntest_samples = 2\n"
           "rounds = 2\nwarmup_rounds = 1\nlocal_epochs = 1\n"
           "[data]\nheight = 32\nwidth = 32\naxis_min = 5.0\naxis_max = 8.0\n"
           "[noise]\nmu_max = 4.0\nmu_min = -3.0\nsigma_max = 1.0\np_d = 0.5\n"
           "[learner]\nchannels = [1, 2, 1]\n";
    return path;
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) lines.push_back(line);
    return lines;
}

// flag -> default shown in help (empty when none)
std::map<std::string, std::string> help_flags(const std::string& subcommand) {
    const CmdResult help = run_cmd(subcommand + " --help");
    EXPECT_EQ(help.exit_code, 0) << subcommand;
    std::map<std::string, std::string> flags;
    const std::regex flag_re(R"(^\s+(?:-h,)?(--[a-z][a-z0-9-]*)\b)");
    const std::regex default_re(R"(\[(.*)\])");
    for (const std::string& line : split_lines(help.output)) {
        std::smatch m;
        if (!std::regex_search(line, m, flag_re)) continue;
        const std::string name = m[1];
        if (name == "--help") continue;
        std::smatch d;
        flags[name] = std::regex_search(line, d, default_re) ? d[1].str() : "";
    }
    return flags;
}

TEST(Docs, ReadmeFlagTablesMatchTheParser) {
    const std::string readme = read_file(FEDSEG_README_PATH);
    ASSERT_FALSE(readme.empty());
    const std::vector<std::string> subs = {"gen-data", "corrupt",  "train",
                                           "evaluate", "sweep", "verify-noise"};
    std::set<std::string> parser_flags;
    for (const std::string& sub : subs) {
        ASSERT_NE(readme.find("`" + sub + "`"), std::string::npos) << sub;
        for (const auto& [flag, def] : help_flags(sub)) {
            parser_flags.insert(flag);
            // every flag is documented in some table row
            const std::string token = "| `" + flag + "`";
            const std::size_t at = readme.find(token);
            EXPECT_NE(at, std::string::npos) << sub << " " << flag;
            if (at == std::string::npos || def.empty()) continue;
            // and its documented default matches the parser's
            const std::string line = readme.substr(at, readme.find('\n', at) - at);
            EXPECT_NE(line.find("`" + def + "`"), std::string::npos)
                << sub << " " << flag << " default " << def << " vs: " << line;
        }
    }
    // no table row documents a flag the parser does not have
    const std::regex row_re(R"(\| `(--[a-z][a-z0-9-]*)`)");
    auto begin = std::sregex_iterator(readme.begin(), readme.end(), row_re);
    for (auto it = begin; it != std::sregex_iterator(); ++it)
        EXPECT_TRUE(parser_flags.count((*it)[1].str())) << (*it)[1].str();
}

TEST(Docs, ReadmeDocumentsEveryConfigKey) {
    const std::string readme = read_file(FEDSEG_README_PATH);
    const nlohmann::json canonical = fedseg::config_to_json(fedseg::ExperimentConfig{});
    for (const auto& [key, value] : canonical.items()) {
        if (!value.is_object()) {
            EXPECT_NE(readme.find("`" + key + "`"), std::string::npos) << key;
            continue;
        }
        for (const auto& [leaf, ignored] : value.items())
            EXPECT_NE(readme.find("`" + key + "." + leaf + "`"), std::string::npos)
                << key << "." << leaf;
    }
}

TEST(Cli, TrainIsByteIdenticalAcrossReruns) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult a =
        run_cmd("train --config " + cfg + " --out " + tmp.str() + "/a", "2>/dev/null");
    const CmdResult b =
        run_cmd("train --config " + cfg + " --out " + tmp.str() + "/b", "2>/dev/null");
    ASSERT_EQ(a.exit_code, 0) << a.output;
    ASSERT_EQ(b.exit_code, 0);
    EXPECT_EQ(read_file(tmp.str() + "/a/report.json"), read_file(tmp.str() + "/b/report.json"));
    EXPECT_FALSE(read_file(tmp.str() + "/a/report.json").empty());
    EXPECT_EQ(a.output, b.output);
}

TEST(Cli, StreamedRowsEqualPersistedMetrics) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult res =
        run_cmd("train --config " + cfg + " --out " + tmp.str() + "/run", "2>/dev/null");
    ASSERT_EQ(res.exit_code, 0);
    EXPECT_EQ(res.output, read_file(tmp.str() + "/run/metrics.csv"));
}

TEST(Cli, FedavgReportHasNoGroupingSections) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult fa = run_cmd("train --config " + cfg + " --mode fedavg --out " + tmp.str() +
                                     "/fa",
                                 "2>/dev/null");
    const CmdResult full = run_cmd("train --config " + cfg + " --mode full --out " + tmp.str() +
                                       "/full",
                                   "2>/dev/null");
    ASSERT_EQ(fa.exit_code, 0);
    ASSERT_EQ(full.exit_code, 0);
    const nlohmann::json fa_report = nlohmann::json::parse(read_file(tmp.str() + "/fa/report.json"));
    const nlohmann::json full_report =
        nlohmann::json::parse(read_file(tmp.str() + "/full/report.json"));
    EXPECT_FALSE(fa_report["final"].contains("gmm"));
    EXPECT_FALSE(fa_report["final"].contains("quality_weights"));
    EXPECT_TRUE(fa_report["final"].contains("quantity_weights"));
    EXPECT_TRUE(full_report["final"].contains("gmm"));
    EXPECT_TRUE(full_report["final"].contains("quality_weights"));
    EXPECT_TRUE(full_report["final"].contains("layer_weights"));
}

TEST(Cli, EvaluateReproducesTheFinalRound) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult train =
        run_cmd("train --config " + cfg + " --out " + tmp.str() + "/run", "2>/dev/null");
    ASSERT_EQ(train.exit_code, 0);
    const CmdResult eval = run_cmd(
        "evaluate --config " + cfg + " --checkpoint " + tmp.str() + "/run/model.ckpt --json",
        "2>/dev/null");
    ASSERT_EQ(eval.exit_code, 0) << eval.output;
    double eval_mean = -1.0;
    for (const std::string& line : split_lines(eval.output)) {
        const nlohmann::json row = nlohmann::json::parse(line);
        if (row["field"] == "test_dice_mean") eval_mean = row["value"].get<double>();
    }
    const nlohmann::json report = nlohmann::json::parse(read_file(tmp.str() + "/run/report.json"));
    // checkpoint round-trips through float32; predictions are thresholded so
    // the score stays put or moves a whisker
    EXPECT_NEAR(eval_mean, report["final"]["test_dice_mean"].get<double>(), 0.02);
}

TEST(Cli, SweepEmitsOneRowPerValue) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult res = run_cmd("sweep --config " + cfg +
                                      " --param r --values 0.1,0.5,0.9 --out " + tmp.str() +
                                      "/summary.csv",
                                  "2>/dev/null");
    ASSERT_EQ(res.exit_code, 0) << res.output;
    const std::vector<std::string> lines = split_lines(res.output);
    ASSERT_EQ(lines.size(), 4u);
    EXPECT_EQ(lines[0], "value,mean,std");
    EXPECT_EQ(lines[1].substr(0, 4), "0.10");
    EXPECT_EQ(res.output, read_file(tmp.str() + "/summary.csv"));
    // single repeat: std column is exactly zero
    for (int i = 1; i <= 3; ++i) EXPECT_EQ(lines[i].substr(lines[i].rfind(',') + 1), "0");
}

TEST(Cli, VerifyNoisePassesOnDefaults) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult res = run_cmd("verify-noise --config " + cfg + " --trials 200", "2>/dev/null");
    EXPECT_EQ(res.exit_code, 0) << res.output;
    EXPECT_NE(res.output.find("band_concentration,pass"), std::string::npos);
    EXPECT_NE(res.output.find("pixel_dependence,pass"), std::string::npos);
    EXPECT_NE(res.output.find("overall,pass"), std::string::npos);
}

TEST(Cli, VerifyNoiseSigmaZeroSkipsTheRandomChecks) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult res =
        run_cmd("verify-noise --config " + cfg + " --sigma 0 --trials 150", "2>/dev/null");
    EXPECT_EQ(res.exit_code, 0) << res.output;
    EXPECT_NE(res.output.find("pixel_dependence,not applicable"), std::string::npos);
    EXPECT_NE(res.output.find("overall,pass"), std::string::npos);
}

TEST(Cli, ExitCodesFollowTheContract) {
    TempDir tmp;
    const std::string bad = tmp.str() + "/bad.toml";
    {
        std::ofstream out(bad);
        out << "rounds = 4\nwarmup_rounds = 4\n";
    }
    const CmdResult cfg_err = run_cmd("train --config " + bad + " --out " + tmp.str() + "/x");
    EXPECT_EQ(cfg_err.exit_code, 2);
    EXPECT_NE(cfg_err.output.find("warmup_rounds"), std::string::npos);

    const std::string good = write_tiny_config(tmp);
    EXPECT_EQ(run_cmd("gen-data --config " + good + " --out /dev/null/x").exit_code, 3);
    EXPECT_EQ(run_cmd("verify-noise --config " + good + " --trials 50").exit_code, 2);
    EXPECT_EQ(run_cmd("train --config " + good).exit_code, 2);      // missing --out
    EXPECT_EQ(run_cmd("sweep --config " + good + " --param q --values 1").exit_code, 2);
    EXPECT_EQ(run_cmd("no-such-command").exit_code, 2);
    EXPECT_EQ(run_cmd("evaluate --config " + good + " --checkpoint " + tmp.str() + "/none.ckpt")
                  .exit_code,
              3);
}

TEST(Cli, JsonLinesParse) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    const CmdResult res = run_cmd(
        "gen-data --config " + cfg + " --json --out " + tmp.str() + "/d", "2>/dev/null");
    ASSERT_EQ(res.exit_code, 0);
    const std::vector<std::string> lines = split_lines(res.output);
    ASSERT_EQ(lines.size(), 4u);
    for (const std::string& line : lines) {
        const nlohmann::json row = nlohmann::json::parse(line);
        EXPECT_TRUE(row.contains("client"));
        EXPECT_EQ(row["samples"], 2);
    }
}

TEST(Cli, PipelineComposesOnDisk) {
    TempDir tmp;
    const std::string cfg = write_tiny_config(tmp);
    ASSERT_EQ(run_cmd("gen-data --config " + cfg + " --out " + tmp.str() + "/clean",
                      "2>/dev/null")
                  .exit_code,
              0);
    const CmdResult corrupt = run_cmd("corrupt --config " + cfg + " --in " + tmp.str() +
                                          "/clean --out " + tmp.str() + "/noisy",
                                      "2>/dev/null");
    ASSERT_EQ(corrupt.exit_code, 0) << corrupt.output;
    // 4 clients, one row each plus header
    EXPECT_EQ(split_lines(corrupt.output).size(), 5u);
    EXPECT_TRUE(fs::exists(tmp.str() + "/noisy/client_04/s0001_mask.png"));
    EXPECT_TRUE(fs::exists(tmp.str() + "/noisy/client_04/s0001_img.png"));
    EXPECT_TRUE(fs::exists(tmp.str() + "/noisy/noise_manifest.json"));
    // inputs untouched, test split not corrupted
    EXPECT_TRUE(fs::exists(tmp.str() + "/clean/test/s0001_mask.png"));
    EXPECT_FALSE(fs::exists(tmp.str() + "/noisy/test"));
}

}  // namespace
