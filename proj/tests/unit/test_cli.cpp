#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <string>

#include "airtwin/io.hpp"
#include "support/fixtures.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string out;
};

/// Runs the CLI with stderr merged into stdout.
Run cli(const std::string& args) {
    const std::string cmd = std::string(AIRTWIN_CLI_PATH) + " " + args + " 2>&1";
    Run r;
    FILE* p = ::popen(cmd.c_str(), "r");
    if (!p) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
    const int status = ::pclose(p);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

/// A generated city shared by the tests that only read it.
const fs::path& city_dir() {
    static const fs::path dir = [] {
        auto d = fixtures::temp_dir("cli_city");
        const auto r = cli("generate-city --zones 64 --seed 5 --out " + q(d));
        if (r.code != 0) throw std::runtime_error(r.out);
        return d;
    }();
    return dir;
}

}  // namespace

TEST(Cli, UsageErrorsExit64) {
    auto r = cli("");
    EXPECT_EQ(r.code, 64);
    r = cli("moran --no-such-flag");
    EXPECT_EQ(r.code, 64);
    EXPECT_NE(r.out.find("Usage"), std::string::npos);
    EXPECT_EQ(cli("--help").code, 0);
}

TEST(Cli, MissingFileExits2) {
    const auto r = cli("moran --table /nonexistent/table.csv --weights /nonexistent/w.csv");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("/nonexistent/table.csv"), std::string::npos);
}

TEST(Cli, InvalidConfigExits64) {
    const auto r = cli("generate-city --rho 0.95 --out " + q(fixtures::temp_dir("cli_bad")));
    EXPECT_EQ(r.code, 64);
    EXPECT_NE(r.out.find("InvalidConfig"), std::string::npos);
}

TEST(Cli, GenerateCityWritesFiles) {
    for (const char* f : {"zones.geojson", "table.csv", "weights.csv", "stations.csv", "truth.csv", "observed.csv", "generator.json"})
        EXPECT_TRUE(fs::exists(city_dir() / f)) << f;
    const auto again = fixtures::temp_dir("cli_city2");
    ASSERT_EQ(cli("generate-city --zones 64 --seed 5 --out " + q(again)).code, 0);
    EXPECT_EQ(airtwin::io::read_file(again / "table.csv"), airtwin::io::read_file(city_dir() / "table.csv"));
}

TEST(Cli, MoranOnOneFeature) {
    const auto& d = city_dir();
    const auto r = cli("moran --table " + q(d / "table.csv") + " --weights " + q(d / "weights.csv") +
                       " --feature building_density --permutations 99");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.out.rfind("feature=building_density I=", 0), 0u) << r.out;
    EXPECT_NE(r.out.find(" p="), std::string::npos);
    EXPECT_EQ(cli("moran --table " + q(d / "table.csv") + " --weights " + q(d / "weights.csv") + " --feature nope").code, 70);
}

TEST(Cli, TrainWritesModelAndReport) {
    const auto& d = city_dir();
    const auto out = fixtures::temp_dir("cli_train");
    const auto cfg = out / "model_cfg.json";
    airtwin::io::write_file(cfg, R"({"gbt": {"n_trees": 30}})");
    const auto r = cli("train --table " + q(d / "table.csv") + " --model-config " + q(cfg) + " --folds 4 --out " + q(out / "model.json"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_TRUE(fs::exists(out / "model.json"));
    const auto rep = nlohmann::json::parse(airtwin::io::read_file(out / "eval_report.json"));
    EXPECT_EQ(rep["per_fold"].size(), 4u);

    const auto s = cli("synth --model " + q(out / "model.json") + " --table " + q(d / "table.csv") + " --out " + q(out / "synth.csv"));
    ASSERT_EQ(s.code, 0) << s.out;
    EXPECT_TRUE(fs::exists(out / "synth.json"));

    const auto dec = cli("decide --real " + q(d / "observed.csv") + " --synth " + q(out / "synth.csv"));
    ASSERT_EQ(dec.code, 0) << dec.out;
    EXPECT_EQ(dec.out.rfind("agreement_rate=", 0), 0u);
}

TEST(Cli, DecideReportsAgreement) {
    const auto out = fixtures::temp_dir("cli_decide");
    airtwin::io::write_file(out / "real.csv", "zone_id,value\na,10\nb,30\nc,50\nd,12.847696\n");
    airtwin::io::write_file(out / "synth.csv", "zone_id,value\nd,13\nc,39\nb,31\na,11\n");
    airtwin::io::write_file(out / "p.json", R"({"policy_id":"x","thresholds":[20,40],"labels":["lo","mid","hi"]})");
    const auto r = cli("decide --policy " + q(out / "p.json") + " --real " + q(out / "real.csv") + " --synth " + q(out / "synth.csv") +
                       " --out " + q(out / "dec.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.out.rfind("agreement_rate=0.750000 n_zones=4 n_agree=3", 0), 0u) << r.out;
    EXPECT_TRUE(fs::exists(out / "dec.json"));
    const auto bad = cli("decide --real " + q(out / "real.csv") + " --synth " + q(out / "p.json"));
    EXPECT_EQ(bad.code, 2);
}

TEST(Cli, SensitivityWritesCurve) {
    const auto out = fixtures::temp_dir("cli_sens");
    airtwin::io::write_file(out / "real.csv", "zone_id,value\na,10\nb,30\nc,50\n");
    const auto r = cli("sensitivity --real " + q(out / "real.csv") + " --sds 0,1,5 --trials 200 --out " + q(out / "s.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_EQ(r.out.rfind("sd=0.000000 mean_agreement=1.000000", 0), 0u) << r.out;
    EXPECT_EQ(cli("sensitivity --real " + q(out / "real.csv") + " --sds 0,x").code, 64);
}

TEST(Cli, RunIsIndependentOfThreadCount) {
    const auto cfg_dir = fixtures::temp_dir("cli_run_cfg");
    airtwin::io::write_file(cfg_dir / "config.json", R"({"data": {"generate": {"n_zones": 81}},
        "model": {"random_forest": {"n_trees": 15}, "gbt": {"n_trees": 30}},
        "selection": {"target_count": 6, "n_repeats": 1}, "cv": {"k": 3},
        "moran_permutations": 99, "sensitivity": {"n_trials": 100}})");
    const auto a = fixtures::temp_dir("cli_run_a");
    const auto b = fixtures::temp_dir("cli_run_b");
    auto ra = cli("--threads 1 run --config " + q(cfg_dir / "config.json") + " --seed 3 --out " + q(a));
    auto rb = cli("--threads 3 run --config " + q(cfg_dir / "config.json") + " --seed 3 --out " + q(b));
    ASSERT_EQ(ra.code, 0) << ra.out;
    ASSERT_EQ(rb.code, 0) << rb.out;
    for (const auto& e : fs::directory_iterator(a)) {
        const auto name = e.path().filename();
        if (name == "synthetic.json" || name == "config_used.json") continue;
        EXPECT_EQ(airtwin::io::read_file(e.path()), airtwin::io::read_file(b / name)) << name;
    }
    const auto used = nlohmann::json::parse(airtwin::io::read_file(a / "config_used.json"));
    EXPECT_EQ(used["seed"], 3);
    EXPECT_EQ(used["data"]["generate"]["seed"], 3);
}

TEST(Cli, RunFailureNamesStage) {
    const auto cfg_dir = fixtures::temp_dir("cli_run_bad");
    airtwin::io::write_file(cfg_dir / "config.json", R"({"data": {"zones": "missing.geojson"}})");
    const auto r = cli("run --config " + q(cfg_dir / "config.json") + " --out " + q(cfg_dir / "out"));
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.out.find("stage=load kind=IoError"), std::string::npos) << r.out;
}
