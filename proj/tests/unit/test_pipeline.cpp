#include <gtest/gtest.h>

#include <sstream>

#include "airtwin/parallel.hpp"
#include "airtwin/pipeline.hpp"
#include "support/fixtures.hpp"

using namespace airtwin;
using namespace airtwin::pipeline;

namespace {

PipelineConfig small_config(const fs::path& out) {
    PipelineConfig c;
    c.data.generate = geo::GeneratorConfig{};
    c.data.generate->n_zones = 100;
    c.model.forest.n_trees = 20;
    c.model.boost.n_trees = 40;
    c.selection.target_count = 8;
    c.selection.n_repeats = 1;
    c.cv.k = 5;
    c.moran_permutations = 99;
    c.sensitivity_trials = 100;
    c.output_dir = out;
    return c;
}

std::map<std::string, std::string> read_dir(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto text = io::read_file(e.path());
        if (e.path().filename() == "synthetic.json") {
            auto j = nlohmann::ordered_json::parse(text);
            j.erase("generated_at");
            text = j.dump();
        }
        out[e.path().filename().string()] = text;
    }
    return out;
}

}  // namespace

TEST(Pipeline, WritesEveryArtifact) {
    const auto out = fixtures::temp_dir("pipeline");
    std::ostringstream log;
    const auto res = run_pipeline(small_config(out), log);
    for (const char* name : {"config_used.json", "zones.geojson", "weights.csv", "moran_target.json", "correlation.csv",
                             "selection_trace.json", "catalog.json", "table.csv", "eval_report.json", "model.json",
                             "synthetic.csv", "synthetic.json", "policy.json", "decisions.csv", "decisions.json",
                             "sensitivity.csv"})
        EXPECT_TRUE(fs::exists(out / name)) << name;
    EXPECT_EQ(res.artifacts.size(), 16u);

    ASSERT_EQ(res.comparisons.size(), 4u);
    EXPECT_EQ(res.comparisons[0].name, kBaselineAll);
    EXPECT_EQ(res.comparisons[0].n_features, 28u);
    EXPECT_EQ(res.comparisons[1].n_features, 8u);
    EXPECT_EQ(res.trace.final_set.size(), 8u);
    EXPECT_GE(res.final_features.size(), 8u);
    EXPECT_EQ(res.sensitivity.size(), 5u);
    EXPECT_EQ(res.sensitivity[0].mean_agreement, 1.0);

    const auto report = nlohmann::json::parse(io::read_file(out / "eval_report.json"));
    EXPECT_EQ(report["model"], "gbt");
    EXPECT_TRUE(report["comparisons"].contains(kGbtSelectedLag));
    EXPECT_GT(report["accuracy_pct"].get<double>(), 50.0);

    // One summary line per stage, all key=value.
    std::istringstream lines(log.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        EXPECT_EQ(line.rfind("stage=", 0), 0u) << line;
        ++n;
    }
    EXPECT_EQ(n, res.summary.size());
}

TEST(Pipeline, ArtifactsDoNotDependOnThreads) {
    const auto a = fixtures::temp_dir("threads1");
    const auto b = fixtures::temp_dir("threads4");
    std::ostringstream log;
    set_max_threads(1);
    run_pipeline(small_config(a), log);
    set_max_threads(4);
    run_pipeline(small_config(b), log);
    set_max_threads(0);
    auto da = read_dir(a), db = read_dir(b);
    // The configs differ only in the output directory they record.
    da.erase("config_used.json");
    db.erase("config_used.json");
    ASSERT_EQ(da.size(), db.size());
    for (const auto& [name, text] : da) EXPECT_EQ(text, db[name]) << name;
}

TEST(Pipeline, RunsFromFilesWithStations) {
    geo::GeneratorConfig g;
    g.n_zones = 64;
    g.sensor_coverage = 0.5;
    g.seed = 3;
    const auto city = geo::generate_synthetic_city(g);
    const auto in = fixtures::temp_dir("pipeline_in");
    io::write_file(in / "zones.geojson", geo::zones_to_geojson(city.zones).dump());
    io::write_file(in / "stations.csv", geo::measurements_to_csv(geo::synthesize_stations(city)));

    const auto out = fixtures::temp_dir("pipeline_files");
    auto j = nlohmann::json::parse(R"({"data": {"zones": "zones.geojson", "measurements": "stations.csv"},
        "model": {"kind": "random_forest", "random_forest": {"n_trees": 15}},
        "selection": {"target_count": 5, "n_repeats": 1}, "cv": {"k": 4}, "moran_permutations": 99,
        "sensitivity": {"n_trials": 100, "noise_sds": [0, 2]},
        "policy": {"policy_id": "p", "thresholds": [30], "labels": ["low", "high"]}})");
    j["output_dir"] = out.string();
    const auto cfg = config_from_json(j, in);
    EXPECT_EQ(cfg.data.zones, in / "zones.geojson");
    std::ostringstream log;
    const auto res = run_pipeline(cfg, log);
    EXPECT_NE(log.str().find("target_I=skipped"), std::string::npos);
    EXPECT_FALSE(fs::exists(out / "moran_target.json"));
    EXPECT_EQ(res.decisions.per_zone.size(), city.table.target_rows().size());
    EXPECT_EQ(nlohmann::json::parse(io::read_file(out / "policy.json"))["policy_id"], "p");
}

TEST(Pipeline, MissingInputNamesPathAndStage) {
    PipelineConfig c;
    c.data.zones = "/nonexistent/zones.geojson";
    c.output_dir = fixtures::temp_dir("pipeline_missing");
    std::ostringstream log;
    try {
        run_pipeline(c, log);
        FAIL();
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "load");
        EXPECT_EQ(e.kind(), "IoError");
        EXPECT_NE(std::string(e.what()).find("/nonexistent/zones.geojson"), std::string::npos);
    }
}

TEST(Pipeline, InvalidConfigFailsEarly) {
    auto c = small_config(fixtures::temp_dir("pipeline_bad"));
    c.moran_cutoff = 2.0;
    std::ostringstream log;
    try {
        run_pipeline(c, log);
        FAIL();
    } catch (const PipelineError& e) {
        EXPECT_EQ(e.stage(), "config");
        EXPECT_EQ(e.kind(), "InvalidConfig");
    }
    EXPECT_THROW(config_from_json(nlohmann::json::parse(R"({"cv": {"k": "ten"}})")), InvalidConfig);
}

TEST(PipelineConfig, DefaultsRoundTrip) {
    const auto c = config_from_json(nlohmann::json::object());
    ASSERT_TRUE(c.data.generate.has_value());
    EXPECT_EQ(c.data.generate->seed, 1u);
    const auto j = to_json(c);
    const auto back = config_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(to_json(back).dump(), j.dump());
    auto seeded = config_from_json(nlohmann::json::parse(R"({"seed": 9})"));
    EXPECT_EQ(seeded.data.generate->seed, 9u);
}
