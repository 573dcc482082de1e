// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is
// non-zero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "airtwin/airtwin.hpp"
#include "airtwin/service_http.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace airtwin;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double time_limit_s;  // 0 = none
    std::function<Outcome()> run;
};

std::string fmt(double v, int decimals = 4) { return io::format_fixed(v, decimals); }

// ---------------------------------------------------------------------------

Outcome moran_oracle() {
    Rng rng(101);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t n = 2 + rng.index(9);
        std::vector<geo::PlanarPoint> pts;
        std::vector<double> x;
        for (std::size_t i = 0; i < n; ++i) {
            pts.push_back({rng.uniform(0, 100), rng.uniform(0, 100)});
            x.push_back(rng.normal(20, 6));
        }
        auto w = spatial::build_knn_weights(pts, 1 + rng.index(n - 1));
        if (rep % 2 == 0) w = spatial::row_standardize(w);
        worst = std::max(worst, std::abs(spatial::morans_i(w, x).I - oracle::moran(oracle::dense(w), x)));
    }
    std::ostringstream d;
    d << "max_abs_diff=" << worst;
    return {worst <= 1e-12, d.str()};
}

Outcome checkerboard() {
    const auto w = spatial::row_standardize(
        spatial::build_contiguity_weights(fixtures::grid_zones(8, 8), spatial::WeightScheme::rook));
    std::vector<double> x;
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) x.push_back(static_cast<double>((i + j) % 2));
    const double I = spatial::morans_i(w, x).I;

    const std::vector<geo::PlanarPoint> pair{{0, 0}, {5, 0}};
    const std::vector<double> v{1.5, 4.0};
    const double I2 = spatial::morans_i(spatial::row_standardize(spatial::build_knn_weights(pair, 1)), v).I;
    std::ostringstream d;
    d.precision(17);
    d << "I_checkerboard=" << I << " I_pair=" << I2;
    return {std::abs(I + 1.0) <= 1e-12 && I2 == -1.0, d.str()};
}

Outcome permutation_calibration() {
    const auto w = spatial::row_standardize(
        spatial::build_contiguity_weights(fixtures::grid_zones(10, 10), spatial::WeightScheme::queen));
    constexpr std::size_t kRuns = 200;
    std::size_t hits = 0;
    for (std::size_t run = 0; run < kRuns; ++run) {
        Rng rng(stream_seed(2024, run));
        std::vector<double> x(100);
        for (auto& v : x) v = rng.normal();
        if (spatial::morans_permutation_test(w, x, 999, run).p_value <= 0.05) ++hits;
    }
    const auto [lo, hi] = oracle::binomial_band(kRuns, 0.05, 0.99);
    return {hits >= lo && hits <= hi, "rejections=" + std::to_string(hits) + "/200 band=[" + std::to_string(lo) + "," +
                                          std::to_string(hi) + "]"};
}

bool same_tree(const models::RegressionTree& got, const std::vector<oracle::Node>& want, std::size_t gi, std::size_t wi) {
    const auto& g = got.nodes[gi];
    const auto& w = want[wi];
    if (g.feature != w.feature || std::abs(g.value - w.value) > 1e-9) return false;
    if (g.is_leaf()) return true;
    return std::abs(g.threshold - w.threshold) <= 1e-12 &&
           same_tree(got, want, static_cast<std::size_t>(g.left), static_cast<std::size_t>(w.left)) &&
           same_tree(got, want, static_cast<std::size_t>(g.right), static_cast<std::size_t>(w.right));
}

Outcome tree_oracle() {
    Rng rng(777);
    std::size_t agree = 0;
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 2 + rng.index(29);
        const std::size_t p = 1 + rng.index(5);
        const bool coarse = rep % 3 == 0;
        oracle::Matrix x(n, std::vector<double>(p));
        std::vector<double> y(n);
        FeatureTable t;
        for (std::size_t c = 0; c < p; ++c) t.feature_names.push_back("x" + std::to_string(c));
        for (std::size_t r = 0; r < n; ++r) {
            for (auto& v : x[r]) v = coarse ? static_cast<double>(rng.index(3)) : rng.uniform(-5, 5);
            y[r] = coarse ? static_cast<double>(rng.index(4)) : rng.normal(0, 2);
            t.zone_ids.push_back("z" + std::to_string(r));
            t.values.insert(t.values.end(), x[r].begin(), x[r].end());
        }
        t.y = y;
        const int depth = 1 + static_cast<int>(rng.index(2));
        const std::size_t min_leaf = std::min<std::size_t>(1 + rng.index(3), n / 2);
        Rng fit_rng(1);
        const auto fit = models::fit_tree(t, models::TreeParams{depth, min_leaf, 1.0}, fit_rng);
        if (same_tree(fit.tree, oracle::exhaustive_tree(x, y, depth, min_leaf), 0, 0)) ++agree;
    }
    return {agree == 100, "matching_tables=" + std::to_string(agree) + "/100"};
}

// The pipeline run is shared by the paper-analog, determinism and service
// criteria.
struct PipelineRun {
    fs::path dir;
    pipeline::PipelineResult result;
};

pipeline::PipelineConfig city_config(const fs::path& out) {
    pipeline::PipelineConfig c;
    c.seed = 1;
    c.data.generate = geo::GeneratorConfig{};
    c.data.generate->seed = 1;
    c.data.generate->n_zones = 400;
    c.data.generate->rho = 0.6;
    c.selection.target_count = 8;
    c.cv.k = 10;
    c.output_dir = out;
    return c;
}

PipelineRun& city_run() {
    static PipelineRun run = [] {
        PipelineRun r;
        r.dir = fixtures::temp_dir("acceptance_city");
        std::ostringstream log;
        set_max_threads(1);
        r.result = pipeline::run_pipeline(city_config(r.dir), log);
        set_max_threads(0);
        return r;
    }();
    return run;
}

Outcome pipeline_paper_analog() {
    const auto& res = city_run().result;
    auto acc = [&](const char* name) {
        for (const auto& c : res.comparisons)
            if (c.name == name) return c.report.accuracy_pct;
        throw std::runtime_error(std::string("missing comparison ") + name);
    };
    const double all = acc(pipeline::kBaselineAll), sel = acc(pipeline::kRfSelected);
    const double rf_lag = acc(pipeline::kRfSelectedLag), gbt_lag = acc(pipeline::kGbtSelectedLag);
    const bool a = sel >= all - 1.0;
    const bool b = gbt_lag >= rf_lag - 0.5;
    const bool c = rf_lag >= sel;
    std::string d = "(a) rf28=" + fmt(all) + " rf8=" + fmt(sel) + (a ? " ok" : " FAIL") + "; (b) gbt=" + fmt(gbt_lag) +
                    " rf=" + fmt(rf_lag) + (b ? " ok" : " FAIL") + "; (c) lag=" + fmt(rf_lag) + " nolag=" + fmt(sel) +
                    (c ? " ok" : " FAIL") + "; lags=" + std::to_string(res.final_features.size() - 8);
    return {a && b && c, d};
}

Outcome sensitivity() {
    const double m = 3.0;
    decision::DecisionPolicy p;
    p.thresholds = {40.0};
    p.labels = {"allow", "ban"};
    const decision::TwinView real{{"zone"}, {40.0 + m}, decision::Source::real};
    const auto rows = decision::prop1_sensitivity(p, real, {0.0, m / 4, m / 2, m, 2 * m}, 10000, 1);
    const double target = oracle::normal_cdf(1.0);
    const double sigma = std::sqrt(target * (1 - target) / 10000.0);
    const double at_m = rows[3].mean_agreement;
    bool ok = std::abs(at_m - target) <= 3 * sigma;
    std::string d = "agreement(sd=m)=" + fmt(at_m) + " target=" + fmt(target) + " 3sigma=" + fmt(3 * sigma) + " curve=";
    for (std::size_t s = 0; s < rows.size(); ++s) {
        d += (s ? "," : "") + fmt(rows[s].mean_agreement);
        if (s > 0 && rows[s].mean_agreement > rows[s - 1].mean_agreement + 2 * std::max(rows[s].std_error, rows[s - 1].std_error))
            ok = false;
    }
    return {ok, d};
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        auto text = io::read_file(e.path());
        const auto name = e.path().filename().string();
        if (name == "synthetic.json") {
            auto j = nlohmann::ordered_json::parse(text);
            j.erase("generated_at");
            text = j.dump();
        } else if (name == "config_used.json") {
            auto j = nlohmann::ordered_json::parse(text);
            j.erase("output_dir");
            text = j.dump();
        }
        out[name] = text;
    }
    return out;
}

Outcome determinism() {
    const auto& first = city_run();
    const auto dir = fixtures::temp_dir("acceptance_city_threads");
    std::ostringstream log;
    set_max_threads(4);
    pipeline::run_pipeline(city_config(dir), log);
    set_max_threads(0);
    const auto a = artifacts(first.dir), b = artifacts(dir);
    std::vector<std::string> differing;
    for (const auto& [name, text] : a)
        if (!b.count(name) || b.at(name) != text) differing.push_back(name);
    std::string d = "threads 1 vs 4, files=" + std::to_string(a.size());
    for (const auto& n : differing) d += " differs:" + n;
    return {differing.empty() && a.size() == b.size(), d};
}

Outcome service_contract() {
    auto svc = service::TwinService::from_directory(city_run().dir);
    httplib::Server server;
    service::mount(server, *svc, service::HttpConfig{});
    const int port = server.bind_to_any_port("127.0.0.1");
    if (port <= 0) return {false, "cannot bind"};
    std::thread runner([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client cli("127.0.0.1", port);
    double empty_agreement = -1.0;
    if (auto r = cli.Post("/api/scenarios", R"({"perturbations": []})", "application/json"); r && r->status == 200)
        empty_agreement = nlohmann::json::parse(r->body)["agreement_vs_baseline"].get<double>();
    int invalid_status = 0;
    if (auto r = cli.Post("/api/scenarios", R"({"perturbations": [{"feature": "not_a_feature", "op": "scale", "amount": 2}]})",
                          "application/json"))
        invalid_status = r->status;

    decision::DecisionPolicy pa, pb;
    pa.policy_id = "A";
    pb.policy_id = "B";
    pb.thresholds = {15.0, 22.0};
    const std::string ja = decision::to_json(pa).dump(), jb = decision::to_json(pb).dump();
    std::atomic<int> mixed{0}, failed{0}, completed{0};
    std::thread writer([&] {
        httplib::Client c("127.0.0.1", port);
        for (int i = 0; i < 50; ++i) {
            auto r = c.Put("/api/policy", i % 2 ? ja : jb, "application/json");
            (r && r->status == 200) ? ++completed : ++failed;
        }
    });
    std::thread reader([&] {
        httplib::Client c("127.0.0.1", port);
        for (int i = 0; i < 50; ++i) {
            auto r = c.Post("/api/scenarios", R"({"perturbations": [{"feature": ")" + svc->state().first->baseline.feature_names[0] +
                                                  R"(", "op": "scale", "amount": 1.2}]})",
                            "application/json");
            if (!r || r->status != 200) {
                ++failed;
                continue;
            }
            ++completed;
            const auto j = nlohmann::json::parse(r->body);
            const auto pol = decision::policy_from_json(j["policy"]);
            const auto& expect = pol.policy_id == "A" ? pa : pb;
            bool ok = pol == expect;
            for (const auto& z : j["zones"])
                ok = ok && z["decision"] == pol.labels[decision::decide_index(pol, z["value"].get<double>())] &&
                     z["baseline_decision"] == pol.labels[decision::decide_index(pol, z["baseline"].get<double>())];
            if (!ok) ++mixed;
        }
    });
    writer.join();
    reader.join();
    server.stop();
    runner.join();

    const bool ok = empty_agreement == 1.0 && invalid_status == 422 && mixed == 0 && failed == 0 && completed == 100;
    return {ok, "empty_agreement=" + fmt(empty_agreement, 6) + " invalid_status=" + std::to_string(invalid_status) +
                    " interleaved=" + std::to_string(completed.load()) + " failed=" + std::to_string(failed.load()) +
                    " mixed=" + std::to_string(mixed.load())};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"moran-oracle", 1.0, moran_oracle},
        {"checkerboard", 0.0, checkerboard},
        {"permutation-calibration", 30.0, permutation_calibration},
        {"tree-oracle", 10.0, tree_oracle},
        {"pipeline-paper-analog", 120.0, pipeline_paper_analog},
        {"sensitivity", 30.0, sensitivity},
        {"determinism", 0.0, determinism},
        {"service-contract", 0.0, service_contract},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::string timing = "time=" + fmt(secs, 2) + "s";
        if (c.time_limit_s > 0) {
            timing += " limit=" + fmt(c.time_limit_s, 0) + "s";
            if (secs >= c.time_limit_s) {
                o.pass = false;
                timing += " TOO_SLOW";
            }
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << " " << o.detail << " " << timing << std::endl;
    }
    std::cout << (failures ? "FAILED " : "ALL PASSED ") << (criteria.size() - static_cast<std::size_t>(failures)) << "/"
              << criteria.size() << std::endl;
    return failures ? 1 : 0;
}
