#include <gtest/gtest.h>

#include <atomic>
#include <sstream>
#include <thread>

#include "airtwin/pipeline.hpp"
#include "airtwin/service.hpp"
#include "airtwin/service_http.hpp"
#include "support/fixtures.hpp"

using namespace airtwin;
using namespace airtwin::service;

namespace {

std::shared_ptr<const TwinSnapshot> demo_snapshot() {
    static const auto snap = [] {
        geo::GeneratorConfig g;
        g.n_zones = 100;
        g.rho = 0.8;
        auto city = geo::generate_synthetic_city(g);
        models::ModelSpec spec;
        spec.forest.n_trees = 20;
        auto model = models::fit_model(city.table, spec);
        auto table = city.table.with_column("flat", std::vector<double>(city.table.rows(), 1.0));
        auto w = spatial::row_standardize(spatial::build_knn_weights(city.zones, 8));
        return make_snapshot(std::move(model), std::move(table), std::move(city.zones), std::move(w));
    }();
    return snap;
}

ApiResponse call(TwinService& svc, std::string method, std::string path, std::string body = {},
                 std::map<std::string, std::string> query = {}) {
    return svc.handle({std::move(method), std::move(path), std::move(query), std::move(body)});
}

decision::DecisionPolicy policy(std::string id, std::vector<double> thresholds) {
    decision::DecisionPolicy p;
    p.policy_id = std::move(id);
    p.thresholds = std::move(thresholds);
    return p;
}

/// True when every zone's decision in a scenario response follows the policy
/// echoed in the same response.
bool consistent_with_own_policy(const nlohmann::json& j) {
    const auto p = decision::policy_from_json(j["policy"]);
    for (const auto& z : j["zones"]) {
        if (z["decision"] != p.labels[decision::decide_index(p, z["value"].get<double>())]) return false;
        if (z["baseline_decision"] != p.labels[decision::decide_index(p, z["baseline"].get<double>())]) return false;
    }
    return true;
}

}  // namespace

TEST(Service, ZonesDocument) {
    TwinService svc(demo_snapshot(), {});
    const auto r = call(svc, "GET", "/api/zones");
    EXPECT_EQ(r.status, 200);
    EXPECT_EQ(r.content_type, "application/geo+json");
    const auto j = nlohmann::json::parse(r.body);
    EXPECT_EQ(j["type"], "FeatureCollection");
    ASSERT_EQ(j["features"].size(), 100u);
    const auto& props = j["features"][0]["properties"];
    EXPECT_TRUE(props.contains("zone_id"));
    EXPECT_TRUE(props.contains("no2_pred"));
    for (const auto& name : demo_snapshot()->baseline.feature_names) EXPECT_TRUE(props.contains(name)) << name;
    EXPECT_EQ(call(svc, "GET", "/api/zones").body, r.body);
}

TEST(Service, EmptyScenarioAgreesWithBaseline) {
    TwinService svc(demo_snapshot(), {});
    const auto r = call(svc, "POST", "/api/scenarios", R"({"scenario_id": "noop", "perturbations": []})");
    ASSERT_EQ(r.status, 200) << r.body;
    const auto j = nlohmann::json::parse(r.body);
    EXPECT_EQ(j["agreement_vs_baseline"], 1.0);
    EXPECT_EQ(j["n_changed"], 0);
    EXPECT_EQ(j["scenario_id"], "noop");
    for (const auto& z : j["zones"]) EXPECT_EQ(z["value"], z["baseline"]);
    std::size_t total = 0;
    for (const auto& [label, n] : j["label_counts"].items()) total += n.get<std::size_t>();
    EXPECT_EQ(total, 100u);
}

TEST(Service, ImportantFeatureMovesValues) {
    const auto snap = demo_snapshot();
    const auto& imp = snap->model.impurity_importances;
    const auto top = static_cast<std::size_t>(std::max_element(imp.begin(), imp.end()) - imp.begin());
    TwinService svc(snap, {});
    nlohmann::json body = {{"perturbations", {{{"feature", snap->model.feature_names[top]}, {"op", "scale"}, {"amount", 3.0}}}}};
    const auto j = nlohmann::json::parse(call(svc, "POST", "/api/scenarios", body.dump()).body);
    std::size_t moved = 0;
    for (const auto& z : j["zones"]) moved += z["value"] != z["baseline"];
    EXPECT_GE(moved, 1u);
}

TEST(Service, SchemaErrorsAre422WithField) {
    TwinService svc(demo_snapshot(), {});
    auto r = call(svc, "POST", "/api/scenarios", R"({"perturbations": [{"feature": "unicorns", "op": "set", "amount": 1}]})");
    EXPECT_EQ(r.status, 422);
    EXPECT_EQ(r.content_type, "application/problem+json");
    auto j = nlohmann::json::parse(r.body);
    EXPECT_EQ(j["field"], "/perturbations/0/feature");
    EXPECT_NE(j["detail"].get<std::string>().find("unicorns"), std::string::npos);
    EXPECT_EQ(j["status"], 422);
    EXPECT_EQ(call(svc, "POST", "/api/scenarios", "{not json").status, 422);
    EXPECT_EQ(call(svc, "POST", "/api/scenarios", R"({"perturbations": [{"feature": "income", "op": "x", "amount": 1}]})").status, 422);
}

TEST(Service, PolicyRoundTripAndValidation) {
    TwinService svc(demo_snapshot(), {});
    const std::string body = R"({"policy_id":"p2","thresholds":[20.0,40.0],"labels":["a","b","c"]})";
    EXPECT_EQ(call(svc, "PUT", "/api/policy", body).status, 200);
    EXPECT_EQ(nlohmann::json::parse(call(svc, "GET", "/api/policy").body), nlohmann::json::parse(body));
    const auto bad = call(svc, "PUT", "/api/policy", R"({"thresholds":[40,20],"labels":["a","b","c"]})");
    EXPECT_EQ(bad.status, 422);
    EXPECT_EQ(nlohmann::json::parse(bad.body)["field"], "/thresholds/1");
    EXPECT_EQ(nlohmann::json::parse(call(svc, "GET", "/api/policy").body)["policy_id"], "p2");
    const auto j = nlohmann::json::parse(call(svc, "POST", "/api/scenarios", "{}").body);
    EXPECT_EQ(j["policy"]["policy_id"], "p2");
    EXPECT_TRUE(j["label_counts"].contains("b"));
}

TEST(Service, MoranEndpoint) {
    TwinService svc(demo_snapshot(), {});
    const auto r = call(svc, "GET", "/api/moran", {}, {{"feature", "population_density"}});
    ASSERT_EQ(r.status, 200) << r.body;
    const auto j = nlohmann::json::parse(r.body);
    EXPECT_GE(j["I"].get<double>(), 0.6);
    EXPECT_EQ(j["n_permutations"], kMoranPermutations);
    EXPECT_EQ(call(svc, "GET", "/api/moran", {}, {{"feature", "population_density"}}).body, r.body);
    EXPECT_EQ(call(svc, "GET", "/api/moran", {}, {{"feature", "nope"}}).status, 404);
    EXPECT_EQ(call(svc, "GET", "/api/moran", {}, {{"feature", "flat"}}).status, 409);
    EXPECT_EQ(call(svc, "GET", "/api/moran").status, 400);
}

TEST(Service, MiscRoutes) {
    TwinService svc(demo_snapshot(), {});
    EXPECT_EQ(nlohmann::json::parse(call(svc, "GET", "/api/health").body)["status"], "ok");
    EXPECT_EQ(call(svc, "GET", "/api/unknown").status, 404);
    EXPECT_EQ(call(svc, "DELETE", "/api/policy").status, 404);
    EXPECT_EQ(call(svc, "POST", "/api/reload").status, 409);
    TwinService empty(nullptr, {});
    EXPECT_EQ(call(empty, "GET", "/api/zones").status, 503);
}

TEST(Service, SnapshotRejectsInconsistentParts) {
    const auto snap = demo_snapshot();
    auto zones = snap->zones;
    std::swap(zones.zones[0], zones.zones[1]);
    EXPECT_THROW(make_snapshot(snap->model, snap->baseline, zones, snap->weights), SchemaMismatch);
    const auto w = spatial::row_standardize(spatial::build_knn_weights(fixtures::grid_zones(3, 3), 2));
    EXPECT_THROW(make_snapshot(snap->model, snap->baseline, snap->zones, w), SchemaMismatch);
}

TEST(Service, ConcurrentEvaluationsMatchSerial) {
    TwinService svc(demo_snapshot(), {});
    const std::string body = R"({"perturbations": [{"feature": "road_density", "op": "scale", "amount": 0.5}]})";
    const auto serial = call(svc, "POST", "/api/scenarios", body).body;
    std::vector<std::string> got(8);
    std::vector<std::thread> threads;
    for (std::size_t i = 0; i < got.size(); ++i) threads.emplace_back([&, i] { got[i] = call(svc, "POST", "/api/scenarios", body).body; });
    for (auto& t : threads) t.join();
    for (const auto& g : got) EXPECT_EQ(g, serial);
}

TEST(Service, LoadsPipelineOutputAndReloads) {
    const auto dir = fixtures::temp_dir("service_dir");
    pipeline::PipelineConfig c;
    c.data.generate = geo::GeneratorConfig{};
    c.data.generate->n_zones = 49;
    c.model.boost.n_trees = 20;
    c.model.forest.n_trees = 10;
    c.selection.target_count = 27;
    c.selection.n_repeats = 1;
    c.cv.k = 3;
    c.moran_permutations = 99;
    c.sensitivity_trials = 100;
    c.policy = policy("from-dir", {25, 35});
    c.output_dir = dir;
    std::ostringstream log;
    pipeline::run_pipeline(c, log);

    auto svc = TwinService::from_directory(dir);
    EXPECT_EQ(nlohmann::json::parse(call(*svc, "GET", "/api/policy").body)["policy_id"], "from-dir");
    const auto before = nlohmann::json::parse(call(*svc, "GET", "/api/health").body)["snapshot_id"];
    const auto zones = nlohmann::json::parse(call(*svc, "GET", "/api/zones").body);
    EXPECT_EQ(zones["features"].size(), 49u);
    const auto reload = call(*svc, "POST", "/api/reload");
    ASSERT_EQ(reload.status, 200) << reload.body;
    EXPECT_EQ(nlohmann::json::parse(reload.body)["snapshot_id"], before);

    // The baseline predictions served match the model on the saved table.
    const auto j = nlohmann::json::parse(call(*svc, "POST", "/api/scenarios", "{}").body);
    const auto [snap, pol] = svc->state();
    EXPECT_EQ(j["zones"][0]["baseline"].get<double>(), models::predict(snap->model, snap->baseline)[0]);
}

TEST(ServiceHttp, InterleavedPolicySwapsNeverMix) {
    TwinService svc(demo_snapshot(), policy("A", {20, 40}));
    httplib::Server server;
    mount(server, svc, HttpConfig{});
    const int port = server.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread runner([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    const std::string a = decision::to_json(policy("A", {20, 40})).dump();
    const std::string b = decision::to_json(policy("B", {26, 31})).dump();
    std::atomic<int> mixed{0}, failed{0}, done{0};
    auto writer = [&] {
        httplib::Client cli("127.0.0.1", port);
        for (int i = 0; i < 50; ++i) {
            auto r = cli.Put("/api/policy", i % 2 ? a : b, "application/json");
            if (!r || r->status != 200) ++failed;
            ++done;
        }
    };
    auto reader = [&] {
        httplib::Client cli("127.0.0.1", port);
        for (int i = 0; i < 50; ++i) {
            auto r = cli.Post("/api/scenarios", R"({"perturbations":[{"feature":"income","op":"scale","amount":1.3}]})",
                              "application/json");
            if (!r || r->status != 200) {
                ++failed;
                continue;
            }
            if (!consistent_with_own_policy(nlohmann::json::parse(r->body))) ++mixed;
            ++done;
        }
    };
    std::thread t1(writer), t2(reader);
    t1.join();
    t2.join();

    httplib::Client cli("127.0.0.1", port);
    auto cors = cli.Get("/api/health", {{"Origin", "http://localhost:5173"}});
    ASSERT_TRUE(cors);
    EXPECT_EQ(cors->get_header_value("Access-Control-Allow-Origin"), "*");
    auto pre = cli.Options("/api/scenarios");
    ASSERT_TRUE(pre);
    EXPECT_EQ(pre->status, 204);
    auto missing = cli.Post("/api/scenarios", R"({"perturbations":[{"feature":"zzz","op":"set","amount":1}]})", "application/json");
    ASSERT_TRUE(missing);
    EXPECT_EQ(missing->status, 422);

    server.stop();
    runner.join();
    EXPECT_EQ(failed.load(), 0);
    EXPECT_EQ(mixed.load(), 0);
    EXPECT_EQ(done.load(), 100);
}
