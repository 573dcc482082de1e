#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "decision.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "features.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "moran.hpp"
#include "spatial_weights.hpp"
#include "synth.hpp"
#include "table.hpp"

namespace airtwin::service {

namespace fs = std::filesystem;

/// Everything a request may read. Built once and never modified afterwards,
/// apart from the Moran cache which only memoizes pure results.
struct TwinSnapshot {
    models::TreeEnsembleModel model;
    FeatureTable baseline;
    geo::ZoneSet zones;
    spatial::SpatialWeights weights;
    std::string snapshot_id;
    std::vector<double> baseline_pred;
    std::string zones_geojson;

    mutable std::mutex moran_mu;
    mutable std::map<std::string, std::string> moran_cache;
};

inline constexpr std::size_t kMoranPermutations = 999;
inline constexpr std::uint64_t kMoranSeed = 1;

/// Checks mutual consistency and precomputes the baseline predictions and
/// the zones document.
inline std::shared_ptr<const TwinSnapshot> make_snapshot(models::TreeEnsembleModel model, FeatureTable baseline,
                                                         geo::ZoneSet zones, spatial::SpatialWeights weights) {
    baseline.validate();
    weights.validate();
    if (zones.size() != baseline.rows()) throw SchemaMismatch("zones and table differ in size");
    for (std::size_t i = 0; i < zones.size(); ++i)
        if (zones.zones[i].id != baseline.zone_ids[i])
            throw SchemaMismatch("zone order differs from the table at row " + std::to_string(i));
    if (weights.n != baseline.rows()) throw SchemaMismatch("weights do not cover the table");
    if (!weights.row_standardized) weights = spatial::row_standardize(weights);

    auto s = std::make_shared<TwinSnapshot>();
    s->baseline_pred = models::predict(model, baseline);
    s->snapshot_id = io::fnv1a_hex(models::model_to_string(model) + table_to_csv(baseline) + spatial::weights_to_csv(weights));

    std::vector<std::pair<std::string, std::vector<nlohmann::ordered_json>>> extra;
    for (std::size_t c = 0; c < baseline.cols(); ++c) {
        const auto& name = baseline.feature_names[c];
        if (std::find(zones.feature_names.begin(), zones.feature_names.end(), name) != zones.feature_names.end()) continue;
        std::vector<nlohmann::ordered_json> col;
        for (std::size_t r = 0; r < baseline.rows(); ++r) col.emplace_back(baseline.at(r, c));
        extra.emplace_back(name, std::move(col));
    }
    std::vector<nlohmann::ordered_json> pred, observed;
    for (std::size_t r = 0; r < baseline.rows(); ++r) {
        pred.emplace_back(s->baseline_pred[r]);
        observed.push_back(baseline.has_target(r) ? nlohmann::ordered_json(baseline.y[r]) : nlohmann::ordered_json(nullptr));
    }
    extra.emplace_back("no2_pred", std::move(pred));
    extra.emplace_back("no2_observed", std::move(observed));
    auto doc = geo::zones_to_geojson(zones, geo::CoordinateOutput::lonlat, extra);
    doc["snapshot_id"] = s->snapshot_id;
    s->zones_geojson = doc.dump();

    s->model = std::move(model);
    s->baseline = std::move(baseline);
    s->zones = std::move(zones);
    s->weights = std::move(weights);
    return s;
}

/// Reads the artifacts written by the pipeline.
inline std::shared_ptr<const TwinSnapshot> load_snapshot(const fs::path& dir) {
    auto model = models::model_from_json(nlohmann::json::parse(io::read_file(dir / "model.json")));
    auto table = table_from_csv(io::read_file(dir / "table.csv"));
    auto zones = geo::load_zones_geojson(dir / "zones.geojson");
    auto weights = spatial::weights_from_csv(io::read_file(dir / "weights.csv"));
    return make_snapshot(std::move(model), std::move(table), std::move(zones), std::move(weights));
}

// ---------------------------------------------------------------------------

struct ApiRequest {
    std::string method;
    std::string path;
    std::map<std::string, std::string> query;
    std::string body;
};

struct ApiResponse {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
};

inline ApiResponse json_response(const nlohmann::ordered_json& j, int status = 200) { return {status, j.dump(), "application/json"}; }

/// RFC 7807 problem document.
inline ApiResponse problem(int status, const std::string& title, const std::string& detail, const std::string& field = {}) {
    nlohmann::ordered_json j;
    j["type"] = "about:blank";
    j["title"] = title;
    j["status"] = status;
    j["detail"] = detail;
    if (!field.empty()) j["field"] = field;
    return {status, j.dump(), "application/problem+json"};
}

class TwinService {
public:
    TwinService(std::shared_ptr<const TwinSnapshot> snapshot, decision::DecisionPolicy policy, fs::path snapshot_dir = {})
        : snapshot_(std::move(snapshot)),
          policy_(std::make_shared<const decision::DecisionPolicy>(std::move(policy))),
          snapshot_dir_(std::move(snapshot_dir)) {
        policy_->validate();
    }

    /// Starts from a pipeline output directory; policy.json is optional there.
    static std::unique_ptr<TwinService> from_directory(const fs::path& dir) {
        decision::DecisionPolicy policy;
        if (fs::exists(dir / "policy.json")) policy = decision::policy_from_json(nlohmann::json::parse(io::read_file(dir / "policy.json")));
        return std::make_unique<TwinService>(load_snapshot(dir), std::move(policy), dir);
    }

    ApiResponse handle(const ApiRequest& req) {
        try {
            return route(req);
        } catch (const SchemaMismatch& e) {
            return problem(422, "SchemaMismatch", e.what(), e.field());
        } catch (const InvalidInput& e) {
            return problem(422, "InvalidInput", e.what());
        } catch (const DegenerateVariance& e) {
            return problem(409, "DegenerateVariance", e.what());
        } catch (const Error& e) {
            return problem(500, e.kind(), e.what());
        } catch (const std::exception& e) {
            return problem(500, "InternalError", e.what());
        }
    }

    std::pair<std::shared_ptr<const TwinSnapshot>, std::shared_ptr<const decision::DecisionPolicy>> state() const {
        std::lock_guard lock(mu_);
        return {snapshot_, policy_};
    }

    void set_policy(decision::DecisionPolicy p) {
        p.validate();
        auto next = std::make_shared<const decision::DecisionPolicy>(std::move(p));
        std::lock_guard lock(mu_);
        policy_ = std::move(next);
    }

    void set_snapshot(std::shared_ptr<const TwinSnapshot> s) {
        std::lock_guard lock(mu_);
        snapshot_ = std::move(s);
    }

    /// Evaluates a scenario against one consistent (snapshot, policy) pair.
    static nlohmann::ordered_json evaluate(const TwinSnapshot& snap, const decision::DecisionPolicy& policy,
                                           const synth::Scenario& scenario) {
        const auto ds = synth::generate_synthetic(snap.model, snap.baseline, scenario, &snap.weights);
        decision::TwinView base{snap.baseline.zone_ids, snap.baseline_pred, decision::Source::synthetic};
        decision::TwinView scen{snap.baseline.zone_ids, ds.values, decision::Source::synthetic};
        const auto rep = decision::compare_decisions(policy, base, scen);
        const auto margins = decision::separation_margin(policy, scen);

        nlohmann::ordered_json j;
        j["scenario_id"] = scenario.scenario_id;
        j["snapshot_id"] = snap.snapshot_id;
        j["model_version"] = ds.model_version;
        j["policy"] = decision::to_json(policy);
        j["agreement_vs_baseline"] = rep.agreement_rate;
        j["n_changed"] = rep.per_zone.size() - rep.n_agree;
        j["min_separation"] = margins.min;
        std::map<std::string, std::size_t> counts;
        for (const auto& l : policy.labels) counts[l] = 0;
        j["zones"] = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < rep.per_zone.size(); ++i) {
            const auto& z = rep.per_zone[i];
            ++counts[z.decision_synth];
            j["zones"].push_back({{"zone_id", z.zone_id},
                                  {"value", ds.values[i]},
                                  {"baseline", snap.baseline_pred[i]},
                                  {"decision", z.decision_synth},
                                  {"baseline_decision", z.decision_real},
                                  {"changed", !z.agree},
                                  {"margin", margins.per_zone[i]}});
        }
        nlohmann::ordered_json jc = nlohmann::ordered_json::object();
        for (const auto& l : policy.labels) jc[l] = counts[l];
        j["label_counts"] = jc;
        return j;
    }

private:
    ApiResponse route(const ApiRequest& req) {
        if (req.method == "GET" && req.path == "/api/health") {
            auto [snap, policy] = state();
            return json_response({{"status", snap ? "ok" : "no-snapshot"}, {"snapshot_id", snap ? snap->snapshot_id : ""}});
        }
        if (req.method == "GET" && req.path == "/api/policy") return json_response(decision::to_json(*state().second));
        if (req.method == "PUT" && req.path == "/api/policy") {
            const auto p = decision::policy_from_json(parse_body(req.body));
            set_policy(p);
            return json_response(decision::to_json(p));
        }
        if (req.method == "POST" && req.path == "/api/reload") {
            if (snapshot_dir_.empty()) return problem(409, "NoSnapshotDirectory", "service was started without a snapshot directory");
            auto fresh = load_snapshot(snapshot_dir_);
            const auto id = fresh->snapshot_id;
            set_snapshot(std::move(fresh));
            return json_response({{"snapshot_id", id}});
        }

        auto [snap, policy] = state();
        if (!snap) return problem(503, "NoSnapshot", "no twin snapshot is loaded");
        if (req.method == "GET" && req.path == "/api/zones") return {200, snap->zones_geojson, "application/geo+json"};
        if (req.method == "POST" && req.path == "/api/scenarios") {
            const auto scenario = synth::scenario_from_json(parse_body(req.body));
            return json_response(evaluate(*snap, *policy, scenario));
        }
        if (req.method == "GET" && req.path == "/api/moran") {
            auto it = req.query.find("feature");
            if (it == req.query.end() || it->second.empty()) return problem(400, "MissingParameter", "query parameter 'feature' is required", "feature");
            return moran(*snap, it->second);
        }
        return problem(404, "NotFound", req.method + " " + req.path + " is not an API endpoint");
    }

    static ApiResponse moran(const TwinSnapshot& snap, const std::string& feature) {
        const auto col = snap.baseline.column_index(feature);
        if (!col) return problem(404, "UnknownFeature", "unknown feature '" + feature + "'", "feature");
        {
            std::lock_guard lock(snap.moran_mu);
            if (auto it = snap.moran_cache.find(feature); it != snap.moran_cache.end()) return {200, it->second, "application/json"};
        }
        auto j = spatial::to_json(spatial::morans_permutation_test(snap.weights, snap.baseline.column(*col), kMoranPermutations, kMoranSeed));
        j["feature"] = feature;
        auto body = j.dump();
        std::lock_guard lock(snap.moran_mu);
        return {200, snap.moran_cache.emplace(feature, std::move(body)).first->second, "application/json"};
    }

    static nlohmann::json parse_body(const std::string& body) {
        try {
            return nlohmann::json::parse(body);
        } catch (const nlohmann::json::parse_error& e) {
            throw SchemaMismatch("", std::string("body is not valid JSON: ") + e.what());
        }
    }

    mutable std::mutex mu_;
    std::shared_ptr<const TwinSnapshot> snapshot_;
    std::shared_ptr<const decision::DecisionPolicy> policy_;
    fs::path snapshot_dir_;
};

}  // namespace airtwin::service
