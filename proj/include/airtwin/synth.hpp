#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "features.hpp"
#include "io.hpp"
#include "spatial_weights.hpp"
#include "table.hpp"

namespace airtwin::synth {

enum class PerturbationOp { set, scale, delta };

inline std::string to_string(PerturbationOp op) {
    switch (op) {
        case PerturbationOp::set: return "set";
        case PerturbationOp::scale: return "scale";
        case PerturbationOp::delta: return "delta";
    }
    return "set";
}

struct Perturbation {
    std::string feature;
    /// Empty means every zone.
    std::vector<std::string> zones;
    PerturbationOp op = PerturbationOp::set;
    double amount = 0.0;
};

struct Scenario {
    std::string scenario_id = "scenario";
    std::vector<Perturbation> perturbations;
};

inline nlohmann::ordered_json to_json(const Scenario& s) {
    nlohmann::ordered_json j;
    j["scenario_id"] = s.scenario_id;
    j["perturbations"] = nlohmann::ordered_json::array();
    for (const auto& p : s.perturbations) {
        nlohmann::ordered_json jp;
        jp["feature"] = p.feature;
        jp["scope"] = p.zones.empty() ? nlohmann::ordered_json("all") : nlohmann::ordered_json(p.zones);
        jp["op"] = to_string(p.op);
        jp["amount"] = p.amount;
        j["perturbations"].push_back(std::move(jp));
    }
    return j;
}

/// Parses a scenario document. `scope` is "all" (default) or a list of zone ids.
inline Scenario scenario_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SchemaMismatch("", "scenario must be a JSON object");
    Scenario s;
    if (j.contains("scenario_id")) {
        if (!j["scenario_id"].is_string()) throw SchemaMismatch("/scenario_id", "must be a string");
        s.scenario_id = j["scenario_id"].get<std::string>();
    }
    if (!j.contains("perturbations")) return s;
    if (!j["perturbations"].is_array()) throw SchemaMismatch("/perturbations", "must be an array");
    for (std::size_t i = 0; i < j["perturbations"].size(); ++i) {
        const auto& jp = j["perturbations"][i];
        const std::string at = "/perturbations/" + std::to_string(i);
        if (!jp.is_object()) throw SchemaMismatch(at, "must be an object");
        Perturbation p;
        if (!jp.contains("feature") || !jp["feature"].is_string()) throw SchemaMismatch(at + "/feature", "missing or not a string");
        p.feature = jp["feature"].get<std::string>();
        if (!jp.contains("op") || !jp["op"].is_string()) throw SchemaMismatch(at + "/op", "missing or not a string");
        const auto op = jp["op"].get<std::string>();
        if (op == "set") p.op = PerturbationOp::set;
        else if (op == "scale") p.op = PerturbationOp::scale;
        else if (op == "delta") p.op = PerturbationOp::delta;
        else throw SchemaMismatch(at + "/op", "unknown op '" + op + "' (expected set, scale or delta)");
        if (!jp.contains("amount") || !jp["amount"].is_number()) throw SchemaMismatch(at + "/amount", "missing or not a number");
        p.amount = jp["amount"].get<double>();
        if (jp.contains("scope")) {
            const auto& sc = jp["scope"];
            if (sc.is_string() && sc.get<std::string>() == "all") {
            } else if (sc.is_array()) {
                for (std::size_t z = 0; z < sc.size(); ++z) {
                    if (!sc[z].is_string()) throw SchemaMismatch(at + "/scope/" + std::to_string(z), "zone id must be a string");
                    p.zones.push_back(sc[z].get<std::string>());
                }
            } else {
                throw SchemaMismatch(at + "/scope", "must be \"all\" or a list of zone ids");
            }
        }
        s.perturbations.push_back(std::move(p));
    }
    return s;
}

/// Checks a scenario against the table; throws SchemaMismatch naming the
/// first offending field.
inline void validate_scenario(const Scenario& s, const FeatureTable& table) {
    for (std::size_t i = 0; i < s.perturbations.size(); ++i) {
        const auto& p = s.perturbations[i];
        const std::string at = "/perturbations/" + std::to_string(i);
        if (!table.column_index(p.feature)) throw SchemaMismatch(at + "/feature", "unknown feature '" + p.feature + "'");
        if (features::is_lag_name(p.feature) && table.column_index(p.feature.substr(features::kLagPrefix.size())))
            throw SchemaMismatch(at + "/feature", "'" + p.feature + "' is derived; perturb its base feature instead");
        if (!std::isfinite(p.amount)) throw SchemaMismatch(at + "/amount", "must be finite");
        if (p.op == PerturbationOp::scale && !(p.amount > 0.0)) throw SchemaMismatch(at + "/amount", "scale amount must be > 0");
        for (std::size_t z = 0; z < p.zones.size(); ++z)
            if (!table.row_index(p.zones[z]))
                throw SchemaMismatch(at + "/scope/" + std::to_string(z), "unknown zone '" + p.zones[z] + "'");
    }
}

/// Returns a perturbed copy of the table; perturbations apply in list order.
inline FeatureTable apply_scenario(const FeatureTable& table, const Scenario& s) {
    validate_scenario(s, table);
    FeatureTable out = table;
    for (const auto& p : s.perturbations) {
        const std::size_t c = *out.column_index(p.feature);
        auto apply = [&](std::size_t r) {
            double& v = out.at(r, c);
            switch (p.op) {
                case PerturbationOp::set: v = p.amount; break;
                case PerturbationOp::scale: v *= p.amount; break;
                case PerturbationOp::delta: v += p.amount; break;
            }
        };
        if (p.zones.empty()) {
            for (std::size_t r = 0; r < out.rows(); ++r) apply(r);
        } else {
            std::unordered_set<std::size_t> rows;
            for (const auto& z : p.zones) rows.insert(*out.row_index(z));
            for (std::size_t r : rows) apply(r);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct SyntheticDataset {
    std::vector<std::string> zone_ids;
    std::vector<double> values;
    std::string model_version;
    std::string scenario_id;
    /// Fingerprint of the baseline table the values were derived from.
    std::string table_version;
    std::string generated_at;
};

inline std::string utc_now_iso() {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline constexpr const char* kBaselineScenario = "baseline";

/// Predicts every zone of `table` after applying the scenario. With weights,
/// lag columns are recomputed from the perturbed base features first.
inline SyntheticDataset generate_synthetic(const models::TreeEnsembleModel& model, const FeatureTable& table,
                                           const std::optional<Scenario>& scenario = std::nullopt,
                                           const spatial::SpatialWeights* lag_weights = nullptr) {
    FeatureTable input = scenario ? apply_scenario(table, *scenario) : table;
    if (scenario && lag_weights) input = features::refresh_lags(input, *lag_weights);
    SyntheticDataset ds;
    ds.zone_ids = table.zone_ids;
    ds.values = models::predict(model, input);
    for (double v : ds.values)
        if (!std::isfinite(v)) throw InvalidInput("model produced a non-finite value");
    ds.model_version = models::model_hash(model);
    ds.scenario_id = scenario ? scenario->scenario_id : kBaselineScenario;
    ds.table_version = io::fnv1a_hex(table_to_csv(table));
    ds.generated_at = utc_now_iso();
    return ds;
}

inline std::string synthetic_to_csv(const SyntheticDataset& ds) {
    std::string out = "zone_id,value\n";
    for (std::size_t i = 0; i < ds.zone_ids.size(); ++i) out += ds.zone_ids[i] + "," + io::format_double(ds.values[i]) + "\n";
    return out;
}

inline nlohmann::ordered_json provenance_json(const SyntheticDataset& ds, const std::optional<Scenario>& scenario) {
    nlohmann::ordered_json j;
    j["model_version"] = ds.model_version;
    j["scenario_id"] = ds.scenario_id;
    j["table_version"] = ds.table_version;
    j["n_zones"] = ds.zone_ids.size();
    j["scenario"] = scenario ? to_json(*scenario) : nlohmann::ordered_json(nullptr);
    j["generated_at"] = ds.generated_at;
    return j;
}

/// Reads `zone_id,value` rows.
inline std::vector<std::pair<std::string, double>> read_zone_values_csv(std::string_view text) {
    std::vector<std::pair<std::string, double>> out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        auto f = io::split_csv_line(line);
        if (header) {
            if (f.size() != 2 || f[0] != "zone_id") throw ParseError(lineno, "expected header zone_id,value");
            header = false;
            continue;
        }
        if (f.size() != 2) throw ParseError(lineno, "expected zone_id,value");
        auto v = io::parse_double(f[1]);
        if (!v) throw ParseError(lineno, "bad value '" + f[1] + "'");
        out.emplace_back(f[0], *v);
    }
    if (header) throw ParseError(1, "empty file");
    return out;
}

// ---------------------------------------------------------------------------

enum class DriftStatus { ok, drift };

struct ZoneResidual {
    std::string zone_id;
    double synthetic = 0.0;
    double live = 0.0;
    double residual = 0.0;
};

struct DriftReport {
    std::size_t n_compared = 0;
    double accuracy_pct = 0.0;
    double threshold_pct = 85.0;
    DriftStatus status = DriftStatus::ok;
    std::vector<ZoneResidual> residuals;
};

inline constexpr double kDefaultDriftThreshold = 85.0;

/// Compares synthetic values with live sensor readings on the zones both
/// cover. Accuracy uses the synthetic value as the reference, so a live
/// reading 50% above it scores 50.
inline DriftReport drift_check(const SyntheticDataset& synthetic, const std::map<std::string, double>& live,
                               double threshold_pct = kDefaultDriftThreshold) {
    DriftReport rep;
    rep.threshold_pct = threshold_pct;
    std::vector<double> ref, obs;
    for (std::size_t i = 0; i < synthetic.zone_ids.size(); ++i) {
        auto it = live.find(synthetic.zone_ids[i]);
        if (it == live.end()) continue;
        ref.push_back(synthetic.values[i]);
        obs.push_back(it->second);
        rep.residuals.push_back({synthetic.zone_ids[i], synthetic.values[i], it->second, it->second - synthetic.values[i]});
    }
    if (ref.empty()) throw NoData("drift_check: no zone has both synthetic and live values");
    rep.n_compared = ref.size();
    rep.accuracy_pct = models::accuracy_metric(ref, obs);
    rep.status = rep.accuracy_pct < threshold_pct ? DriftStatus::drift : DriftStatus::ok;
    return rep;
}

inline nlohmann::ordered_json to_json(const DriftReport& r) {
    nlohmann::ordered_json j;
    j["n_compared"] = r.n_compared;
    j["accuracy_pct"] = r.accuracy_pct;
    j["threshold_pct"] = r.threshold_pct;
    j["status"] = r.status == DriftStatus::ok ? "ok" : "drift";
    j["residuals"] = nlohmann::ordered_json::array();
    for (const auto& z : r.residuals)
        j["residuals"].push_back({{"zone_id", z.zone_id}, {"synthetic", z.synthetic}, {"live", z.live}, {"residual", z.residual}});
    return j;
}

}  // namespace airtwin::synth
