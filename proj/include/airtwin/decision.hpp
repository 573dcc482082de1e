#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "random.hpp"

namespace airtwin::decision {

struct DecisionPolicy {
    std::string policy_id = "default";
    std::vector<double> thresholds{20.0, 40.0};
    std::vector<std::string> labels{"no-restriction", "schedule-restriction", "truck-ban"};

    /// Throws SchemaMismatch naming the offending field.
    void validate() const {
        if (thresholds.empty()) throw SchemaMismatch("/thresholds", "at least one threshold is required");
        for (std::size_t i = 0; i < thresholds.size(); ++i) {
            if (!std::isfinite(thresholds[i])) throw SchemaMismatch("/thresholds/" + std::to_string(i), "must be finite");
            if (i > 0 && !(thresholds[i] > thresholds[i - 1]))
                throw SchemaMismatch("/thresholds/" + std::to_string(i), "thresholds must be strictly increasing");
        }
        if (labels.size() != thresholds.size() + 1)
            throw SchemaMismatch("/labels", "expected " + std::to_string(thresholds.size() + 1) + " labels, got " +
                                                std::to_string(labels.size()));
        std::set<std::string> seen;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (!seen.insert(labels[i]).second) throw SchemaMismatch("/labels/" + std::to_string(i), "duplicate label '" + labels[i] + "'");
    }

    bool operator==(const DecisionPolicy&) const = default;
};

inline nlohmann::ordered_json to_json(const DecisionPolicy& p) {
    nlohmann::ordered_json j;
    j["policy_id"] = p.policy_id;
    j["thresholds"] = p.thresholds;
    j["labels"] = p.labels;
    return j;
}

/// Parses and validates a policy document.
inline DecisionPolicy policy_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw SchemaMismatch("", "policy must be a JSON object");
    DecisionPolicy p;
    if (j.contains("policy_id")) {
        if (!j["policy_id"].is_string()) throw SchemaMismatch("/policy_id", "must be a string");
        p.policy_id = j["policy_id"].get<std::string>();
    }
    if (!j.contains("thresholds") || !j["thresholds"].is_array()) throw SchemaMismatch("/thresholds", "missing or not an array");
    p.thresholds.clear();
    for (std::size_t i = 0; i < j["thresholds"].size(); ++i) {
        if (!j["thresholds"][i].is_number()) throw SchemaMismatch("/thresholds/" + std::to_string(i), "must be a number");
        p.thresholds.push_back(j["thresholds"][i].get<double>());
    }
    if (!j.contains("labels") || !j["labels"].is_array()) throw SchemaMismatch("/labels", "missing or not an array");
    p.labels.clear();
    for (std::size_t i = 0; i < j["labels"].size(); ++i) {
        if (!j["labels"][i].is_string()) throw SchemaMismatch("/labels/" + std::to_string(i), "must be a string");
        p.labels.push_back(j["labels"][i].get<std::string>());
    }
    p.validate();
    return p;
}

enum class Source { real, synthetic };

inline std::string to_string(Source s) { return s == Source::real ? "real" : "synthetic"; }

struct TwinView {
    std::vector<std::string> zone_ids;
    std::vector<double> values;
    Source source = Source::real;

    void validate() const {
        if (zone_ids.size() != values.size()) throw DimensionError("TwinView: zone_ids and values differ in length");
        for (std::size_t i = 0; i < values.size(); ++i)
            if (!std::isfinite(values[i])) throw InvalidInput("TwinView: non-finite value for zone " + zone_ids[i]);
    }
};

/// Label index of one value. A value exactly on a threshold takes the upper label.
inline std::size_t decide_index(const DecisionPolicy& policy, double value) {
    if (!std::isfinite(value)) throw InvalidInput("decide: non-finite value");
    return static_cast<std::size_t>(std::upper_bound(policy.thresholds.begin(), policy.thresholds.end(), value) -
                                    policy.thresholds.begin());
}

inline std::vector<std::size_t> decide_indices(const DecisionPolicy& policy, const TwinView& view) {
    policy.validate();
    view.validate();
    std::vector<std::size_t> out(view.values.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = decide_index(policy, view.values[i]);
    return out;
}

/// Label per zone, aligned with view.zone_ids.
inline std::vector<std::string> decide(const DecisionPolicy& policy, const TwinView& view) {
    std::vector<std::string> out;
    for (std::size_t k : decide_indices(policy, view)) out.push_back(policy.labels[k]);
    return out;
}

inline double margin_of(const DecisionPolicy& policy, double value) {
    if (!std::isfinite(value)) throw InvalidInput("separation_margin: non-finite value");
    double m = std::numeric_limits<double>::infinity();
    for (double t : policy.thresholds) m = std::min(m, std::abs(value - t));
    return m;
}

struct Margins {
    std::vector<double> per_zone;
    double min = 0.0;
};

inline Margins separation_margin(const DecisionPolicy& policy, const TwinView& view) {
    policy.validate();
    view.validate();
    if (view.values.empty()) throw NoData("separation_margin: empty view");
    Margins m;
    m.min = std::numeric_limits<double>::infinity();
    for (double v : view.values) {
        m.per_zone.push_back(margin_of(policy, v));
        m.min = std::min(m.min, m.per_zone.back());
    }
    return m;
}

struct ZoneDecision {
    std::string zone_id;
    std::string decision_real;
    std::string decision_synth;
    bool agree = false;
};

struct DecisionReport {
    std::vector<ZoneDecision> per_zone;
    std::size_t n_agree = 0;
    double agreement_rate = 0.0;
    double min_separation_real = 0.0;
    double mean_margin = 0.0;
};

/// Decision agreement between two views over the same zones. Zones of `b` are
/// matched to `a` by id; the order may differ. No check on the view sources.
inline DecisionReport compare_decisions(const DecisionPolicy& policy, const TwinView& a, const TwinView& b) {
    policy.validate();
    a.validate();
    b.validate();
    if (a.zone_ids.empty()) throw NoData("equality_of_decisions: empty view");
    if (a.zone_ids.size() != b.zone_ids.size())
        throw SchemaMismatch("zone sets differ: " + std::to_string(a.zone_ids.size()) + " vs " + std::to_string(b.zone_ids.size()) + " zones");
    std::unordered_map<std::string, std::size_t> b_index;
    for (std::size_t i = 0; i < b.zone_ids.size(); ++i)
        if (!b_index.emplace(b.zone_ids[i], i).second) throw SchemaMismatch("duplicate zone '" + b.zone_ids[i] + "'");

    DecisionReport rep;
    rep.min_separation_real = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.zone_ids.size(); ++i) {
        auto it = b_index.find(a.zone_ids[i]);
        if (it == b_index.end()) throw SchemaMismatch("zone '" + a.zone_ids[i] + "' missing from synthetic view");
        const std::size_t la = decide_index(policy, a.values[i]);
        const std::size_t lb = decide_index(policy, b.values[it->second]);
        rep.per_zone.push_back({a.zone_ids[i], policy.labels[la], policy.labels[lb], la == lb});
        if (la == lb) ++rep.n_agree;
        const double m = margin_of(policy, a.values[i]);
        rep.min_separation_real = std::min(rep.min_separation_real, m);
        rep.mean_margin += m;
    }
    const auto n = static_cast<double>(a.zone_ids.size());
    rep.agreement_rate = static_cast<double>(rep.n_agree) / n;
    rep.mean_margin /= n;
    return rep;
}

/// Compares decisions made on real data with those made on synthetic data.
inline DecisionReport equality_of_decisions(const DecisionPolicy& policy, const TwinView& real, const TwinView& synth) {
    if (real.source != Source::real) throw InvalidInput("equality_of_decisions: first view must have source=real");
    if (synth.source != Source::synthetic) throw InvalidInput("equality_of_decisions: second view must have source=synthetic");
    return compare_decisions(policy, real, synth);
}

inline nlohmann::ordered_json to_json(const DecisionReport& r) {
    nlohmann::ordered_json j;
    j["agreement_rate"] = r.agreement_rate;
    j["n_agree"] = r.n_agree;
    j["n_zones"] = r.per_zone.size();
    j["min_separation_real"] = r.min_separation_real;
    j["mean_margin"] = r.mean_margin;
    j["per_zone"] = nlohmann::ordered_json::array();
    for (const auto& z : r.per_zone)
        j["per_zone"].push_back({{"zone_id", z.zone_id}, {"real", z.decision_real}, {"synth", z.decision_synth}, {"agree", z.agree}});
    return j;
}

inline std::string report_to_csv(const DecisionReport& r) {
    std::string out = "zone_id,real,synth,agree\n";
    for (const auto& z : r.per_zone)
        out += z.zone_id + "," + z.decision_real + "," + z.decision_synth + "," + (z.agree ? "true" : "false") + "\n";
    return out;
}

// ---------------------------------------------------------------------------

struct SensitivityRow {
    double sd = 0.0;
    double mean_agreement = 0.0;
    double sd_agreement = 0.0;
    double std_error = 0.0;
    std::size_t n_trials = 0;
};

/// Monte-Carlo agreement between `real` and `real + N(0, sd)` per zone.
/// Trial t draws its noise from stream (seed, t) for every sd, so the curve
/// uses common random numbers across the grid.
inline std::vector<SensitivityRow> prop1_sensitivity(const DecisionPolicy& policy, const TwinView& real,
                                                     const std::vector<double>& noise_sds, std::size_t n_trials,
                                                     std::uint64_t seed) {
    policy.validate();
    real.validate();
    if (real.values.empty()) throw NoData("prop1_sensitivity: empty view");
    if (n_trials < 100) throw InvalidConfig("prop1_sensitivity: n_trials must be >= 100");
    for (double sd : noise_sds)
        if (!(sd >= 0.0) || !std::isfinite(sd)) throw InvalidConfig("prop1_sensitivity: noise sd must be finite and >= 0");

    const std::size_t n = real.values.size();
    std::vector<std::size_t> base(n);
    for (std::size_t i = 0; i < n; ++i) base[i] = decide_index(policy, real.values[i]);

    // agree[t * n_sd + s] = zones agreeing in trial t at noise level s
    const std::size_t n_sd = noise_sds.size();
    std::vector<std::size_t> agree(n_trials * n_sd);
    parallel_for(n_trials, [&](std::size_t t) {
        Rng rng(stream_seed(seed, t));
        std::vector<double> z(n);
        for (auto& v : z) v = rng.normal();
        for (std::size_t s = 0; s < n_sd; ++s) {
            std::size_t a = 0;
            for (std::size_t i = 0; i < n; ++i) a += decide_index(policy, real.values[i] + noise_sds[s] * z[i]) == base[i];
            agree[t * n_sd + s] = a;
        }
    });

    std::vector<SensitivityRow> out;
    const auto nz = static_cast<double>(n);
    for (std::size_t s = 0; s < n_sd; ++s) {
        SensitivityRow row;
        row.sd = noise_sds[s];
        row.n_trials = n_trials;
        std::size_t total = 0;
        for (std::size_t t = 0; t < n_trials; ++t) total += agree[t * n_sd + s];
        row.mean_agreement = static_cast<double>(total) / (nz * static_cast<double>(n_trials));
        double ss = 0.0;
        for (std::size_t t = 0; t < n_trials; ++t) {
            const double d = static_cast<double>(agree[t * n_sd + s]) / nz - row.mean_agreement;
            ss += d * d;
        }
        row.sd_agreement = std::sqrt(ss / static_cast<double>(n_trials - 1));
        row.std_error = row.sd_agreement / std::sqrt(static_cast<double>(n_trials));
        out.push_back(row);
    }
    return out;
}

inline std::string sensitivity_to_csv(const std::vector<SensitivityRow>& rows) {
    std::string out = "sd,mean_agreement,sd_agreement,std_error,n_trials\n";
    for (const auto& r : rows)
        out += io::format_double(r.sd) + "," + io::format_double(r.mean_agreement) + "," + io::format_double(r.sd_agreement) + "," +
               io::format_double(r.std_error) + "," + std::to_string(r.n_trials) + "\n";
    return out;
}

}  // namespace airtwin::decision
