#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "city_generator.hpp"
#include "decision.hpp"
#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "features.hpp"
#include "geo.hpp"
#include "io.hpp"
#include "moran.hpp"
#include "spatial_weights.hpp"
#include "synth.hpp"
#include "table.hpp"

namespace airtwin::pipeline {

namespace fs = std::filesystem;

/// Where the zones and targets come from: either a generated city or files.
struct DataConfig {
    std::optional<geo::GeneratorConfig> generate;
    fs::path zones;         // GeoJSON; numeric properties become features
    fs::path table;         // optional feature table CSV replacing the GeoJSON properties
    fs::path measurements;  // optional EEA CSV; aggregated NO2 replaces the table target
    std::optional<geo::TimeWindow> window;
    std::optional<geo::GeoPoint> origin;
};

struct PipelineConfig {
    std::uint64_t seed = 1;
    DataConfig data;
    spatial::WeightScheme weights_scheme = spatial::WeightScheme::knn;
    std::size_t weights_k = 8;
    double moran_cutoff = 0.6;
    std::map<std::string, bool> lag_overrides;
    std::size_t moran_permutations = 999;
    models::ModelSpec model{models::ModelKind::gbt, {}, {}};
    models::ModelKind selection_model = models::ModelKind::random_forest;
    features::SelectionOptions selection;
    models::CvConfig cv;
    std::optional<synth::Scenario> scenario;
    decision::DecisionPolicy policy;
    std::vector<double> noise_sds{0.0, 1.0, 2.0, 4.0, 8.0};
    std::size_t sensitivity_trials = 1000;
    fs::path output_dir = "out";

    void validate() const {
        if (!data.generate && data.zones.empty()) throw InvalidConfig("data: set either 'generate' or 'zones'");
        if (moran_cutoff < -1.0 || moran_cutoff > 1.0) throw InvalidConfig("moran_cutoff must lie in [-1, 1]");
        if (cv.k < 2) throw InvalidConfig("cv.k must be >= 2");
        if (weights_scheme == spatial::WeightScheme::knn && weights_k < 1) throw InvalidConfig("weights.k must be >= 1");
        if (moran_permutations < 99) throw InvalidConfig("moran_permutations must be >= 99");
        policy.validate();
    }
};

inline std::optional<geo::Timestamp> parse_stamp_or_throw(const nlohmann::json& j, const char* what) {
    auto t = geo::parse_timestamp(j.get<std::string>());
    if (!t) throw InvalidConfig(std::string("data.window: bad ") + what + " timestamp");
    return t;
}

/// Reads a JSON config. Relative paths resolve against `base_dir`; an inline
/// object is accepted wherever a scenario or policy path is expected.
inline PipelineConfig config_from_json(const nlohmann::json& j, const fs::path& base_dir = {}) {
    PipelineConfig c;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base_dir.empty() ? fs::path(p) : base_dir / p; };
    try {
        c.seed = j.value("seed", c.seed);
        if (j.contains("data")) {
            const auto& d = j["data"];
            if (d.contains("generate")) {
                c.data.generate = geo::generator_config_from_json(d["generate"]);
                if (!d["generate"].contains("seed")) c.data.generate->seed = c.seed;
            }
            if (d.contains("zones")) c.data.zones = resolve(d["zones"].get<std::string>());
            if (d.contains("table")) c.data.table = resolve(d["table"].get<std::string>());
            if (d.contains("measurements")) c.data.measurements = resolve(d["measurements"].get<std::string>());
            if (d.contains("window"))
                c.data.window = geo::TimeWindow{*parse_stamp_or_throw(d["window"].at(0), "start"),
                                                *parse_stamp_or_throw(d["window"].at(1), "end")};
            if (d.contains("origin")) c.data.origin = geo::GeoPoint{d["origin"].at(0).get<double>(), d["origin"].at(1).get<double>()};
        } else {
            c.data.generate = geo::GeneratorConfig{};
            c.data.generate->seed = c.seed;
        }
        if (j.contains("weights")) {
            c.weights_scheme = spatial::parse_scheme(j["weights"].value("scheme", std::string("knn")));
            c.weights_k = j["weights"].value("k", c.weights_k);
        }
        c.moran_cutoff = j.value("moran_cutoff", c.moran_cutoff);
        if (j.contains("lag_overrides"))
            for (const auto& [k, v] : j["lag_overrides"].items()) c.lag_overrides[k] = v.get<bool>();
        c.moran_permutations = j.value("moran_permutations", c.moran_permutations);
        if (j.contains("model")) c.model = models::model_spec_from_json(j["model"]);
        if (j.contains("selection")) {
            const auto& s = j["selection"];
            c.selection.target_count = s.value("target_count", c.selection.target_count);
            c.selection.n_repeats = s.value("n_repeats", c.selection.n_repeats);
            if (s.contains("model")) c.selection_model = models::parse_model_kind(s["model"].get<std::string>());
        }
        if (j.contains("cv")) {
            c.cv.k = j["cv"].value("k", c.cv.k);
            c.cv.seed = j["cv"].value("seed", c.cv.seed);
            c.cv.shuffle = j["cv"].value("shuffle", c.cv.shuffle);
        }
        if (j.contains("scenario") && !j["scenario"].is_null()) {
            const auto& s = j["scenario"];
            c.scenario = synth::scenario_from_json(s.is_string() ? nlohmann::json::parse(io::read_file(resolve(s.get<std::string>()))) : s);
        }
        if (j.contains("policy") && !j["policy"].is_null()) {
            const auto& p = j["policy"];
            c.policy = decision::policy_from_json(p.is_string() ? nlohmann::json::parse(io::read_file(resolve(p.get<std::string>()))) : p);
        }
        if (j.contains("sensitivity")) {
            c.noise_sds = j["sensitivity"].value("noise_sds", c.noise_sds);
            c.sensitivity_trials = j["sensitivity"].value("n_trials", c.sensitivity_trials);
        }
        if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>());
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("pipeline config: ") + e.what());
    }
    return c;
}

inline PipelineConfig load_config(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidConfig(path.string() + ": " + e.what());
    }
    return config_from_json(j, path.parent_path());
}

/// Full config with every default filled in.
inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    nlohmann::ordered_json d = nlohmann::ordered_json::object();
    if (c.data.generate) d["generate"] = geo::to_json(*c.data.generate);
    if (!c.data.zones.empty()) d["zones"] = c.data.zones.string();
    if (!c.data.table.empty()) d["table"] = c.data.table.string();
    if (!c.data.measurements.empty()) d["measurements"] = c.data.measurements.string();
    if (c.data.window) d["window"] = {geo::format_timestamp(c.data.window->begin), geo::format_timestamp(c.data.window->end)};
    if (c.data.origin) d["origin"] = {c.data.origin->lat, c.data.origin->lon};
    j["data"] = d;
    j["weights"] = {{"scheme", spatial::to_string(c.weights_scheme)}, {"k", c.weights_k}};
    j["moran_cutoff"] = c.moran_cutoff;
    j["lag_overrides"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : c.lag_overrides) j["lag_overrides"][k] = v;
    j["moran_permutations"] = c.moran_permutations;
    j["model"] = models::to_json(c.model);
    j["selection"] = {{"target_count", c.selection.target_count},
                      {"n_repeats", c.selection.n_repeats},
                      {"model", models::to_string(c.selection_model)}};
    j["cv"] = {{"k", c.cv.k}, {"seed", c.cv.seed}, {"shuffle", c.cv.shuffle}};
    j["scenario"] = c.scenario ? synth::to_json(*c.scenario) : nlohmann::ordered_json(nullptr);
    j["policy"] = decision::to_json(c.policy);
    j["sensitivity"] = {{"noise_sds", c.noise_sds}, {"n_trials", c.sensitivity_trials}};
    j["output_dir"] = c.output_dir.string();
    return j;
}

// ---------------------------------------------------------------------------

struct LoadedData {
    geo::ZoneSet zones;
    FeatureTable table;
    /// Zones without a target; populated when targets come from stations.
    std::vector<std::string> missing_zones;
};

inline FeatureTable merge_table(const geo::ZoneSet& zones, const FeatureTable& file_table) {
    FeatureTable t;
    t.feature_names = file_table.feature_names;
    for (const auto& z : zones.zones) {
        auto r = file_table.row_index(z.id);
        if (!r) throw SchemaMismatch("feature table has no row for zone '" + z.id + "'");
        t.zone_ids.push_back(z.id);
        auto row = file_table.row(*r);
        t.values.insert(t.values.end(), row.begin(), row.end());
        t.y.push_back(file_table.y[*r]);
    }
    return t;
}

inline LoadedData load_data(const DataConfig& d) {
    LoadedData out;
    if (d.generate) {
        auto city = geo::generate_synthetic_city(*d.generate);
        out.zones = std::move(city.zones);
        out.table = std::move(city.table);
        return out;
    }
    out.zones = geo::load_zones_geojson(d.zones, d.origin);
    out.table = d.table.empty() ? geo::zone_table(out.zones) : merge_table(out.zones, table_from_csv(io::read_file(d.table)));
    if (!d.measurements.empty()) {
        const auto loaded = geo::load_eea_csv(d.measurements, geo::Pollutant::NO2);
        auto targets = geo::aggregate_stations_to_zones(loaded.measurements, out.zones, geo::Pollutant::NO2, d.window.value_or(geo::TimeWindow{}));
        out.table.y = std::move(targets.values);
        out.missing_zones = std::move(targets.missing_zones);
    }
    out.table.validate();
    return out;
}

inline spatial::SpatialWeights build_weights(const geo::ZoneSet& zones, spatial::WeightScheme scheme, std::size_t k) {
    auto w = scheme == spatial::WeightScheme::knn ? spatial::build_knn_weights(zones, k)
                                                  : spatial::build_contiguity_weights(zones, scheme);
    return spatial::row_standardize(w);
}

// ---------------------------------------------------------------------------

struct ModelComparison {
    std::string name;
    std::size_t n_features = 0;
    models::EvalReport report;
};

/// Final model report at top level, then every compared configuration.
inline std::string eval_report_document(const models::EvalReport& final_report, const std::string& final_name,
                                        const std::vector<ModelComparison>& comparisons) {
    auto num = [](double v) { return io::format_fixed(v, 6); };
    std::string s = models::report_to_json(final_report);
    s.pop_back();  // closing brace
    s.pop_back();  // newline
    s += ",\n  \"model\": \"" + final_name + "\",\n  \"comparisons\": {";
    for (std::size_t i = 0; i < comparisons.size(); ++i) {
        const auto& c = comparisons[i];
        s += (i ? ",\n" : "\n") + std::string("    \"") + c.name + "\": {\"n_features\": " + std::to_string(c.n_features) +
             ", \"accuracy_pct\": " + num(c.report.accuracy_pct) + ", \"accuracy_std_pct\": " + num(c.report.accuracy_std_pct) + "}";
    }
    s += "\n  }\n}\n";
    return s;
}

struct PipelineResult {
    std::vector<std::string> summary;
    std::vector<ModelComparison> comparisons;
    features::SelectionTrace trace;
    decision::DecisionReport decisions;
    std::vector<decision::SensitivityRow> sensitivity;
    std::vector<std::string> final_features;
    std::vector<fs::path> artifacts;
};

/// Names of the comparison entries, in the order they are written.
inline constexpr const char* kBaselineAll = "rf_all_features";
inline constexpr const char* kRfSelected = "rf_selected";
inline constexpr const char* kRfSelectedLag = "rf_selected_lag";
inline constexpr const char* kGbtSelectedLag = "gbt_selected_lag";

/// Failure inside run_pipeline; keeps the kind of the original error and
/// names the stage it came from.
class PipelineError : public Error {
public:
    PipelineError(std::string stage, const Error& cause)
        : Error(cause.kind(), "stage " + stage + ": " + cause.what()), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

namespace detail {

inline PipelineResult run_stages(const PipelineConfig& cfg, std::ostream& log, std::string& stage) {
    stage = "config";
    cfg.validate();
    using KV = io::KeyValues;
    PipelineResult res;
    auto emit = [&](std::string line) {
        log << line << '\n';
        log.flush();
        res.summary.push_back(std::move(line));
    };
    auto write = [&](const std::string& name, std::string_view content) {
        const auto p = cfg.output_dir / name;
        io::write_file(p, content);
        res.artifacts.push_back(p);
    };
    auto dump = [](const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; };

    write("config_used.json", dump(to_json(cfg)));

    stage = "load";
    // load
    auto data = load_data(cfg.data);
    const auto& table = data.table;
    const auto labelled_rows = table.target_rows();
    emit(KV().add("stage", "load").add("zones", table.rows()).add("features", table.cols()).add("labelled", labelled_rows.size()).str());
    write("zones.geojson", dump(geo::zones_to_geojson(data.zones)));

    stage = "weights";
    // weights
    const auto w = build_weights(data.zones, cfg.weights_scheme, cfg.weights_k);
    write("weights.csv", spatial::weights_to_csv(w));
    emit(KV().add("stage", "weights").add("scheme", spatial::to_string(cfg.weights_scheme)).add("k", cfg.weights_k)
             .add("islands", w.islands().size()).str());

    stage = "moran";
    // moran of the target on the labelled zones (over the full grid when every zone has a target)
    std::optional<spatial::MoranResult> target_moran;
    if (labelled_rows.size() == table.rows()) {
        target_moran = spatial::morans_permutation_test(w, table.y, cfg.moran_permutations, cfg.seed);
        write("moran_target.json", dump(spatial::to_json(*target_moran)));
        emit(KV().add("stage", "moran").add("target_I", target_moran->I).add("p", target_moran->p_value).str());
    } else {
        emit("stage=moran target_I=skipped reason=missing_targets");
    }
    write("correlation.csv", features::correlation_to_csv(features::correlation_matrix(table)));

    stage = "selection";
    // selection
    models::ModelSpec sel_spec = cfg.model;
    sel_spec.kind = cfg.selection_model;
    models::ModelSpec rf_spec = cfg.model;
    rf_spec.kind = models::ModelKind::random_forest;
    models::ModelSpec gbt_spec = cfg.model;
    gbt_spec.kind = models::ModelKind::gbt;

    const auto base_all = models::cross_validate(table, rf_spec, cfg.cv);
    res.comparisons.push_back({kBaselineAll, table.cols(), base_all});
    emit(KV().add("stage", "baseline").add("model", "random_forest").add("n_features", table.cols())
             .add("accuracy", base_all.accuracy_pct).str());

    std::vector<std::string> selected = table.feature_names;
    if (cfg.selection.target_count < table.cols()) {
        res.trace = features::select_features(table, sel_spec, cfg.selection, cfg.cv);
        selected = res.trace.final_set;
    } else {
        res.trace.initial_set = selected;
        res.trace.final_set = selected;
        res.trace.initial_accuracy = base_all.accuracy_pct;
        res.trace.initial_std = base_all.accuracy_std_pct;
    }
    write("selection_trace.json", dump(features::to_json(res.trace)));
    const auto sel_table = table.select_columns(selected);
    const auto rf_sel = models::cross_validate(sel_table, rf_spec, cfg.cv);
    res.comparisons.push_back({kRfSelected, sel_table.cols(), rf_sel});
    emit(KV().add("stage", "select").add("n_features", selected.size()).add("accuracy", rf_sel.accuracy_pct).str());

    stage = "augment";
    // augment
    features::LagOptions lag_opts{cfg.moran_cutoff, {}};
    for (const auto& [k, v] : cfg.lag_overrides)
        if (sel_table.column_index(k)) lag_opts.overrides[k] = v;
    const auto aug = features::augment_with_lags(sel_table, w, lag_opts);
    const auto& final_table = aug.table;
    res.final_features = final_table.feature_names;
    {
        // Catalog over every input column; lag entries only for lags kept.
        auto full = features::augment_with_lags(table, w, features::LagOptions{2.0, {}});
        features::FeatureCatalog catalog;
        catalog.entries = full.catalog.entries;
        for (const auto& e : aug.catalog.entries)
            if (e.source == features::FeatureSource::lagged) catalog.entries.push_back(e);
        catalog.mark_selected(res.final_features);
        write("catalog.json", dump(features::to_json(catalog)));
    }
    emit(KV().add("stage", "augment").add("lags", final_table.cols() - sel_table.cols()).add("n_features", final_table.cols()).str());
    write("table.csv", table_to_csv(final_table));

    stage = "evaluate";
    // evaluate
    const auto rf_lag = models::cross_validate_detailed(final_table, rf_spec, cfg.cv);
    const auto gbt_lag = models::cross_validate_detailed(final_table, gbt_spec, cfg.cv);
    res.comparisons.push_back({kRfSelectedLag, final_table.cols(), rf_lag.report});
    res.comparisons.push_back({kGbtSelectedLag, final_table.cols(), gbt_lag.report});
    const auto& final_cv = cfg.model.kind == models::ModelKind::gbt ? gbt_lag : rf_lag;
    write("eval_report.json", eval_report_document(final_cv.report, models::to_string(cfg.model.kind), res.comparisons));
    emit(KV().add("stage", "evaluate").add("model", models::to_string(cfg.model.kind)).add("accuracy", final_cv.report.accuracy_pct)
             .add("std", final_cv.report.accuracy_std_pct).add("rf_lag", rf_lag.report.accuracy_pct)
             .add("gbt_lag", gbt_lag.report.accuracy_pct).str());

    stage = "train";
    // train
    const auto model = models::fit_model(final_table, cfg.model);
    write("model.json", model_to_string(model) + "\n");
    emit(KV().add("stage", "train").add("model", models::to_string(model.kind)).add("trees", model.trees.size())
             .add("version", models::model_hash(model)).str());

    stage = "synth";
    // synth
    const auto ds = synth::generate_synthetic(model, final_table, cfg.scenario, &w);
    write("synthetic.csv", synth::synthetic_to_csv(ds));
    write("synthetic.json", dump(synth::provenance_json(ds, cfg.scenario)));
    emit(KV().add("stage", "synth").add("scenario", ds.scenario_id).add("zones", ds.values.size()).str());

    stage = "decide";
    // decide: observed targets against out-of-fold predictions
    decision::TwinView real{{}, {}, decision::Source::real};
    decision::TwinView oof{{}, {}, decision::Source::synthetic};
    for (std::size_t i = 0; i < final_cv.rows.size(); ++i) {
        const auto r = final_cv.rows[i];
        real.zone_ids.push_back(final_table.zone_ids[r]);
        real.values.push_back(final_table.y[r]);
        oof.zone_ids.push_back(final_table.zone_ids[r]);
        oof.values.push_back(final_cv.held_out[i]);
    }
    res.decisions = decision::equality_of_decisions(cfg.policy, real, oof);
    write("policy.json", dump(decision::to_json(cfg.policy)));
    write("decisions.csv", decision::report_to_csv(res.decisions));
    write("decisions.json", dump(decision::to_json(res.decisions)));
    emit(KV().add("stage", "decide").add("policy", cfg.policy.policy_id).add("agreement_rate", res.decisions.agreement_rate)
             .add("min_separation", res.decisions.min_separation_real).add("mean_margin", res.decisions.mean_margin).str());

    stage = "sensitivity";
    // sensitivity
    res.sensitivity = decision::prop1_sensitivity(cfg.policy, real, cfg.noise_sds, cfg.sensitivity_trials, cfg.seed);
    write("sensitivity.csv", decision::sensitivity_to_csv(res.sensitivity));
    emit(KV().add("stage", "sensitivity").add("sds", cfg.noise_sds.size()).add("trials", cfg.sensitivity_trials).str());
    return res;
}

}  // namespace detail

/// Runs every stage and writes the artifacts into cfg.output_dir. `log`
/// receives one `key=value` summary line per stage. Errors are rethrown as
/// PipelineError naming the stage.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream& log) {
    std::string stage;
    try {
        return detail::run_stages(cfg, log, stage);
    } catch (const Error& e) {
        throw PipelineError(stage, e);
    } catch (const std::exception& e) {
        throw PipelineError(stage, Error("InternalError", e.what()));
    }
}

}  // namespace airtwin::pipeline
