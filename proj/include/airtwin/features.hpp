#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensemble.hpp"
#include "error.hpp"
#include "evaluation.hpp"
#include "io.hpp"
#include "moran.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "spatial_weights.hpp"
#include "table.hpp"

namespace airtwin::features {

inline constexpr std::string_view kLagPrefix = "lag_";

inline std::string lag_name(std::string_view feature) { return std::string(kLagPrefix) + std::string(feature); }

inline bool is_lag_name(std::string_view name) { return name.starts_with(kLagPrefix); }

// ---------------------------------------------------------------------------
// Correlation

struct CorrelationMatrix {
    std::vector<std::string> names;
    std::vector<double> values;

    double at(std::size_t i, std::size_t j) const { return values[i * names.size() + j]; }
};

/// Pearson correlations between all feature columns (labelled or not).
inline CorrelationMatrix correlation_matrix(const FeatureTable& table) {
    const std::size_t n = table.rows();
    const std::size_t p = table.cols();
    if (n < 2) throw InvalidInput("correlation_matrix needs at least 2 rows");
    std::vector<std::vector<double>> centered(p);
    std::vector<double> norm(p);
    for (std::size_t c = 0; c < p; ++c) {
        auto col = table.column(c);
        double mean = 0.0;
        for (double v : col) mean += v;
        mean /= static_cast<double>(n);
        double ss = 0.0;
        for (double& v : col) {
            v -= mean;
            ss += v * v;
        }
        const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
        if (!(ss > 0.0) || *lo == *hi) throw DegenerateVariance("column '" + table.feature_names[c] + "' is constant");
        norm[c] = std::sqrt(ss);
        centered[c] = std::move(col);
    }
    CorrelationMatrix m;
    m.names = table.feature_names;
    m.values.assign(p * p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        m.values[i * p + i] = 1.0;
        for (std::size_t j = i + 1; j < p; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < n; ++r) s += centered[i][r] * centered[j][r];
            const double c = std::clamp(s / (norm[i] * norm[j]), -1.0, 1.0);
            m.values[i * p + j] = c;
            m.values[j * p + i] = c;
        }
    }
    return m;
}

inline std::string correlation_to_csv(const CorrelationMatrix& m) {
    std::string out = "feature";
    for (const auto& n : m.names) out += "," + n;
    out += "\n";
    for (std::size_t i = 0; i < m.names.size(); ++i) {
        out += m.names[i];
        for (std::size_t j = 0; j < m.names.size(); ++j) out += "," + io::format_double(m.at(i, j));
        out += "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lag augmentation

enum class FeatureSource { static_feature, lagged };

struct CatalogEntry {
    std::string name;
    FeatureSource source = FeatureSource::static_feature;
    std::optional<double> moran_I;
    bool selected = true;
    /// Set when the feature could not be scored (e.g. a constant column).
    std::string note;
};

struct FeatureCatalog {
    std::vector<CatalogEntry> entries;

    const CatalogEntry* find(std::string_view name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    void mark_selected(std::span<const std::string> chosen) {
        for (auto& e : entries) e.selected = std::find(chosen.begin(), chosen.end(), e.name) != chosen.end();
    }
};

inline nlohmann::ordered_json to_json(const FeatureCatalog& c) {
    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    for (const auto& e : c.entries) {
        nlohmann::ordered_json je;
        je["name"] = e.name;
        je["source"] = e.source == FeatureSource::lagged ? "lagged" : "static";
        je["moran_I"] = e.moran_I ? nlohmann::ordered_json(*e.moran_I) : nlohmann::ordered_json(nullptr);
        je["selected"] = e.selected;
        if (!e.note.empty()) je["note"] = e.note;
        j.push_back(std::move(je));
    }
    return nlohmann::ordered_json{{"entries", j}};
}

struct LagOptions {
    double cutoff = 0.6;
    /// Per-feature decision that bypasses the cutoff (true = always lag).
    std::map<std::string, bool> overrides;
};

struct AugmentResult {
    FeatureTable table;
    FeatureCatalog catalog;
};

/// Appends `lag_<name>` = W x for every column whose Moran's I reaches the
/// cutoff. Existing columns are left untouched and keep their positions.
inline AugmentResult augment_with_lags(const FeatureTable& table, const spatial::SpatialWeights& w,
                                       const LagOptions& opts = {}) {
    if (!w.row_standardized) throw InvalidInput("augment_with_lags requires row-standardized weights");
    if (w.n != table.rows()) throw DimensionError("weights cover " + std::to_string(w.n) + " zones, table has " +
                                                  std::to_string(table.rows()));
    for (const auto& [name, on] : opts.overrides)
        if (!table.column_index(name)) throw SchemaMismatch("lag override for unknown feature '" + name + "'");

    AugmentResult out;
    out.table = table;
    std::vector<std::pair<std::string, std::vector<double>>> lags;
    for (std::size_t c = 0; c < table.cols(); ++c) {
        CatalogEntry e;
        e.name = table.feature_names[c];
        const auto col = table.column(c);
        try {
            e.moran_I = spatial::morans_i(w, col).I;
        } catch (const DegenerateVariance& err) {
            e.note = std::string("DegenerateVariance: ") + err.what();
        }
        bool lag = e.moran_I && *e.moran_I >= opts.cutoff;
        if (auto it = opts.overrides.find(e.name); it != opts.overrides.end()) lag = it->second;
        if (lag) lags.emplace_back(lag_name(e.name), spatial::spatial_lag(w, col).values);
        out.catalog.entries.push_back(std::move(e));
    }
    for (auto& [name, values] : lags) {
        out.table = out.table.with_column(name, values);
        CatalogEntry e;
        e.name = name;
        e.source = FeatureSource::lagged;
        out.catalog.entries.push_back(std::move(e));
    }
    return out;
}

/// Recomputes every `lag_<x>` column whose base column `x` is present.
inline FeatureTable refresh_lags(const FeatureTable& table, const spatial::SpatialWeights& w) {
    FeatureTable out = table;
    for (std::size_t c = 0; c < table.cols(); ++c) {
        const auto& name = table.feature_names[c];
        if (!is_lag_name(name)) continue;
        auto base = table.column_index(name.substr(kLagPrefix.size()));
        if (!base) continue;
        out.set_column(c, spatial::spatial_lag(w, table.column(*base)).values);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Permutation importance

/// Mean drop in accuracy when one feature column is shuffled across the
/// labelled rows. Repeat r of feature j shuffles with stream (seed, j, r).
inline std::map<std::string, double> permutation_importance(const models::TreeEnsembleModel& model,
                                                            const FeatureTable& table, std::size_t n_repeats,
                                                            std::uint64_t seed) {
    if (n_repeats < 1) throw InvalidConfig("n_repeats must be >= 1");
    const auto labelled = table.labelled();
    if (labelled.rows() == 0) throw NoData("permutation_importance needs labelled rows");
    const auto idx = models::feature_mapping(model, labelled);
    const std::size_t n = labelled.rows();
    const std::size_t p = idx.size();

    // Rows in model feature order.
    std::vector<double> x(n * p);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < p; ++c) x[r * p + c] = labelled.at(r, idx[c]);
    auto score = [&](const std::vector<double>& data) {
        std::vector<double> pred(n);
        for (std::size_t r = 0; r < n; ++r) pred[r] = model.predict_row(std::span<const double>(data.data() + r * p, p));
        return models::accuracy_metric(labelled.y, pred);
    };
    const double baseline = score(x);

    std::vector<double> drop(p, 0.0);
    parallel_for(p, [&](std::size_t j) {
        std::vector<double> data = x;
        std::vector<double> col(n);
        for (std::size_t rep = 0; rep < n_repeats; ++rep) {
            for (std::size_t r = 0; r < n; ++r) col[r] = x[r * p + j];
            Rng rng(stream_seed(seed, j, rep));
            rng.shuffle(std::span<double>(col));
            for (std::size_t r = 0; r < n; ++r) data[r * p + j] = col[r];
            drop[j] += baseline - score(data);
        }
        drop[j] /= static_cast<double>(n_repeats);
    });
    std::map<std::string, double> out;
    for (std::size_t j = 0; j < p; ++j) out[model.feature_names[j]] = drop[j];
    return out;
}

// ---------------------------------------------------------------------------
// Recursive feature elimination

struct SelectionStep {
    std::string removed_feature;
    std::size_t n_features = 0;
    double cv_accuracy_after = 0.0;
    double std_after = 0.0;
};

struct SelectionTrace {
    std::vector<std::string> initial_set;
    double initial_accuracy = 0.0;
    double initial_std = 0.0;
    std::vector<SelectionStep> steps;
    std::vector<std::string> final_set;
};

inline nlohmann::ordered_json to_json(const SelectionTrace& t) {
    nlohmann::ordered_json j;
    j["initial"] = {{"features", t.initial_set}, {"cv_accuracy", t.initial_accuracy}, {"std", t.initial_std}};
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : t.steps)
        j["steps"].push_back({{"removed_feature", s.removed_feature},
                              {"n_features", s.n_features},
                              {"cv_accuracy_after", s.cv_accuracy_after},
                              {"std_after", s.std_after}});
    j["final_set"] = t.final_set;
    return j;
}

struct SelectionOptions {
    std::size_t target_count = 8;
    std::size_t n_repeats = 3;
};

struct CvImportance {
    models::EvalReport report;
    std::map<std::string, double> importance;
};

/// Cross-validates and, when n_repeats > 0, averages held-out permutation
/// importance over the folds.
inline CvImportance cross_validate_with_importance(const FeatureTable& table, const models::ModelSpec& spec,
                                                   const models::CvConfig& cv, std::size_t n_repeats) {
    const auto labelled = table.labelled();
    const auto folds = models::split_folds(labelled, cv);
    std::vector<std::vector<double>> preds(cv.k);
    std::vector<std::map<std::string, double>> imps(cv.k);
    parallel_for(cv.k, [&](std::size_t f) {
        const auto model = models::fit_model(labelled.select_rows(folds.train[f]), spec);
        const auto test = labelled.select_rows(folds.test[f]);
        preds[f] = models::predict(model, test);
        if (n_repeats > 0) imps[f] = permutation_importance(model, test, n_repeats, stream_seed(cv.seed, f));
    });

    CvImportance out;
    out.report = models::summarize_folds(labelled.y, folds.test, preds);
    if (n_repeats > 0) {
        for (const auto& name : labelled.feature_names) {
            double s = 0.0;
            for (const auto& m : imps) s += m.at(name);
            out.importance[name] = s / static_cast<double>(cv.k);
        }
    }
    return out;
}

/// Recursive elimination: each round cross-validates the current set, ranks
/// features by held-out permutation importance and drops the weakest (ties go
/// to the earlier column), until target_count features remain.
inline SelectionTrace select_features(const FeatureTable& table, const models::ModelSpec& spec,
                                      const SelectionOptions& opts, const models::CvConfig& cv) {
    if (opts.target_count < 1 || opts.target_count >= table.cols())
        throw InvalidConfig("target_count must satisfy 1 <= target_count < " + std::to_string(table.cols()));
    SelectionTrace trace;
    std::vector<std::string> current = table.feature_names;
    trace.initial_set = current;
    auto round = cross_validate_with_importance(table, spec, cv, opts.n_repeats);
    trace.initial_accuracy = round.report.accuracy_pct;
    trace.initial_std = round.report.accuracy_std_pct;
    while (current.size() > opts.target_count) {
        std::size_t weakest = 0;
        for (std::size_t i = 1; i < current.size(); ++i)
            if (round.importance.at(current[i]) < round.importance.at(current[weakest])) weakest = i;
        SelectionStep step;
        step.removed_feature = current[weakest];
        current.erase(current.begin() + static_cast<std::ptrdiff_t>(weakest));
        const bool last = current.size() == opts.target_count;
        round = cross_validate_with_importance(table.select_columns(current), spec, cv, last ? 0 : opts.n_repeats);
        step.n_features = current.size();
        step.cv_accuracy_after = round.report.accuracy_pct;
        step.std_after = round.report.accuracy_std_pct;
        trace.steps.push_back(step);
    }
    trace.final_set = current;
    return trace;
}

}  // namespace airtwin::features
