#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ensemble.hpp"
#include "error.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "table.hpp"

namespace airtwin::models {

/// 100 * (1 - MAPE), floored at 0. Every reference value must be positive.
inline double accuracy_metric(std::span<const double> y, std::span<const double> yhat) {
    if (y.size() != yhat.size()) throw DimensionError("accuracy_metric: length mismatch");
    if (y.empty()) throw NoData("accuracy_metric: no values");
    double ape = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (!(y[i] > 0.0)) throw DegenerateTarget("accuracy_metric: reference value must be > 0 (index " + std::to_string(i) + ")");
        ape += std::abs(y[i] - yhat[i]) / y[i];
    }
    return std::max(0.0, 100.0 * (1.0 - ape / static_cast<double>(y.size())));
}

struct CvConfig {
    std::size_t k = 10;
    std::uint64_t seed = 42;
    bool shuffle = true;
};

struct FoldResult {
    std::size_t n_test = 0;
    double accuracy_pct = 0.0;
    double mae = 0.0;
};

struct EvalReport {
    double accuracy_pct = 0.0;
    double accuracy_std_pct = 0.0;
    double mean_target = 0.0;
    double error_lo = 0.0;
    double error_hi = 0.0;
    std::vector<FoldResult> per_fold;
};

struct CvResult {
    EvalReport report;
    /// Out-of-fold prediction for each labelled row; held_out[i] belongs to table row rows[i].
    std::vector<double> held_out;
    std::vector<std::size_t> rows;
};

/// Fold of each position after the optional seeded shuffle; position i of the
/// shuffled order goes to fold floor(i * k / n).
inline std::vector<std::size_t> fold_assignment(std::size_t n, const CvConfig& cv) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (cv.shuffle) {
        Rng rng(stream_seed(cv.seed, 0xf01d));
        rng.shuffle(std::span<std::size_t>(order));
    }
    std::vector<std::size_t> fold(n);
    for (std::size_t i = 0; i < n; ++i) fold[order[i]] = i * cv.k / n;
    return fold;
}

/// Builds the report from per-fold held-out predictions. `fold_rows[f]` lists
/// positions into `y`, aligned with `fold_pred[f]`.
inline EvalReport summarize_folds(std::span<const double> y, const std::vector<std::vector<std::size_t>>& fold_rows,
                                  const std::vector<std::vector<double>>& fold_pred) {
    EvalReport rep;
    const std::size_t k = fold_rows.size();
    double abs_err = 0.0;
    for (std::size_t f = 0; f < k; ++f) {
        std::vector<double> truth;
        FoldResult fr;
        fr.n_test = fold_rows[f].size();
        for (std::size_t m = 0; m < fr.n_test; ++m) {
            truth.push_back(y[fold_rows[f][m]]);
            fr.mae += std::abs(truth.back() - fold_pred[f][m]);
        }
        abs_err += fr.mae;
        fr.mae /= static_cast<double>(fr.n_test);
        fr.accuracy_pct = accuracy_metric(truth, fold_pred[f]);
        rep.per_fold.push_back(fr);
        rep.accuracy_pct += fr.accuracy_pct;
    }
    rep.accuracy_pct /= static_cast<double>(k);
    for (const auto& fr : rep.per_fold)
        rep.accuracy_std_pct += (fr.accuracy_pct - rep.accuracy_pct) * (fr.accuracy_pct - rep.accuracy_pct);
    rep.accuracy_std_pct = std::sqrt(rep.accuracy_std_pct / static_cast<double>(k));
    for (double v : y) rep.mean_target += v;
    rep.mean_target /= static_cast<double>(y.size());
    const double mae = abs_err / static_cast<double>(y.size());
    rep.error_lo = rep.mean_target - mae;
    rep.error_hi = rep.mean_target + mae;
    return rep;
}

/// Held-out and training positions of each fold over n labelled rows.
struct FoldSplit {
    std::vector<std::vector<std::size_t>> test;
    std::vector<std::vector<std::size_t>> train;
};

inline FoldSplit split_folds(const FeatureTable& labelled, const CvConfig& cv) {
    const std::size_t n = labelled.rows();
    if (cv.k < 2) throw InvalidConfig("cv.k must be >= 2");
    if (cv.k > n) throw InvalidConfig("cv.k (" + std::to_string(cv.k) + ") exceeds labelled rows (" + std::to_string(n) + ")");
    for (double v : labelled.y)
        if (!(v > 0.0)) throw DegenerateTarget("targets must be > 0 for accuracy evaluation");
    const auto fold = fold_assignment(n, cv);
    FoldSplit s;
    s.test.resize(cv.k);
    s.train.resize(cv.k);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t f = 0; f < cv.k; ++f) (fold[i] == f ? s.test[f] : s.train[f]).push_back(i);
    return s;
}

/// k-fold cross-validation over the labelled rows. Folds are independent and
/// may train concurrently; results are merged in fold order.
inline CvResult cross_validate_detailed(const FeatureTable& table, const ModelSpec& spec, const CvConfig& cv) {
    const auto labelled = table.labelled();
    const auto folds = split_folds(labelled, cv);
    std::vector<std::vector<double>> fold_pred(cv.k);
    parallel_for(cv.k, [&](std::size_t f) {
        const auto model = fit_model(labelled.select_rows(folds.train[f]), spec);
        fold_pred[f] = predict(model, labelled.select_rows(folds.test[f]));
    });

    CvResult out;
    out.rows = table.target_rows();
    out.held_out.assign(labelled.rows(), 0.0);
    for (std::size_t f = 0; f < cv.k; ++f)
        for (std::size_t m = 0; m < folds.test[f].size(); ++m) out.held_out[folds.test[f][m]] = fold_pred[f][m];
    out.report = summarize_folds(labelled.y, folds.test, fold_pred);
    return out;
}

inline EvalReport cross_validate(const FeatureTable& table, const ModelSpec& spec, const CvConfig& cv) {
    return cross_validate_detailed(table, spec, cv).report;
}

/// JSON text with every real number in fixed 6-decimal notation.
inline std::string report_to_json(const EvalReport& r, int indent = 2) {
    const std::string pad(static_cast<std::size_t>(indent), ' ');
    auto num = [](double v) { return io::format_fixed(v, 6); };
    std::string s = "{\n";
    s += pad + "\"accuracy_pct\": " + num(r.accuracy_pct) + ",\n";
    s += pad + "\"accuracy_std_pct\": " + num(r.accuracy_std_pct) + ",\n";
    s += pad + "\"mean_target\": " + num(r.mean_target) + ",\n";
    s += pad + "\"error_range\": [" + num(r.error_lo) + ", " + num(r.error_hi) + "],\n";
    s += pad + "\"per_fold\": [";
    for (std::size_t i = 0; i < r.per_fold.size(); ++i) {
        const auto& f = r.per_fold[i];
        s += (i ? ", " : "") + std::string("{\"n_test\": ") + std::to_string(f.n_test) +
             ", \"accuracy_pct\": " + num(f.accuracy_pct) + ", \"mae\": " + num(f.mae) + "}";
    }
    s += "]\n}";
    return s;
}

inline EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    r.accuracy_pct = j.at("accuracy_pct").get<double>();
    r.accuracy_std_pct = j.at("accuracy_std_pct").get<double>();
    r.mean_target = j.at("mean_target").get<double>();
    r.error_lo = j.at("error_range").at(0).get<double>();
    r.error_hi = j.at("error_range").at(1).get<double>();
    for (const auto& f : j.at("per_fold"))
        r.per_fold.push_back({f.at("n_test").get<std::size_t>(), f.at("accuracy_pct").get<double>(), f.at("mae").get<double>()});
    return r;
}

}  // namespace airtwin::models
