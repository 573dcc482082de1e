#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "table.hpp"
#include "tree.hpp"

namespace airtwin::models {

enum class ModelKind { random_forest, gbt };

inline std::string to_string(ModelKind k) { return k == ModelKind::gbt ? "gbt" : "random_forest"; }

inline ModelKind parse_model_kind(std::string_view s) {
    if (s == "random_forest" || s == "rf") return ModelKind::random_forest;
    if (s == "gbt" || s == "xgboost") return ModelKind::gbt;
    throw InvalidConfig("unknown model kind '" + std::string(s) + "'");
}

struct ForestParams {
    std::size_t n_trees = 200;
    int max_depth = -1;
    std::size_t min_samples_leaf = 2;
    double feature_subsample = 0.5;
    bool bootstrap = true;
    std::uint64_t seed = 42;
};

struct BoostParams {
    std::size_t n_trees = 300;
    double learning_rate = 0.05;
    int max_depth = 3;
    std::size_t min_samples_leaf = 3;
    double subsample_rows = 0.8;
    std::uint64_t seed = 42;
};

/// Which learner to train, with the hyper-parameters of both kinds.
struct ModelSpec {
    ModelKind kind = ModelKind::random_forest;
    ForestParams forest;
    BoostParams boost;
};

inline nlohmann::ordered_json to_json(const ModelSpec& s) {
    nlohmann::ordered_json j;
    j["kind"] = to_string(s.kind);
    j["random_forest"] = {{"n_trees", s.forest.n_trees},
                          {"max_depth", s.forest.max_depth},
                          {"min_samples_leaf", s.forest.min_samples_leaf},
                          {"feature_subsample", s.forest.feature_subsample},
                          {"bootstrap", s.forest.bootstrap},
                          {"seed", s.forest.seed}};
    j["gbt"] = {{"n_trees", s.boost.n_trees},
                {"learning_rate", s.boost.learning_rate},
                {"max_depth", s.boost.max_depth},
                {"min_samples_leaf", s.boost.min_samples_leaf},
                {"subsample_rows", s.boost.subsample_rows},
                {"seed", s.boost.seed}};
    return j;
}

/// Missing members keep their defaults.
inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    try {
        if (j.contains("kind")) s.kind = parse_model_kind(j["kind"].get<std::string>());
        if (j.contains("random_forest")) {
            const auto& f = j["random_forest"];
            s.forest.n_trees = f.value("n_trees", s.forest.n_trees);
            s.forest.max_depth = f.value("max_depth", s.forest.max_depth);
            s.forest.min_samples_leaf = f.value("min_samples_leaf", s.forest.min_samples_leaf);
            s.forest.feature_subsample = f.value("feature_subsample", s.forest.feature_subsample);
            s.forest.bootstrap = f.value("bootstrap", s.forest.bootstrap);
            s.forest.seed = f.value("seed", s.forest.seed);
        }
        if (j.contains("gbt")) {
            const auto& b = j["gbt"];
            s.boost.n_trees = b.value("n_trees", s.boost.n_trees);
            s.boost.learning_rate = b.value("learning_rate", s.boost.learning_rate);
            s.boost.max_depth = b.value("max_depth", s.boost.max_depth);
            s.boost.min_samples_leaf = b.value("min_samples_leaf", s.boost.min_samples_leaf);
            s.boost.subsample_rows = b.value("subsample_rows", s.boost.subsample_rows);
            s.boost.seed = b.value("seed", s.boost.seed);
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("model spec: ") + e.what());
    }
    return s;
}

struct TreeEnsembleModel {
    ModelKind kind = ModelKind::random_forest;
    std::vector<RegressionTree> trees;
    double learning_rate = 1.0;
    double base_prediction = 0.0;
    std::vector<std::string> feature_names;
    /// Keys are kept sorted so the value survives any JSON round trip.
    nlohmann::json hyperparams = nlohmann::json::object();
    /// Share of the total error reduction credited to each feature; aligned
    /// with feature_names and summing to 1 when any split exists.
    std::vector<double> impurity_importances;

    /// Prediction for a row laid out in feature_names order.
    double predict_row(std::span<const double> row) const {
        if (kind == ModelKind::random_forest) {
            if (trees.empty()) return base_prediction;
            double s = 0.0;
            for (const auto& t : trees) s += t.predict(row);
            return s / static_cast<double>(trees.size());
        }
        double s = 0.0;
        for (const auto& t : trees) s += t.predict(row);
        return base_prediction + learning_rate * s;
    }

    std::map<std::string, double> importance_map() const {
        std::map<std::string, double> out;
        for (std::size_t i = 0; i < feature_names.size(); ++i)
            out[feature_names[i]] = i < impurity_importances.size() ? impurity_importances[i] : 0.0;
        return out;
    }

    friend bool operator==(const TreeEnsembleModel&, const TreeEnsembleModel&) = default;
};

namespace detail {

inline std::vector<double> normalized(std::vector<double> v) {
    double s = 0.0;
    for (double x : v) s += x;
    if (s > 0.0)
        for (double& x : v) x /= s;
    return v;
}

inline std::vector<std::size_t> labelled_rows(const FeatureTable& table, std::size_t min_rows) {
    if (table.rows() == 0) throw NoData("cannot fit a model on an empty table");
    auto rows = table.target_rows();
    if (rows.empty()) throw NoData("table has no labelled rows");
    if (rows.size() < min_rows) throw InvalidConfig("need at least 2*min_samples_leaf labelled rows");
    return rows;
}

}  // namespace detail

/// Bagged CART trees. Tree t draws its bootstrap sample and node feature
/// subsets from stream (seed, t), so training may run on any number of threads.
inline TreeEnsembleModel fit_random_forest(const FeatureTable& table, const ForestParams& params) {
    if (params.n_trees < 1) throw InvalidConfig("n_trees must be >= 1");
    const auto rows = detail::labelled_rows(table, 2 * params.min_samples_leaf);
    const ColumnData x(table);
    const TreeParams tp{params.max_depth, params.min_samples_leaf, params.feature_subsample};

    std::vector<RegressionTree> trees(params.n_trees);
    std::vector<std::vector<double>> importances(params.n_trees, std::vector<double>(table.cols(), 0.0));
    parallel_for(params.n_trees, [&](std::size_t t) {
        Rng rng(stream_seed(params.seed, t));
        std::vector<std::size_t> sample = rows;
        if (params.bootstrap)
            for (auto& s : sample) s = rows[rng.index(rows.size())];
        trees[t] = build_tree(x, table.y, sample, tp, rng, importances[t]);
    });

    TreeEnsembleModel model;
    model.kind = ModelKind::random_forest;
    model.trees = std::move(trees);
    model.feature_names = table.feature_names;
    std::vector<double> total(table.cols(), 0.0);
    for (const auto& imp : importances)
        for (std::size_t f = 0; f < total.size(); ++f) total[f] += imp[f];
    model.impurity_importances = detail::normalized(std::move(total));
    model.hyperparams = {{"n_trees", params.n_trees},
                         {"max_depth", params.max_depth},
                         {"min_samples_leaf", params.min_samples_leaf},
                         {"feature_subsample", params.feature_subsample},
                         {"bootstrap", params.bootstrap},
                         {"seed", params.seed}};
    return model;
}

/// Least-squares gradient boosting: start from mean(y), then fit each tree to
/// the current residuals and add it scaled by the learning rate.
inline TreeEnsembleModel fit_gbt(const FeatureTable& table, const BoostParams& params) {
    if (!(params.learning_rate > 0.0 && params.learning_rate <= 1.0))
        throw InvalidConfig("learning_rate must lie in (0, 1]");
    if (!(params.subsample_rows > 0.0 && params.subsample_rows <= 1.0))
        throw InvalidConfig("subsample_rows must lie in (0, 1]");
    const auto rows = detail::labelled_rows(table, 2 * params.min_samples_leaf);
    const ColumnData x(table);
    const TreeParams tp{params.max_depth, params.min_samples_leaf, 1.0};

    double base = 0.0;
    for (auto r : rows) base += table.y[r];
    base /= static_cast<double>(rows.size());

    TreeEnsembleModel model;
    model.kind = ModelKind::gbt;
    model.learning_rate = params.learning_rate;
    model.base_prediction = base;
    model.feature_names = table.feature_names;
    model.hyperparams = {{"n_trees", params.n_trees},
                         {"learning_rate", params.learning_rate},
                         {"max_depth", params.max_depth},
                         {"min_samples_leaf", params.min_samples_leaf},
                         {"subsample_rows", params.subsample_rows},
                         {"seed", params.seed}};

    std::vector<double> fitted(table.rows(), base);
    std::vector<double> residual(table.rows(), 0.0);
    std::vector<double> importance(table.cols(), 0.0);
    const auto n_sub = std::max<std::size_t>(
        2 * params.min_samples_leaf,
        static_cast<std::size_t>(std::llround(params.subsample_rows * static_cast<double>(rows.size()))));
    std::vector<std::size_t> sample;
    for (std::size_t it = 0; it < params.n_trees; ++it) {
        for (auto r : rows) residual[r] = table.y[r] - fitted[r];
        Rng rng(stream_seed(params.seed, it));
        sample = rows;
        if (n_sub < rows.size()) {
            for (std::size_t i = 0; i < n_sub; ++i) std::swap(sample[i], sample[i + rng.index(sample.size() - i)]);
            sample.resize(n_sub);
            std::sort(sample.begin(), sample.end());
        }
        auto tree = build_tree(x, residual, sample, tp, rng, importance);
        for (auto r : rows) fitted[r] += params.learning_rate * tree.predict(table.row(r));
        model.trees.push_back(std::move(tree));
    }
    model.impurity_importances = detail::normalized(std::move(importance));
    return model;
}

inline TreeEnsembleModel fit_model(const FeatureTable& table, const ModelSpec& spec) {
    return spec.kind == ModelKind::gbt ? fit_gbt(table, spec.boost) : fit_random_forest(table, spec.forest);
}

/// Column positions of the model's features inside `table`.
inline std::vector<std::size_t> feature_mapping(const TreeEnsembleModel& model, const FeatureTable& table) {
    std::vector<std::size_t> idx;
    idx.reserve(model.feature_names.size());
    for (const auto& name : model.feature_names) {
        auto c = table.column_index(name);
        if (!c) throw SchemaMismatch("table lacks model feature '" + name + "'");
        idx.push_back(*c);
    }
    return idx;
}

/// Predictions for every row of `table`; columns are matched by name, extra
/// columns are ignored.
inline std::vector<double> predict(const TreeEnsembleModel& model, const FeatureTable& table) {
    const auto idx = feature_mapping(model, table);
    std::vector<double> out(table.rows());
    std::vector<double> row(idx.size());
    for (std::size_t r = 0; r < table.rows(); ++r) {
        for (std::size_t c = 0; c < idx.size(); ++c) row[c] = table.at(r, idx[c]);
        out[r] = model.predict_row(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Versioned JSON serialization with flattened tree arrays.

inline constexpr int kModelFormatVersion = 1;

inline nlohmann::ordered_json model_to_json(const TreeEnsembleModel& m) {
    nlohmann::ordered_json j;
    j["format"] = "airtwin-tree-ensemble";
    j["version"] = kModelFormatVersion;
    j["kind"] = to_string(m.kind);
    j["hyperparams"] = nlohmann::ordered_json::parse(m.hyperparams.dump());
    j["feature_names"] = m.feature_names;
    j["learning_rate"] = m.learning_rate;
    j["base_prediction"] = m.base_prediction;
    j["impurity_importances"] = m.impurity_importances;
    j["trees"] = nlohmann::ordered_json::array();
    for (const auto& t : m.trees) {
        nlohmann::ordered_json jt;
        std::vector<int> feature, left, right;
        std::vector<double> threshold, value;
        std::vector<std::size_t> count;
        for (const auto& nd : t.nodes) {
            feature.push_back(nd.feature);
            threshold.push_back(nd.threshold);
            left.push_back(nd.left);
            right.push_back(nd.right);
            value.push_back(nd.value);
            count.push_back(nd.n_samples);
        }
        jt["feature_index"] = feature;
        jt["threshold"] = threshold;
        jt["left"] = left;
        jt["right"] = right;
        jt["leaf_value"] = value;
        jt["n_samples"] = count;
        j["trees"].push_back(std::move(jt));
    }
    return j;
}

inline TreeEnsembleModel model_from_json(const nlohmann::json& j) {
    TreeEnsembleModel m;
    try {
        if (j.at("version").get<int>() != kModelFormatVersion)
            throw SchemaMismatch("unsupported model format version " + j.at("version").dump());
        m.kind = parse_model_kind(j.at("kind").get<std::string>());
        m.hyperparams = nlohmann::json::parse(j.at("hyperparams").dump());
        m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
        m.learning_rate = j.at("learning_rate").get<double>();
        m.base_prediction = j.at("base_prediction").get<double>();
        m.impurity_importances = j.at("impurity_importances").get<std::vector<double>>();
        for (const auto& jt : j.at("trees")) {
            const auto feature = jt.at("feature_index").get<std::vector<int>>();
            const auto threshold = jt.at("threshold").get<std::vector<double>>();
            const auto left = jt.at("left").get<std::vector<int>>();
            const auto right = jt.at("right").get<std::vector<int>>();
            const auto value = jt.at("leaf_value").get<std::vector<double>>();
            const auto count = jt.at("n_samples").get<std::vector<std::size_t>>();
            const std::size_t n = feature.size();
            if (threshold.size() != n || left.size() != n || right.size() != n || value.size() != n || count.size() != n)
                throw SchemaMismatch("tree arrays have different lengths");
            RegressionTree t;
            for (std::size_t i = 0; i < n; ++i) {
                if (feature[i] >= 0) {
                    if (static_cast<std::size_t>(feature[i]) >= m.feature_names.size() || left[i] <= static_cast<int>(i) ||
                        right[i] <= static_cast<int>(i) || left[i] >= static_cast<int>(n) || right[i] >= static_cast<int>(n))
                        throw SchemaMismatch("tree node " + std::to_string(i) + " has invalid links");
                }
                t.nodes.push_back({feature[i], threshold[i], left[i], right[i], value[i], count[i]});
            }
            if (t.nodes.empty()) throw SchemaMismatch("empty tree");
            m.trees.push_back(std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaMismatch(std::string("model JSON: ") + e.what());
    }
    return m;
}

inline std::string model_to_string(const TreeEnsembleModel& m) { return model_to_json(m).dump(); }

/// Content hash of the serialized model; identifies the producer of
/// synthetic data.
inline std::string model_hash(const TreeEnsembleModel& m) { return io::fnv1a_hex(model_to_string(m)); }

}  // namespace airtwin::models
