#include <gtest/gtest.h>

#include "airtwin/city_generator.hpp"
#include "airtwin/features.hpp"
#include "oracles/oracles.hpp"
#include "support/fixtures.hpp"

using namespace airtwin;
using namespace airtwin::features;

namespace {

/// Weights plus one iid-noise column and one smooth column on a 20x20 grid.
struct Field {
    spatial::SpatialWeights w;
    FeatureTable table;
};

Field noise_and_smooth(std::uint64_t seed) {
    const auto zs = fixtures::grid_zones(20, 20);
    Field f;
    f.w = spatial::row_standardize(spatial::build_contiguity_weights(zs, spatial::WeightScheme::queen));
    Rng rng(seed);
    f.table.feature_names = {"noise", "smooth"};
    for (std::size_t i = 0; i < zs.size(); ++i) {
        const auto& c = zs.zones[i].centroid;
        f.table.zone_ids.push_back(zs.zones[i].id);
        f.table.values.push_back(rng.normal());
        f.table.values.push_back(std::sin(c.x / 600.0) + std::cos(c.y / 500.0) + 0.05 * rng.normal());
        f.table.y.push_back(10.0 + rng.uniform());
    }
    return f;
}

}  // namespace

TEST(Correlation, MatchesTwoPassOracle) {
    FeatureTable t;
    t.feature_names = {"a", "b", "c"};
    t.zone_ids = {"1", "2", "3", "4", "5"};
    t.values = {1, 2, 0.5, 2, 1, 0.1, 3, 7, 0.3, 4, 3, 0.2, 5, 9, 0.9};
    t.y.assign(5, kMissing);
    const auto m = correlation_matrix(t);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(m.at(i, i), 1.0);
        for (std::size_t j = 0; j < 3; ++j) {
            EXPECT_NEAR(m.at(i, j), oracle::correlation(t.column(i), t.column(j)), 1e-12);
            EXPECT_EQ(m.at(i, j), m.at(j, i));
        }
    }
    const auto csv = correlation_to_csv(m);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "feature,a,b,c");
}

TEST(Correlation, ConstantColumnIsRejected) {
    FeatureTable t;
    t.feature_names = {"a", "k"};
    t.zone_ids = {"1", "2", "3"};
    t.values = {1, 5, 2, 5, 3, 5};
    t.y.assign(3, 1.0);
    EXPECT_THROW(correlation_matrix(t), DegenerateVariance);
}

TEST(Augment, LagsOnlyAutocorrelatedColumns) {
    const auto f = noise_and_smooth(3);
    const auto r = augment_with_lags(f.table, f.w);
    ASSERT_EQ(r.table.feature_names, (std::vector<std::string>{"noise", "smooth", "lag_smooth"}));
    EXPECT_LT(*r.catalog.find("noise")->moran_I, 0.2);
    EXPECT_GT(*r.catalog.find("smooth")->moran_I, 0.6);
    EXPECT_EQ(r.catalog.find("lag_smooth")->source, FeatureSource::lagged);
    const auto expect = spatial::spatial_lag(f.w, f.table.column(1)).values;
    EXPECT_EQ(r.table.column(2), expect);
    // Original columns stay in place.
    EXPECT_EQ(r.table.column(0), f.table.column(0));
    EXPECT_EQ(r.table.y, f.table.y);
}

TEST(Augment, OverridesBypassTheCutoff) {
    const auto f = noise_and_smooth(4);
    LagOptions opts;
    opts.overrides = {{"noise", true}, {"smooth", false}};
    const auto r = augment_with_lags(f.table, f.w, opts);
    EXPECT_EQ(r.table.feature_names, (std::vector<std::string>{"noise", "smooth", "lag_noise"}));
    opts.overrides = {{"missing", true}};
    EXPECT_THROW(augment_with_lags(f.table, f.w, opts), SchemaMismatch);
}

TEST(Augment, ConstantColumnIsNotedNotFatal) {
    auto f = noise_and_smooth(5);
    f.table = f.table.with_column("flat", std::vector<double>(f.table.rows(), 2.0));
    const auto r = augment_with_lags(f.table, f.w);
    const auto* e = r.catalog.find("flat");
    ASSERT_NE(e, nullptr);
    EXPECT_FALSE(e->moran_I.has_value());
    EXPECT_NE(e->note.find("DegenerateVariance"), std::string::npos);
    EXPECT_EQ(to_json(r.catalog)["entries"][2]["moran_I"], nullptr);
}

TEST(Augment, RequiresStandardizedMatchingWeights) {
    const auto f = noise_and_smooth(6);
    const auto raw = spatial::build_contiguity_weights(fixtures::grid_zones(20, 20), spatial::WeightScheme::rook);
    EXPECT_THROW(augment_with_lags(f.table, raw), InvalidInput);
    const auto small = spatial::row_standardize(spatial::build_contiguity_weights(fixtures::grid_zones(3, 3), spatial::WeightScheme::rook));
    EXPECT_THROW(augment_with_lags(f.table, small), DimensionError);
}

TEST(Augment, RefreshRecomputesFromBase) {
    const auto f = noise_and_smooth(7);
    auto t = augment_with_lags(f.table, f.w).table;
    for (std::size_t r = 0; r < t.rows(); ++r) t.at(r, 1) *= 2.0;
    const auto fresh = refresh_lags(t, f.w);
    const auto want = spatial::spatial_lag(f.w, fresh.column(1)).values;
    const auto got = fresh.column(2);
    for (std::size_t r = 0; r < t.rows(); ++r) EXPECT_NEAR(got[r], want[r], 1e-12);
    EXPECT_EQ(fresh.column(0), t.column(0));
}

namespace {

/// random_table plus a column that is the target itself.
FeatureTable with_copy(std::size_t n, std::size_t p, std::uint64_t seed) {
    auto t = fixtures::random_table(n, p, seed);
    return t.with_column("copy", t.y);
}

}  // namespace

TEST(Importance, TargetCopyDominates) {
    const auto t = with_copy(120, 5, 2);
    models::ModelSpec spec;
    spec.forest.n_trees = 40;
    spec.forest.feature_subsample = 1.0;
    const auto m = models::fit_model(t, spec);
    const auto imp = permutation_importance(m, t, 3, 1);
    for (const auto& [name, v] : imp) {
        if (name != "copy") {
            EXPECT_GT(imp.at("copy"), v) << name;
        }
    }
    EXPECT_EQ(imp, permutation_importance(m, t, 3, 1));
    EXPECT_THROW(permutation_importance(m, t, 0, 1), InvalidConfig);
}

TEST(Selection, KeepsTheTargetCopy) {
    const auto t = with_copy(80, 4, 3);
    models::ModelSpec spec;
    spec.forest.n_trees = 30;
    spec.forest.feature_subsample = 1.0;
    SelectionOptions opts;
    opts.target_count = 1;
    opts.n_repeats = 2;
    const auto trace = select_features(t, spec, opts, models::CvConfig{5, 1, true});
    EXPECT_EQ(trace.final_set, std::vector<std::string>{"copy"});
    ASSERT_EQ(trace.steps.size(), 4u);
    EXPECT_EQ(trace.steps.back().n_features, 1u);
    EXPECT_EQ(trace.initial_set, t.feature_names);
    const auto j = to_json(trace);
    EXPECT_EQ(j["final_set"][0], "copy");
}

TEST(Selection, RejectsBadTargetCount) {
    const auto t = fixtures::random_table(30, 3, 1);
    SelectionOptions opts;
    opts.target_count = 3;
    EXPECT_THROW(select_features(t, {}, opts, {}), InvalidConfig);
    opts.target_count = 0;
    EXPECT_THROW(select_features(t, {}, opts, {}), InvalidConfig);
}
