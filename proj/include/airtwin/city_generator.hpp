#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "geo.hpp"
#include "random.hpp"
#include "spatial_weights.hpp"
#include "table.hpp"

namespace airtwin::geo {

/// Knobs of the procedural verification city.
///
/// `rho` is the single spatial-dependence dial: it sets how much of each
/// feature comes from a smooth spatial field (share = min(1, rho/0.8) times a
/// per-feature factor) and the strength of the neighbour term in the target
///     y = base + f + rho * W f + noise,   f = sum_k beta_k * latent_k + interaction.
/// At rho = 0 every column, and therefore y, is spatially independent.
struct GeneratorConfig {
    std::uint64_t seed = 1;
    std::size_t n_zones = 100;
    double rho = 0.6;
    double noise_sd = 1.2;
    double base_level = 24.0;
    double extent_m = 12000.0;
    double jitter = 0.3;
    std::size_t knn_k = 8;
    /// Fraction of zones that host a monitoring station (others get no target).
    double sensor_coverage = 1.0;
    GeoPoint origin{41.3874, 2.1686};
    /// Per-feature beta overrides, keyed by feature name.
    std::map<std::string, double> coefficients;
};

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    try {
        c.seed = j.value("seed", c.seed);
        c.n_zones = j.value("n_zones", c.n_zones);
        c.rho = j.value("rho", c.rho);
        c.noise_sd = j.value("noise_sd", c.noise_sd);
        c.base_level = j.value("base_level", c.base_level);
        c.extent_m = j.value("extent_m", c.extent_m);
        c.jitter = j.value("jitter", c.jitter);
        c.knn_k = j.value("knn_k", c.knn_k);
        c.sensor_coverage = j.value("sensor_coverage", c.sensor_coverage);
        if (j.contains("origin")) c.origin = {j["origin"].at(0).get<double>(), j["origin"].at(1).get<double>()};
        if (j.contains("coefficients"))
            for (const auto& [k, v] : j["coefficients"].items()) c.coefficients[k] = v.get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidConfig(std::string("generator config: ") + e.what());
    }
    return c;
}

inline nlohmann::ordered_json to_json(const GeneratorConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["n_zones"] = c.n_zones;
    j["rho"] = c.rho;
    j["noise_sd"] = c.noise_sd;
    j["base_level"] = c.base_level;
    j["extent_m"] = c.extent_m;
    j["jitter"] = c.jitter;
    j["knn_k"] = c.knn_k;
    j["sensor_coverage"] = c.sensor_coverage;
    j["origin"] = {c.origin.lat, c.origin.lon};
    j["coefficients"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : c.coefficients) j["coefficients"][k] = v;
    return j;
}

struct GeneratedCity {
    ZoneSet zones;
    /// Static features plus the observed target (NaN where no sensor).
    FeatureTable table;
    /// Target of every zone before sensor masking.
    std::vector<double> truth;
};

namespace detail {

struct FeatureRecipe {
    const char* name;
    double mean;
    double sd;
    double lo;
    double hi;
    double spatial_factor;  // multiplies the rho-driven spatial share
    double beta;            // contribution to f per latent sd, in ug/m3
    int parent;             // index of a correlated feature, -1 for none
    double parent_weight;
};

// Eight determinants of NO2 first, then twenty covariates that carry no direct
// signal; several are correlated with a determinant.
inline const std::vector<FeatureRecipe>& recipes() {
    static const std::vector<FeatureRecipe> r = {
        {"population_density", 16000, 6000, 200, 1e9, 1.00, 2.0, -1, 0},
        {"income", 32000, 8000, 8000, 1e9, 0.90, -0.8, -1, 0},
        {"building_density", 0.45, 0.12, 0.02, 0.98, 1.00, 1.5, 0, 0.4},
        {"road_density", 18, 5, 1, 1e9, 0.85, 2.5, -1, 0},
        {"altitude", 60, 35, 0, 1e9, 1.00, -1.0, -1, 0},
        {"dist_to_center", 0, 0, 0, 1e9, 1.00, -1.2, -1, 0},
        {"dwelling_size", 85, 20, 30, 1e9, 0.80, -0.6, 1, 0.5},
        {"green_fraction", 0.20, 0.08, 0.0, 1.0, 0.90, -1.0, -1, 0},
        {"age_0_14_share", 0.14, 0.03, 0.01, 1.0, 0.70, 0, -1, 0},
        {"age_65_plus_share", 0.21, 0.05, 0.02, 1.0, 0.75, 0, 1, 0.3},
        {"household_size", 2.5, 0.4, 1.0, 1e9, 0.60, 0, -1, 0},
        {"unemployment_rate", 0.11, 0.04, 0.01, 1.0, 0.80, 0, 1, -0.6},
        {"commercial_density", 0.15, 0.06, 0.0, 1.0, 0.90, 0, 2, 0.7},
        {"industrial_fraction", 0.05, 0.03, 0.0, 1.0, 0.50, 0, -1, 0},
        {"mobility_inflow", 9000, 3000, 100, 1e9, 0.85, 0, 3, 0.6},
        {"mobility_outflow", 8500, 2800, 100, 1e9, 0.85, 0, 0, 0.6},
        {"bus_stop_density", 6, 2, 0, 1e9, 0.70, 0, 3, 0.5},
        {"parking_density", 3, 1.2, 0, 1e9, 0.40, 0, -1, 0},
        {"street_width", 11, 3, 4, 1e9, 0.30, 0, -1, 0},
        {"school_density", 1.5, 0.6, 0, 1e9, 0.50, 0, 0, 0.3},
        {"restaurant_density", 12, 5, 0, 1e9, 0.80, 0, 12, 0.6},
        {"night_light", 45, 15, 0, 1e9, 0.95, 0, 0, 0.7},
        {"tree_cover", 0.18, 0.07, 0.0, 1.0, 0.85, 0, 7, 0.7},
        {"water_fraction", 0.02, 0.015, 0.0, 1.0, 0.20, 0, -1, 0},
        {"slope", 4, 2, 0, 1e9, 0.90, 0, 4, 0.6},
        {"building_age", 55, 20, 1, 1e9, 0.60, 0, -1, 0},
        {"rent_price", 14, 4, 3, 1e9, 0.85, 0, 1, 0.7},
        {"noise_index", 62, 6, 30, 1e9, 0.05, 0, -1, 0},
    };
    return r;
}

/// Smooth unit-variance field from random Fourier features of a squared
/// exponential kernel with the given length scale.
inline std::vector<double> smooth_field(const std::vector<PlanarPoint>& pts, double length_scale, Rng& rng) {
    constexpr int kWaves = 48;
    std::vector<double> wx(kWaves), wy(kWaves), phase(kWaves);
    for (int k = 0; k < kWaves; ++k) {
        wx[k] = rng.normal() / length_scale;
        wy[k] = rng.normal() / length_scale;
        phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
    std::vector<double> f(pts.size(), 0.0);
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (int k = 0; k < kWaves; ++k) f[i] += std::cos(wx[k] * pts[i].x + wy[k] * pts[i].y + phase[k]);
    return f;
}

inline void standardize(std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(v.size()));
    for (double& x : v) x = sd > 0.0 ? (x - mean) / sd : 0.0;
}

inline std::pair<std::size_t, std::size_t> grid_shape(std::size_t n) {
    std::size_t rows = 1;
    for (std::size_t r = 1; r * r <= n; ++r)
        if (n % r == 0) rows = r;
    return {rows, n / rows};
}

}  // namespace detail

/// Names of the generated static features, in column order.
inline std::vector<std::string> generated_feature_names() {
    std::vector<std::string> out;
    for (const auto& r : detail::recipes()) out.emplace_back(r.name);
    return out;
}

/// Builds a city whose zones are the cells of a jittered grid tiling an
/// extent_m-wide rectangle. Deterministic given the config.
inline GeneratedCity generate_synthetic_city(const GeneratorConfig& cfg) {
    if (cfg.n_zones < 4) throw InvalidConfig("n_zones must be >= 4");
    if (cfg.rho < 0.0 || cfg.rho > 0.8) throw InvalidConfig("rho must lie in [0, 0.8]");
    if (cfg.noise_sd < 0.0) throw InvalidConfig("noise_sd must be >= 0");
    if (cfg.jitter < 0.0 || cfg.jitter >= 0.5) throw InvalidConfig("jitter must lie in [0, 0.5)");
    if (cfg.sensor_coverage <= 0.0 || cfg.sensor_coverage > 1.0) throw InvalidConfig("sensor_coverage must lie in (0, 1]");
    if (cfg.knn_k < 1 || cfg.knn_k >= cfg.n_zones) throw InvalidConfig("knn_k must satisfy 1 <= k < n_zones");
    for (const auto& [name, beta] : cfg.coefficients) {
        const auto& rs = detail::recipes();
        if (std::none_of(rs.begin(), rs.end(), [&](const auto& r) { return name == r.name; }))
            throw InvalidConfig("coefficient override for unknown feature '" + name + "'");
    }

    const auto [grid_rows, grid_cols] = detail::grid_shape(cfg.n_zones);
    const double cell = cfg.extent_m / static_cast<double>(std::max(grid_rows, grid_cols));
    const double width = cell * static_cast<double>(grid_cols);
    const double height = cell * static_cast<double>(grid_rows);

    // Vertex lattice; interior vertices move freely, boundary vertices slide
    // along their edge, corners stay fixed, so the cells tile the rectangle.
    Rng grid_rng(stream_seed(cfg.seed, 1000));
    std::vector<std::vector<PlanarPoint>> vtx(grid_rows + 1, std::vector<PlanarPoint>(grid_cols + 1));
    for (std::size_t a = 0; a <= grid_rows; ++a) {
        for (std::size_t b = 0; b <= grid_cols; ++b) {
            double x = static_cast<double>(b) * cell - width / 2.0;
            double y = static_cast<double>(a) * cell - height / 2.0;
            const double jx = grid_rng.uniform(-cfg.jitter, cfg.jitter) * cell;
            const double jy = grid_rng.uniform(-cfg.jitter, cfg.jitter) * cell;
            if (b != 0 && b != grid_cols) x += jx;
            if (a != 0 && a != grid_rows) y += jy;
            vtx[a][b] = {x, y};
        }
    }

    GeneratedCity city;
    auto& zs = city.zones;
    zs.projection_origin = cfg.origin;
    zs.feature_names = generated_feature_names();
    char id[32];
    for (std::size_t a = 0; a < grid_rows; ++a) {
        for (std::size_t b = 0; b < grid_cols; ++b) {
            Zone z;
            std::snprintf(id, sizeof id, "Z%04zu", a * grid_cols + b);
            z.id = id;
            z.polygon = {vtx[a][b], vtx[a][b + 1], vtx[a + 1][b + 1], vtx[a + 1][b], vtx[a][b]};
            z.centroid = area_centroid(z.polygon);
            zs.zones.push_back(std::move(z));
        }
    }
    const auto pts = zs.centroids();
    const std::size_t n = pts.size();

    const auto& rs = detail::recipes();
    const double spatial = std::min(1.0, cfg.rho / 0.8);
    std::vector<std::vector<double>> latent(rs.size());
    for (std::size_t f = 0; f < rs.size(); ++f) {
        Rng rng(stream_seed(cfg.seed, f));
        std::vector<double> field;
        if (std::string_view(rs[f].name) == "dist_to_center") {
            field.resize(n);
            for (std::size_t i = 0; i < n; ++i) field[i] = std::hypot(pts[i].x, pts[i].y);
        } else {
            field = detail::smooth_field(pts, 2.5 * cell, rng);
        }
        detail::standardize(field);
        const double share = spatial * rs[f].spatial_factor;
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = std::sqrt(share) * field[i] + std::sqrt(1.0 - share) * rng.normal();
        if (rs[f].parent >= 0) {
            const auto& parent = latent[static_cast<std::size_t>(rs[f].parent)];
            const double pw = rs[f].parent_weight;
            for (std::size_t i = 0; i < n; ++i) v[i] = pw * parent[i] + std::sqrt(1.0 - pw * pw) * v[i];
        }
        detail::standardize(v);
        latent[f] = std::move(v);
    }

    // Physical units.
    std::vector<double> dist(n);
    double dist_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) dist_mean += (dist[i] = std::hypot(pts[i].x, pts[i].y));
    dist_mean /= static_cast<double>(n);
    double dist_sd = 0.0;
    for (double d : dist) dist_sd += (d - dist_mean) * (d - dist_mean);
    dist_sd = std::sqrt(dist_sd / static_cast<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        auto& feats = zs.zones[i].features;
        feats.resize(rs.size());
        for (std::size_t f = 0; f < rs.size(); ++f) {
            double mean = rs[f].mean, sd = rs[f].sd;
            if (std::string_view(rs[f].name) == "dist_to_center") {
                mean = dist_mean;
                sd = dist_sd;
            }
            feats[f] = std::clamp(mean + sd * latent[f][i], rs[f].lo, rs[f].hi);
        }
    }

    // Target.
    std::vector<double> f_signal(n, 0.0);
    for (std::size_t f = 0; f < rs.size(); ++f) {
        double beta = rs[f].beta;
        if (auto it = cfg.coefficients.find(rs[f].name); it != cfg.coefficients.end()) beta = it->second;
        if (beta == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) f_signal[i] += beta * latent[f][i];
    }
    // Traffic in dense areas adds more than the sum of its parts.
    for (std::size_t i = 0; i < n; ++i) f_signal[i] += 0.8 * std::max(0.0, latent[3][i]) * std::max(0.0, latent[0][i]);

    const auto w = spatial::row_standardize(spatial::build_knn_weights(pts, cfg.knn_k));
    const auto lag = spatial::spatial_lag(w, f_signal).values;
    Rng noise_rng(stream_seed(cfg.seed, 2000));
    city.truth.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double y = cfg.base_level + f_signal[i] + cfg.rho * lag[i] + cfg.noise_sd * noise_rng.normal();
        city.truth[i] = std::max(1.0, y);
    }

    city.table = zone_table(zs);
    city.table.y = city.truth;
    if (cfg.sensor_coverage < 1.0) {
        std::vector<std::size_t> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        Rng cover_rng(stream_seed(cfg.seed, 3000));
        cover_rng.shuffle(std::span<std::size_t>(order));
        const auto covered = static_cast<std::size_t>(std::ceil(cfg.sensor_coverage * static_cast<double>(n)));
        for (std::size_t m = covered; m < n; ++m) city.table.y[order[m]] = kMissing;
    }
    zs.validate();
    city.table.validate();
    return city;
}

/// Station readings consistent with the city's observed targets: one station
/// at each covered zone centroid with two readings whose mean is the target.
inline std::vector<StationMeasurement> synthesize_stations(const GeneratedCity& city) {
    using namespace std::chrono;
    const Timestamp t0 = sys_days{year{2019} / November / 1};
    std::vector<StationMeasurement> out;
    for (std::size_t i = 0; i < city.zones.size(); ++i) {
        if (!city.table.has_target(i)) continue;
        const auto& z = city.zones.zones[i];
        const auto g = inverse_project(z.centroid, city.zones.projection_origin);
        const double y = city.table.y[i];
        const double spread = std::min(0.1 * y, 2.0);
        for (int k = 0; k < 2; ++k) {
            StationMeasurement m;
            m.station_id = "ST-" + z.id;
            m.lat = g.lat;
            m.lon = g.lon;
            m.altitude = z.features[4];
            m.pollutant = Pollutant::NO2;
            m.value = k == 0 ? y - spread : y + spread;
            m.t_start = t0 + days{k * 15};
            m.t_end = m.t_start + days{15};
            out.push_back(m);
        }
    }
    return out;
}

}  // namespace airtwin::geo
