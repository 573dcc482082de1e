#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "parallel.hpp"
#include "random.hpp"
#include "spatial_weights.hpp"

namespace airtwin::spatial {

struct MoranResult {
    double I = 0.0;
    double expected_I = 0.0;
    /// NaN and 0 unless produced by the permutation test.
    double z_score = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_permutations = 0;
};

inline nlohmann::ordered_json to_json(const MoranResult& r) {
    nlohmann::ordered_json j;
    j["I"] = r.I;
    j["expected_I"] = r.expected_I;
    j["z_score"] = std::isfinite(r.z_score) ? nlohmann::ordered_json(r.z_score) : nlohmann::ordered_json(nullptr);
    j["p_value"] = std::isfinite(r.p_value) ? nlohmann::ordered_json(r.p_value) : nlohmann::ordered_json(nullptr);
    j["n_permutations"] = r.n_permutations;
    return j;
}

namespace detail {

inline std::vector<double> centered(const SpatialWeights& w, std::span<const double> x) {
    if (x.size() != w.n)
        throw DimensionError("morans_i: vector length " + std::to_string(x.size()) + " != " + std::to_string(w.n));
    if (w.n < 2) throw InvalidInput("morans_i needs at least 2 zones");
    const auto [lo, hi] = std::minmax_element(x.begin(), x.end());
    if (!(*hi > *lo)) throw DegenerateVariance("morans_i: variable is constant");
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(x.size());
    std::vector<double> z(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) z[i] = x[i] - mean;
    return z;
}

/// sum_i z_i sum_j w_ij z_j
inline double cross_product(const SpatialWeights& w, std::span<const double> z) {
    double num = 0.0;
    for (std::size_t i = 0; i < w.n; ++i) {
        double s = 0.0;
        for (const auto& nb : w.rows[i]) s += nb.weight * z[nb.index];
        num += z[i] * s;
    }
    return num;
}

inline double sum_squares(std::span<const double> z) {
    double d = 0.0;
    for (double v : z) d += v * v;
    return d;
}

}  // namespace detail

/// Global Moran's I with its null expectation -1/(N-1).
inline MoranResult morans_i(const SpatialWeights& w, std::span<const double> x) {
    const auto z = detail::centered(w, x);
    const double s0 = w.total_weight();
    if (!(s0 > 0.0)) throw InvalidInput("morans_i: weights have no links");
    const double n = static_cast<double>(w.n);
    MoranResult r;
    r.I = (n / s0) * detail::cross_product(w, z) / detail::sum_squares(z);
    r.expected_I = -1.0 / (n - 1.0);
    return r;
}

/// Two-sided permutation test. Permutation p draws from its own stream
/// stream_seed(seed, p), so results do not depend on the thread count.
inline MoranResult morans_permutation_test(const SpatialWeights& w, std::span<const double> x, std::size_t n_perm,
                                           std::uint64_t seed) {
    if (n_perm < 99) throw InvalidConfig("permutation test needs at least 99 permutations");
    MoranResult r = morans_i(w, x);
    const auto z = detail::centered(w, x);
    const double scale = static_cast<double>(w.n) / w.total_weight() / detail::sum_squares(z);

    std::vector<double> perm_i(n_perm);
    constexpr std::size_t kChunk = 32;
    const std::size_t chunks = (n_perm + kChunk - 1) / kChunk;
    parallel_for(chunks, [&](std::size_t c) {
        std::vector<double> zp(z.size());
        for (std::size_t p = c * kChunk; p < std::min(n_perm, (c + 1) * kChunk); ++p) {
            std::copy(z.begin(), z.end(), zp.begin());
            Rng rng(stream_seed(seed, p));
            rng.shuffle(std::span<double>(zp));
            perm_i[p] = scale * detail::cross_product(w, zp);
        }
    });

    const double observed = std::abs(r.I - r.expected_I);
    std::size_t extreme = 0;
    double mean = 0.0;
    for (double v : perm_i) {
        if (std::abs(v - r.expected_I) >= observed) ++extreme;
        mean += v;
    }
    mean /= static_cast<double>(n_perm);
    double var = 0.0;
    for (double v : perm_i) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n_perm - 1);

    r.n_permutations = n_perm;
    r.p_value = static_cast<double>(extreme + 1) / static_cast<double>(n_perm + 1);
    r.z_score = var > 0.0 ? (r.I - mean) / std::sqrt(var) : 0.0;
    return r;
}

}  // namespace airtwin::spatial
