#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "airtwin/airtwin.hpp"

namespace fixtures {

/// rows x cols grid of `cell`-metre squares; zone ids are "r<i>c<j>".
inline airtwin::geo::ZoneSet grid_zones(std::size_t rows, std::size_t cols, double cell = 100.0) {
    airtwin::geo::ZoneSet zs;
    zs.projection_origin = {41.0, 2.0};
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            airtwin::geo::Zone z;
            z.id = "r" + std::to_string(i) + "c" + std::to_string(j);
            const double x0 = static_cast<double>(j) * cell, y0 = static_cast<double>(i) * cell;
            z.polygon = {{x0, y0}, {x0 + cell, y0}, {x0 + cell, y0 + cell}, {x0, y0 + cell}, {x0, y0}};
            z.centroid = {x0 + cell / 2, y0 + cell / 2};
            zs.zones.push_back(std::move(z));
        }
    }
    return zs;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
    static std::atomic<int> counter{0};
    auto p = std::filesystem::temp_directory_path() /
             ("airtwin_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Small random table: y depends on the first two columns.
inline airtwin::FeatureTable random_table(std::size_t n, std::size_t p, std::uint64_t seed) {
    airtwin::Rng rng(seed);
    airtwin::FeatureTable t;
    for (std::size_t c = 0; c < p; ++c) t.feature_names.push_back("f" + std::to_string(c));
    for (std::size_t r = 0; r < n; ++r) {
        t.zone_ids.push_back("z" + std::to_string(r));
        double y = 20.0;
        for (std::size_t c = 0; c < p; ++c) {
            const double v = rng.uniform(0.0, 10.0);
            t.values.push_back(v);
            if (c == 0) y += 1.5 * v;
            if (c == 1) y += 3.0 * (v > 5.0);
        }
        t.y.push_back(y + rng.normal(0.0, 0.5));
    }
    return t;
}

}  // namespace fixtures
