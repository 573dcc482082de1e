#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "geo.hpp"
#include "io.hpp"

namespace airtwin::spatial {

enum class WeightScheme { knn, rook, queen };

inline std::string to_string(WeightScheme s) {
    switch (s) {
        case WeightScheme::knn: return "knn";
        case WeightScheme::rook: return "rook";
        case WeightScheme::queen: return "queen";
    }
    return "knn";
}

inline WeightScheme parse_scheme(std::string_view s) {
    if (s == "knn") return WeightScheme::knn;
    if (s == "rook") return WeightScheme::rook;
    if (s == "queen") return WeightScheme::queen;
    throw InvalidConfig("unknown weights scheme '" + std::string(s) + "'");
}

struct Neighbor {
    std::size_t index = 0;
    double weight = 0.0;
    friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

/// Sparse neighbour weights; rows are sorted by neighbour index.
struct SpatialWeights {
    std::size_t n = 0;
    std::vector<std::vector<Neighbor>> rows;
    WeightScheme scheme = WeightScheme::knn;
    bool row_standardized = false;

    /// Zones with no neighbours.
    std::vector<std::size_t> islands() const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (rows[i].empty()) out.push_back(i);
        return out;
    }

    double total_weight() const {
        double s = 0.0;
        for (const auto& r : rows)
            for (const auto& nb : r) s += nb.weight;
        return s;
    }

    void validate() const {
        if (rows.size() != n) throw DimensionError("weights row count does not match n");
        for (std::size_t i = 0; i < n; ++i) {
            double sum = 0.0;
            for (const auto& nb : rows[i]) {
                if (nb.index >= n) throw DimensionError("neighbour index out of range");
                if (nb.index == i) throw InvalidInput("self-neighbour at zone " + std::to_string(i));
                if (!(nb.weight >= 0.0)) throw InvalidInput("negative weight at zone " + std::to_string(i));
                sum += nb.weight;
            }
            if (row_standardized && !rows[i].empty() && std::abs(sum - 1.0) > 1e-12)
                throw InvalidInput("row " + std::to_string(i) + " is not standardized");
        }
    }

    friend bool operator==(const SpatialWeights&, const SpatialWeights&) = default;
};

/// Binary k-nearest-neighbour weights over planar points. Ties in distance go
/// to the lower index.
inline SpatialWeights build_knn_weights(std::span<const geo::PlanarPoint> points, std::size_t k) {
    const std::size_t n = points.size();
    if (k < 1 || k >= n)
        throw InvalidConfig("k must satisfy 1 <= k < n (k=" + std::to_string(k) + ", n=" + std::to_string(n) + ")");
    SpatialWeights w;
    w.n = n;
    w.scheme = WeightScheme::knn;
    w.rows.resize(n);
    std::vector<std::pair<double, std::size_t>> cand;
    cand.reserve(n - 1);
    for (std::size_t i = 0; i < n; ++i) {
        cand.clear();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double dx = points[i].x - points[j].x;
            const double dy = points[i].y - points[j].y;
            cand.emplace_back(dx * dx + dy * dy, j);
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        auto& row = w.rows[i];
        for (std::size_t m = 0; m < k; ++m) row.push_back({cand[m].second, 1.0});
        std::sort(row.begin(), row.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    }
    return w;
}

inline SpatialWeights build_knn_weights(const geo::ZoneSet& zones, std::size_t k) {
    auto pts = zones.centroids();
    return build_knn_weights(pts, k);
}

namespace detail {

inline constexpr double kVertexTolerance = 1e-9;

inline bool same_vertex(const geo::PlanarPoint& a, const geo::PlanarPoint& b) {
    return std::abs(a.x - b.x) <= kVertexTolerance && std::abs(a.y - b.y) <= kVertexTolerance;
}

/// True when segments ab and cd are collinear and overlap with positive length.
inline bool segments_share_length(const geo::PlanarPoint& a, const geo::PlanarPoint& b, const geo::PlanarPoint& c,
                                  const geo::PlanarPoint& d) {
    const double ux = b.x - a.x, uy = b.y - a.y;
    const double len = std::hypot(ux, uy);
    if (len <= kVertexTolerance) return false;
    // Perpendicular distance of c and d from the line through ab.
    const double dc = std::abs(ux * (c.y - a.y) - uy * (c.x - a.x)) / len;
    const double dd = std::abs(ux * (d.y - a.y) - uy * (d.x - a.x)) / len;
    if (dc > kVertexTolerance || dd > kVertexTolerance) return false;
    // Project onto ab and intersect the parameter intervals.
    const double tc = (ux * (c.x - a.x) + uy * (c.y - a.y)) / len;
    const double td = (ux * (d.x - a.x) + uy * (d.y - a.y)) / len;
    const double lo = std::max(0.0, std::min(tc, td));
    const double hi = std::min(len, std::max(tc, td));
    return hi - lo > kVertexTolerance;
}

struct Box {
    double xmin, ymin, xmax, ymax;
};

inline Box bounding_box(const geo::Ring& r) {
    Box b{r[0].x, r[0].y, r[0].x, r[0].y};
    for (const auto& p : r) {
        b.xmin = std::min(b.xmin, p.x);
        b.ymin = std::min(b.ymin, p.y);
        b.xmax = std::max(b.xmax, p.x);
        b.ymax = std::max(b.ymax, p.y);
    }
    return b;
}

inline bool boxes_touch(const Box& a, const Box& b) {
    return a.xmin <= b.xmax + kVertexTolerance && b.xmin <= a.xmax + kVertexTolerance &&
           a.ymin <= b.ymax + kVertexTolerance && b.ymin <= a.ymax + kVertexTolerance;
}

}  // namespace detail

/// Binary contiguity weights. Rook neighbours share a boundary segment of
/// positive length; queen neighbours additionally include zones that share
/// only a vertex.
inline SpatialWeights build_contiguity_weights(const geo::ZoneSet& zones, WeightScheme mode) {
    if (mode == WeightScheme::knn) throw InvalidConfig("contiguity weights need rook or queen");
    for (const auto& z : zones.zones) geo::check_ring(z.polygon, z.id);
    const std::size_t n = zones.size();
    std::vector<detail::Box> boxes;
    boxes.reserve(n);
    for (const auto& z : zones.zones) boxes.push_back(detail::bounding_box(z.polygon));

    SpatialWeights w;
    w.n = n;
    w.scheme = mode;
    w.rows.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& pi = zones.zones[i].polygon;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!detail::boxes_touch(boxes[i], boxes[j])) continue;
            const auto& pj = zones.zones[j].polygon;
            bool linked = false;
            for (std::size_t a = 0; a + 1 < pi.size() && !linked; ++a)
                for (std::size_t b = 0; b + 1 < pj.size() && !linked; ++b)
                    linked = detail::segments_share_length(pi[a], pi[a + 1], pj[b], pj[b + 1]);
            if (!linked && mode == WeightScheme::queen) {
                for (std::size_t a = 0; a + 1 < pi.size() && !linked; ++a)
                    for (std::size_t b = 0; b + 1 < pj.size() && !linked; ++b)
                        linked = detail::same_vertex(pi[a], pj[b]);
            }
            if (linked) {
                w.rows[i].push_back({j, 1.0});
                w.rows[j].push_back({i, 1.0});
            }
        }
    }
    for (auto& row : w.rows)
        std::sort(row.begin(), row.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    return w;
}

/// Divides each non-empty row by its sum. Islands stay empty; see islands().
inline SpatialWeights row_standardize(const SpatialWeights& w) {
    if (w.row_standardized) return w;
    SpatialWeights out = w;
    for (auto& row : out.rows) {
        double sum = 0.0;
        for (const auto& nb : row) sum += nb.weight;
        if (sum <= 0.0) continue;
        for (auto& nb : row) nb.weight /= sum;
    }
    out.row_standardized = true;
    return out;
}

struct LagResult {
    std::vector<double> values;
    std::vector<std::size_t> islands;
};

/// lag_i = sum_j w_ij x_j. Island rows get 0 and are listed.
inline LagResult spatial_lag(const SpatialWeights& w, std::span<const double> x) {
    if (x.size() != w.n)
        throw DimensionError("spatial_lag: vector length " + std::to_string(x.size()) + " != " + std::to_string(w.n));
    if (!w.row_standardized) throw InvalidInput("spatial_lag requires row-standardized weights");
    LagResult out;
    out.values.assign(w.n, 0.0);
    for (std::size_t i = 0; i < w.n; ++i) {
        if (w.rows[i].empty()) {
            out.islands.push_back(i);
            continue;
        }
        double s = 0.0;
        for (const auto& nb : w.rows[i]) s += nb.weight * x[nb.index];
        out.values[i] = s;
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV triplet exchange format: a one-line JSON header, then `i,j,w` rows.

inline std::string weights_to_csv(const SpatialWeights& w) {
    nlohmann::ordered_json header;
    header["n"] = w.n;
    header["scheme"] = to_string(w.scheme);
    header["standardized"] = w.row_standardized;
    std::string out = header.dump() + "\n";
    for (std::size_t i = 0; i < w.n; ++i)
        for (const auto& nb : w.rows[i])
            out += std::to_string(i) + "," + std::to_string(nb.index) + "," + io::format_double(nb.weight) + "\n";
    return out;
}

inline SpatialWeights weights_from_csv(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    if (!std::getline(in, line)) throw ParseError(1, "empty weights file");
    SpatialWeights w;
    try {
        auto header = nlohmann::json::parse(line);
        w.n = header.at("n").get<std::size_t>();
        w.scheme = parse_scheme(header.at("scheme").get<std::string>());
        w.row_standardized = header.at("standardized").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(1, std::string("bad weights header: ") + e.what());
    }
    w.rows.resize(w.n);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        auto f = io::split_csv_line(line);
        if (f.size() != 3) throw ParseError(lineno, "expected i,j,w");
        auto i = io::parse_double(f[0]);
        auto j = io::parse_double(f[1]);
        auto v = io::parse_double(f[2]);
        if (!i || !j || !v || *i < 0 || *j < 0 || *i >= static_cast<double>(w.n) || *j >= static_cast<double>(w.n))
            throw ParseError(lineno, "bad triplet '" + line + "'");
        w.rows[static_cast<std::size_t>(*i)].push_back({static_cast<std::size_t>(*j), *v});
    }
    for (auto& row : w.rows)
        std::sort(row.begin(), row.end(), [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
    w.validate();
    return w;
}

}  // namespace airtwin::spatial
