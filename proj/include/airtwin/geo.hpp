#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "error.hpp"
#include "io.hpp"
#include "table.hpp"

namespace airtwin::geo {

inline constexpr double kEarthRadiusM = 6371000.0;

struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;
    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

struct PlanarPoint {
    double x = 0.0;
    double y = 0.0;
    friend bool operator==(const PlanarPoint&, const PlanarPoint&) = default;
};

using Ring = std::vector<PlanarPoint>;

inline void check_coordinate(double lat, double lon) {
    if (!std::isfinite(lat) || !std::isfinite(lon) || std::abs(lat) > 90.0 || std::abs(lon) > 180.0) {
        std::ostringstream msg;
        msg << "coordinate out of range: lat=" << lat << " lon=" << lon;
        throw InvalidCoordinate(msg.str());
    }
}

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Equirectangular projection centred at `origin`: metres east/north of it,
/// with longitudes scaled by cos(origin latitude).
inline PlanarPoint project_to_planar(double lat, double lon, GeoPoint origin) {
    check_coordinate(lat, lon);
    check_coordinate(origin.lat, origin.lon);
    const double x = kEarthRadiusM * std::cos(deg2rad(origin.lat)) * deg2rad(lon - origin.lon);
    const double y = kEarthRadiusM * deg2rad(lat - origin.lat);
    return {x, y};
}

inline GeoPoint inverse_project(PlanarPoint p, GeoPoint origin) {
    check_coordinate(origin.lat, origin.lon);
    const double lat = origin.lat + rad2deg(p.y / kEarthRadiusM);
    const double lon = origin.lon + rad2deg(p.x / (kEarthRadiusM * std::cos(deg2rad(origin.lat))));
    return {lat, lon};
}

/// Shoelace area; positive for counter-clockwise rings. Works on closed rings.
inline double signed_area(const Ring& ring) {
    double a = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i)
        a += ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
    return 0.5 * a;
}

inline PlanarPoint area_centroid(const Ring& ring) {
    const double a = signed_area(ring);
    if (std::abs(a) < 1e-12) throw InvalidGeometry("polygon has zero area");
    double cx = 0.0, cy = 0.0;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
        const double cross = ring[i].x * ring[i + 1].y - ring[i + 1].x * ring[i].y;
        cx += (ring[i].x + ring[i + 1].x) * cross;
        cy += (ring[i].y + ring[i + 1].y) * cross;
    }
    return {cx / (6.0 * a), cy / (6.0 * a)};
}

/// Even-odd rule. Points exactly on an edge may land on either side.
inline bool point_in_polygon(PlanarPoint p, const Ring& ring) {
    bool inside = false;
    for (std::size_t i = 0, j = ring.size() - 1; i < ring.size(); j = i++) {
        const auto& a = ring[i];
        const auto& b = ring[j];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x_cross = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
            if (p.x < x_cross) inside = !inside;
        }
    }
    return inside;
}

inline void check_ring(const Ring& ring, const std::string& zone_id) {
    if (ring.size() < 4) throw InvalidGeometry("zone '" + zone_id + "': polygon needs at least 4 vertices");
    if (!(ring.front() == ring.back())) throw InvalidGeometry("zone '" + zone_id + "': polygon ring is not closed");
    if (std::abs(signed_area(ring)) < 1e-12) throw InvalidGeometry("zone '" + zone_id + "': degenerate polygon");
}

struct Zone {
    std::string id;
    Ring polygon;
    PlanarPoint centroid;
    /// Aligned with ZoneSet::feature_names.
    std::vector<double> features;
};

struct ZoneSet {
    std::vector<Zone> zones;
    std::vector<std::string> feature_names;
    GeoPoint projection_origin;

    std::size_t size() const noexcept { return zones.size(); }

    void validate() const {
        std::unordered_set<std::string> ids;
        for (const auto& z : zones) {
            if (!ids.insert(z.id).second) throw SchemaMismatch("duplicate zone id '" + z.id + "'");
            check_ring(z.polygon, z.id);
            if (z.features.size() != feature_names.size())
                throw SchemaMismatch("zone '" + z.id + "' has a different feature set");
            auto [xmin, xmax] = std::minmax_element(z.polygon.begin(), z.polygon.end(),
                                                    [](auto& a, auto& b) { return a.x < b.x; });
            auto [ymin, ymax] = std::minmax_element(z.polygon.begin(), z.polygon.end(),
                                                    [](auto& a, auto& b) { return a.y < b.y; });
            if (z.centroid.x < xmin->x || z.centroid.x > xmax->x || z.centroid.y < ymin->y ||
                z.centroid.y > ymax->y)
                throw InvalidGeometry("zone '" + z.id + "': centroid outside bounding box");
        }
    }

    std::vector<PlanarPoint> centroids() const {
        std::vector<PlanarPoint> out;
        out.reserve(zones.size());
        for (const auto& z : zones) out.push_back(z.centroid);
        return out;
    }
};

/// Feature table of the zone set; targets start out missing.
inline FeatureTable zone_table(const ZoneSet& zs) {
    FeatureTable t;
    t.feature_names = zs.feature_names;
    for (const auto& z : zs.zones) {
        t.zone_ids.push_back(z.id);
        t.values.insert(t.values.end(), z.features.begin(), z.features.end());
        t.y.push_back(kMissing);
    }
    return t;
}

// ---------------------------------------------------------------------------
// Station measurements

enum class Pollutant { NO2, O3 };

inline std::string to_string(Pollutant p) { return p == Pollutant::NO2 ? "NO2" : "O3"; }

inline std::optional<Pollutant> parse_pollutant(std::string_view code) {
    if (code == "NO2") return Pollutant::NO2;
    if (code == "O3") return Pollutant::O3;
    return std::nullopt;
}

using Timestamp = std::chrono::sys_seconds;

/// ISO-8601 date-time: `YYYY-MM-DDTHH:MM[:SS[.fff]]` with optional `Z` or
/// `+HH:MM` offset; a space may replace `T`. No offset means UTC.
inline std::optional<Timestamp> parse_timestamp(std::string_view text) {
    std::string s = io::trim(text);
    int Y = 0, M = 0, D = 0, h = 0, m = 0;
    double sec = 0.0;
    int consumed = 0;
    char sep = 0;
    if (std::sscanf(s.c_str(), "%4d-%2d-%2d%c%2d:%2d%n", &Y, &M, &D, &sep, &h, &m, &consumed) != 6)
        return std::nullopt;
    if (sep != 'T' && sep != ' ') return std::nullopt;
    std::string_view rest(s.c_str() + consumed);
    if (!rest.empty() && rest.front() == ':') {
        int n = 0;
        if (std::sscanf(rest.data(), ":%lf%n", &sec, &n) != 1) return std::nullopt;
        rest.remove_prefix(static_cast<std::size_t>(n));
    }
    while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
    int offset_min = 0;
    if (rest == "Z" || rest.empty()) {
    } else if (rest.front() == '+' || rest.front() == '-') {
        int oh = 0, om = 0;
        std::string off(rest.substr(1));
        if (std::sscanf(off.c_str(), "%2d:%2d", &oh, &om) != 2 && std::sscanf(off.c_str(), "%2d%2d", &oh, &om) != 2)
            return std::nullopt;
        offset_min = (rest.front() == '+' ? 1 : -1) * (oh * 60 + om);
    } else {
        return std::nullopt;
    }
    using namespace std::chrono;
    const year_month_day ymd{year{Y}, month{static_cast<unsigned>(M)}, day{static_cast<unsigned>(D)}};
    if (!ymd.ok() || h > 23 || m > 59 || sec < 0 || sec >= 61) return std::nullopt;
    return sys_days{ymd} + hours{h} + minutes{m} + seconds{static_cast<long>(sec)} - minutes{offset_min};
}

struct StationMeasurement {
    std::string station_id;
    double lat = 0.0;
    double lon = 0.0;
    double altitude = 0.0;
    Pollutant pollutant = Pollutant::NO2;
    double value = 0.0;
    Timestamp t_start{};
    Timestamp t_end{};
};

struct TimeWindow {
    Timestamp begin = Timestamp::min();
    Timestamp end = Timestamp::max();

    bool contains(const StationMeasurement& m) const { return m.t_start >= begin && m.t_end <= end; }
};

struct EeaLoadResult {
    std::vector<StationMeasurement> measurements;
    std::size_t dropped_negative = 0;
    std::size_t skipped_unknown_pollutant = 0;
    std::size_t skipped_other_pollutant = 0;
};

inline constexpr const char* kEeaHeader = "station_id,lat,lon,altitude,pollutant,value,t_start,t_end";

/// Parses an EEA-style station CSV. With `only` set, rows of other known
/// pollutants are skipped and counted.
inline EeaLoadResult parse_eea_csv(std::string_view text, std::optional<Pollutant> only = std::nullopt) {
    EeaLoadResult out;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> col;
    static const char* required[] = {"station_id", "lat", "lon", "altitude", "pollutant", "value", "t_start", "t_end"};
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        auto f = io::split_csv_line(line);
        if (col.empty()) {
            for (std::size_t i = 0; i < f.size(); ++i) col[f[i]] = i;
            for (const char* name : required)
                if (!col.count(name)) throw ParseError(lineno, std::string("missing header column '") + name + "'");
            continue;
        }
        if (f.size() != col.size())
            throw ParseError(lineno, "expected " + std::to_string(col.size()) + " fields, got " + std::to_string(f.size()));
        auto num = [&](const char* name) {
            auto v = io::parse_double(f[col[name]]);
            if (!v) throw ParseError(lineno, std::string("bad number in column '") + name + "': '" + f[col[name]] + "'");
            return *v;
        };
        auto when = [&](const char* name) {
            auto t = parse_timestamp(f[col[name]]);
            if (!t) throw ParseError(lineno, std::string("bad timestamp in column '") + name + "': '" + f[col[name]] + "'");
            return *t;
        };
        StationMeasurement m;
        m.station_id = f[col["station_id"]];
        if (m.station_id.empty()) throw ParseError(lineno, "empty station_id");
        m.lat = num("lat");
        m.lon = num("lon");
        if (std::abs(m.lat) > 90.0 || std::abs(m.lon) > 180.0) throw ParseError(lineno, "coordinate out of range");
        m.altitude = num("altitude");
        m.value = num("value");
        m.t_start = when("t_start");
        m.t_end = when("t_end");
        if (!(m.t_start < m.t_end)) throw ParseError(lineno, "t_start must precede t_end");
        auto p = parse_pollutant(f[col["pollutant"]]);
        if (!p) {
            ++out.skipped_unknown_pollutant;
            continue;
        }
        m.pollutant = *p;
        if (only && *only != m.pollutant) {
            ++out.skipped_other_pollutant;
            continue;
        }
        if (m.value < 0.0) {
            ++out.dropped_negative;
            continue;
        }
        out.measurements.push_back(std::move(m));
    }
    if (col.empty()) throw ParseError(1, "missing header row");
    return out;
}

inline EeaLoadResult load_eea_csv(const std::filesystem::path& path, std::optional<Pollutant> only = std::nullopt) {
    return parse_eea_csv(io::read_file(path), only);
}

/// ISO-8601 UTC text, e.g. 2019-11-01T00:00:00Z.
inline std::string format_timestamp(Timestamp t) {
    using namespace std::chrono;
    const auto day = floor<days>(t);
    const year_month_day ymd{day};
    const hh_mm_ss hms{t - day};
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ldZ", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<long>(hms.hours().count()), static_cast<long>(hms.minutes().count()),
                  static_cast<long>(hms.seconds().count()));
    return buf;
}

inline std::string measurements_to_csv(const std::vector<StationMeasurement>& ms) {
    std::string out = std::string(kEeaHeader) + "\n";
    for (const auto& m : ms) {
        out += m.station_id + "," + io::format_double(m.lat) + "," + io::format_double(m.lon) + "," +
               io::format_double(m.altitude) + "," + to_string(m.pollutant) + "," + io::format_double(m.value) + "," +
               format_timestamp(m.t_start) + "," + format_timestamp(m.t_end) + "\n";
    }
    return out;
}

/// Per-zone target built from station readings. NaN marks zones without any
/// in-window station; their ids are listed in `missing_zones`.
struct ZoneTargets {
    std::vector<double> values;
    std::vector<std::size_t> station_counts;
    std::vector<std::string> missing_zones;
};

inline ZoneTargets aggregate_stations_to_zones(const std::vector<StationMeasurement>& measurements, const ZoneSet& zones,
                                               Pollutant pollutant, const TimeWindow& window = {}) {
    if (measurements.empty()) throw NoData("no station measurements");
    // Values are sorted before summing so the mean does not depend on the
    // order of the input rows.
    std::map<std::string, std::pair<GeoPoint, std::vector<double>>> by_station;
    for (const auto& m : measurements) {
        if (m.pollutant != pollutant || !window.contains(m)) continue;
        auto& entry = by_station[m.station_id];
        entry.first = {m.lat, m.lon};
        entry.second.push_back(m.value);
    }
    if (by_station.empty()) throw NoData("no " + to_string(pollutant) + " measurement inside the time window");

    const std::size_t n = zones.size();
    std::vector<std::vector<double>> per_zone(n);
    ZoneTargets out;
    out.values.assign(n, kMissing);
    out.station_counts.assign(n, 0);
    for (auto& [id, entry] : by_station) {
        const auto p = project_to_planar(entry.first.lat, entry.first.lon, zones.projection_origin);
        for (std::size_t z = 0; z < n; ++z) {
            if (point_in_polygon(p, zones.zones[z].polygon)) {
                per_zone[z].insert(per_zone[z].end(), entry.second.begin(), entry.second.end());
                ++out.station_counts[z];
                break;
            }
        }
    }
    for (std::size_t z = 0; z < n; ++z) {
        auto& vals = per_zone[z];
        if (vals.empty()) {
            out.missing_zones.push_back(zones.zones[z].id);
            continue;
        }
        std::sort(vals.begin(), vals.end());
        double s = 0.0;
        for (double v : vals) s += v;
        out.values[z] = s / static_cast<double>(vals.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// GeoJSON

/// Reads a FeatureCollection of Polygon features (exterior ring only) in
/// lon/lat. Every numeric property other than zone_id becomes a feature; the
/// first feature fixes the column order. Without an explicit origin the
/// projection is centred on the mean vertex position.
inline ZoneSet zones_from_geojson(std::string_view text, std::optional<GeoPoint> origin = std::nullopt) {
    nlohmann::ordered_json doc;
    try {
        doc = nlohmann::ordered_json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(0, std::string("invalid GeoJSON: ") + e.what());
    }
    if (doc.value("type", "") != "FeatureCollection" || !doc.contains("features") || !doc["features"].is_array())
        throw InvalidGeometry("expected a GeoJSON FeatureCollection");

    struct RawZone {
        std::string id;
        std::vector<GeoPoint> ring;
        std::vector<std::pair<std::string, double>> props;
    };
    std::vector<RawZone> raw;
    double lat_sum = 0.0, lon_sum = 0.0;
    std::size_t vertex_count = 0;
    for (const auto& f : doc["features"]) {
        RawZone rz;
        const auto& props = f.at("properties");
        if (!props.contains("zone_id")) throw SchemaMismatch("feature without properties.zone_id");
        rz.id = props["zone_id"].is_string() ? props["zone_id"].get<std::string>() : props["zone_id"].dump();
        const auto& geom = f.at("geometry");
        if (geom.value("type", "") != "Polygon")
            throw InvalidGeometry("zone '" + rz.id + "': only Polygon geometries are supported");
        const auto& rings = geom.at("coordinates");
        if (!rings.is_array() || rings.empty()) throw InvalidGeometry("zone '" + rz.id + "': empty polygon");
        for (const auto& c : rings[0]) {
            const double lon = c.at(0).get<double>();
            const double lat = c.at(1).get<double>();
            check_coordinate(lat, lon);
            rz.ring.push_back({lat, lon});
            lat_sum += lat;
            lon_sum += lon;
            ++vertex_count;
        }
        for (const auto& [key, val] : props.items()) {
            if (key == "zone_id") continue;
            if (val.is_number()) {
                rz.props.emplace_back(key, val.get<double>());
            } else if (val.is_null()) {
                throw InvalidInput("zone '" + rz.id + "': missing value for feature '" + key + "'");
            }
        }
        raw.push_back(std::move(rz));
    }
    if (raw.empty()) throw NoData("GeoJSON has no features");

    ZoneSet zs;
    zs.projection_origin = origin.value_or(GeoPoint{lat_sum / static_cast<double>(vertex_count),
                                                    lon_sum / static_cast<double>(vertex_count)});
    for (const auto& [key, v] : raw.front().props) zs.feature_names.push_back(key);
    for (auto& rz : raw) {
        Zone z;
        z.id = rz.id;
        for (const auto& g : rz.ring) z.polygon.push_back(project_to_planar(g.lat, g.lon, zs.projection_origin));
        check_ring(z.polygon, z.id);
        z.centroid = area_centroid(z.polygon);
        if (rz.props.size() != zs.feature_names.size())
            throw SchemaMismatch("zone '" + z.id + "' has a different feature set");
        z.features.resize(zs.feature_names.size());
        std::map<std::string, double> lookup(rz.props.begin(), rz.props.end());
        for (std::size_t i = 0; i < zs.feature_names.size(); ++i) {
            auto it = lookup.find(zs.feature_names[i]);
            if (it == lookup.end()) throw SchemaMismatch("zone '" + z.id + "' lacks feature '" + zs.feature_names[i] + "'");
            z.features[i] = it->second;
        }
        zs.zones.push_back(std::move(z));
    }
    zs.validate();
    return zs;
}

inline ZoneSet load_zones_geojson(const std::filesystem::path& path, std::optional<GeoPoint> origin = std::nullopt) {
    return zones_from_geojson(io::read_file(path), origin);
}

enum class CoordinateOutput { lonlat, planar };

/// Writes zones as a FeatureCollection. Extra per-zone properties (aligned with
/// the zone order) are appended after the static features.
inline nlohmann::ordered_json zones_to_geojson(
    const ZoneSet& zs, CoordinateOutput coords = CoordinateOutput::lonlat,
    const std::vector<std::pair<std::string, std::vector<nlohmann::ordered_json>>>& extra = {}) {
    nlohmann::ordered_json fc;
    fc["type"] = "FeatureCollection";
    if (coords == CoordinateOutput::planar) {
        fc["coordinate_system"] = "planar_m";
        fc["projection_origin"] = {zs.projection_origin.lat, zs.projection_origin.lon};
    }
    fc["features"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < zs.size(); ++i) {
        const auto& z = zs.zones[i];
        nlohmann::ordered_json ring = nlohmann::ordered_json::array();
        for (const auto& p : z.polygon) {
            if (coords == CoordinateOutput::planar) {
                ring.push_back({p.x, p.y});
            } else {
                auto g = inverse_project(p, zs.projection_origin);
                ring.push_back({g.lon, g.lat});
            }
        }
        nlohmann::ordered_json props;
        props["zone_id"] = z.id;
        for (std::size_t f = 0; f < zs.feature_names.size(); ++f) props[zs.feature_names[f]] = z.features[f];
        for (const auto& [name, vals] : extra) props[name] = vals.at(i);
        nlohmann::ordered_json feature;
        feature["type"] = "Feature";
        feature["properties"] = std::move(props);
        feature["geometry"] = {{"type", "Polygon"}, {"coordinates", nlohmann::ordered_json::array({ring})}};
        fc["features"].push_back(std::move(feature));
    }
    return fc;
}

}  // namespace airtwin::geo
