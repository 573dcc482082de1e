#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "error.hpp"
#include "io.hpp"

namespace airtwin {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

/// Zones x features design matrix with the NO2 target. Stored row-major.
/// A NaN target marks a zone without sensor coverage: such rows are kept for
/// prediction and skipped by training.
struct FeatureTable {
    std::vector<std::string> zone_ids;
    std::vector<std::string> feature_names;
    std::vector<double> values;
    std::vector<double> y;

    std::size_t rows() const noexcept { return zone_ids.size(); }
    std::size_t cols() const noexcept { return feature_names.size(); }

    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }

    std::span<const double> row(std::size_t r) const {
        return {values.data() + r * cols(), cols()};
    }

    std::vector<double> column(std::size_t c) const {
        std::vector<double> out(rows());
        for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, c);
        return out;
    }

    std::optional<std::size_t> column_index(std::string_view name) const {
        auto it = std::find(feature_names.begin(), feature_names.end(), name);
        if (it == feature_names.end()) return std::nullopt;
        return static_cast<std::size_t>(it - feature_names.begin());
    }

    std::size_t require_column(std::string_view name) const {
        auto idx = column_index(name);
        if (!idx) throw SchemaMismatch("unknown feature '" + std::string(name) + "'");
        return *idx;
    }

    std::optional<std::size_t> row_index(std::string_view zone) const {
        auto it = std::find(zone_ids.begin(), zone_ids.end(), zone);
        if (it == zone_ids.end()) return std::nullopt;
        return static_cast<std::size_t>(it - zone_ids.begin());
    }

    bool has_target(std::size_t r) const { return r < y.size() && !std::isnan(y[r]); }

    std::vector<std::size_t> target_rows() const {
        std::vector<std::size_t> out;
        for (std::size_t r = 0; r < rows(); ++r)
            if (has_target(r)) out.push_back(r);
        return out;
    }

    FeatureTable select_rows(std::span<const std::size_t> idx) const {
        FeatureTable out;
        out.feature_names = feature_names;
        out.zone_ids.reserve(idx.size());
        out.values.reserve(idx.size() * cols());
        out.y.reserve(idx.size());
        for (std::size_t r : idx) {
            out.zone_ids.push_back(zone_ids[r]);
            auto src = row(r);
            out.values.insert(out.values.end(), src.begin(), src.end());
            out.y.push_back(y[r]);
        }
        return out;
    }

    /// Rows with a target; the training view of the table.
    FeatureTable labelled() const {
        auto idx = target_rows();
        return select_rows(idx);
    }

    FeatureTable select_columns(std::span<const std::string> names) const {
        std::vector<std::size_t> idx;
        idx.reserve(names.size());
        for (const auto& n : names) idx.push_back(require_column(n));
        FeatureTable out;
        out.zone_ids = zone_ids;
        out.feature_names.assign(names.begin(), names.end());
        out.y = y;
        out.values.resize(rows() * idx.size());
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < idx.size(); ++c)
                out.values[r * idx.size() + c] = at(r, idx[c]);
        return out;
    }

    /// Copy with one more column appended on the right.
    FeatureTable with_column(const std::string& name, std::span<const double> col) const {
        if (col.size() != rows()) throw DimensionError("column length mismatch for '" + name + "'");
        if (column_index(name)) throw SchemaMismatch("duplicate column '" + name + "'");
        FeatureTable out;
        out.zone_ids = zone_ids;
        out.feature_names = feature_names;
        out.feature_names.push_back(name);
        out.y = y;
        const std::size_t c = cols();
        out.values.resize(rows() * (c + 1));
        for (std::size_t r = 0; r < rows(); ++r) {
            std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(r * c), c,
                        out.values.begin() + static_cast<std::ptrdiff_t>(r * (c + 1)));
            out.values[r * (c + 1) + c] = col[r];
        }
        return out;
    }

    void set_column(std::size_t c, std::span<const double> col) {
        if (col.size() != rows()) throw DimensionError("column length mismatch");
        for (std::size_t r = 0; r < rows(); ++r) at(r, c) = col[r];
    }

    /// Checks shape and the no-missing-features rule.
    void validate() const {
        if (values.size() != rows() * cols()) throw DimensionError("table value count does not match shape");
        if (y.size() != rows()) throw DimensionError("target length does not match row count");
        std::unordered_set<std::string> seen;
        for (const auto& n : feature_names)
            if (!seen.insert(n).second) throw SchemaMismatch("duplicate feature '" + n + "'");
        seen.clear();
        for (const auto& z : zone_ids)
            if (!seen.insert(z).second) throw SchemaMismatch("duplicate zone '" + z + "'");
        for (std::size_t r = 0; r < rows(); ++r)
            for (std::size_t c = 0; c < cols(); ++c)
                if (!std::isfinite(at(r, c)))
                    throw InvalidInput("missing or non-finite value for feature '" + feature_names[c] +
                                       "' in zone '" + zone_ids[r] + "'");
    }

    friend bool operator==(const FeatureTable&, const FeatureTable&) = default;
};

/// CSV layout: `zone_id,<feature...>,no2`; an empty no2 cell is a missing target.
inline std::string table_to_csv(const FeatureTable& t) {
    std::string out = "zone_id";
    for (const auto& n : t.feature_names) out += "," + n;
    out += ",no2\n";
    for (std::size_t r = 0; r < t.rows(); ++r) {
        out += t.zone_ids[r];
        for (std::size_t c = 0; c < t.cols(); ++c) out += "," + io::format_double(t.at(r, c));
        out += ",";
        if (t.has_target(r)) out += io::format_double(t.y[r]);
        out += "\n";
    }
    return out;
}

inline FeatureTable table_from_csv(std::string_view text) {
    FeatureTable t;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    bool header = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (io::trim(line).empty()) continue;
        auto fields = io::split_csv_line(line);
        if (header) {
            if (fields.size() < 2 || fields.front() != "zone_id" || fields.back() != "no2")
                throw ParseError(lineno, "table header must be zone_id,<features...>,no2");
            t.feature_names.assign(fields.begin() + 1, fields.end() - 1);
            header = false;
            continue;
        }
        if (fields.size() != t.cols() + 2)
            throw ParseError(lineno, "expected " + std::to_string(t.cols() + 2) + " fields, got " +
                                         std::to_string(fields.size()));
        t.zone_ids.push_back(fields.front());
        for (std::size_t c = 0; c < t.cols(); ++c) {
            auto v = io::parse_double(fields[c + 1]);
            if (!v) throw ParseError(lineno, "bad number '" + fields[c + 1] + "' for " + t.feature_names[c]);
            t.values.push_back(*v);
        }
        if (fields.back().empty()) {
            t.y.push_back(kMissing);
        } else {
            auto v = io::parse_double(fields.back());
            if (!v) throw ParseError(lineno, "bad target '" + fields.back() + "'");
            t.y.push_back(*v);
        }
    }
    if (header) throw ParseError(1, "empty table file");
    t.validate();
    return t;
}

}  // namespace airtwin
