#pragma once

#include <stdexcept>
#include <string>

namespace airtwin {

/// Base of every error raised by the library. `kind()` is a stable identifier
/// used by the CLI and the HTTP service to map failures onto exit codes and
/// status codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define AIRTWIN_DEFINE_ERROR(Name)                                            \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(#Name, what) {}        \
    };

AIRTWIN_DEFINE_ERROR(InvalidCoordinate)
AIRTWIN_DEFINE_ERROR(NoData)
AIRTWIN_DEFINE_ERROR(InvalidConfig)
AIRTWIN_DEFINE_ERROR(InvalidGeometry)
AIRTWIN_DEFINE_ERROR(DimensionError)
AIRTWIN_DEFINE_ERROR(DegenerateVariance)
AIRTWIN_DEFINE_ERROR(DegenerateTarget)
AIRTWIN_DEFINE_ERROR(InvalidInput)
AIRTWIN_DEFINE_ERROR(IoError)

#undef AIRTWIN_DEFINE_ERROR

/// Input that does not fit the expected schema. `field()` is a JSON-pointer
/// style path to the offending member when one is known.
class SchemaMismatch : public Error {
public:
    explicit SchemaMismatch(const std::string& what) : Error("SchemaMismatch", what) {}
    SchemaMismatch(std::string field, const std::string& what)
        : Error("SchemaMismatch", field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Malformed input file; carries the 1-based line number of the offending row.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("ParseError", "line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

}  // namespace airtwin
