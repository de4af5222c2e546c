#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace butler {

inline constexpr const char* kToolVersion = "0.1.0";

// Error taxonomy. Every failure surfaces as one of these so the CLI can
// emit a single machine-parsable line: "error: <kind>: <message>".
struct Error : std::runtime_error {
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& m) : Error("contract", m) {}
};
struct VocabError : Error {
    explicit VocabError(const std::string& m) : Error("vocab", m) {}
};
struct ContextError : Error {
    explicit ContextError(const std::string& m) : Error("context", m) {}
};
struct DataError : Error {
    explicit DataError(const std::string& m) : Error("data", m) {}
};
struct IndexError : Error {
    explicit IndexError(const std::string& m) : Error("index", m) {}
};
struct SizingError : Error {
    explicit SizingError(const std::string& m) : Error("sizing", m) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& m) : Error("format", m) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct EvalError : Error {
    explicit EvalError(const std::string& m) : Error("eval", m) {}
};
struct TrainAbortError : Error {
    explicit TrainAbortError(const std::string& m) : Error("train-abort", m) {}
};
struct AggregationError : Error {
    explicit AggregationError(const std::string& m) : Error("aggregation", m) {}
};
struct IoError : Error {
    explicit IoError(const std::string& m) : Error("io", m) {}
};

}  // namespace butler
