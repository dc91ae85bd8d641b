// common.hpp — error hierarchy and small shared utilities.
//
// All recoverable failures are reported as exceptions derived from aim::Error,
// split by contract: configuration/shape mistakes (ConfigError, DimError),
// numerical blow-ups (NumericError), CLI misuse (ArgError), file problems
// (IoError) and attribution scores that are undefined for an input
// (DegenerateScoreError). Callers can catch the base class at the CLI boundary.

#ifndef AIM_COMMON_HPP
#define AIM_COMMON_HPP

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace aim {

struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration values (bad stage counts, channel
// mismatches against a constructed module, unknown enum strings, ...).
struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Tensor rank/shape mismatches detected at op boundaries.
struct DimError : Error {
    explicit DimError(const std::string& msg) : Error(msg) {}
};

// Non-finite values where finite ones are required (loss blow-up, bad input).
struct NumericError : Error {
    explicit NumericError(const std::string& msg) : Error(msg) {}
};

// Command-line misuse that is detected past CLI11's own parsing.
struct ArgError : Error {
    explicit ArgError(const std::string& msg) : Error(msg) {}
};

// File system / decoding failures; message carries the offending path (and
// line number for record-oriented files).
struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

// A score that is mathematically undefined for the given input, e.g. an
// energy ratio over an all-zero attribution map.
struct DegenerateScoreError : Error {
    explicit DegenerateScoreError(const std::string& msg) : Error(msg) {}
};

// Throw `ExType` with a streamed message: AIM_THROW(DimError, "got " << n).
#define AIM_THROW(ExType, streamed)                 \
    do {                                            \
        std::ostringstream aim_oss_;                \
        aim_oss_ << streamed;                       \
        throw ExType(aim_oss_.str());               \
    } while (0)

#define AIM_CHECK(cond, ExType, streamed)           \
    do {                                            \
        if (!(cond)) AIM_THROW(ExType, streamed);   \
    } while (0)

// Train/eval distinction matters for the stochastic gate and dropout.
enum class Mode { kTrain, kEval };

inline const char* mode_name(Mode m) { return m == Mode::kTrain ? "train" : "eval"; }

}  // namespace aim

#endif  // AIM_COMMON_HPP
