#pragma once

#include <stdexcept>
#include <string>

namespace gtrans {

// Base class for everything this library throws on purpose.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape or extent disagreement between operands.
struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(msg) {}
};

// Invalid argument value (negative count, tau <= 0, bad range, ...).
struct ValueError : Error {
    explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Token id outside the vocabulary.
struct VocabError : Error {
    explicit VocabError(const std::string& msg) : Error(msg) {}
};

// Malformed input file.
struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

// A forward op produced NaN/Inf, or a gradient went non-finite.
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

enum class CheckpointFault {
    BadMagic,
    VersionMismatch,
    Truncated,
    ChecksumMismatch,
    BadHeader,
    ConfigMismatch,
    Io,
};

struct CheckpointError : Error {
    CheckpointFault fault;
    CheckpointError(CheckpointFault f, const std::string& msg) : Error(msg), fault(f) {}
};

}  // namespace gtrans
