#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace oodscope {

// Input violates a type invariant or a cross-file consistency rule.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File could not be opened, read or written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed OSEM payload. Always names the byte offset where decoding failed.
class FormatError : public IoError {
public:
    FormatError(const std::string& what, std::uint64_t offset)
        : IoError(what + " at offset " + std::to_string(offset)), detail_(what), offset_(offset) {}

    const std::string& detail() const noexcept { return detail_; }
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::string detail_;
    std::uint64_t offset_;
};

}  // namespace oodscope
