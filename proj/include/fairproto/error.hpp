#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fairproto {

enum class ErrorKind {
    shape,
    format,
    corruption,
    validation,
    capacity,
    numeric,
    io,
    range,
    usage,
};

const char* to_string(ErrorKind kind);

/// Base of every error raised by the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& what) : Error(ErrorKind::shape, what) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(ErrorKind::format, what) {}
};

/// Truncated or inconsistent byte stream. `offset` is where decoding stopped.
class CorruptionError : public Error {
public:
    CorruptionError(const std::string& what, std::uint64_t offset)
        : Error(ErrorKind::corruption, what + " (at byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(ErrorKind::validation, what) {}
};

/// Not enough classes or samples to satisfy a sampling request.
class CapacityError : public Error {
public:
    CapacityError(const std::string& what, std::string class_name = {})
        : Error(ErrorKind::capacity, what), class_name_(std::move(class_name)) {}

    const std::string& class_name() const noexcept { return class_name_; }

private:
    std::string class_name_;
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

/// Sink or source failure. `bytes_done` counts bytes transferred before the failure.
class IoError : public Error {
public:
    IoError(const std::string& what, std::uint64_t bytes_done = 0)
        : Error(ErrorKind::io, what), bytes_done_(bytes_done) {}

    std::uint64_t bytes_done() const noexcept { return bytes_done_; }

private:
    std::uint64_t bytes_done_;
};

class RangeError : public Error {
public:
    explicit RangeError(const std::string& what) : Error(ErrorKind::range, what) {}
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

}  // namespace fairproto
