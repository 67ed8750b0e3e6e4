#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace rtprop {

inline constexpr const char* kVersion = "0.1.0";

// Millisecond-precision wall-clock instant. Log timestamps carry no zone; they
// are interpreted as UTC.
using Instant = std::chrono::sys_time<std::chrono::milliseconds>;
using Millis = std::chrono::milliseconds;

enum class ErrorKind { Config, Data, Numerical };

// Every fatal condition in the library is reported through this type. The
// kind maps onto the CLI exit codes (1 config, 2 data, 3 numerical).
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void config_error(const std::string& what) { throw Error(ErrorKind::Config, what); }
[[noreturn]] inline void data_error(const std::string& what) { throw Error(ErrorKind::Data, what); }
[[noreturn]] inline void numerical_error(const std::string& what) { throw Error(ErrorKind::Numerical, what); }

inline int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::Config: return 1;
    case ErrorKind::Data: return 2;
    case ErrorKind::Numerical: return 3;
    }
    return 1;
}

// "YYYY-MM-DD HH:MM:SS[.fff]" or with a 'T' separator. Returns false when the
// text is not a valid calendar instant.
bool parse_instant(const std::string& text, Instant& out);
std::string format_instant(Instant t);

// Shortest text that round-trips the double exactly.
std::string format_double(double v);

} // namespace rtprop
