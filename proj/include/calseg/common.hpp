#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace calseg {

// Error taxonomy; the codes map 1:1 onto the statuses of the C API.
class Error : public std::runtime_error {
public:
    enum class Code {
        invalid_argument,
        io,
        state,    // missing prerequisite artifact, wrong stage mask, ...
        numeric,  // divergence, non-finite values
        internal,
    };

    Error(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

[[noreturn]] inline void fail_invalid(const std::string& msg) {
    throw Error(Error::Code::invalid_argument, msg);
}
[[noreturn]] inline void fail_io(const std::string& msg) { throw Error(Error::Code::io, msg); }
[[noreturn]] inline void fail_state(const std::string& msg) { throw Error(Error::Code::state, msg); }
[[noreturn]] inline void fail_numeric(const std::string& msg) {
    throw Error(Error::Code::numeric, msg);
}

// FNV-1a over raw bytes. Used for parameter checksums and stream derivation.
inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t fnv1a(std::string_view s) { return fnv1a(s.data(), s.size()); }

// Shortest decimal form that round-trips a double (printf %.17g is always exact).
std::string format_exact(double v);
// Fixed general format for metric CSV columns.
std::string format_metric(double v);

std::vector<std::string> split(std::string_view line, char sep);
std::string_view trim(std::string_view s);
double parse_double(std::string_view s, const std::string& what);
long long parse_int(std::string_view s, const std::string& what);

}  // namespace calseg
