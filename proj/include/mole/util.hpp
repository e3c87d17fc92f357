#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mole {

inline double sigmoid(double x) noexcept {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

/// 64-bit FNV-1a, incremental.
class Fnv1a {
public:
    void update(const void* data, std::size_t bytes) noexcept {
        auto p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < bytes; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) noexcept { update(s.data(), s.size()); }
    void update(std::span<const double> xs) noexcept { update(xs.data(), xs.size_bytes()); }
    std::uint64_t value() const noexcept { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string to_hex(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

inline std::string Fnv1a::hex() const { return to_hex(state_); }

/// Shortest decimal representation that round-trips.
inline std::string format_double(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, x);
    return {buf, res.ptr};
}

std::vector<std::string_view> split_whitespace(std::string_view line);
std::vector<std::string_view> split_char(std::string_view line, char sep);

/// Strict numeric parsing; returns false on trailing garbage.
bool parse_int(std::string_view s, long long& out);
bool parse_double(std::string_view s, double& out);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
std::string hash_file(const std::string& path);

}  // namespace mole
