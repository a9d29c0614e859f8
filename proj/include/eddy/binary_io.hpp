#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace eddy::io {

/// Thrown on malformed or truncated binary files.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename U>
void write_le(std::ostream& out, U value) {
    static_assert(std::is_unsigned_v<U>);
    std::array<char, sizeof(U)> bytes{};
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
    out.write(bytes.data(), bytes.size());
}

template <typename U>
U read_le(std::istream& in, const char* what) {
    static_assert(std::is_unsigned_v<U>);
    std::array<unsigned char, sizeof(U)> bytes{};
    if (!in.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
        throw FormatError(std::string("truncated file while reading ") + what);
    }
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

inline void write_f32(std::ostream& out, float value) { write_le(out, std::bit_cast<std::uint32_t>(value)); }

inline float read_f32(std::istream& in, const char* what) {
    return std::bit_cast<float>(read_le<std::uint32_t>(in, what));
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) { out.write(magic, 4); }

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
    std::array<char, 4> got{};
    if (!in.read(got.data(), 4)) throw FormatError("truncated file: missing magic");
    if (std::memcmp(got.data(), magic, 4) != 0) {
        throw FormatError(std::string("bad magic: expected '") + magic + "', got '" + std::string(got.data(), 4) + "'");
    }
}

}  // namespace eddy::io
