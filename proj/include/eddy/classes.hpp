#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace eddy {

inline constexpr std::size_t kNumClasses = 3;

// Raw labels are -1 (cyclonic), 0 (background), +1 (anticyclonic).
// Class indices: 0 background, 1 anticyclonic, 2 cyclonic.
inline constexpr std::uint8_t kBackground = 0;
inline constexpr std::uint8_t kAnticyclonic = 1;
inline constexpr std::uint8_t kCyclonic = 2;

inline std::uint8_t class_from_label(std::int8_t label) {
    switch (label) {
        case 0: return kBackground;
        case 1: return kAnticyclonic;
        case -1: return kCyclonic;
        default: throw std::invalid_argument("invalid eddy label " + std::to_string(label));
    }
}

inline std::int8_t label_from_class(std::uint8_t cls) {
    switch (cls) {
        case kBackground: return 0;
        case kAnticyclonic: return 1;
        case kCyclonic: return -1;
        default: throw std::invalid_argument("invalid class index " + std::to_string(cls));
    }
}

/// Class indices laid out (n, h, w), row-major.
struct LabelBatch {
    std::size_t n = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<std::uint8_t> classes;

    std::size_t pixels() const { return n * h * w; }
};

}  // namespace eddy
