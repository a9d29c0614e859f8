#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace eddy::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Runs one `eddyseg` invocation; `args` excludes the program name.
/// Returns 0 on success, 1 on runtime failure, 2 on usage errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// PGM grey levels per class.
inline constexpr std::uint8_t kGreyCyclonic = 0;
inline constexpr std::uint8_t kGreyBackground = 128;
inline constexpr std::uint8_t kGreyAnticyclonic = 255;

/// Binary P5 raster, maxval 255, row 0 first.
void write_pgm(const std::filesystem::path& path, std::size_t width, std::size_t height,
               std::span<const std::uint8_t> pixels);

struct Pgm {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;
};
Pgm read_pgm(const std::filesystem::path& path);

/// Path of the JSON sidecar written next to a segmentation mask.
std::filesystem::path mask_sidecar_path(const std::filesystem::path& mask);

}  // namespace eddy::cli
