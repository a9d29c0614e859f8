#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace eddy {

inline constexpr std::size_t kInputChannels = 4;

/// Input variables in their fixed on-disk order.
enum class Channel : std::uint8_t { ssh = 0, sst = 1, u = 2, v = 3 };

std::string_view channel_name(Channel c);

/// Parses a comma list of ssh, sst, u, v, uv (velocity = u and v), or "all".
/// Result is deduplicated and kept in on-disk order.
std::vector<Channel> parse_channels(std::string_view list);
std::string format_channels(std::span<const Channel> channels);

/// One gridded patch: SSH [m], SST [degC], U eastward [m/s], V northward [m/s],
/// plus labels -1 cyclonic, 0 background, +1 anticyclonic. Row 0 is the southern edge.
struct Sample {
    std::size_t h = 0;
    std::size_t w = 0;
    std::array<std::vector<float>, kInputChannels> channels;
    std::vector<std::int8_t> labels;

    Sample() = default;
    Sample(std::size_t height, std::size_t width);

    float& at(Channel c, std::size_t y, std::size_t x) { return channels[static_cast<std::size_t>(c)][y * w + x]; }
    float at(Channel c, std::size_t y, std::size_t x) const {
        return channels[static_cast<std::size_t>(c)][y * w + x];
    }
    std::vector<float>& channel(Channel c) { return channels[static_cast<std::size_t>(c)]; }
    const std::vector<float>& channel(Channel c) const { return channels[static_cast<std::size_t>(c)]; }

    /// Fraction of pixels with a nonzero label.
    double eddy_fraction() const;

    /// Throws on size mismatch, non-finite values or labels outside {-1, 0, 1}.
    void validate() const;

    /// Bitwise comparison of every raster.
    bool bitwise_equal(const Sample& other) const;
};

/// Thrown when extract_patches cannot meet its eddy-fraction rule within the draw budget.
class PatchBudgetExhausted : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ".eddy" layout (little-endian): "EDY1", u32 h, u32 w, u32 channel count (4),
// channels as f32 row-major in fixed order, then labels as int8 row-major.
void write_sample(std::ostream& out, const Sample& sample);
Sample read_sample(std::istream& in);
void write_sample(const std::filesystem::path& path, const Sample& sample);
Sample read_sample(const std::filesystem::path& path);

constexpr std::size_t sample_file_size(std::size_t h, std::size_t w) {
    return 16 + kInputChannels * 4 * h * w + h * w;
}

/// Draws `count` size x size patches at distinct random top-left corners, rejecting
/// any whose eddy-pixel fraction is below `reject_threshold`. Gives up after
/// 1000 * count draws.
std::vector<Sample> extract_patches(const Sample& grid, std::size_t size, std::size_t count, std::mt19937_64& rng,
                                    double reject_threshold = 0.20);

struct ChannelStats {
    std::array<double, kInputChannels> mean{};
    std::array<double, kInputChannels> std{1.0, 1.0, 1.0, 1.0};
};

inline constexpr double kStdFloor = 1e-8;

/// Per-channel mean and population std over every pixel of every sample; std floored at 1e-8.
ChannelStats compute_stats(std::span<const Sample> samples);

/// (x - mean) / std per channel; labels are copied untouched.
Sample normalize(const Sample& sample, const ChannelStats& stats);
Sample denormalize(const Sample& sample, const ChannelStats& stats);

enum class Split { train, test };

std::string_view split_name(Split split);
Split parse_split(std::string_view name);

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory
    Split split = Split::train;
};

struct Manifest {
    std::vector<ManifestEntry> samples;
    ChannelStats stats;
    std::uint64_t seed = 0;
    std::filesystem::path base_dir;  // not serialized

    std::size_t count(Split split) const;
    std::vector<std::filesystem::path> paths(Split split) const;
    /// Throws on duplicate paths.
    void validate() const;
};

void write_manifest(const std::filesystem::path& file, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& file);

}  // namespace eddy
