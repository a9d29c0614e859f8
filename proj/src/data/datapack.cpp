#include "eddy/datapack.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <utility>

#include <nlohmann/json.hpp>

#include "eddy/binary_io.hpp"

namespace eddy {

namespace {

constexpr char kSampleMagic[5] = "EDY1";
constexpr std::array<Channel, kInputChannels> kAllChannels{Channel::ssh, Channel::sst, Channel::u, Channel::v};

}  // namespace

std::string_view channel_name(Channel c) {
    switch (c) {
        case Channel::ssh: return "ssh";
        case Channel::sst: return "sst";
        case Channel::u: return "u";
        case Channel::v: return "v";
    }
    return "?";
}

std::vector<Channel> parse_channels(std::string_view list) {
    std::array<bool, kInputChannels> chosen{};
    std::stringstream ss{std::string(list)};
    std::string token;
    while (std::getline(ss, token, ',')) {
        token.erase(std::remove_if(token.begin(), token.end(), [](unsigned char ch) { return std::isspace(ch); }),
                    token.end());
        std::transform(token.begin(), token.end(), token.begin(), [](unsigned char ch) { return std::tolower(ch); });
        if (token == "all") {
            chosen.fill(true);
        } else if (token == "ssh") {
            chosen[0] = true;
        } else if (token == "sst") {
            chosen[1] = true;
        } else if (token == "u") {
            chosen[2] = true;
        } else if (token == "v") {
            chosen[3] = true;
        } else if (token == "uv") {
            chosen[2] = chosen[3] = true;
        } else if (!token.empty()) {
            throw std::invalid_argument("unknown channel '" + token + "' (expected ssh, sst, u, v, uv or all)");
        }
    }
    std::vector<Channel> out;
    for (std::size_t i = 0; i < kInputChannels; ++i) {
        if (chosen[i]) out.push_back(kAllChannels[i]);
    }
    if (out.empty()) throw std::invalid_argument("channel subset must not be empty");
    return out;
}

std::string format_channels(std::span<const Channel> channels) {
    std::string out;
    for (Channel c : channels) {
        if (!out.empty()) out += ',';
        out += channel_name(c);
    }
    return out;
}

Sample::Sample(std::size_t height, std::size_t width) : h(height), w(width), labels(height * width, 0) {
    for (auto& ch : channels) ch.assign(height * width, 0.0f);
}

double Sample::eddy_fraction() const {
    if (labels.empty()) return 0.0;
    const auto eddy = std::count_if(labels.begin(), labels.end(), [](std::int8_t v) { return v != 0; });
    return static_cast<double>(eddy) / static_cast<double>(labels.size());
}

void Sample::validate() const {
    const std::size_t n = h * w;
    if (n == 0) throw std::invalid_argument("Sample: empty raster");
    for (std::size_t c = 0; c < kInputChannels; ++c) {
        if (channels[c].size() != n) {
            throw std::invalid_argument("Sample: channel " + std::string(channel_name(kAllChannels[c])) +
                                        " has wrong length");
        }
        for (float v : channels[c]) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("Sample: non-finite value in channel " +
                                            std::string(channel_name(kAllChannels[c])));
            }
        }
    }
    if (labels.size() != n) throw std::invalid_argument("Sample: label raster has wrong length");
    for (std::int8_t v : labels) {
        if (v < -1 || v > 1) throw std::invalid_argument("Sample: invalid label " + std::to_string(v));
    }
}

bool Sample::bitwise_equal(const Sample& other) const {
    if (h != other.h || w != other.w || labels != other.labels) return false;
    for (std::size_t c = 0; c < kInputChannels; ++c) {
        if (channels[c].size() != other.channels[c].size()) return false;
        if (std::memcmp(channels[c].data(), other.channels[c].data(), channels[c].size() * sizeof(float)) != 0) {
            return false;
        }
    }
    return true;
}

void write_sample(std::ostream& out, const Sample& sample) {
    sample.validate();
    io::write_magic(out, kSampleMagic);
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample.h));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(sample.w));
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(kInputChannels));
    for (const auto& ch : sample.channels) {
        for (float v : ch) io::write_f32(out, v);
    }
    for (std::int8_t v : sample.labels) io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(v));
    if (!out) throw std::runtime_error("write_sample: write failed");
}

Sample read_sample(std::istream& in) {
    io::expect_magic(in, kSampleMagic);
    const auto h = io::read_le<std::uint32_t>(in, "height");
    const auto w = io::read_le<std::uint32_t>(in, "width");
    const auto c = io::read_le<std::uint32_t>(in, "channel count");
    if (c != kInputChannels) throw io::FormatError("sample: expected 4 channels, got " + std::to_string(c));
    if (h == 0 || w == 0 || static_cast<std::uint64_t>(h) * w > (std::uint64_t{1} << 28)) {
        throw io::FormatError("sample: implausible dims " + std::to_string(h) + "x" + std::to_string(w));
    }
    Sample s(h, w);
    for (auto& ch : s.channels) {
        for (float& v : ch) v = io::read_f32(in, "channel data");
    }
    for (std::int8_t& v : s.labels) {
        const auto raw = static_cast<std::int8_t>(io::read_le<std::uint8_t>(in, "labels"));
        if (raw < -1 || raw > 1) throw io::FormatError("sample: invalid label byte " + std::to_string(raw));
        v = raw;
    }
    if (in.peek() != std::char_traits<char>::eof()) throw io::FormatError("sample: trailing bytes");
    return s;
}

void write_sample(const std::filesystem::path& path, const Sample& sample) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    write_sample(out, sample);
}

Sample read_sample(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    try {
        return read_sample(in);
    } catch (const io::FormatError& e) {
        throw io::FormatError(path.string() + ": " + e.what());
    }
}

std::vector<Sample> extract_patches(const Sample& grid, std::size_t size, std::size_t count, std::mt19937_64& rng,
                                    double reject_threshold) {
    grid.validate();
    if (size == 0 || grid.h < size || grid.w < size) {
        throw std::invalid_argument("extract_patches: grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w) +
                                    " smaller than patch size " + std::to_string(size));
    }
    // Summed-area table of eddy pixels, (h+1) x (w+1).
    const std::size_t stride = grid.w + 1;
    std::vector<std::uint32_t> integral((grid.h + 1) * stride, 0);
    for (std::size_t y = 0; y < grid.h; ++y) {
        for (std::size_t x = 0; x < grid.w; ++x) {
            integral[(y + 1) * stride + x + 1] = integral[y * stride + x + 1] + integral[(y + 1) * stride + x] -
                                                 integral[y * stride + x] + (grid.labels[y * grid.w + x] != 0 ? 1u : 0u);
        }
    }
    auto eddy_pixels = [&](std::size_t y0, std::size_t x0) {
        const std::size_t y1 = y0 + size, x1 = x0 + size;
        return integral[y1 * stride + x1] - integral[y0 * stride + x1] - integral[y1 * stride + x0] +
               integral[y0 * stride + x0];
    };

    std::uniform_int_distribution<std::size_t> row(0, grid.h - size);
    std::uniform_int_distribution<std::size_t> col(0, grid.w - size);
    const double area = static_cast<double>(size * size);
    std::set<std::pair<std::size_t, std::size_t>> used;
    std::vector<Sample> patches;
    const std::size_t budget = 1000 * count;
    for (std::size_t draw = 0; draw < budget && patches.size() < count; ++draw) {
        const std::size_t y0 = row(rng);
        const std::size_t x0 = col(rng);
        if (used.contains({y0, x0})) continue;
        if (static_cast<double>(eddy_pixels(y0, x0)) / area < reject_threshold) continue;
        used.insert({y0, x0});
        Sample p(size, size);
        for (std::size_t y = 0; y < size; ++y) {
            const std::size_t src = (y0 + y) * grid.w + x0;
            for (std::size_t c = 0; c < kInputChannels; ++c) {
                std::copy_n(grid.channels[c].begin() + static_cast<std::ptrdiff_t>(src), size,
                            p.channels[c].begin() + static_cast<std::ptrdiff_t>(y * size));
            }
            std::copy_n(grid.labels.begin() + static_cast<std::ptrdiff_t>(src), size,
                        p.labels.begin() + static_cast<std::ptrdiff_t>(y * size));
        }
        patches.push_back(std::move(p));
    }
    if (patches.size() < count) {
        throw PatchBudgetExhausted("extract_patches: accepted " + std::to_string(patches.size()) + " of " +
                                   std::to_string(count) + " patches within " + std::to_string(budget) + " draws");
    }
    return patches;
}

ChannelStats compute_stats(std::span<const Sample> samples) {
    if (samples.empty()) throw std::invalid_argument("compute_stats: no samples");
    ChannelStats stats;
    for (std::size_t c = 0; c < kInputChannels; ++c) {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& s : samples) {
            for (float v : s.channels[c]) sum += v;
            n += s.channels[c].size();
        }
        const double mean = sum / static_cast<double>(n);
        double sq = 0.0;
        for (const auto& s : samples) {
            for (float v : s.channels[c]) sq += (v - mean) * (v - mean);
        }
        stats.mean[c] = mean;
        stats.std[c] = std::max(std::sqrt(sq / static_cast<double>(n)), kStdFloor);
    }
    return stats;
}

Sample normalize(const Sample& sample, const ChannelStats& stats) {
    Sample out = sample;
    for (std::size_t c = 0; c < kInputChannels; ++c) {
        const double sd = std::max(stats.std[c], kStdFloor);
        for (float& v : out.channels[c]) v = static_cast<float>((v - stats.mean[c]) / sd);
    }
    return out;
}

Sample denormalize(const Sample& sample, const ChannelStats& stats) {
    Sample out = sample;
    for (std::size_t c = 0; c < kInputChannels; ++c) {
        const double sd = std::max(stats.std[c], kStdFloor);
        for (float& v : out.channels[c]) v = static_cast<float>(v * sd + stats.mean[c]);
    }
    return out;
}

std::string_view split_name(Split split) { return split == Split::train ? "train" : "test"; }

Split parse_split(std::string_view name) {
    if (name == "train") return Split::train;
    if (name == "test") return Split::test;
    throw std::invalid_argument("unknown split '" + std::string(name) + "'");
}

std::size_t Manifest::count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(samples.begin(), samples.end(), [split](const ManifestEntry& e) { return e.split == split; }));
}

std::vector<std::filesystem::path> Manifest::paths(Split split) const {
    std::vector<std::filesystem::path> out;
    for (const auto& e : samples) {
        if (e.split == split) out.push_back(base_dir / e.path);
    }
    return out;
}

void Manifest::validate() const {
    std::set<std::string> seen;
    for (const auto& e : samples) {
        if (!seen.insert(e.path).second) throw std::invalid_argument("manifest: duplicate sample path " + e.path);
    }
}

void write_manifest(const std::filesystem::path& file, const Manifest& manifest) {
    manifest.validate();
    nlohmann::ordered_json j;
    j["seed"] = manifest.seed;
    j["splits"] = {{"train", manifest.count(Split::train)}, {"test", manifest.count(Split::test)}};
    nlohmann::ordered_json stats;
    stats["channels"] = {"ssh", "sst", "u", "v"};
    stats["mean"] = manifest.stats.mean;
    stats["std"] = manifest.stats.std;
    j["stats"] = stats;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& e : manifest.samples) {
        j["samples"].push_back({{"path", e.path}, {"split", split_name(e.split)}});
    }
    std::ofstream out(file, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
    out << j.dump(2) << '\n';
}

Manifest read_manifest(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw std::runtime_error("cannot open manifest " + file.string());
    Manifest m;
    try {
        const auto j = nlohmann::json::parse(in);
        m.seed = j.at("seed").get<std::uint64_t>();
        m.stats.mean = j.at("stats").at("mean").get<std::array<double, kInputChannels>>();
        m.stats.std = j.at("stats").at("std").get<std::array<double, kInputChannels>>();
        for (const auto& e : j.at("samples")) {
            m.samples.push_back({e.at("path").get<std::string>(), parse_split(e.at("split").get<std::string>())});
        }
        const auto& splits = j.at("splits");
        if (splits.at("train").get<std::size_t>() != m.count(Split::train) ||
            splits.at("test").get<std::size_t>() != m.count(Split::test)) {
            throw std::invalid_argument("split counts disagree with sample list");
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("manifest " + file.string() + ": " + e.what());
    } catch (const std::invalid_argument& e) {
        throw std::runtime_error("manifest " + file.string() + ": " + e.what());
    }
    m.base_dir = file.parent_path();
    m.validate();
    return m;
}

}  // namespace eddy
