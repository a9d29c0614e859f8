#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "eddy/datapack.hpp"

namespace eddy::synth {

/// One Gaussian SSH anomaly. Polarity +1 is anticyclonic (raised SSH, clockwise
/// flow in the northern hemisphere), -1 cyclonic.
struct EddyParams {
    double cx = 0.0;  // column
    double cy = 0.0;  // row (rows increase northward)
    double radius = 0.0;
    int polarity = 1;
    double amplitude = 0.0;  // metres

    /// R >= 3 cells, polarity +/-1, A > 0, center inside an h x w grid.
    void validate(std::size_t h, std::size_t w) const;
};

struct FieldConfig {
    std::size_t height = 80;
    std::size_t width = 80;
    std::size_t eddies_min = 1;
    std::size_t eddies_max = 5;
    double radius_min = 6.0;
    double radius_max = 16.0;
    double amplitude_min = 0.1;
    double amplitude_max = 0.5;
    double sst_coupling = 2.0;     // degC per metre of SSH
    double sst_base = 20.0;        // degC at row 0
    double sst_gradient = -0.05;   // degC per row, cooling northward
    /// Noise std per channel as a fraction of that channel's noise-free std.
    std::array<double, kInputChannels> noise_fraction{0.02, 0.02, 0.02, 0.02};
    double geostrophic_c = 10.0;   // g/f in grid units

    void validate() const;
};

std::vector<EddyParams> draw_eddies(const FieldConfig& cfg, std::mt19937_64& rng);

/// SSH is a sum of polarity * A * exp(-d^2 / 2R^2); SST is the meridional background
/// plus coupling * SSH; U, V are geostrophic velocities of the noise-free SSH.
/// A pixel is labelled with the polarity of the nearest eddy center within its radius.
Sample render_field(const FieldConfig& cfg, std::span<const EddyParams> eddies, std::mt19937_64& rng);

Sample gen_field(const FieldConfig& cfg, std::mt19937_64& rng);

struct Velocity {
    std::vector<double> u;
    std::vector<double> v;
};

/// U = -c dEta/dy, V = c dEta/dx with central differences (one-sided at the borders).
Velocity geostrophic_velocity(std::span<const double> eta, std::size_t h, std::size_t w, double c);

struct DatasetOptions {
    std::size_t n_train = 512;
    std::size_t n_test = 256;
    std::size_t patch_size = 128;
    std::uint64_t seed = 42;
    double reject_threshold = 0.20;
};

/// Writes train_NNNN.eddy / test_NNNN.eddy plus manifest.json into `out_dir`.
/// Sample i draws from its own stream seeded by (seed, i), so output is a pure function of the inputs.
Manifest gen_dataset(const FieldConfig& cfg, const DatasetOptions& options, const std::filesystem::path& out_dir);

}  // namespace eddy::synth
