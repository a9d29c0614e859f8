#include "eddy/synthgen.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>

namespace eddy::synth {

void EddyParams::validate(std::size_t h, std::size_t w) const {
    if (!(radius >= 3.0)) throw std::invalid_argument("EddyParams: radius must be >= 3 cells");
    if (polarity != 1 && polarity != -1) throw std::invalid_argument("EddyParams: polarity must be +1 or -1");
    if (!(amplitude > 0.0)) throw std::invalid_argument("EddyParams: amplitude must be positive");
    if (!(cx >= 0.0 && cx < static_cast<double>(w) && cy >= 0.0 && cy < static_cast<double>(h))) {
        throw std::invalid_argument("EddyParams: center outside grid");
    }
}

void FieldConfig::validate() const {
    if (height < 3 || width < 3) throw std::invalid_argument("FieldConfig: grid must be at least 3x3");
    if (eddies_min > eddies_max) throw std::invalid_argument("FieldConfig: empty eddy count range");
    if (!(radius_min >= 3.0 && radius_min <= radius_max)) {
        throw std::invalid_argument("FieldConfig: radius range must be nonempty with min >= 3");
    }
    if (!(amplitude_min > 0.0 && amplitude_min <= amplitude_max)) {
        throw std::invalid_argument("FieldConfig: amplitude range must be nonempty and positive");
    }
    for (double f : noise_fraction) {
        if (!(f >= 0.0)) throw std::invalid_argument("FieldConfig: noise std must be >= 0");
    }
}

std::vector<EddyParams> draw_eddies(const FieldConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    std::uniform_int_distribution<std::size_t> count(cfg.eddies_min, cfg.eddies_max);
    std::uniform_real_distribution<double> col(0.0, static_cast<double>(cfg.width));
    std::uniform_real_distribution<double> row(0.0, static_cast<double>(cfg.height));
    std::uniform_real_distribution<double> radius(cfg.radius_min, cfg.radius_max);
    std::uniform_real_distribution<double> amplitude(cfg.amplitude_min, cfg.amplitude_max);
    std::bernoulli_distribution anticyclonic(0.5);
    std::vector<EddyParams> eddies(count(rng));
    for (auto& e : eddies) {
        e.cx = col(rng);
        e.cy = row(rng);
        e.radius = radius(rng);
        e.amplitude = amplitude(rng);
        e.polarity = anticyclonic(rng) ? 1 : -1;
    }
    return eddies;
}

Velocity geostrophic_velocity(std::span<const double> eta, std::size_t h, std::size_t w, double c) {
    if (h < 3 || w < 3) throw std::invalid_argument("geostrophic_velocity: grid must be at least 3x3");
    if (eta.size() != h * w) throw std::invalid_argument("geostrophic_velocity: raster size mismatch");
    Velocity vel{std::vector<double>(h * w), std::vector<double>(h * w)};
    auto at = [&](std::size_t y, std::size_t x) { return eta[y * w + x]; };
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double dx, dy;
            if (x == 0) {
                dx = at(y, 1) - at(y, 0);
            } else if (x == w - 1) {
                dx = at(y, w - 1) - at(y, w - 2);
            } else {
                dx = 0.5 * (at(y, x + 1) - at(y, x - 1));
            }
            if (y == 0) {
                dy = at(1, x) - at(0, x);
            } else if (y == h - 1) {
                dy = at(h - 1, x) - at(h - 2, x);
            } else {
                dy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            }
            vel.u[y * w + x] = -c * dy;
            vel.v[y * w + x] = c * dx;
        }
    }
    return vel;
}

namespace {

double stddev(const std::vector<double>& xs) {
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - mean) * (x - mean);
    return std::sqrt(sq / static_cast<double>(xs.size()));
}

}  // namespace

Sample render_field(const FieldConfig& cfg, std::span<const EddyParams> eddies, std::mt19937_64& rng) {
    cfg.validate();
    const std::size_t h = cfg.height, w = cfg.width;
    for (const auto& e : eddies) e.validate(h, w);

    Sample s(h, w);
    std::vector<double> eta(h * w, 0.0);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double best = std::numeric_limits<double>::infinity();
            std::int8_t label = 0;
            double value = 0.0;
            for (const auto& e : eddies) {
                const double dx = static_cast<double>(x) - e.cx;
                const double dy = static_cast<double>(y) - e.cy;
                const double d2 = dx * dx + dy * dy;
                value += e.polarity * e.amplitude * std::exp(-d2 / (2.0 * e.radius * e.radius));
                if (d2 <= e.radius * e.radius && d2 < best) {
                    best = d2;
                    label = static_cast<std::int8_t>(e.polarity);
                }
            }
            eta[y * w + x] = value;
            s.labels[y * w + x] = label;
        }
    }

    const Velocity vel = geostrophic_velocity(eta, h, w, cfg.geostrophic_c);
    std::array<std::vector<double>, kInputChannels> clean{eta, std::vector<double>(h * w), vel.u, vel.v};
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            clean[1][y * w + x] =
                cfg.sst_base + cfg.sst_gradient * static_cast<double>(y) + cfg.sst_coupling * eta[y * w + x];
        }
    }

    for (std::size_t c = 0; c < kInputChannels; ++c) {
        const double sigma = cfg.noise_fraction[c] * stddev(clean[c]);
        std::normal_distribution<double> noise(0.0, sigma > 0.0 ? sigma : 1.0);
        for (std::size_t i = 0; i < h * w; ++i) {
            const double n = sigma > 0.0 ? noise(rng) : 0.0;
            s.channels[c][i] = static_cast<float>(clean[c][i] + n);
        }
    }
    return s;
}

Sample gen_field(const FieldConfig& cfg, std::mt19937_64& rng) {
    const auto eddies = draw_eddies(cfg, rng);
    return render_field(cfg, eddies, rng);
}

namespace {

constexpr std::size_t kMaxFieldAttempts = 1000;

std::string sample_name(Split split, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%04zu.eddy", split == Split::train ? "train" : "test", index);
    return buf;
}

Sample draw_patch(const FieldConfig& cfg, const DatasetOptions& options, std::size_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::mt19937_64 rng(seq);
    for (std::size_t attempt = 0; attempt < kMaxFieldAttempts; ++attempt) {
        const Sample field = gen_field(cfg, rng);
        try {
            return std::move(extract_patches(field, options.patch_size, 1, rng, options.reject_threshold).front());
        } catch (const PatchBudgetExhausted&) {
            // too few eddy pixels anywhere in this field; draw another
        }
    }
    throw std::runtime_error("gen_dataset: no field met the eddy-fraction rule after " +
                             std::to_string(kMaxFieldAttempts) + " attempts (sample " + std::to_string(stream) + ")");
}

}  // namespace

Manifest gen_dataset(const FieldConfig& cfg, const DatasetOptions& options, const std::filesystem::path& out_dir) {
    cfg.validate();
    if (options.n_train == 0 || options.n_test == 0) {
        throw std::invalid_argument("gen_dataset: train and test counts must be >= 1");
    }
    if (cfg.height < options.patch_size || cfg.width < options.patch_size) {
        throw std::invalid_argument("gen_dataset: field grid smaller than patch size");
    }
    std::filesystem::create_directories(out_dir);

    Manifest manifest;
    manifest.seed = options.seed;
    manifest.base_dir = out_dir;
    std::vector<Sample> train;
    train.reserve(options.n_train);
    const std::size_t total = options.n_train + options.n_test;
    for (std::size_t i = 0; i < total; ++i) {
        const Split split = i < options.n_train ? Split::train : Split::test;
        const std::size_t local = split == Split::train ? i : i - options.n_train;
        Sample patch = draw_patch(cfg, options, i);
        const std::string name = sample_name(split, local);
        write_sample(out_dir / name, patch);
        manifest.samples.push_back({name, split});
        if (split == Split::train) train.push_back(std::move(patch));
    }
    manifest.stats = compute_stats(train);
    write_manifest(out_dir / "manifest.json", manifest);
    return manifest;
}

}  // namespace eddy::synth
