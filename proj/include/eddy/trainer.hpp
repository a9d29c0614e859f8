#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "eddy/classes.hpp"
#include "eddy/datapack.hpp"
#include "eddy/loss.hpp"
#include "eddy/symmetricnet.hpp"

namespace eddy {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <typename T>
struct AdamState {
    std::vector<Tensor4<T>> m;
    std::vector<Tensor4<T>> v;
    std::size_t step = 0;
};

/// Bias-corrected Adam update of every parameter at learning rate `lr`.
/// Moments are created on the first call. Throws (leaving everything untouched)
/// if any gradient is non-finite.
template <typename T>
void adam_step(std::span<NamedTensor<T>> params, std::span<const Tensor4<T>> grads, AdamState<T>& state,
               const AdamConfig& cfg, double lr);

struct PlateauConfig {
    double factor = 0.1;
    std::size_t patience = 5;
    double min_delta = 1e-4;
    double min_lr = 1e-30;
};

struct PlateauState {
    double lr = 1e-3;
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad_epochs = 0;
};

/// Called once per epoch. After `patience` epochs without an improvement larger
/// than min_delta, lr <- max(lr * factor, min_lr) and the counter restarts.
void lr_on_plateau(PlateauState& state, double val_loss, const PlateauConfig& cfg);

struct TrainConfig {
    double lr0 = 1e-3;
    double min_lr = 1e-30;
    std::size_t batch = 8;
    std::size_t epochs = 50;
    LossKind loss = LossKind::combined;
    AdamConfig adam;
    double plateau_factor = 0.1;
    std::size_t patience = 5;
    double plateau_min_delta = 1e-4;
    std::uint64_t seed = 42;
    std::vector<Channel> channels{Channel::ssh, Channel::sst, Channel::u, Channel::v};
    bool dilation = true;

    void validate() const;
    PlateauConfig plateau() const { return {plateau_factor, patience, plateau_min_delta, min_lr}; }
    /// Default ladder with in_channels = |channels| and rate 4 (or 1 with dilation off).
    NetworkSpec network_spec() const;
};

struct HistoryRow {
    std::size_t epoch = 0;
    double loss = 0.0;  // ce - ln(1 - dice_loss) of the epoch's training predictions
    double ce = 0.0;
    double dice_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
    double lr = 0.0;    // rate used during the epoch
    double val_loss = 0.0;
};

struct TrainState {
    AdamState<float> adam;
    PlateauState plateau;
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::vector<HistoryRow> history;
};

/// In-memory normalized inputs restricted to a channel subset, with class-index labels.
struct Dataset {
    std::size_t n = 0;
    std::size_t c = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::vector<float> inputs;            // (n, c, h, w)
    std::vector<std::uint8_t> classes;    // (n, h, w)

    Tensor4<float> batch_inputs(std::span<const std::size_t> indices) const;
    LabelBatch batch_labels(std::span<const std::size_t> indices) const;
};

Dataset make_dataset(std::span<const Sample> samples, const ChannelStats& stats, std::span<const Channel> channels);
Dataset load_split(const Manifest& manifest, Split split, std::span<const Channel> channels);

struct Evaluation {
    Metrics metrics;
    LossReport loss;
};

/// Eval-mode pass over the whole dataset; losses use split-level pixel sums.
/// Optionally returns the argmax class of every pixel in dataset order.
Evaluation evaluate(Network<float>& net, const Dataset& data, std::size_t batch = 8,
                    std::vector<std::uint8_t>* predictions = nullptr);

struct TrainResult {
    Network<float> best;  // parameters at the lowest validation objective
    TrainState state;
};

using EpochCallback = std::function<void(const HistoryRow&)>;

/// Seeded mini-batch training (last partial batch kept), validating on `val` every epoch.
TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val,
                  const EpochCallback& on_epoch = {});
TrainResult train(const TrainConfig& cfg, const Manifest& manifest, const EpochCallback& on_epoch = {});

/// Repeated train-mode steps on one fixed batch; returns the objective after each step.
std::vector<double> fit_batch(Network<float>& net, const Tensor4<float>& inputs, const LabelBatch& labels,
                              std::size_t steps, const TrainConfig& cfg);

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history);

/// Everything besides the weights needed to rebuild and feed a trained network.
struct ModelCard {
    NetworkSpec network;
    std::vector<Channel> channels;
    ChannelStats stats;
    LossKind loss = LossKind::combined;
};

std::filesystem::path model_card_path(const std::filesystem::path& checkpoint);
void write_model_card(const std::filesystem::path& path, const ModelCard& card);
ModelCard read_model_card(const std::filesystem::path& path);

}  // namespace eddy
