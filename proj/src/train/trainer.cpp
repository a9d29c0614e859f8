#include "eddy/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace eddy {

namespace {

// Independent RNG streams derived from the run seed.
enum class Stream : std::uint32_t { init = 1, shuffle = 2, dropout = 3 };

std::mt19937_64 make_stream(std::uint64_t seed, Stream stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream)};
    return std::mt19937_64(seq);
}

std::vector<Tensor4<float>> collect_grads(const Tape<float>& tape, std::span<const Tape<float>::Id> ids) {
    std::vector<Tensor4<float>> grads;
    grads.reserve(ids.size());
    for (auto id : ids) grads.push_back(tape.has_grad(id) ? tape.grad(id) : Tensor4<float>(tape.value(id).shape()));
    return grads;
}

struct StepOutput {
    double objective = 0.0;
    Tensor4<float> probs;
};

StepOutput train_step(Network<float>& net, const Tensor4<float>& inputs, const LabelBatch& labels,
                      const TrainConfig& cfg, AdamState<float>& adam, double lr, std::mt19937_64& dropout_rng) {
    Tape<float> tape;
    const auto params = bind_parameters(tape, net, true);
    const auto x = tape.leaf(inputs, false);
    const auto probs = forward(net, tape, x, std::span<const Tape<float>::Id>(params), Mode::train, dropout_rng);
    const auto loss = loss_op(tape, probs, labels, cfg.loss);
    const double objective = tape.value(loss)[0];
    tape.backward(loss);
    const auto grads = collect_grads(tape, params);
    adam_step(std::span<NamedTensor<float>>(net.parameters()), std::span<const Tensor4<float>>(grads), adam,
              cfg.adam, lr);
    return {objective, tape.value(probs)};
}

}  // namespace

void TrainConfig::validate() const {
    if (!(min_lr > 0.0 && min_lr <= lr0)) throw std::invalid_argument("TrainConfig: need 0 < min_lr <= lr0");
    if (batch < 1) throw std::invalid_argument("TrainConfig: batch must be >= 1");
    if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    if (channels.empty()) throw std::invalid_argument("TrainConfig: channel subset must not be empty");
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
        throw std::invalid_argument("TrainConfig: plateau factor must lie in (0, 1)");
    }
    if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
}

NetworkSpec TrainConfig::network_spec() const {
    NetworkSpec spec;
    spec.in_channels = channels.size();
    spec.dilation = dilation ? 4 : 1;
    return spec;
}

Tensor4<float> Dataset::batch_inputs(std::span<const std::size_t> indices) const {
    const std::size_t per = c * h * w;
    Tensor4<float> out({indices.size(), c, h, w});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) throw std::out_of_range("Dataset: sample index out of range");
        std::copy_n(inputs.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                    out.data() + i * per);
    }
    return out;
}

LabelBatch Dataset::batch_labels(std::span<const std::size_t> indices) const {
    const std::size_t per = h * w;
    LabelBatch out{indices.size(), h, w, std::vector<std::uint8_t>(indices.size() * per)};
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= n) throw std::out_of_range("Dataset: sample index out of range");
        std::copy_n(classes.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                    out.classes.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

Dataset make_dataset(std::span<const Sample> samples, const ChannelStats& stats, std::span<const Channel> channels) {
    if (channels.empty()) throw std::invalid_argument("make_dataset: channel subset must not be empty");
    Dataset d;
    d.n = samples.size();
    d.c = channels.size();
    if (!samples.empty()) {
        d.h = samples.front().h;
        d.w = samples.front().w;
    }
    const std::size_t plane = d.h * d.w;
    d.inputs.reserve(d.n * d.c * plane);
    d.classes.reserve(d.n * plane);
    for (const auto& raw : samples) {
        raw.validate();
        if (raw.h != d.h || raw.w != d.w) throw std::invalid_argument("make_dataset: samples differ in size");
        const Sample s = normalize(raw, stats);
        for (Channel c : channels) {
            const auto& ch = s.channel(c);
            d.inputs.insert(d.inputs.end(), ch.begin(), ch.end());
        }
        for (std::int8_t label : s.labels) d.classes.push_back(class_from_label(label));
    }
    return d;
}

Dataset load_split(const Manifest& manifest, Split split, std::span<const Channel> channels) {
    std::vector<Sample> samples;
    for (const auto& path : manifest.paths(split)) samples.push_back(read_sample(path));
    return make_dataset(samples, manifest.stats, channels);
}

Evaluation evaluate(Network<float>& net, const Dataset& data, std::size_t batch, std::vector<std::uint8_t>* predictions) {
    if (data.n == 0) throw std::invalid_argument("evaluate: empty split");
    if (batch == 0) throw std::invalid_argument("evaluate: batch must be >= 1");
    LossAccumulator acc;
    Evaluation ev;
    if (predictions) predictions->clear();
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < data.n; start += batch) {
        idx.resize(std::min(batch, data.n - start));
        std::iota(idx.begin(), idx.end(), start);
        const LabelBatch labels = data.batch_labels(idx);
        const Tensor4<float> probs = predict(net, data.batch_inputs(idx));
        acc.add(probs, labels);
        const auto pred = argmax_classes(probs);
        ev.metrics.add(pred, labels.classes);
        if (predictions) predictions->insert(predictions->end(), pred.begin(), pred.end());
    }
    ev.loss = acc.report();
    return ev;
}

TrainResult train(const TrainConfig& cfg, const Dataset& train_set, const Dataset& val, const EpochCallback& on_epoch) {
    cfg.validate();
    if (train_set.n == 0) throw std::invalid_argument("train: empty training split");
    if (train_set.c != cfg.channels.size() || val.c != cfg.channels.size()) {
        throw std::invalid_argument("train: dataset channel count does not match the configured subset");
    }

    auto init_rng = make_stream(cfg.seed, Stream::init);
    auto shuffle_rng = make_stream(cfg.seed, Stream::shuffle);
    auto dropout_rng = make_stream(cfg.seed, Stream::dropout);

    Network<float> net = build<float>(cfg.network_spec(), init_rng);
    TrainResult result{net, {}};
    TrainState& state = result.state;
    state.plateau.lr = cfg.lr0;
    const PlateauConfig plateau = cfg.plateau();

    std::vector<std::size_t> order(train_set.n);
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        LossAccumulator acc;
        Metrics train_metrics;
        const double lr = state.plateau.lr;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch, order.size() - start));
            const LabelBatch labels = train_set.batch_labels(idx);
            StepOutput out;
            try {
                out = train_step(net, train_set.batch_inputs(idx), labels, cfg, state.adam, lr, dropout_rng);
            } catch (const std::exception& e) {
                throw std::runtime_error("train: epoch " + std::to_string(epoch) + ", batch " +
                                         std::to_string(start / cfg.batch) + ": " + e.what());
            }
            acc.add(out.probs, labels);
            train_metrics.add(argmax_classes(out.probs), labels.classes);
        }

        const LossReport train_report = acc.report();
        const Evaluation ev = evaluate(net, val, cfg.batch);
        const double val_loss = objective_value(ev.loss, cfg.loss);
        if (val_loss < state.best_val_loss) {
            state.best_val_loss = val_loss;
            result.best = net;
        }
        HistoryRow row{epoch,
                       train_report.combined,
                       train_report.ce,
                       train_report.dice_loss,
                       train_metrics.pixel_accuracy,
                       ev.metrics.pixel_accuracy,
                       lr,
                       val_loss};
        state.history.push_back(row);
        if (on_epoch) on_epoch(row);
        lr_on_plateau(state.plateau, val_loss, plateau);
    }
    return result;
}

TrainResult train(const TrainConfig& cfg, const Manifest& manifest, const EpochCallback& on_epoch) {
    const Dataset train_set = load_split(manifest, Split::train, cfg.channels);
    const Dataset val = load_split(manifest, Split::test, cfg.channels);
    return train(cfg, train_set, val, on_epoch);
}

std::vector<double> fit_batch(Network<float>& net, const Tensor4<float>& inputs, const LabelBatch& labels,
                              std::size_t steps, const TrainConfig& cfg) {
    auto dropout_rng = make_stream(cfg.seed, Stream::dropout);
    AdamState<float> adam;
    std::vector<double> losses;
    losses.reserve(steps);
    for (std::size_t s = 0; s < steps; ++s) {
        losses.push_back(train_step(net, inputs, labels, cfg, adam, cfg.lr0, dropout_rng).objective);
    }
    return losses;
}

void write_history_csv(const std::filesystem::path& path, std::span<const HistoryRow> history) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "epoch,loss,ce,dice_loss,train_acc,val_acc,lr\n";
    char line[256];
    for (const auto& r : history) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.loss, r.ce, r.dice_loss,
                      r.train_acc, r.val_acc, r.lr);
        out << line;
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::filesystem::path model_card_path(const std::filesystem::path& checkpoint) {
    auto p = checkpoint;
    p += ".json";
    return p;
}

void write_model_card(const std::filesystem::path& path, const ModelCard& card) {
    nlohmann::ordered_json j;
    j["network"] = {{"in_channels", card.network.in_channels},
                    {"base_channels", card.network.base_channels},
                    {"dilation", card.network.dilation},
                    {"down_dropout", card.network.down_dropout},
                    {"transition_dropout", card.network.transition_dropout}};
    j["channels"] = format_channels(card.channels);
    j["stats"] = {{"mean", card.stats.mean}, {"std", card.stats.std}};
    j["loss"] = to_string(card.loss);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << j.dump(2) << '\n';
}

ModelCard read_model_card(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open model card " + path.string());
    try {
        const auto j = nlohmann::json::parse(in);
        ModelCard card;
        const auto& n = j.at("network");
        card.network.in_channels = n.at("in_channels").get<std::size_t>();
        card.network.base_channels = n.at("base_channels").get<std::size_t>();
        card.network.dilation = n.at("dilation").get<std::size_t>();
        card.network.down_dropout = n.at("down_dropout").get<double>();
        card.network.transition_dropout = n.at("transition_dropout").get<double>();
        card.channels = parse_channels(j.at("channels").get<std::string>());
        card.stats.mean = j.at("stats").at("mean").get<std::array<double, kInputChannels>>();
        card.stats.std = j.at("stats").at("std").get<std::array<double, kInputChannels>>();
        card.loss = parse_loss_kind(j.at("loss").get<std::string>());
        if (card.channels.size() != card.network.in_channels) {
            throw std::invalid_argument("channel list disagrees with in_channels");
        }
        card.network.validate();
        return card;
    } catch (const std::exception& e) {
        throw std::runtime_error("model card " + path.string() + ": " + e.what());
    }
}

}  // namespace eddy
