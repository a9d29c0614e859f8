#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>

#include "eddy/checkpoint.hpp"
#include "eddy/synthgen.hpp"
#include "eddy/trainer.hpp"

using namespace eddy;
namespace fs = std::filesystem;

namespace {

std::vector<Sample> synthetic_samples(std::size_t count, std::size_t size, std::uint64_t seed) {
    synth::FieldConfig cfg;
    cfg.height = cfg.width = size + size / 4;
    cfg.radius_min = 4.0;
    cfg.radius_max = 8.0;
    std::mt19937_64 rng(seed);
    std::vector<Sample> out;
    while (out.size() < count) {
        auto field = synth::gen_field(cfg, rng);
        try {
            auto p = extract_patches(field, size, 1, rng);
            out.push_back(std::move(p.front()));
        } catch (const PatchBudgetExhausted&) {
        }
    }
    return out;
}

struct Fixture {
    Dataset train;
    Dataset val;
    Fixture() {
        auto tr = synthetic_samples(8, 32, 1);
        auto va = synthetic_samples(4, 32, 2);
        auto stats = compute_stats(tr);
        std::vector<Channel> all{Channel::ssh, Channel::sst, Channel::u, Channel::v};
        train = make_dataset(tr, stats, all);
        val = make_dataset(va, stats, all);
    }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 3;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("adam on a scalar quadratic") {
    std::vector<NamedTensor<double>> p{{"x", Tensor4<double>({1, 1, 1, 1}, 1.0)}};
    AdamState<double> st;
    for (int k = 0; k < 200; ++k) {
        std::vector<Tensor4<double>> g{Tensor4<double>({1, 1, 1, 1}, 2.0 * p[0].value[0])};
        adam_step<double>(p, g, st, {}, 1e-1);
    }
    CHECK(std::abs(p[0].value[0]) < 1e-3);
    CHECK(st.step == 200);
}

TEST_CASE("adam first step and zero gradients") {
    AdamConfig cfg;
    for (double g : {0.37, -4.0, 1e-3}) {
        std::vector<NamedTensor<double>> p{{"x", Tensor4<double>({1, 1, 1, 1}, 0.5)}};
        AdamState<double> st;
        std::vector<Tensor4<double>> grads{Tensor4<double>({1, 1, 1, 1}, g)};
        adam_step<double>(p, grads, st, cfg, 1e-3);
        const double expected = -1e-3 * g / (std::abs(g) + cfg.eps);
        CHECK(p[0].value[0] - 0.5 == doctest::Approx(expected).epsilon(1e-6));
    }

    std::vector<NamedTensor<double>> p{{"x", Tensor4<double>({1, 1, 1, 2}, 0.5)}};
    AdamState<double> st;
    std::vector<Tensor4<double>> g{Tensor4<double>({1, 1, 1, 2}, 1.0)};
    adam_step<double>(p, g, st, cfg, 1e-3);
    const double m1 = st.m[0][0];
    const auto after_one = p[0].value.storage();
    std::vector<Tensor4<double>> zero{Tensor4<double>({1, 1, 1, 2}, 0.0)};
    adam_step<double>(p, zero, st, cfg, 0.0);
    CHECK(p[0].value.storage() == after_one);
    CHECK(std::abs(st.m[0][0]) < std::abs(m1));

    std::vector<Tensor4<double>> bad{Tensor4<double>({1, 1, 1, 2}, std::nan(""))};
    CHECK_THROWS(adam_step<double>(p, bad, st, cfg, 1e-3));
    CHECK(p[0].value.storage() == after_one);
}

TEST_CASE("reduce on plateau") {
    PlateauConfig cfg;
    SUBCASE("improving loss keeps the rate") {
        PlateauState st;
        for (int e = 0; e < 30; ++e) lr_on_plateau(st, 1.0 - 0.01 * e, cfg);
        CHECK(st.lr == 1e-3);
    }
    SUBCASE("flat loss first reduces at epoch 6") {
        PlateauState st;
        for (int e = 1; e <= 5; ++e) {
            lr_on_plateau(st, 0.7, cfg);
            CHECK(st.lr == 1e-3);
        }
        lr_on_plateau(st, 0.7, cfg);
        CHECK(st.lr == doctest::Approx(1e-4));
    }
    SUBCASE("thirty flat epochs") {
        PlateauState st;
        for (int e = 0; e < 30; ++e) lr_on_plateau(st, 0.7, cfg);
        CHECK(st.lr == doctest::Approx(1e-8));
    }
    SUBCASE("min lr floor") {
        PlateauState st;
        cfg.min_lr = 1e-5;
        for (int e = 0; e < 30; ++e) lr_on_plateau(st, 0.7, cfg);
        CHECK(st.lr == 1e-5);
    }
}

TEST_CASE("untrained network predicts near uniform") {
    Fixture f;
    std::mt19937_64 rng(11);
    auto net = build<float>(TrainConfig{}.network_spec(), rng);
    std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
    Tape<float> tape;
    auto params = bind_parameters(tape, net, false);
    auto probs = forward<float>(net, tape, tape.leaf(f.train.batch_inputs(idx)), params, Mode::train, rng);
    CHECK(std::abs(cross_entropy(tape.value(probs), f.train.batch_labels(idx)) - std::log(3.0)) < 0.1);
}

TEST_CASE("config validation and spec propagation") {
    TrainConfig cfg;
    CHECK(cfg.lr0 == 1e-3);
    CHECK(cfg.batch == 8);
    CHECK(cfg.epochs == 50);
    cfg.channels = {Channel::ssh};
    CHECK(cfg.network_spec().in_channels == 1);
    cfg.dilation = false;
    CHECK(cfg.network_spec().dilation == 1);
    cfg.batch = 0;
    CHECK_THROWS(cfg.validate());
}

TEST_CASE("training history is reproducible and consistent") {
    Fixture f;
    auto cfg = small_config();
    auto a = train(cfg, f.train, f.val);
    auto b = train(cfg, f.train, f.val);
    REQUIRE(a.state.history.size() == 2);
    for (std::size_t e = 0; e < 2; ++e) {
        const auto& ra = a.state.history[e];
        const auto& rb = b.state.history[e];
        CHECK(ra.epoch == e + 1);
        CHECK(ra.loss == rb.loss);
        CHECK(ra.val_acc == rb.val_acc);
        CHECK(ra.loss == doctest::Approx(ra.ce - std::log(1.0 - ra.dice_loss)).epsilon(1e-9));
        CHECK(ra.lr == 1e-3);
    }
    for (std::size_t i = 0; i < a.best.parameters().size(); ++i)
        CHECK(a.best.parameters()[i].value.storage() == b.best.parameters()[i].value.storage());

    auto dir = fs::temp_directory_path() / "eddy_trainer_hist";
    fs::create_directories(dir);
    write_history_csv(dir / "a.csv", a.state.history);
    write_history_csv(dir / "b.csv", b.state.history);
    CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
    fs::remove_all(dir);

    cfg.seed = 6;
    auto c = train(cfg, f.train, f.val);
    CHECK(c.state.history[0].loss != a.state.history[0].loss);
}

TEST_CASE("fit_batch lowers the loss on a fixed batch") {
    Fixture f;
    TrainConfig cfg;
    std::mt19937_64 rng(cfg.seed);
    auto net = build<float>(cfg.network_spec(), rng);
    std::vector<std::size_t> idx{0, 1};
    auto losses = fit_batch(net, f.train.batch_inputs(idx), f.train.batch_labels(idx), 40, cfg);
    REQUIRE(losses.size() == 40);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("evaluation matches a brute-force recount") {
    Fixture f;
    std::mt19937_64 rng(3);
    auto net = build<float>(TrainConfig{}.network_spec(), rng);
    std::vector<std::uint8_t> pred;
    auto ev = evaluate(net, f.val, 3, &pred);
    REQUIRE(pred.size() == f.val.classes.size());
    std::size_t hits = 0;
    std::array<std::array<std::uint64_t, 3>, 3> conf{};
    for (std::size_t i = 0; i < pred.size(); ++i) {
        hits += pred[i] == f.val.classes[i];
        ++conf[f.val.classes[i]][pred[i]];
    }
    CHECK(ev.metrics.pixel_accuracy == doctest::Approx(double(hits) / double(pred.size())));
    CHECK(ev.metrics.confusion == conf);
    CHECK(ev.loss.combined == doctest::Approx(ev.loss.ce - std::log(1.0 - ev.loss.dice_loss)));

    auto whole = evaluate(net, f.val, 4);
    CHECK(whole.loss.ce == doctest::Approx(ev.loss.ce).epsilon(1e-5));
}

TEST_CASE("checkpoint and model card round trip") {
    std::mt19937_64 rng(4);
    NetworkSpec spec;
    spec.in_channels = 2;
    auto net = build<float>(spec, rng);
    net.norms()[0].running_mean[1] = 0.125f;
    auto dir = fs::temp_directory_path() / "eddy_trainer_ckpt";
    fs::create_directories(dir);
    save_checkpoint(dir / "a.bin", net);
    auto back = load_checkpoint(dir / "a.bin", spec);
    auto sa = net.state_tensors();
    auto sb = back.state_tensors();
    REQUIRE(sa.size() == sb.size());
    for (std::size_t i = 0; i < sa.size(); ++i) {
        CHECK(sa[i].name == sb[i].name);
        CHECK(std::memcmp(sa[i].value.data(), sb[i].value.data(), sa[i].value.size() * sizeof(float)) == 0);
    }
    save_checkpoint(dir / "b.bin", back);
    CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));
    CHECK(slurp(dir / "a.bin").substr(0, 4) == "EDYW");

    NetworkSpec other;
    CHECK_THROWS(load_checkpoint(dir / "a.bin", other));

    ModelCard card{spec, {Channel::ssh, Channel::v}, {}, LossKind::dice_only};
    card.stats.mean = {0.1, 2.0, 3.0, 4.0};
    write_model_card(model_card_path(dir / "a.bin"), card);
    auto cb = read_model_card(model_card_path(dir / "a.bin"));
    CHECK(cb.network == spec);
    CHECK(cb.channels == card.channels);
    CHECK(cb.stats.mean == card.stats.mean);
    CHECK(cb.loss == LossKind::dice_only);
    fs::remove_all(dir);
}
