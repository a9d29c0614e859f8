#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <utility>

#include "eddy/gradcheck.hpp"
#include "eddy/gradcheck_suite.hpp"
#include "eddy/ops.hpp"
#include "eddy/tape.hpp"

using namespace eddy;

namespace {

Tensor4<double> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor4<double> t(s);
    for (auto& v : t.values()) v = dist(rng);
    return t;
}

// Straight nested-loop cross-correlation, independent of the im2col path.
Tensor4<double> direct_conv(const Tensor4<double>& x, const Tensor4<double>& w, const Tensor4<double>* b,
                            const ConvSpec& s) {
    const auto& xs = x.shape();
    const std::size_t oh = (xs.h + 2 * s.padding - s.effective_h()) / s.stride + 1;
    const std::size_t ow = (xs.w + 2 * s.padding - s.effective_w()) / s.stride + 1;
    Tensor4<double> y({xs.n, s.out_channels, oh, ow});
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t o = 0; o < s.out_channels; ++o)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = b ? (*b)[o] : 0.0;
                    for (std::size_t c = 0; c < s.in_channels; ++c)
                        for (std::size_t ki = 0; ki < s.kernel_h; ++ki)
                            for (std::size_t kj = 0; kj < s.kernel_w; ++kj) {
                                const long yy = long(i * s.stride + ki * s.dilation) - long(s.padding);
                                const long xx = long(j * s.stride + kj * s.dilation) - long(s.padding);
                                if (yy < 0 || xx < 0 || yy >= long(xs.h) || xx >= long(xs.w)) continue;
                                acc += w.at(o, c, ki, kj) * x.at(n, c, std::size_t(yy), std::size_t(xx));
                            }
                    y.at(n, o, i, j) = acc;
                }
    return y;
}

}  // namespace

TEST_CASE("conv spec arithmetic") {
    auto s = ConvSpec::same(8, 16, 3, 4);
    CHECK(s.effective_h() == 9);
    CHECK(s.padding == 4);
    CHECK(s.parameter_count() == 1168);
    CHECK(ConvSpec::same(8, 16, 3, 1).parameter_count() == 1168);
    ConvSpec bad = ConvSpec::same(1, 1, 3, 1);
    bad.padding = 0;
    CHECK_THROWS(bad.output_h(2));
}

TEST_CASE("dilated impulse response covers the 9-tap footprint") {
    Tape<double> tape;
    Tensor4<double> x({1, 1, 17, 17});
    x.at(0, 0, 8, 8) = 1.0;
    auto spec = ConvSpec::same(1, 1, 3, 4, false);
    auto xi = tape.leaf(x);
    auto wi = tape.leaf(Tensor4<double>(spec.weight_shape(), 1.0));
    const auto& y = tape.value(ops::conv2d<double>(tape, xi, wi, std::nullopt, spec));
    REQUIRE(y.shape() == Shape{1, 1, 17, 17});
    std::set<std::pair<std::size_t, std::size_t>> expected;
    for (int dy : {-4, 0, 4})
        for (int dx : {-4, 0, 4}) expected.insert({std::size_t(8 + dy), std::size_t(8 + dx)});
    for (std::size_t i = 0; i < 17; ++i)
        for (std::size_t j = 0; j < 17; ++j) {
            const bool on = expected.count({i, j}) > 0;
            CHECK(y.at(0, 0, i, j) == doctest::Approx(on ? 1.0 : 0.0));
        }
}

TEST_CASE("conv2d matches direct summation") {
    std::mt19937_64 rng(3);
    for (std::size_t dil : {1u, 2u, 4u}) {
        for (std::size_t stride : {1u, 2u}) {
            ConvSpec s = ConvSpec::same(3, 5, 3, dil);
            s.stride = stride;
            auto x = random_tensor({2, 3, 13, 13}, rng);
            auto w = random_tensor(s.weight_shape(), rng);
            auto b = random_tensor(s.bias_shape(), rng);
            Tape<double> tape;
            const auto& y = tape.value(ops::conv2d<double>(tape, tape.leaf(x), tape.leaf(w), tape.leaf(b), s));
            auto ref = direct_conv(x, w, &b, s);
            REQUIRE(y.shape() == ref.shape());
            double worst = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) worst = std::max(worst, std::abs(y[i] - ref[i]));
            CHECK(worst < 1e-12);
        }
    }
}

TEST_CASE("conv2d rejects a channel mismatch") {
    Tape<double> tape;
    auto s = ConvSpec::same(2, 1, 3);
    auto x = tape.leaf(Tensor4<double>({1, 3, 4, 4}));
    auto w = tape.leaf(Tensor4<double>(s.weight_shape()));
    CHECK_THROWS(ops::conv2d<double>(tape, x, w, std::nullopt, s));
}

TEST_CASE("transposed convolution") {
    std::mt19937_64 rng(5);
    SUBCASE("doubles spatial dims and maps channels") {
        Tape<float> tape;
        auto x = tape.leaf(Tensor4<float>({1, 128, 8, 8}, 0.5f));
        auto w = tape.leaf(Tensor4<float>({128, 64, 2, 2}, 0.01f));
        CHECK(tape.value(ops::conv_transpose2d<float>(tape, x, w, std::nullopt)).shape() == Shape{1, 64, 16, 16});
    }
    SUBCASE("zero input yields the bias") {
        Tape<double> tape;
        auto b = random_tensor({1, 3, 1, 1}, rng);
        auto y = ops::conv_transpose2d<double>(tape, tape.leaf(Tensor4<double>({1, 2, 3, 3})),
                                               tape.leaf(random_tensor({2, 3, 2, 2}, rng)), tape.leaf(b));
        const auto& v = tape.value(y);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t i = 0; i < 36; ++i) CHECK(v.plane(0, c)[i] == b[c]);
    }
    SUBCASE("gradients match central differences") {
        std::vector<Tensor4<double>> in{random_tensor({1, 2, 3, 3}, rng), random_tensor({2, 3, 2, 2}, rng),
                                        random_tensor({1, 3, 1, 1}, rng)};
        auto weights = random_tensor({1, 3, 6, 6}, rng);
        auto rep = gradcheck(
            [&](Tape<double>& t, std::span<const Tape<double>::Id> ids) {
                return ops::weighted_sum<double>(t, ops::conv_transpose2d<double>(t, ids[0], ids[1], ids[2]), weights);
            },
            in, {.tol = 1e-6});
        CHECK(rep.pass);
        CHECK(rep.max_rel_err < 1e-6);
    }
}

TEST_CASE("maxpool forward and tie rule") {
    Tape<double> tape;
    Tensor4<double> x({1, 1, 2, 4}, std::vector<double>{1, 2, 5, 5, 3, 4, 0, 0});
    auto xi = tape.leaf(x, true);
    auto y = ops::maxpool2d<double>(tape, xi);
    CHECK(tape.value(y)[0] == 4.0);
    CHECK(tape.value(y)[1] == 5.0);
    auto loss = ops::weighted_sum<double>(tape, y, Tensor4<double>({1, 1, 1, 2}, std::vector<double>{2.0, 3.0}));
    tape.backward(loss);
    const auto& g = tape.grad(xi);
    CHECK(g.storage() == std::vector<double>{0, 0, 3, 0, 0, 2, 0, 0});

    Tape<double> t2;
    auto c = ops::maxpool2d<double>(t2, t2.leaf(Tensor4<double>({1, 2, 4, 6}, 1.5)));
    CHECK(t2.value(c).shape() == Shape{1, 2, 2, 3});
    for (double v : t2.value(c).values()) CHECK(v == 1.5);
}

TEST_CASE("batch norm train-mode moments and constant channel") {
    std::mt19937_64 rng(11);
    Tape<double> tape;
    auto x = random_tensor({4, 3, 5, 5}, rng, -3.0, 7.0);
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) x.plane(n, 2)[i] = 2.5;
    BatchNormState<double> state(3);
    auto y = ops::batchnorm2d<double>(tape, tape.leaf(x), tape.leaf(Tensor4<double>({1, 3, 1, 1}, 1.0)),
                                      tape.leaf(Tensor4<double>({1, 3, 1, 1}, std::vector<double>{0, 0, 0.25})),
                                      state, Mode::train);
    const auto& v = tape.value(y);
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) mean += v.plane(n, c)[i];
        mean /= 100.0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 25; ++i) sq += std::pow(v.plane(n, c)[i] - mean, 2);
        CHECK(std::abs(mean) < 1e-5);
        CHECK(std::abs(sq / 100.0 - 1.0) < 1e-3);
    }
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t i = 0; i < 25; ++i) CHECK(v.plane(n, 2)[i] == doctest::Approx(0.25));
    CHECK(state.running_mean[2] == doctest::Approx(0.25));
}

TEST_CASE("batch norm gradients") {
    std::mt19937_64 rng(13);
    std::vector<Tensor4<double>> in{random_tensor({2, 3, 4, 4}, rng), random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5),
                                    random_tensor({1, 3, 1, 1}, rng)};
    auto weights = random_tensor({2, 3, 4, 4}, rng);
    auto rep = gradcheck(
        [&](Tape<double>& t, std::span<const Tape<double>::Id> ids) {
            BatchNormState<double> st(3);
            return ops::weighted_sum<double>(t, ops::batchnorm2d<double>(t, ids[0], ids[1], ids[2], st, Mode::train),
                                             weights);
        },
        in, {.tol = 1e-5});
    CHECK(rep.pass);
}

TEST_CASE("softmax, dropout and composites") {
    std::mt19937_64 rng(17);
    SUBCASE("zero logits give a uniform distribution") {
        Tape<double> tape;
        const auto& p = tape.value(ops::softmax_channel<double>(tape, tape.leaf(Tensor4<double>({2, 3, 4, 4}))));
        for (double v : p.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    }
    SUBCASE("softmax sums to one") {
        Tape<double> tape;
        const auto& p =
            tape.value(ops::softmax_channel<double>(tape, tape.leaf(random_tensor({2, 3, 5, 5}, rng, -30, 30))));
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 25; ++i)
                CHECK(p.plane(n, 0)[i] + p.plane(n, 1)[i] + p.plane(n, 2)[i] == doctest::Approx(1.0));
    }
    SUBCASE("dropout is the identity in eval mode") {
        Tape<float> tape;
        Tensor4<float> x({1, 4, 8, 8});
        std::uniform_real_distribution<float> d(-1.f, 1.f);
        for (auto& v : x.values()) v = d(rng);
        auto y = ops::dropout<float>(tape, tape.leaf(x), 0.5, Mode::eval, rng);
        CHECK(tape.value(y).storage() == x.storage());
    }
    SUBCASE("train-mode dropout zeroes or rescales") {
        Tape<double> tape;
        auto y = ops::dropout<double>(tape, tape.leaf(Tensor4<double>({1, 1, 100, 100}, 1.0)), 0.3, Mode::train, rng);
        std::size_t kept = 0;
        for (double v : tape.value(y).values()) {
            CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.7)));
            kept += v != 0.0;
        }
        CHECK(std::abs(double(kept) / 1e4 - 0.7) < 0.03);
    }
    SUBCASE("add + relu gradients") {
        std::vector<Tensor4<double>> in{random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)};
        auto weights = random_tensor({2, 3, 4, 4}, rng);
        auto rep = gradcheck(
            [&](Tape<double>& t, std::span<const Tape<double>::Id> ids) {
                return ops::weighted_sum<double>(t, ops::relu<double>(t, ops::add<double>(t, ids[0], ids[1])),
                                                 weights);
            },
            in, {.tol = 1e-6, .kink_retries = 3});
        CHECK(rep.pass);
    }
}

TEST_CASE("tape backward basics") {
    SUBCASE("grad of sum is ones") {
        Tape<double> tape;
        auto x = tape.leaf(Tensor4<double>({2, 3, 4, 5}, 0.3), true);
        tape.backward(ops::sum<double>(tape, x));
        for (double g : tape.grad(x).values()) CHECK(g == 1.0);
    }
    SUBCASE("relu below zero has zero grad") {
        Tape<double> tape;
        auto x = tape.leaf(Tensor4<double>({1, 1, 1, 1}, -1.0), true);
        tape.backward(ops::sum<double>(tape, ops::relu<double>(tape, x)));
        CHECK(tape.grad(x)[0] == 0.0);
    }
    SUBCASE("second backward throws") {
        Tape<double> tape;
        auto x = tape.leaf(Tensor4<double>({1, 1, 2, 2}, 1.0), true);
        auto s = ops::sum<double>(tape, x);
        tape.backward(s);
        CHECK_THROWS(tape.backward(s));
    }
    SUBCASE("non-scalar root throws") {
        Tape<double> tape;
        auto x = tape.leaf(Tensor4<double>({1, 1, 2, 2}, 1.0), true);
        CHECK_THROWS(tape.backward(ops::relu<double>(tape, x)));
    }
    SUBCASE("non-finite forward is rejected") {
        Tape<double> tape;
        auto x = tape.leaf(Tensor4<double>({1, 1, 1, 1}, 1e308), true);
        CHECK_THROWS_AS(ops::add<double>(tape, x, x), NonFiniteError);
    }
}

TEST_CASE("relative error floor") {
    CHECK(relative_error(1.0, 1.0) == 0.0);
    CHECK(relative_error(2.0, 1.0) == doctest::Approx(0.5));
    CHECK(relative_error(0.0, 1e-9) == doctest::Approx(1e-6));
}

TEST_CASE("gradcheck suite passes and catches an injected fault") {
    auto checks = run_gradcheck_suite({.instances = 5, .seed = 7});
    REQUIRE(!checks.empty());
    for (const auto& c : checks) {
        INFO(c.name << " " << c.max_rel_err);
        CHECK(c.pass);
        CHECK(c.instances >= 5);
    }
    auto faulty = run_gradcheck_suite({.instances = 1, .seed = 7, .include_network = false, .inject_fault = true});
    bool any_fail = false;
    for (const auto& c : faulty) any_fail = any_fail || !c.pass;
    CHECK(any_fail);
}
