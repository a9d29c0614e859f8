#include "eddy/gradcheck_suite.hpp"

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <random>

#include "eddy/gradcheck.hpp"
#include "eddy/loss.hpp"
#include "eddy/ops.hpp"
#include "eddy/symmetricnet.hpp"

namespace eddy {

namespace {

using Id = Tape<double>::Id;
using Tensor = Tensor4<double>;

Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(s);
    for (double& v : t.values()) v = dist(rng);
    return t;
}

// One random case: the inputs to differentiate plus the scalar closure over them.
struct Case {
    std::vector<Tensor> inputs;
    ScalarClosure fn;
    std::size_t max_elements = 0;
    std::size_t kink_retries = 0;
};

struct SuiteEntry {
    std::string name;
    double tol;
    std::function<Case(std::mt19937_64&)> make;
};

// sum(w * (y - base)) accumulated in long double. Centring on the unperturbed output keeps the
// scalar near zero, so central differences are not swamped by rounding of a large total.
Id centred_projection(Tape<double>& tape, Id y, const Tensor& weights, const Tensor& base) {
    const Tensor& v = tape.value(y);
    long double total = 0.0L;
    for (std::size_t i = 0; i < v.size(); ++i) {
        total += static_cast<long double>(weights[i]) * (static_cast<long double>(v[i]) - base[i]);
    }
    return tape.record("centred_projection", Tensor({1, 1, 1, 1}, static_cast<double>(total)), {y},
                       [&weights](const Tape<double>&, const Tensor& g, std::span<Tensor* const> grads) {
                           for (std::size_t i = 0; i < weights.size(); ++i) (*grads[0])[i] += g[0] * weights[i];
                       });
}

// Projects an op output onto fixed random weights so every output element contributes.
// The first evaluation (the analytic pass, at the unperturbed inputs) fixes the centre.
ScalarClosure project(std::function<Id(Tape<double>&, std::span<const Id>)> op, Shape out, std::mt19937_64& rng) {
    auto weights = std::make_shared<Tensor>(random_tensor(out, rng));
    auto base = std::make_shared<std::optional<Tensor>>();
    return [op = std::move(op), weights, base](Tape<double>& tape, std::span<const Id> in) {
        const Id y = op(tape, in);
        if (!*base) *base = tape.value(y);
        return centred_projection(tape, y, *weights, **base);
    };
}

Case conv_case(std::mt19937_64& rng, ConvSpec spec, std::size_t n, std::size_t h, std::size_t w) {
    Case c;
    c.inputs = {random_tensor({n, spec.in_channels, h, w}, rng), random_tensor(spec.weight_shape(), rng),
                random_tensor(spec.bias_shape(), rng)};
    const Shape out{n, spec.out_channels, spec.output_h(h), spec.output_w(w)};
    c.fn = project([spec](Tape<double>& t, std::span<const Id> in) { return ops::conv2d(t, in[0], in[1], std::optional{in[2]}, spec); },
                   out, rng);
    return c;
}

Id faulty_relu(Tape<double>& tape, Id x) {
    const Tensor& in = tape.value(x);
    Tensor out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::max(in[i], 0.0);
    return tape.record("faulty_relu", std::move(out), {x},
                       [x](const Tape<double>& t, const Tensor& g, std::span<Tensor* const> grads) {
                           const Tensor& in = t.value(x);
                           for (std::size_t i = 0; i < in.size(); ++i) {
                               if (in[i] > 0.0) (*grads[0])[i] += 2.0 * g[i];
                           }
                       });
}

std::vector<SuiteEntry> suite_entries(const GradSuiteOptions& options) {
    std::vector<SuiteEntry> entries;
    entries.push_back({"conv2d", 1e-6, [](std::mt19937_64& rng) {
                           return conv_case(rng, ConvSpec::same(3, 4, 3, 1), 2, 6, 6);
                       }});
    entries.push_back({"conv2d_dilated_r4", 1e-6, [](std::mt19937_64& rng) {
                           return conv_case(rng, ConvSpec::same(2, 3, 3, 4), 1, 11, 11);
                       }});
    entries.push_back({"conv2d_strided", 1e-6, [](std::mt19937_64& rng) {
                           ConvSpec spec = ConvSpec::same(2, 2, 3, 1);
                           spec.stride = 2;
                           return conv_case(rng, spec, 1, 7, 7);
                       }});
    entries.push_back({"conv_transpose2d", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({1, 2, 3, 3}, rng), random_tensor({2, 3, 2, 2}, rng),
                                       random_tensor({1, 3, 1, 1}, rng)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) {
                               return ops::conv_transpose2d(t, in[0], in[1], std::optional{in[2]});
                           }, {1, 3, 6, 6}, rng);
                           return c;
                       }});
    entries.push_back({"maxpool2d", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 2, 4, 4}, rng)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) { return ops::maxpool2d(t, in[0]); },
                                          {2, 2, 2, 2}, rng);
                           c.kink_retries = 3;
                           return c;
                       }});
    entries.push_back({"upsample2x", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({1, 2, 3, 3}, rng)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) { return ops::upsample2x(t, in[0]); },
                                          {1, 2, 6, 6}, rng);
                           return c;
                       }});
    entries.push_back({"batchnorm2d_train", 1e-5, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 3, 4, 4}, rng), random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5),
                                       random_tensor({1, 3, 1, 1}, rng)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) {
                               BatchNormState<double> state(3);
                               return ops::batchnorm2d(t, in[0], in[1], in[2], state, Mode::train);
                           }, {2, 3, 4, 4}, rng);
                           return c;
                       }});
    entries.push_back({"batchnorm2d_eval", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 3, 4, 4}, rng), random_tensor({1, 3, 1, 1}, rng, 0.5, 1.5),
                                       random_tensor({1, 3, 1, 1}, rng)};
                           auto state = std::make_shared<BatchNormState<double>>(3);
                           std::uniform_real_distribution<double> d(0.5, 2.0);
                           for (std::size_t k = 0; k < 3; ++k) {
                               state->running_mean[k] = d(rng) - 1.0;
                               state->running_var[k] = d(rng);
                           }
                           c.fn = project([state](Tape<double>& t, std::span<const Id> in) {
                               return ops::batchnorm2d(t, in[0], in[1], in[2], *state, Mode::eval);
                           }, {2, 3, 4, 4}, rng);
                           return c;
                       }});
    entries.push_back({"relu_add", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) {
                               return ops::relu(t, ops::add(t, in[0], in[1]));
                           }, {2, 3, 4, 4}, rng);
                           c.kink_retries = 3;
                           return c;
                       }});
    entries.push_back({"dropout_train", 1e-6, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 3, 4, 4}, rng)};
                           const std::uint64_t mask_seed = rng();
                           c.fn = project([mask_seed](Tape<double>& t, std::span<const Id> in) {
                               std::mt19937_64 mask_rng(mask_seed);
                               return ops::dropout(t, in[0], 0.3, Mode::train, mask_rng);
                           }, {2, 3, 4, 4}, rng);
                           return c;
                       }});
    entries.push_back({"softmax_channel", 1e-4, [](std::mt19937_64& rng) {
                           Case c;
                           c.inputs = {random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0)};
                           c.fn = project([](Tape<double>& t, std::span<const Id> in) { return ops::softmax_channel(t, in[0]); },
                                          {2, 3, 4, 4}, rng);
                           return c;
                       }});
    for (LossKind kind : {LossKind::combined, LossKind::ce_only, LossKind::dice_only}) {
        entries.push_back({"loss_" + to_string(kind), 1e-4, [kind](std::mt19937_64& rng) {
                               Case c;
                               c.inputs = {random_tensor({2, 3, 4, 4}, rng, -2.0, 2.0)};
                               LabelBatch labels{2, 4, 4, std::vector<std::uint8_t>(32)};
                               std::uniform_int_distribution<int> cls(0, 2);
                               for (auto& v : labels.classes) v = static_cast<std::uint8_t>(cls(rng));
                               c.fn = [labels, kind](Tape<double>& t, std::span<const Id> in) {
                                   return loss_op(t, ops::softmax_channel(t, in[0]), labels, kind);
                               };
                               return c;
                           }});
    }
    entries.push_back({"lateral_merge", 1e-5, [](std::mt19937_64& rng) {
                           const ConvSpec spec = ConvSpec::same(4, 4, 3, 4);
                           Case c;
                           c.inputs = {random_tensor({1, 4, 6, 6}, rng), random_tensor({1, 4, 6, 6}, rng),
                                       random_tensor(spec.weight_shape(), rng), random_tensor(spec.bias_shape(), rng)};
                           c.fn = project([spec](Tape<double>& t, std::span<const Id> in) {
                               return lateral_merge(t, in[0], in[1], in[2], in[3], spec);
                           }, {1, 4, 6, 6}, rng);
                           return c;
                       }});
    if (options.include_network) {
        entries.push_back({"network_end_to_end", 1e-4, [](std::mt19937_64& rng) {
                               NetworkSpec spec;
                               auto net = std::make_shared<Network<double>>(build<double>(spec, rng));
                               const Tensor x = random_tensor({2, 4, 16, 16}, rng);
                               LabelBatch labels{2, 16, 16, std::vector<std::uint8_t>(2 * 16 * 16)};
                               std::uniform_int_distribution<int> cls(0, 2);
                               for (auto& v : labels.classes) v = static_cast<std::uint8_t>(cls(rng));
                               const std::uint64_t dropout_seed = rng();
                               Case c;
                               for (const auto& p : net->parameters()) c.inputs.push_back(p.value);
                               c.max_elements = 50;
                               // Thousands of relu units sit near zero, so a probe regularly straddles a kink.
                               c.kink_retries = 3;
                               c.fn = [net, x, labels, dropout_seed](Tape<double>& t, std::span<const Id> params) {
                                   std::mt19937_64 dropout_rng(dropout_seed);
                                   const Id input = t.leaf(x, false);
                                   const Id probs = forward(*net, t, input, params, Mode::train, dropout_rng);
                                   return loss_op(t, probs, labels, LossKind::combined);
                               };
                               return c;
                           }});
    }
    if (options.inject_fault) {
        entries.push_back({"faulty_relu (injected)", 1e-6, [](std::mt19937_64& rng) {
                               Case c;
                               c.inputs = {random_tensor({1, 2, 4, 4}, rng)};
                               c.fn = project([](Tape<double>& t, std::span<const Id> in) { return faulty_relu(t, in[0]); },
                                              {1, 2, 4, 4}, rng);
                               return c;
                           }});
    }
    return entries;
}

}  // namespace

std::vector<OpCheck> run_gradcheck_suite(const GradSuiteOptions& options) {
    std::vector<OpCheck> results;
    std::mt19937_64 rng(options.seed);
    for (const auto& entry : suite_entries(options)) {
        OpCheck check{entry.name, entry.tol, 0, 0.0, 0, true};
        for (std::size_t i = 0; i < options.instances; ++i) {
            Case c = entry.make(rng);
            GradcheckOptions go;
            go.tol = entry.tol;
            go.max_elements = c.max_elements;
            go.kink_retries = c.kink_retries;
            go.seed = rng();
            const GradReport report = gradcheck(c.fn, c.inputs, go);
            check.max_rel_err = std::max(check.max_rel_err, report.max_rel_err);
            check.kinks += report.kinks;
            check.pass = check.pass && report.pass;
            ++check.instances;
        }
        results.push_back(check);
    }
    return results;
}

}  // namespace eddy
