#include "eddy/symmetricnet.hpp"

#include <cmath>
#include <stdexcept>

namespace eddy {

std::array<std::size_t, kNetworkDepth> NetworkSpec::down_channels() const {
    std::array<std::size_t, kNetworkDepth> out{};
    for (std::size_t i = 0; i < kNetworkDepth; ++i) out[i] = base_channels << i;
    return out;
}

std::array<std::size_t, kNetworkDepth> NetworkSpec::up_channels() const {
    auto down = down_channels();
    return {down[3], down[2], down[1], down[0]};
}

void NetworkSpec::validate() const {
    if (in_channels == 0) throw std::invalid_argument("NetworkSpec: in_channels must be >= 1");
    if (classes != kNumClasses) throw std::invalid_argument("NetworkSpec: classes is fixed at 3");
    if (base_channels == 0) throw std::invalid_argument("NetworkSpec: base_channels must be >= 1");
    if (dilation == 0) throw std::invalid_argument("NetworkSpec: dilation rate must be >= 1");
    for (double rate : {down_dropout, transition_dropout}) {
        if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("NetworkSpec: dropout rates must lie in [0, 1)");
    }
}

void NetworkSpec::validate_input(std::size_t h, std::size_t w) const {
    constexpr std::size_t factor = std::size_t{1} << kNetworkDepth;
    if (h == 0 || w == 0 || h % factor != 0 || w % factor != 0) {
        throw std::invalid_argument("input spatial dims must be positive multiples of 16, got " + std::to_string(h) +
                                    "x" + std::to_string(w));
    }
}

template <typename T>
Network<T>::Network(const NetworkSpec& spec) : spec_(spec) {
    spec_.validate();
    const auto down = spec_.down_channels();
    const auto up = spec_.up_channels();

    std::size_t in_c = spec_.in_channels;
    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        layout_.down[i] = add_block("down" + std::to_string(i + 1), in_c, down[i]);
        in_c = down[i];
    }
    layout_.transition = add_block("transition", in_c, spec_.transition_channels());
    in_c = spec_.transition_channels();

    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        const std::string prefix = "up" + std::to_string(i + 1);
        UpBlock& blk = layout_.up[i];
        blk.deconv_weight = add_parameter(prefix + ".deconv.w", {in_c, up[i], 2, 2});
        blk.deconv_bias = add_parameter(prefix + ".deconv.b", {1, up[i], 1, 1});
        blk.skip = add_conv(prefix + ".skip", ConvSpec::same(up[i], up[i], 3, spec_.dilation));
        blk.merge = add_conv(prefix + ".conv", ConvSpec::same(up[i], up[i], 3, spec_.dilation));
        blk.bn = add_norm(prefix + ".bn", up[i]);
        in_c = up[i];
    }
    layout_.head = add_conv("head", ConvSpec::same(in_c, spec_.classes, 1));
}

template <typename T>
std::size_t Network<T>::add_parameter(std::string name, Shape shape, T fill) {
    params_.push_back({std::move(name), Tensor4<T>(shape, fill)});
    return params_.size() - 1;
}

template <typename T>
typename Network<T>::Conv Network<T>::add_conv(const std::string& prefix, const ConvSpec& spec) {
    Conv conv;
    conv.spec = spec;
    conv.weight = add_parameter(prefix + ".w", spec.weight_shape());
    conv.bias = add_parameter(prefix + ".b", spec.bias_shape());
    return conv;
}

template <typename T>
typename Network<T>::Norm Network<T>::add_norm(const std::string& prefix, std::size_t channels) {
    Norm norm;
    norm.gamma = add_parameter(prefix + ".gamma", {1, channels, 1, 1}, T{1});
    norm.beta = add_parameter(prefix + ".beta", {1, channels, 1, 1});
    norms_.emplace_back(channels);
    norm_names_.push_back(prefix);
    norm.state = norms_.size() - 1;
    return norm;
}

template <typename T>
typename Network<T>::ConvBlock Network<T>::add_block(const std::string& prefix, std::size_t in_c,
                                                     std::size_t out_c) {
    ConvBlock blk;
    blk.conv1 = add_conv(prefix + ".conv1", ConvSpec::same(in_c, out_c, 3));
    blk.bn1 = add_norm(prefix + ".bn1", out_c);
    blk.conv2 = add_conv(prefix + ".conv2", ConvSpec::same(out_c, out_c, 3));
    blk.bn2 = add_norm(prefix + ".bn2", out_c);
    return blk;
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.value.size();
    return total;
}

template <typename T>
Tensor4<T>& Network<T>::parameter(std::string_view name) {
    for (auto& p : params_) {
        if (p.name == name) return p.value;
    }
    throw std::out_of_range("Network: no parameter named '" + std::string(name) + "'");
}

template <typename T>
const Tensor4<T>& Network<T>::parameter(std::string_view name) const {
    return const_cast<Network*>(this)->parameter(name);
}

template <typename T>
std::vector<NamedTensor<T>> Network<T>::state_tensors() const {
    std::vector<NamedTensor<T>> out = params_;
    for (std::size_t i = 0; i < norms_.size(); ++i) {
        const auto c = norms_[i].running_mean.size();
        out.push_back({norm_names_[i] + ".running_mean", Tensor4<T>({1, c, 1, 1}, norms_[i].running_mean)});
        out.push_back({norm_names_[i] + ".running_var", Tensor4<T>({1, c, 1, 1}, norms_[i].running_var)});
    }
    return out;
}

template <typename T>
void Network<T>::load_state_tensors(const std::vector<NamedTensor<T>>& tensors) {
    const auto expected = state_tensors();
    if (tensors.size() != expected.size()) {
        throw std::invalid_argument("Network: expected " + std::to_string(expected.size()) + " tensors, got " +
                                    std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        if (tensors[i].name != expected[i].name || tensors[i].value.shape() != expected[i].value.shape()) {
            throw std::invalid_argument("Network: tensor " + std::to_string(i) + " is '" + tensors[i].name + "' " +
                                        tensors[i].value.shape().str() + ", expected '" + expected[i].name + "' " +
                                        expected[i].value.shape().str());
        }
    }
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = tensors[i].value;
    std::size_t k = params_.size();
    for (auto& norm : norms_) {
        norm.running_mean = tensors[k++].value.storage();
        norm.running_var = tensors[k++].value.storage();
    }
}

namespace {

template <typename T>
void he_uniform(Tensor4<T>& w, std::size_t fan_in, double scale, std::mt19937_64& rng) {
    const double bound = scale * std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (T& v : w.values()) v = static_cast<T>(dist(rng));
}

}  // namespace

template <typename T>
Network<T> build(const NetworkSpec& spec, std::mt19937_64& rng) {
    Network<T> net(spec);
    auto& params = net.parameters();
    const auto& layout = net.layout();
    auto init_conv = [&](const typename Network<T>::Conv& conv, double scale) {
        const ConvSpec& s = conv.spec;
        he_uniform(params[conv.weight].value, s.in_channels * s.kernel_h * s.kernel_w, scale, rng);
    };
    for (const auto& blk : layout.down) {
        init_conv(blk.conv1, 1.0);
        init_conv(blk.conv2, 1.0);
    }
    init_conv(layout.transition.conv1, 1.0);
    init_conv(layout.transition.conv2, 1.0);
    for (const auto& blk : layout.up) {
        Tensor4<T>& w = params[blk.deconv_weight].value;
        he_uniform(w, w.shape().n, 1.0, rng);
        init_conv(blk.skip, 1.0);
        init_conv(blk.merge, 1.0);
    }
    init_conv(layout.head, 0.1);
    return net;
}

template <typename T>
std::vector<typename Tape<T>::Id> bind_parameters(Tape<T>& tape, const Network<T>& net, bool requires_grad) {
    std::vector<typename Tape<T>::Id> ids;
    ids.reserve(net.parameters().size());
    for (const auto& p : net.parameters()) ids.push_back(tape.leaf(p.value, requires_grad));
    return ids;
}

template <typename T>
typename Tape<T>::Id lateral_merge(Tape<T>& tape, typename Tape<T>::Id high, typename Tape<T>::Id skip,
                                   typename Tape<T>::Id skip_weight, typename Tape<T>::Id skip_bias,
                                   const ConvSpec& skip_spec) {
    if (tape.value(high).shape() != tape.value(skip).shape()) {
        throw std::invalid_argument("lateral_merge: high " + tape.value(high).shape().str() + " and skip " +
                                    tape.value(skip).shape().str() + " differ");
    }
    const auto refined = ops::conv2d(tape, skip, skip_weight, std::optional{skip_bias}, skip_spec);
    return ops::add(tape, refined, high);
}

template <typename T>
typename Tape<T>::Id forward(Network<T>& net, Tape<T>& tape, typename Tape<T>::Id input,
                             std::span<const typename Tape<T>::Id> params, Mode mode, std::mt19937_64& rng) {
    using Id = typename Tape<T>::Id;
    const NetworkSpec& spec = net.spec();
    const Shape in = tape.value(input).shape();
    if (in.c != spec.in_channels) {
        throw std::invalid_argument("forward: input has " + std::to_string(in.c) + " channels, network expects " +
                                    std::to_string(spec.in_channels));
    }
    spec.validate_input(in.h, in.w);
    if (params.size() != net.parameters().size()) {
        throw std::invalid_argument("forward: parameter binding size mismatch");
    }

    const auto& layout = net.layout();
    auto conv = [&](Id x, const typename Network<T>::Conv& c) {
        return ops::conv2d(tape, x, params[c.weight], std::optional{params[c.bias]}, c.spec);
    };
    auto norm_relu = [&](Id x, const typename Network<T>::Norm& n) {
        return ops::relu(tape, ops::batchnorm2d(tape, x, params[n.gamma], params[n.beta], net.norms()[n.state], mode));
    };
    auto block = [&](Id x, const typename Network<T>::ConvBlock& b) {
        return norm_relu(conv(norm_relu(conv(x, b.conv1), b.bn1), b.conv2), b.bn2);
    };

    std::array<Id, kNetworkDepth> skips{};
    Id x = input;
    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        skips[i] = block(x, layout.down[i]);
        x = ops::maxpool2d(tape, skips[i]);
    }
    x = ops::dropout(tape, x, spec.down_dropout, mode, rng);
    x = block(x, layout.transition);
    x = ops::dropout(tape, x, spec.transition_dropout, mode, rng);

    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        const auto& up = layout.up[i];
        const Id high = ops::conv_transpose2d(tape, x, params[up.deconv_weight], std::optional{params[up.deconv_bias]});
        const Id merged = lateral_merge(tape, high, skips[kNetworkDepth - 1 - i], params[up.skip.weight],
                                        params[up.skip.bias], up.skip.spec);
        x = norm_relu(conv(merged, up.merge), up.bn);
    }
    return ops::softmax_channel(tape, conv(x, layout.head));
}

template <typename T>
Tensor4<T> predict(Network<T>& net, const Tensor4<T>& input) {
    Tape<T> tape;
    const auto params = bind_parameters(tape, net, false);
    const auto x = tape.leaf(input, false);
    std::mt19937_64 unused(0);
    return tape.value(forward(net, tape, x, std::span<const typename Tape<T>::Id>(params), Mode::eval, unused));
}

std::vector<StageShape> shape_trace(const NetworkSpec& spec, std::size_t h, std::size_t w) {
    spec.validate();
    spec.validate_input(h, w);
    std::vector<StageShape> trace;
    const auto down = spec.down_channels();
    const auto up = spec.up_channels();
    std::size_t ch = h, cw = w;
    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        ch /= 2;
        cw /= 2;
        trace.push_back({"down" + std::to_string(i + 1), down[i], ch, cw});
    }
    trace.push_back({"transition", spec.transition_channels(), ch, cw});
    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        ch *= 2;
        cw *= 2;
        trace.push_back({"up" + std::to_string(i + 1), up[i], ch, cw});
    }
    trace.push_back({"head", spec.classes, ch, cw});
    for (const auto& lat : lateral_shapes(spec, h, w)) {
        if (lat.high.channels != lat.skip.channels || lat.high.h != lat.skip.h || lat.high.w != lat.skip.w) {
            throw std::logic_error("shape_trace: lateral connection mismatch at up" + std::to_string(lat.level));
        }
    }
    return trace;
}

std::vector<LateralShape> lateral_shapes(const NetworkSpec& spec, std::size_t h, std::size_t w) {
    spec.validate();
    spec.validate_input(h, w);
    const auto down = spec.down_channels();
    const auto up = spec.up_channels();
    std::vector<LateralShape> out;
    // Pre-pool dims of down block i are (h >> i, w >> i); the transition runs at h >> 4.
    std::size_t ch = h >> kNetworkDepth, cw = w >> kNetworkDepth;
    for (std::size_t i = 0; i < kNetworkDepth; ++i) {
        ch *= 2;
        cw *= 2;
        const std::size_t level = kNetworkDepth - 1 - i;
        out.push_back({i + 1,
                       {"up" + std::to_string(i + 1) + ".deconv", up[i], ch, cw},
                       {"down" + std::to_string(level + 1) + ".prepool", down[level], h >> level, w >> level}});
    }
    return out;
}

template class Network<float>;
template class Network<double>;

#define EDDY_INSTANTIATE_NET(T)                                                                                    \
    template Network<T> build<T>(const NetworkSpec&, std::mt19937_64&);                                            \
    template std::vector<Tape<T>::Id> bind_parameters<T>(Tape<T>&, const Network<T>&, bool);                       \
    template Tape<T>::Id lateral_merge<T>(Tape<T>&, Tape<T>::Id, Tape<T>::Id, Tape<T>::Id, Tape<T>::Id,            \
                                          const ConvSpec&);                                                        \
    template Tape<T>::Id forward<T>(Network<T>&, Tape<T>&, Tape<T>::Id, std::span<const Tape<T>::Id>, Mode,        \
                                    std::mt19937_64&);                                                             \
    template Tensor4<T> predict<T>(Network<T>&, const Tensor4<T>&);

EDDY_INSTANTIATE_NET(float)
EDDY_INSTANTIATE_NET(double)

#undef EDDY_INSTANTIATE_NET

}  // namespace eddy
