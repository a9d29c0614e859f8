#pragma once

#include <array>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eddy/classes.hpp"
#include "eddy/ops.hpp"
#include "eddy/tape.hpp"
#include "eddy/tensor.hpp"

namespace eddy {

inline constexpr std::size_t kNetworkDepth = 4;

/// Architecture of the symmetric encoder/decoder.
///
/// Channel ladder: down blocks base * {1, 2, 4, 8}, transition base * 16,
/// up blocks the reverse of the down ladder. Inputs must be divisible by 16.
struct NetworkSpec {
    std::size_t in_channels = 4;
    std::size_t classes = kNumClasses;
    std::size_t base_channels = 8;
    std::size_t dilation = 4;
    double down_dropout = 0.3;        // after the 4th down block's pool
    double transition_dropout = 0.5;  // end of the transition block

    std::array<std::size_t, kNetworkDepth> down_channels() const;
    std::size_t transition_channels() const { return base_channels << kNetworkDepth; }
    std::array<std::size_t, kNetworkDepth> up_channels() const;

    void validate() const;
    /// Throws unless h and w are positive multiples of 16.
    void validate_input(std::size_t h, std::size_t w) const;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

template <typename T>
struct NamedTensor {
    std::string name;
    Tensor4<T> value;
};

/// Parameters and batch-norm buffers of one instantiated network.
/// Enumeration order is fixed by construction and defines the checkpoint layout.
template <typename T>
class Network {
public:
    struct Conv {
        std::size_t weight = 0;
        std::size_t bias = 0;
        ConvSpec spec;
    };
    struct Norm {
        std::size_t gamma = 0;
        std::size_t beta = 0;
        std::size_t state = 0;
    };
    struct ConvBlock {
        Conv conv1;
        Norm bn1;
        Conv conv2;
        Norm bn2;
    };
    struct UpBlock {
        std::size_t deconv_weight = 0;
        std::size_t deconv_bias = 0;
        Conv skip;   // dilated conv on the lateral (skip) branch
        Conv merge;  // dilated conv after the additive merge
        Norm bn;
    };
    struct Layout {
        std::array<ConvBlock, kNetworkDepth> down;
        ConvBlock transition;
        std::array<UpBlock, kNetworkDepth> up;
        Conv head;
    };

    /// Allocates zero-valued parameters; use build() for initialized weights.
    explicit Network(const NetworkSpec& spec);

    const NetworkSpec& spec() const { return spec_; }
    const Layout& layout() const { return layout_; }

    std::vector<NamedTensor<T>>& parameters() { return params_; }
    const std::vector<NamedTensor<T>>& parameters() const { return params_; }
    std::vector<BatchNormState<T>>& norms() { return norms_; }
    const std::vector<BatchNormState<T>>& norms() const { return norms_; }

    /// Total trainable scalar count.
    std::size_t parameter_count() const;

    Tensor4<T>& parameter(std::string_view name);
    const Tensor4<T>& parameter(std::string_view name) const;

    /// Parameters followed by batch-norm running mean/var, in checkpoint order.
    std::vector<NamedTensor<T>> state_tensors() const;
    /// Inverse of state_tensors(); names, order and dims must match exactly.
    void load_state_tensors(const std::vector<NamedTensor<T>>& tensors);

    template <typename U>
    Network<U> cast() const {
        Network<U> out(spec_);
        std::vector<NamedTensor<U>> converted;
        for (auto& t : state_tensors()) converted.push_back({t.name, t.value.template cast<U>()});
        out.load_state_tensors(converted);
        return out;
    }

private:
    Conv add_conv(const std::string& prefix, const ConvSpec& spec);
    Norm add_norm(const std::string& prefix, std::size_t channels);
    ConvBlock add_block(const std::string& prefix, std::size_t in_c, std::size_t out_c);
    std::size_t add_parameter(std::string name, Shape shape, T fill = T{0});

    NetworkSpec spec_;
    Layout layout_;
    std::vector<NamedTensor<T>> params_;
    std::vector<BatchNormState<T>> norms_;
    std::vector<std::string> norm_names_;
};

/// Builds a network with He-uniform conv/deconv weights, gamma = 1, beta = 0, zero biases.
/// The 1x1 head is scaled down so an untrained network predicts near-uniform probabilities.
template <typename T>
Network<T> build(const NetworkSpec& spec, std::mt19937_64& rng);

/// Registers every parameter as a tape leaf, in parameter order.
template <typename T>
std::vector<typename Tape<T>::Id> bind_parameters(Tape<T>& tape, const Network<T>& net, bool requires_grad);

/// dilated_conv(skip) + high; both inputs must share dims.
template <typename T>
typename Tape<T>::Id lateral_merge(Tape<T>& tape, typename Tape<T>::Id high, typename Tape<T>::Id skip,
                                   typename Tape<T>::Id skip_weight, typename Tape<T>::Id skip_bias,
                                   const ConvSpec& skip_spec);

/// Full forward pass to per-pixel class probabilities (n, classes, H, W).
/// Train mode updates batch-norm running statistics and draws dropout masks from `rng`.
template <typename T>
typename Tape<T>::Id forward(Network<T>& net, Tape<T>& tape, typename Tape<T>::Id input,
                             std::span<const typename Tape<T>::Id> params, Mode mode, std::mt19937_64& rng);

/// Eval-mode forward without gradients.
template <typename T>
Tensor4<T> predict(Network<T>& net, const Tensor4<T>& input);

struct StageShape {
    std::string stage;
    std::size_t channels = 0;
    std::size_t h = 0;
    std::size_t w = 0;

    friend bool operator==(const StageShape&, const StageShape&) = default;
};

/// Static output dims per stage: down1..down4 (post-pool), transition, up1..up4, head.
std::vector<StageShape> shape_trace(const NetworkSpec& spec, std::size_t h, std::size_t w);

/// Per up level, the deconv output (high) and the matching down-block pre-pool map (skip).
struct LateralShape {
    std::size_t level = 0;
    StageShape high;
    StageShape skip;
};
std::vector<LateralShape> lateral_shapes(const NetworkSpec& spec, std::size_t h, std::size_t w);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace eddy
