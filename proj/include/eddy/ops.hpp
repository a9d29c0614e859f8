#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <vector>

#include "eddy/tape.hpp"
#include "eddy/tensor.hpp"

namespace eddy {

enum class Mode { train, eval };

/// Geometry of a 2-D convolution. Dilation spreads the kh x kw taps `dilation`
/// cells apart without adding weights.
struct ConvSpec {
    std::size_t kernel_h = 3;
    std::size_t kernel_w = 3;
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t padding = 0;
    std::size_t in_channels = 1;
    std::size_t out_channels = 1;
    bool has_bias = true;

    /// k + (k-1)(r-1)
    std::size_t effective_h() const { return kernel_h + (kernel_h - 1) * (dilation - 1); }
    std::size_t effective_w() const { return kernel_w + (kernel_w - 1) * (dilation - 1); }

    std::size_t parameter_count() const {
        return in_channels * out_channels * kernel_h * kernel_w + (has_bias ? out_channels : 0);
    }

    /// Output extent along one axis; throws unless the result is a positive integer.
    std::size_t output_h(std::size_t in_h) const;
    std::size_t output_w(std::size_t in_w) const;

    Shape weight_shape() const { return {out_channels, in_channels, kernel_h, kernel_w}; }
    Shape bias_shape() const { return {1, out_channels, 1, 1}; }

    void validate() const;

    /// Stride-1 convolution whose padding r(k-1)/2 preserves spatial size.
    static ConvSpec same(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                         std::size_t dilation = 1, bool has_bias = true);
};

/// Running statistics carried across batch-norm calls.
template <typename T>
struct BatchNormState {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

namespace ops {

template <typename T>
using Id = typename Tape<T>::Id;

/// Cross-correlation with weights (out_c, in_c, kh, kw) and optional bias (1, out_c, 1, 1).
template <typename T>
Id<T> conv2d(Tape<T>& tape, Id<T> x, Id<T> weight, std::optional<Id<T>> bias, const ConvSpec& spec);

/// 2x2 stride-2 transposed convolution; weights (in_c, out_c, 2, 2), bias (1, out_c, 1, 1).
template <typename T>
Id<T> conv_transpose2d(Tape<T>& tape, Id<T> x, Id<T> weight, std::optional<Id<T>> bias);

/// 2x2 stride-2 max pooling. Ties route the gradient to the first window element in row-major order.
template <typename T>
Id<T> maxpool2d(Tape<T>& tape, Id<T> x);

/// Nearest-neighbour 2x upsampling (each cell duplicated into a 2x2 block).
template <typename T>
Id<T> upsample2x(Tape<T>& tape, Id<T> x);

/// Per-channel batch normalization; gamma and beta are (1, c, 1, 1).
/// Train mode normalizes with batch statistics and updates `state`; eval mode uses the running statistics.
template <typename T>
Id<T> batchnorm2d(Tape<T>& tape, Id<T> x, Id<T> gamma, Id<T> beta, BatchNormState<T>& state, Mode mode);

template <typename T>
Id<T> relu(Tape<T>& tape, Id<T> x);

template <typename T>
Id<T> add(Tape<T>& tape, Id<T> a, Id<T> b);

/// Inverted dropout: survivors are scaled by 1/(1-rate) in train mode; identity in eval mode.
template <typename T>
Id<T> dropout(Tape<T>& tape, Id<T> x, double rate, Mode mode, std::mt19937_64& rng);

/// Softmax across the channel axis at every (n, y, x).
template <typename T>
Id<T> softmax_channel(Tape<T>& tape, Id<T> x);

/// Scalar sum of all elements.
template <typename T>
Id<T> sum(Tape<T>& tape, Id<T> x);

/// Scalar sum(x * weights) with constant weights; turns any op output into a gradcheckable scalar.
template <typename T>
Id<T> weighted_sum(Tape<T>& tape, Id<T> x, const Tensor4<T>& weights);

}  // namespace ops
}  // namespace eddy
