#include "eddy/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>

namespace eddy {

namespace {

std::size_t conv_output_extent(std::size_t in, std::size_t pad, std::size_t effective, std::size_t stride,
                               const char* axis) {
    const std::size_t padded = in + 2 * pad;
    if (padded < effective || (padded - effective) % stride != 0) {
        throw std::invalid_argument(std::string("conv2d: non-integral output ") + axis + " for input " +
                                    std::to_string(in) + ", padding " + std::to_string(pad) +
                                    ", effective kernel " + std::to_string(effective) + ", stride " +
                                    std::to_string(stride));
    }
    return (padded - effective) / stride + 1;
}

}  // namespace

std::size_t ConvSpec::output_h(std::size_t in_h) const {
    return conv_output_extent(in_h, padding, effective_h(), stride, "height");
}

std::size_t ConvSpec::output_w(std::size_t in_w) const {
    return conv_output_extent(in_w, padding, effective_w(), stride, "width");
}

void ConvSpec::validate() const {
    if (kernel_h == 0 || kernel_w == 0) throw std::invalid_argument("ConvSpec: kernel must be non-empty");
    if (stride == 0) throw std::invalid_argument("ConvSpec: stride must be >= 1");
    if (dilation == 0) throw std::invalid_argument("ConvSpec: dilation rate must be >= 1");
    if (in_channels == 0 || out_channels == 0) throw std::invalid_argument("ConvSpec: channel counts must be >= 1");
}

ConvSpec ConvSpec::same(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                        std::size_t dilation, bool has_bias) {
    if (kernel % 2 == 0) throw std::invalid_argument("ConvSpec::same requires an odd kernel");
    ConvSpec spec;
    spec.kernel_h = kernel;
    spec.kernel_w = kernel;
    spec.stride = 1;
    spec.dilation = dilation;
    spec.padding = dilation * (kernel - 1) / 2;
    spec.in_channels = in_channels;
    spec.out_channels = out_channels;
    spec.has_bias = has_bias;
    return spec;
}

namespace ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
    std::size_t channels, height, width, out_h, out_w;
};

// Unfolds one sample (c, h, w) into a (c*kh*kw, out_h*out_w) matrix; out-of-range taps read as zero.
template <typename T>
void im2col(const T* in, const ConvSpec& spec, const ConvGeometry& g, T* col) {
    const std::size_t cols = g.out_h * g.out_w;
    const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
    for (std::size_t c = 0; c < g.channels; ++c) {
        const T* plane = in + c * g.height * g.width;
        for (std::size_t ki = 0; ki < spec.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < spec.kernel_w; ++kj) {
                T* row = col + ((c * spec.kernel_h + ki) * spec.kernel_w + kj) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ki * spec.dilation) - pad;
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, T{0});
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(iy) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * spec.stride + kj * spec.dilation) - pad;
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{0}
                                                                                          : src[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into the (c, h, w) sample.
template <typename T>
void col2im_add(const T* col, const ConvSpec& spec, const ConvGeometry& g, T* out) {
    const std::size_t cols = g.out_h * g.out_w;
    const auto pad = static_cast<std::ptrdiff_t>(spec.padding);
    for (std::size_t c = 0; c < g.channels; ++c) {
        T* plane = out + c * g.height * g.width;
        for (std::size_t ki = 0; ki < spec.kernel_h; ++ki) {
            for (std::size_t kj = 0; kj < spec.kernel_w; ++kj) {
                const T* row = col + ((c * spec.kernel_h + ki) * spec.kernel_w + kj) * cols;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * spec.stride + ki * spec.dilation) - pad;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* dst = plane + static_cast<std::size_t>(iy) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const std::ptrdiff_t ix =
                            static_cast<std::ptrdiff_t>(ox * spec.stride + kj * spec.dilation) - pad;
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

template <typename T>
void require_same_shape(const Tensor4<T>& a, const Tensor4<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                                    b.shape().str());
    }
}

}  // namespace

template <typename T>
Id<T> conv2d(Tape<T>& tape, Id<T> x, Id<T> weight, std::optional<Id<T>> bias, const ConvSpec& spec) {
    spec.validate();
    const Tensor4<T>& in = tape.value(x);
    const Tensor4<T>& w = tape.value(weight);
    const Shape xs = in.shape();
    if (xs.c != spec.in_channels) {
        throw std::invalid_argument("conv2d: input has " + std::to_string(xs.c) + " channels, spec expects " +
                                    std::to_string(spec.in_channels));
    }
    if (w.shape() != spec.weight_shape()) {
        throw std::invalid_argument("conv2d: weight shape " + w.shape().str() + " does not match spec " +
                                    spec.weight_shape().str());
    }
    if (bias.has_value() != spec.has_bias) throw std::invalid_argument("conv2d: bias presence disagrees with spec");
    if (bias && tape.value(*bias).shape() != spec.bias_shape()) {
        throw std::invalid_argument("conv2d: bias shape " + tape.value(*bias).shape().str() + " does not match " +
                                    spec.bias_shape().str());
    }

    const ConvGeometry g{xs.c, xs.h, xs.w, spec.output_h(xs.h), spec.output_w(xs.w)};
    const auto K = static_cast<Eigen::Index>(spec.in_channels * spec.kernel_h * spec.kernel_w);
    const auto P = static_cast<Eigen::Index>(g.out_h * g.out_w);
    const auto OC = static_cast<Eigen::Index>(spec.out_channels);

    Tensor4<T> out({xs.n, spec.out_channels, g.out_h, g.out_w});
    std::vector<T> col(static_cast<std::size_t>(K * P));
    ConstMatMap<T> wm(w.data(), OC, K);
    for (std::size_t n = 0; n < xs.n; ++n) {
        im2col(in.plane(n, 0), spec, g, col.data());
        MatMap<T> ym(out.plane(n, 0), OC, P);
        ym.noalias() = wm * ConstMatMap<T>(col.data(), K, P);
        if (bias) {
            const Tensor4<T>& b = tape.value(*bias);
            for (Eigen::Index o = 0; o < OC; ++o) ym.row(o).array() += b[static_cast<std::size_t>(o)];
        }
    }

    std::vector<Id<T>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(
        "conv2d", std::move(out), std::move(inputs),
        [x, weight, spec, g, K, P, OC](const Tape<T>& t, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
            const Tensor4<T>& in = t.value(x);
            const Tensor4<T>& w = t.value(weight);
            Tensor4<T>* dx = grads[0];
            Tensor4<T>* dw = grads[1];
            Tensor4<T>* db = grads.size() > 2 ? grads[2] : nullptr;
            ConstMatMap<T> wm(w.data(), OC, K);
            std::vector<T> col(static_cast<std::size_t>(K * P));
            std::vector<T> dcol(dx ? col.size() : 0);
            for (std::size_t n = 0; n < in.shape().n; ++n) {
                ConstMatMap<T> dy(gout.plane(n, 0), OC, P);
                if (dw) {
                    im2col(in.plane(n, 0), spec, g, col.data());
                    MatMap<T>(dw->data(), OC, K).noalias() += dy * ConstMatMap<T>(col.data(), K, P).transpose();
                }
                if (db) {
                    for (Eigen::Index o = 0; o < OC; ++o) (*db)[static_cast<std::size_t>(o)] += dy.row(o).sum();
                }
                if (dx) {
                    MatMap<T>(dcol.data(), K, P).noalias() = wm.transpose() * dy;
                    col2im_add(dcol.data(), spec, g, dx->plane(n, 0));
                }
            }
        });
}

template <typename T>
Id<T> conv_transpose2d(Tape<T>& tape, Id<T> x, Id<T> weight, std::optional<Id<T>> bias) {
    const Tensor4<T>& in = tape.value(x);
    const Tensor4<T>& w = tape.value(weight);
    const Shape xs = in.shape();
    const Shape ws = w.shape();
    if (ws.h != 2 || ws.w != 2) throw std::invalid_argument("conv_transpose2d: kernel must be 2x2, got " + ws.str());
    if (xs.c != ws.n) {
        throw std::invalid_argument("conv_transpose2d: input has " + std::to_string(xs.c) +
                                    " channels, weights expect " + std::to_string(ws.n));
    }
    const std::size_t out_c = ws.c;
    if (bias && tape.value(*bias).shape() != Shape{1, out_c, 1, 1}) {
        throw std::invalid_argument("conv_transpose2d: bias shape " + tape.value(*bias).shape().str());
    }

    const auto IC = static_cast<Eigen::Index>(xs.c);
    const auto Q = static_cast<Eigen::Index>(out_c * 4);
    const auto HW = static_cast<Eigen::Index>(xs.plane());
    // Weights (in_c, out_c, 2, 2) read directly as an (in_c, out_c*4) matrix.
    ConstMatMap<T> wm(w.data(), IC, Q);

    Tensor4<T> out({xs.n, out_c, 2 * xs.h, 2 * xs.w});
    RowMat<T> y(Q, HW);
    for (std::size_t n = 0; n < xs.n; ++n) {
        y.noalias() = wm.transpose() * ConstMatMap<T>(in.plane(n, 0), IC, HW);
        for (std::size_t o = 0; o < out_c; ++o) {
            const T b = bias ? tape.value(*bias)[o] : T{0};
            T* dst = out.plane(n, o);
            for (std::size_t a = 0; a < 2; ++a) {
                for (std::size_t bb = 0; bb < 2; ++bb) {
                    const T* src = y.data() + (o * 4 + a * 2 + bb) * static_cast<std::size_t>(HW);
                    for (std::size_t yy = 0; yy < xs.h; ++yy) {
                        for (std::size_t xx = 0; xx < xs.w; ++xx) {
                            dst[(2 * yy + a) * (2 * xs.w) + 2 * xx + bb] = src[yy * xs.w + xx] + b;
                        }
                    }
                }
            }
        }
    }

    std::vector<Id<T>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape.record(
        "conv_transpose2d", std::move(out), std::move(inputs),
        [x, weight, xs, out_c, IC, Q, HW](const Tape<T>& t, const Tensor4<T>& gout,
                                          std::span<Tensor4<T>* const> grads) {
            const Tensor4<T>& in = t.value(x);
            ConstMatMap<T> wm(t.value(weight).data(), IC, Q);
            Tensor4<T>* dx = grads[0];
            Tensor4<T>* dw = grads[1];
            Tensor4<T>* db = grads.size() > 2 ? grads[2] : nullptr;
            RowMat<T> dy(Q, HW);
            for (std::size_t n = 0; n < xs.n; ++n) {
                for (std::size_t o = 0; o < out_c; ++o) {
                    const T* src = gout.plane(n, o);
                    for (std::size_t a = 0; a < 2; ++a) {
                        for (std::size_t bb = 0; bb < 2; ++bb) {
                            T* dst = dy.data() + (o * 4 + a * 2 + bb) * static_cast<std::size_t>(HW);
                            for (std::size_t yy = 0; yy < xs.h; ++yy) {
                                for (std::size_t xx = 0; xx < xs.w; ++xx) {
                                    dst[yy * xs.w + xx] = src[(2 * yy + a) * (2 * xs.w) + 2 * xx + bb];
                                }
                            }
                        }
                    }
                    if (db) (*db)[o] += dy.middleRows(static_cast<Eigen::Index>(o * 4), 4).sum();
                }
                if (dx) MatMap<T>(dx->plane(n, 0), IC, HW).noalias() += wm * dy;
                if (dw) {
                    MatMap<T>(dw->data(), IC, Q).noalias() +=
                        ConstMatMap<T>(in.plane(n, 0), IC, HW) * dy.transpose();
                }
            }
        });
}

template <typename T>
Id<T> maxpool2d(Tape<T>& tape, Id<T> x) {
    const Tensor4<T>& in = tape.value(x);
    const Shape s = in.shape();
    if (s.h % 2 != 0 || s.w % 2 != 0) {
        throw std::invalid_argument("maxpool2d: spatial dims must be even, got " + s.str());
    }
    const Shape os{s.n, s.c, s.h / 2, s.w / 2};
    Tensor4<T> out(os);
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(os.size());
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const T* src = in.data() + p * s.plane();
        T* dst = out.data() + p * os.plane();
        std::uint32_t* arg = argmax->data() + p * os.plane();
        for (std::size_t oy = 0; oy < os.h; ++oy) {
            for (std::size_t ox = 0; ox < os.w; ++ox) {
                std::size_t best = (2 * oy) * s.w + 2 * ox;
                for (std::size_t k : {best + 1, best + s.w, best + s.w + 1}) {
                    if (src[k] > src[best]) best = k;
                }
                dst[oy * os.w + ox] = src[best];
                arg[oy * os.w + ox] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return tape.record("maxpool2d", std::move(out), {x},
                       [s, os, argmax](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           Tensor4<T>* dx = grads[0];
                           for (std::size_t p = 0; p < s.n * s.c; ++p) {
                               T* dst = dx->data() + p * s.plane();
                               const T* g = gout.data() + p * os.plane();
                               const std::uint32_t* arg = argmax->data() + p * os.plane();
                               for (std::size_t i = 0; i < os.plane(); ++i) dst[arg[i]] += g[i];
                           }
                       });
}

template <typename T>
Id<T> upsample2x(Tape<T>& tape, Id<T> x) {
    const Tensor4<T>& in = tape.value(x);
    const Shape s = in.shape();
    Tensor4<T> out({s.n, s.c, 2 * s.h, 2 * s.w});
    for (std::size_t p = 0; p < s.n * s.c; ++p) {
        const T* src = in.data() + p * s.plane();
        T* dst = out.data() + p * 4 * s.plane();
        for (std::size_t y = 0; y < 2 * s.h; ++y) {
            for (std::size_t xx = 0; xx < 2 * s.w; ++xx) dst[y * 2 * s.w + xx] = src[(y / 2) * s.w + xx / 2];
        }
    }
    return tape.record("upsample2x", std::move(out), {x},
                       [s](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           for (std::size_t p = 0; p < s.n * s.c; ++p) {
                               T* dst = grads[0]->data() + p * s.plane();
                               const T* g = gout.data() + p * 4 * s.plane();
                               for (std::size_t y = 0; y < 2 * s.h; ++y) {
                                   for (std::size_t xx = 0; xx < 2 * s.w; ++xx) {
                                       dst[(y / 2) * s.w + xx / 2] += g[y * 2 * s.w + xx];
                                   }
                               }
                           }
                       });
}

template <typename T>
Id<T> batchnorm2d(Tape<T>& tape, Id<T> x, Id<T> gamma, Id<T> beta, BatchNormState<T>& state, Mode mode) {
    const Tensor4<T>& in = tape.value(x);
    const Shape s = in.shape();
    const Shape ps{1, s.c, 1, 1};
    if (tape.value(gamma).shape() != ps || tape.value(beta).shape() != ps) {
        throw std::invalid_argument("batchnorm2d: gamma/beta must be " + ps.str());
    }
    if (state.running_mean.size() != s.c || state.running_var.size() != s.c) {
        throw std::invalid_argument("batchnorm2d: running statistics sized for " +
                                    std::to_string(state.running_mean.size()) + " channels, input has " +
                                    std::to_string(s.c));
    }
    const std::size_t m = s.n * s.plane();
    if (mode == Mode::train && m < 2) {
        throw std::invalid_argument("batchnorm2d: train mode needs at least 2 values per channel, got " +
                                    std::to_string(m));
    }
    const Tensor4<T>& g = tape.value(gamma);
    const Tensor4<T>& b = tape.value(beta);

    auto xhat = std::make_shared<Tensor4<T>>(s);
    auto inv_std = std::make_shared<std::vector<T>>(s.c);
    Tensor4<T> out(s);
    for (std::size_t c = 0; c < s.c; ++c) {
        double mean = 0.0;
        double var = 0.0;
        if (mode == Mode::train) {
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = in.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) mean += p[i];
            }
            mean /= static_cast<double>(m);
            for (std::size_t n = 0; n < s.n; ++n) {
                const T* p = in.plane(n, c);
                for (std::size_t i = 0; i < s.plane(); ++i) {
                    const double d = p[i] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            const double unbiased = var * static_cast<double>(m) / static_cast<double>(m - 1);
            state.running_mean[c] =
                static_cast<T>(state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mean);
            state.running_var[c] =
                static_cast<T>(state.momentum * state.running_var[c] + (1.0 - state.momentum) * unbiased);
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const double istd = 1.0 / std::sqrt(var + state.eps);
        (*inv_std)[c] = static_cast<T>(istd);
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* p = in.plane(n, c);
            T* xh = xhat->plane(n, c);
            T* o = out.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                xh[i] = static_cast<T>((p[i] - mean) * istd);
                o[i] = g[c] * xh[i] + b[c];
            }
        }
    }

    return tape.record(
        "batchnorm2d", std::move(out), {x, gamma, beta},
        [s, m, mode, gamma, xhat, inv_std](const Tape<T>& t, const Tensor4<T>& gout,
                                           std::span<Tensor4<T>* const> grads) {
            const Tensor4<T>& gm = t.value(gamma);
            for (std::size_t c = 0; c < s.c; ++c) {
                double sum_g = 0.0;
                double sum_gx = 0.0;
                for (std::size_t n = 0; n < s.n; ++n) {
                    const T* go = gout.plane(n, c);
                    const T* xh = xhat->plane(n, c);
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        sum_g += go[i];
                        sum_gx += static_cast<double>(go[i]) * xh[i];
                    }
                }
                if (grads[1]) (*grads[1])[c] += static_cast<T>(sum_gx);
                if (grads[2]) (*grads[2])[c] += static_cast<T>(sum_g);
                if (!grads[0]) continue;
                const double scale = static_cast<double>(gm[c]) * (*inv_std)[c];
                const double md = static_cast<double>(m);
                for (std::size_t n = 0; n < s.n; ++n) {
                    const T* go = gout.plane(n, c);
                    const T* xh = xhat->plane(n, c);
                    T* dx = grads[0]->plane(n, c);
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        if (mode == Mode::train) {
                            dx[i] += static_cast<T>(scale * (go[i] - sum_g / md - xh[i] * sum_gx / md));
                        } else {
                            dx[i] += static_cast<T>(scale * go[i]);
                        }
                    }
                }
            }
        });
}

template <typename T>
Id<T> relu(Tape<T>& tape, Id<T> x) {
    const Tensor4<T>& in = tape.value(x);
    Tensor4<T> out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
    return tape.record("relu", std::move(out), {x},
                       [x](const Tape<T>& t, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           const Tensor4<T>& in = t.value(x);
                           Tensor4<T>& dx = *grads[0];
                           for (std::size_t i = 0; i < in.size(); ++i) {
                               if (in[i] > T{0}) dx[i] += gout[i];
                           }
                       });
}

template <typename T>
Id<T> add(Tape<T>& tape, Id<T> a, Id<T> b) {
    const Tensor4<T>& va = tape.value(a);
    const Tensor4<T>& vb = tape.value(b);
    require_same_shape(va, vb, "add");
    Tensor4<T> out(va.shape());
    for (std::size_t i = 0; i < va.size(); ++i) out[i] = va[i] + vb[i];
    return tape.record("add", std::move(out), {a, b},
                       [](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           for (Tensor4<T>* g : grads) {
                               if (!g) continue;
                               for (std::size_t i = 0; i < gout.size(); ++i) (*g)[i] += gout[i];
                           }
                       });
}

template <typename T>
Id<T> dropout(Tape<T>& tape, Id<T> x, double rate, Mode mode, std::mt19937_64& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw std::invalid_argument("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    const Tensor4<T>& in = tape.value(x);
    if (mode == Mode::eval || rate == 0.0) {
        return tape.record("dropout", in, {x},
                           [](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                               for (std::size_t i = 0; i < gout.size(); ++i) (*grads[0])[i] += gout[i];
                           });
    }
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(in.size());
    std::bernoulli_distribution keep(1.0 - rate);
    Tensor4<T> out(in.shape());
    for (std::size_t i = 0; i < in.size(); ++i) {
        (*mask)[i] = keep(rng) ? scale : T{0};
        out[i] = in[i] * (*mask)[i];
    }
    return tape.record("dropout", std::move(out), {x},
                       [mask](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           for (std::size_t i = 0; i < gout.size(); ++i) (*grads[0])[i] += gout[i] * (*mask)[i];
                       });
}

template <typename T>
Id<T> softmax_channel(Tape<T>& tape, Id<T> x) {
    const Tensor4<T>& in = tape.value(x);
    const Shape s = in.shape();
    Tensor4<T> out(s);
    const std::size_t hw = s.plane();
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, in.plane(n, c)[i]);
            T total = 0;
            for (std::size_t c = 0; c < s.c; ++c) {
                const T e = std::exp(in.plane(n, c)[i] - mx);
                out.plane(n, c)[i] = e;
                total += e;
            }
            for (std::size_t c = 0; c < s.c; ++c) out.plane(n, c)[i] /= total;
        }
    }
    const Id<T> id = tape.size();
    return tape.record("softmax_channel", std::move(out), {x},
                       [s, hw, id](const Tape<T>& t, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           const Tensor4<T>& p = t.value(id);
                           Tensor4<T>& dx = *grads[0];
                           for (std::size_t n = 0; n < s.n; ++n) {
                               for (std::size_t i = 0; i < hw; ++i) {
                                   T dot = 0;
                                   for (std::size_t c = 0; c < s.c; ++c) dot += gout.plane(n, c)[i] * p.plane(n, c)[i];
                                   for (std::size_t c = 0; c < s.c; ++c) {
                                       dx.plane(n, c)[i] += p.plane(n, c)[i] * (gout.plane(n, c)[i] - dot);
                                   }
                               }
                           }
                       });
}

template <typename T>
Id<T> sum(Tape<T>& tape, Id<T> x) {
    const Tensor4<T>& in = tape.value(x);
    double total = 0.0;
    for (T v : in.values()) total += v;
    return tape.record("sum", Tensor4<T>({1, 1, 1, 1}, static_cast<T>(total)), {x},
                       [](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           for (T& g : grads[0]->values()) g += gout[0];
                       });
}

template <typename T>
Id<T> weighted_sum(Tape<T>& tape, Id<T> x, const Tensor4<T>& weights) {
    const Tensor4<T>& in = tape.value(x);
    require_same_shape(in, weights, "weighted_sum");
    double total = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) total += static_cast<double>(in[i]) * weights[i];
    return tape.record("weighted_sum", Tensor4<T>({1, 1, 1, 1}, static_cast<T>(total)), {x},
                       [weights](const Tape<T>&, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
                           for (std::size_t i = 0; i < weights.size(); ++i) (*grads[0])[i] += gout[0] * weights[i];
                       });
}

#define EDDY_INSTANTIATE_OPS(T)                                                                                \
    template Id<T> conv2d<T>(Tape<T>&, Id<T>, Id<T>, std::optional<Id<T>>, const ConvSpec&);                   \
    template Id<T> conv_transpose2d<T>(Tape<T>&, Id<T>, Id<T>, std::optional<Id<T>>);                          \
    template Id<T> maxpool2d<T>(Tape<T>&, Id<T>);                                                              \
    template Id<T> upsample2x<T>(Tape<T>&, Id<T>);                                                             \
    template Id<T> batchnorm2d<T>(Tape<T>&, Id<T>, Id<T>, Id<T>, BatchNormState<T>&, Mode);                    \
    template Id<T> relu<T>(Tape<T>&, Id<T>);                                                                   \
    template Id<T> add<T>(Tape<T>&, Id<T>, Id<T>);                                                             \
    template Id<T> dropout<T>(Tape<T>&, Id<T>, double, Mode, std::mt19937_64&);                                \
    template Id<T> softmax_channel<T>(Tape<T>&, Id<T>);                                                        \
    template Id<T> sum<T>(Tape<T>&, Id<T>);                                                                    \
    template Id<T> weighted_sum<T>(Tape<T>&, Id<T>, const Tensor4<T>&);

EDDY_INSTANTIATE_OPS(float)
EDDY_INSTANTIATE_OPS(double)

#undef EDDY_INSTANTIATE_OPS

}  // namespace ops
}  // namespace eddy
