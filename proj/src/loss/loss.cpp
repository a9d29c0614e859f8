#include "eddy/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace eddy {

namespace {

template <typename T>
void check_batch(const Tensor4<T>& probs, const LabelBatch& labels) {
    const Shape s = probs.shape();
    if (s.c != kNumClasses) {
        throw std::invalid_argument("loss: predictions must have " + std::to_string(kNumClasses) +
                                    " channels, got " + s.str());
    }
    if (s.n != labels.n || s.h != labels.h || s.w != labels.w || labels.classes.size() != labels.pixels()) {
        throw std::invalid_argument("loss: prediction dims " + s.str() + " do not match labels (" +
                                    std::to_string(labels.n) + ", " + std::to_string(labels.h) + ", " +
                                    std::to_string(labels.w) + ")");
    }
    for (std::uint8_t c : labels.classes) {
        if (c >= kNumClasses) throw std::invalid_argument("loss: invalid class index " + std::to_string(c));
    }
}

double dice_coefficient(double intersection, double prob_sum, double truth_sum) {
    return (2.0 * intersection + kDiceSmooth) / (prob_sum + truth_sum + kDiceSmooth);
}

}  // namespace

LossKind parse_loss_kind(std::string_view name) {
    if (name == "combined") return LossKind::combined;
    if (name == "ce" || name == "ce_only") return LossKind::ce_only;
    if (name == "dice" || name == "dice_only") return LossKind::dice_only;
    throw std::invalid_argument("unknown loss '" + std::string(name) + "' (expected combined, ce or dice)");
}

std::string to_string(LossKind kind) {
    switch (kind) {
        case LossKind::combined: return "combined";
        case LossKind::ce_only: return "ce";
        case LossKind::dice_only: return "dice";
    }
    return "?";
}

double combine_losses(double ce, double dice_loss) {
    return ce - std::log(1.0 - std::min(dice_loss, kDiceLossCap));
}

double objective_value(const LossReport& report, LossKind kind) {
    switch (kind) {
        case LossKind::combined: return report.combined;
        case LossKind::ce_only: return report.ce;
        case LossKind::dice_only: return report.dice_loss;
    }
    return report.combined;
}

template <typename T>
double cross_entropy(const Tensor4<T>& probs, const LabelBatch& labels) {
    check_batch(probs, labels);
    const Shape s = probs.shape();
    double total = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < s.plane(); ++i) {
            const std::uint8_t cls = labels.classes[n * s.plane() + i];
            total -= std::log(std::max(static_cast<double>(probs.plane(n, cls)[i]), kProbFloor));
        }
    }
    return total / static_cast<double>(labels.pixels());
}

template <typename T>
DiceResult dice(const Tensor4<T>& probs, const Tensor4<T>& onehot) {
    if (probs.shape() != onehot.shape()) {
        throw std::invalid_argument("dice: shape mismatch " + probs.shape().str() + " vs " + onehot.shape().str());
    }
    const Shape s = probs.shape();
    if (s.c != kNumClasses) throw std::invalid_argument("dice: expected 3 class channels, got " + s.str());
    DiceResult result;
    for (std::size_t c = 0; c < s.c; ++c) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        for (std::size_t n = 0; n < s.n; ++n) {
            const T* p = probs.plane(n, c);
            const T* g = onehot.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                inter += static_cast<double>(p[i]) * g[i];
                psum += p[i];
                gsum += g[i];
            }
        }
        result.per_class[c] = dice_coefficient(inter, psum, gsum);
        result.macro += result.per_class[c];
    }
    result.macro /= static_cast<double>(kNumClasses);
    result.loss = 1.0 - result.macro;
    return result;
}

template <typename T>
Tensor4<T> one_hot(const LabelBatch& labels) {
    Tensor4<T> out({labels.n, kNumClasses, labels.h, labels.w});
    const std::size_t hw = labels.h * labels.w;
    for (std::size_t n = 0; n < labels.n; ++n) {
        for (std::size_t i = 0; i < hw; ++i) {
            const std::uint8_t cls = labels.classes[n * hw + i];
            if (cls >= kNumClasses) throw std::invalid_argument("one_hot: invalid class index " + std::to_string(cls));
            out.plane(n, cls)[i] = T{1};
        }
    }
    return out;
}

template <typename T>
void LossAccumulator::add(const Tensor4<T>& probs, const LabelBatch& labels) {
    check_batch(probs, labels);
    const Shape s = probs.shape();
    for (std::size_t n = 0; n < s.n; ++n) {
        const std::uint8_t* cls = labels.classes.data() + n * s.plane();
        for (std::size_t c = 0; c < s.c; ++c) {
            const T* p = probs.plane(n, c);
            for (std::size_t i = 0; i < s.plane(); ++i) {
                prob_sum_[c] += p[i];
                if (cls[i] == c) {
                    intersection_[c] += p[i];
                    truth_sum_[c] += 1.0;
                    ce_sum_ -= std::log(std::max(static_cast<double>(p[i]), kProbFloor));
                }
            }
        }
    }
    pixels_ += labels.pixels();
}

LossReport LossAccumulator::report() const {
    LossReport r;
    if (pixels_ == 0) return r;
    r.ce = ce_sum_ / static_cast<double>(pixels_);
    double macro = 0.0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        r.per_class_dice[c] = dice_coefficient(intersection_[c], prob_sum_[c], truth_sum_[c]);
        macro += r.per_class_dice[c];
    }
    r.dice_loss = 1.0 - macro / static_cast<double>(kNumClasses);
    r.combined = combine_losses(r.ce, r.dice_loss);
    return r;
}

template <typename T>
LossReport combined_loss(const Tensor4<T>& probs, const LabelBatch& labels) {
    LossAccumulator acc;
    acc.add(probs, labels);
    return acc.report();
}

template <typename T>
typename Tape<T>::Id loss_op(Tape<T>& tape, typename Tape<T>::Id probs, const LabelBatch& labels, LossKind kind) {
    const Tensor4<T>& p = tape.value(probs);
    const LossReport report = combined_loss(p, labels);
    const double value = objective_value(report, kind);

    return tape.record(
        "loss", Tensor4<T>({1, 1, 1, 1}, static_cast<T>(value)), {probs},
        [probs, labels, kind, report](const Tape<T>& t, const Tensor4<T>& gout, std::span<Tensor4<T>* const> grads) {
            const Tensor4<T>& p = t.value(probs);
            const Shape s = p.shape();
            Tensor4<T>& dp = *grads[0];
            const double upstream = gout[0];
            const double npix = static_cast<double>(labels.pixels());

            const bool use_ce = kind != LossKind::dice_only;
            // d(objective)/d(dice_loss)
            double dice_weight = 0.0;
            if (kind == LossKind::dice_only) {
                dice_weight = 1.0;
            } else if (kind == LossKind::combined && report.dice_loss < kDiceLossCap) {
                dice_weight = 1.0 / (1.0 - report.dice_loss);
            }

            std::array<double, kNumClasses> inter{}, psum{}, gsum{};
            if (dice_weight != 0.0) {
                for (std::size_t n = 0; n < s.n; ++n) {
                    const std::uint8_t* cls = labels.classes.data() + n * s.plane();
                    for (std::size_t c = 0; c < s.c; ++c) {
                        const T* pc = p.plane(n, c);
                        for (std::size_t i = 0; i < s.plane(); ++i) {
                            psum[c] += pc[i];
                            if (cls[i] == c) {
                                inter[c] += pc[i];
                                gsum[c] += 1.0;
                            }
                        }
                    }
                }
            }

            for (std::size_t c = 0; c < s.c; ++c) {
                const double denom = psum[c] + gsum[c] + kDiceSmooth;
                const double numer = 2.0 * inter[c] + kDiceSmooth;
                // d(dice_loss)/dP = -(1/3) dD_c/dP, with dD_c/dP_i = (2 g_i denom - numer) / denom^2.
                const double on_truth = -(2.0 * denom - numer) / (denom * denom) / kNumClasses;
                const double off_truth = numer / (denom * denom) / kNumClasses;
                for (std::size_t n = 0; n < s.n; ++n) {
                    const std::uint8_t* cls = labels.classes.data() + n * s.plane();
                    const T* pc = p.plane(n, c);
                    T* d = dp.plane(n, c);
                    for (std::size_t i = 0; i < s.plane(); ++i) {
                        const bool truth = cls[i] == c;
                        double g = dice_weight * (truth ? on_truth : off_truth);
                        if (use_ce && truth && pc[i] > kProbFloor) g -= 1.0 / (npix * pc[i]);
                        d[i] += static_cast<T>(upstream * g);
                    }
                }
            }
        });
}

void Metrics::add(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth) {
    if (predicted.size() != truth.size()) {
        throw std::invalid_argument("pixel_accuracy: " + std::to_string(predicted.size()) + " predictions vs " +
                                    std::to_string(truth.size()) + " labels");
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] >= kNumClasses || predicted[i] >= kNumClasses) {
            throw std::invalid_argument("pixel_accuracy: class index out of range");
        }
        ++confusion[truth[i]][predicted[i]];
    }
    total += truth.size();
    finalize();
}

void Metrics::finalize() {
    std::uint64_t correct = 0;
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        correct += confusion[c][c];
        std::uint64_t predicted = 0, actual = 0;
        for (std::size_t k = 0; k < kNumClasses; ++k) {
            predicted += confusion[k][c];
            actual += confusion[c][k];
        }
        precision[c] = predicted ? static_cast<double>(confusion[c][c]) / static_cast<double>(predicted) : 0.0;
        recall[c] = actual ? static_cast<double>(confusion[c][c]) / static_cast<double>(actual) : 0.0;
    }
    pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

template <typename T>
std::vector<std::uint8_t> argmax_classes(const Tensor4<T>& probs) {
    const Shape s = probs.shape();
    std::vector<std::uint8_t> out(s.n * s.plane());
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t i = 0; i < s.plane(); ++i) {
            std::uint8_t best = 0;
            for (std::size_t c = 1; c < s.c; ++c) {
                if (probs.plane(n, c)[i] > probs.plane(n, best)[i]) best = static_cast<std::uint8_t>(c);
            }
            out[n * s.plane() + i] = best;
        }
    }
    return out;
}

Metrics pixel_accuracy(std::span<const std::uint8_t> predicted, const LabelBatch& truth) {
    Metrics m;
    m.add(predicted, truth.classes);
    return m;
}

#define EDDY_INSTANTIATE_LOSS(T)                                                                       \
    template double cross_entropy<T>(const Tensor4<T>&, const LabelBatch&);                            \
    template DiceResult dice<T>(const Tensor4<T>&, const Tensor4<T>&);                                 \
    template Tensor4<T> one_hot<T>(const LabelBatch&);                                                 \
    template LossReport combined_loss<T>(const Tensor4<T>&, const LabelBatch&);                        \
    template void LossAccumulator::add<T>(const Tensor4<T>&, const LabelBatch&);                       \
    template Tape<T>::Id loss_op<T>(Tape<T>&, Tape<T>::Id, const LabelBatch&, LossKind);              \
    template std::vector<std::uint8_t> argmax_classes<T>(const Tensor4<T>&);

EDDY_INSTANTIATE_LOSS(float)
EDDY_INSTANTIATE_LOSS(double)

#undef EDDY_INSTANTIATE_LOSS

}  // namespace eddy
