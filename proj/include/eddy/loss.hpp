#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eddy/classes.hpp"
#include "eddy/tape.hpp"
#include "eddy/tensor.hpp"

namespace eddy {

inline constexpr double kProbFloor = 1e-7;
inline constexpr double kDiceSmooth = 1e-7;
inline constexpr double kDiceLossCap = 1.0 - 1e-7;

/// Cross-entropy, macro soft-dice loss and their combination ce - ln(1 - dice_loss).
struct LossReport {
    double ce = 0.0;
    double dice_loss = 0.0;
    double combined = 0.0;
    std::array<double, kNumClasses> per_class_dice{};
};

enum class LossKind { combined, ce_only, dice_only };

LossKind parse_loss_kind(std::string_view name);
std::string to_string(LossKind kind);

/// ce - ln(1 - min(dice_loss, 1 - 1e-7)), natural log.
double combine_losses(double ce, double dice_loss);

/// Scalar value of `kind` for an already computed report.
double objective_value(const LossReport& report, LossKind kind);

/// -(1/N) sum ln p[true class], with p floored at 1e-7.
template <typename T>
double cross_entropy(const Tensor4<T>& probs, const LabelBatch& labels);

struct DiceResult {
    std::array<double, kNumClasses> per_class{};
    double macro = 0.0;
    double loss = 0.0;  // 1 - macro
};

/// Soft dice per class, (2 sum P*G + eps) / (sum P + sum G + eps), macro-averaged.
/// Symmetric in its arguments.
template <typename T>
DiceResult dice(const Tensor4<T>& probs, const Tensor4<T>& onehot);

template <typename T>
Tensor4<T> one_hot(const LabelBatch& labels);

template <typename T>
LossReport combined_loss(const Tensor4<T>& probs, const LabelBatch& labels);

/// Aggregates cross-entropy and dice sums over many batches so that a split-level
/// report is computed from global pixel sums rather than a mean of batch losses.
class LossAccumulator {
public:
    template <typename T>
    void add(const Tensor4<T>& probs, const LabelBatch& labels);

    std::size_t pixels() const { return pixels_; }
    LossReport report() const;

private:
    double ce_sum_ = 0.0;
    std::size_t pixels_ = 0;
    std::array<double, kNumClasses> intersection_{};
    std::array<double, kNumClasses> prob_sum_{};
    std::array<double, kNumClasses> truth_sum_{};
};

/// Differentiable loss of kind `kind` on softmax probabilities; returns a scalar node.
template <typename T>
typename Tape<T>::Id loss_op(Tape<T>& tape, typename Tape<T>::Id probs, const LabelBatch& labels, LossKind kind);

/// Pixel accuracy and 3x3 confusion (rows truth, columns prediction).
struct Metrics {
    std::array<std::array<std::uint64_t, kNumClasses>, kNumClasses> confusion{};
    std::uint64_t total = 0;
    double pixel_accuracy = 0.0;
    std::array<double, kNumClasses> precision{};
    std::array<double, kNumClasses> recall{};

    void add(std::span<const std::uint8_t> predicted, std::span<const std::uint8_t> truth);
    /// Recomputes accuracy, precision and recall from the confusion counts.
    void finalize();
};

/// Per-pixel argmax over channels; ties go to the lowest class index.
template <typename T>
std::vector<std::uint8_t> argmax_classes(const Tensor4<T>& probs);

Metrics pixel_accuracy(std::span<const std::uint8_t> predicted, const LabelBatch& truth);

}  // namespace eddy
