#include <cmath>
#include <stdexcept>
#include <string>

#include "eddy/trainer.hpp"

namespace eddy {

template <typename T>
void adam_step(std::span<NamedTensor<T>> params, std::span<const Tensor4<T>> grads, AdamState<T>& state,
               const AdamConfig& cfg, double lr) {
    if (params.size() != grads.size()) {
        throw std::invalid_argument("adam_step: " + std::to_string(params.size()) + " parameters but " +
                                    std::to_string(grads.size()) + " gradients");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].shape() != params[i].value.shape()) {
            throw std::invalid_argument("adam_step: gradient shape mismatch for " + params[i].name);
        }
        if (!grads[i].all_finite()) {
            throw std::runtime_error("adam_step: non-finite gradient for parameter '" + params[i].name + "' at step " +
                                     std::to_string(state.step + 1));
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.value.shape());
            state.v.emplace_back(p.value.shape());
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state sized for another model");

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(cfg.beta1, t);
    const double correct2 = 1.0 - std::pow(cfg.beta2, t);
    const T b1 = static_cast<T>(cfg.beta1);
    const T b2 = static_cast<T>(cfg.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* p = params[i].value.data();
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        const T* g = grads[i].data();
        for (std::size_t k = 0; k < params[i].value.size(); ++k) {
            m[k] = b1 * m[k] + (T{1} - b1) * g[k];
            v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
            const double mhat = m[k] / correct1;
            const double vhat = v[k] / correct2;
            p[k] = static_cast<T>(p[k] - lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
}

void lr_on_plateau(PlateauState& state, double val_loss, const PlateauConfig& cfg) {
    if (val_loss < state.best - cfg.min_delta) {
        state.best = val_loss;
        state.bad_epochs = 0;
        return;
    }
    if (++state.bad_epochs >= cfg.patience) {
        state.lr = std::max(state.lr * cfg.factor, cfg.min_lr);
        state.bad_epochs = 0;
    }
}

template void adam_step<float>(std::span<NamedTensor<float>>, std::span<const Tensor4<float>>, AdamState<float>&,
                               const AdamConfig&, double);
template void adam_step<double>(std::span<NamedTensor<double>>, std::span<const Tensor4<double>>, AdamState<double>&,
                                const AdamConfig&, double);

}  // namespace eddy
