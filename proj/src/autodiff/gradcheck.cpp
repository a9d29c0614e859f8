#include "eddy/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <utility>

namespace eddy {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const ScalarClosure& fn, const std::vector<Tensor4<double>>& inputs) {
    Tape<double> tape;
    std::vector<Tape<double>::Id> ids;
    for (const auto& in : inputs) ids.push_back(tape.leaf(in, false));
    return tape.value(fn(tape, ids))[0];
}

}  // namespace

GradReport gradcheck(const ScalarClosure& fn, const std::vector<Tensor4<double>>& inputs,
                     const GradcheckOptions& options) {
    Tape<double> tape;
    std::vector<Tape<double>::Id> ids;
    for (const auto& in : inputs) ids.push_back(tape.leaf(in, true));
    const auto root = fn(tape, ids);
    tape.backward(root);

    // (input index, element index)
    std::vector<std::pair<std::size_t, std::size_t>> targets;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].size(); ++i) targets.emplace_back(k, i);
    }
    if (options.max_elements != 0 && targets.size() > options.max_elements) {
        std::mt19937_64 rng(options.seed);
        std::shuffle(targets.begin(), targets.end(), rng);
        targets.resize(options.max_elements);
        std::sort(targets.begin(), targets.end());
    }

    GradReport report;
    std::vector<Tensor4<double>> probe = inputs;
    const double centre = tape.value(root)[0];
    struct Probe {
        double central;
        double lo_slope;
        double hi_slope;
    };
    auto measure = [&](std::size_t k, std::size_t i, double step) {
        const double original = probe[k][i];
        probe[k][i] = original + step;
        const double plus = evaluate(fn, probe);
        probe[k][i] = original - step;
        const double minus = evaluate(fn, probe);
        probe[k][i] = original;
        return Probe{(plus - minus) / (2.0 * step), (centre - minus) / step, (plus - centre) / step};
    };
    // Slope noise from rounding f; disagreement below it is not evidence of a kink.
    auto rounding_noise = [&](double step) {
        return 32.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(centre), 1.0) / step;
    };
    auto agree = [&](double a, double b, double noise) {
        return std::abs(a - b) <= options.tol * std::max({std::abs(a), std::abs(b), options.floor}) + noise;
    };
    for (const auto& [k, i] : targets) {
        const double analytic = tape.has_grad(ids[k]) ? tape.grad(ids[k])[i] : 0.0;
        double step = options.step;
        Probe p = measure(k, i, step);
        for (std::size_t retry = 0; retry < options.kink_retries; ++retry) {
            const Probe finer = measure(k, i, step / 10.0);
            const bool smooth = agree(p.lo_slope, p.hi_slope, 2.0 * rounding_noise(step)) &&
                                agree(p.central, finer.central, rounding_noise(step / 10.0));
            if (smooth) break;
            if (retry == 0) ++report.kinks;
            step /= 10.0;
            p = finer;
        }
        report.max_rel_err = std::max(report.max_rel_err, relative_error(analytic, p.central, options.floor));
        ++report.checked;
    }
    report.pass = report.max_rel_err <= options.tol;
    return report;
}

}  // namespace eddy
