#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "eddy/tape.hpp"

namespace eddy {

struct GradReport {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    /// Elements whose first probe straddled a non-differentiable point and needed a smaller step.
    std::size_t kinks = 0;
    bool pass = true;
};

/// Builds a scalar from the given input leaves. Must be a pure function of the
/// inputs (reseed any RNG it uses) so repeated evaluations agree.
using ScalarClosure = std::function<Tape<double>::Id(Tape<double>&, std::span<const Tape<double>::Id>)>;

struct GradcheckOptions {
    double step = 1e-5;
    double tol = 1e-6;
    /// 0 checks every element; otherwise a seeded random subsample of this many elements across all inputs.
    std::size_t max_elements = 0;
    std::uint64_t seed = 0;
    /// Denominator floor; below it the comparison is absolute (tol * floor), which keeps tiny or
    /// exactly-zero gradients from being judged against finite-difference roundoff.
    double floor = 1e-3;
    /// How many times a step may shrink tenfold when f is not smooth at the current scale.
    std::size_t kink_retries = 0;
};

/// rel_err = |a - n| / max(|a|, |n|, floor)
double relative_error(double analytic, double numeric, double floor = 1e-3);

/// Compares reverse-mode gradients of `fn` against central differences
/// (f(x+d) - f(x-d)) / 2d for every (or a sampled subset of) input element.
/// With kink_retries > 0 a step is trusted only where f looks smooth at that scale: the one-sided
/// slopes agree and the central difference matches the one at d/10, both within `tol` plus the
/// rounding noise of f at that step. Otherwise the
/// probe straddles a relu/maxpool kink and the step shrinks tenfold. Neither test looks at the
/// analytic gradient.
GradReport gradcheck(const ScalarClosure& fn, const std::vector<Tensor4<double>>& inputs,
                     const GradcheckOptions& options = {});

}  // namespace eddy
