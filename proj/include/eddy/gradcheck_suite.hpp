#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace eddy {

struct OpCheck {
    std::string name;
    double tol = 0.0;
    std::size_t instances = 0;
    double max_rel_err = 0.0;
    std::size_t kinks = 0;
    bool pass = false;
};

struct GradSuiteOptions {
    std::size_t instances = 5;
    std::uint64_t seed = 7;
    bool include_network = true;
    /// Appends a relu whose backward is deliberately scaled by 2; used to prove the harness catches bad gradients.
    bool inject_fault = false;
};

/// Finite-difference checks of every differentiable op, the loss family, the lateral
/// merge and the end-to-end network, each over `instances` random inputs in double precision.
std::vector<OpCheck> run_gradcheck_suite(const GradSuiteOptions& options = {});

}  // namespace eddy
