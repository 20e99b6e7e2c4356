#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "evtrack/tensor.hpp"

namespace evtrack {

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t coordinates_checked = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
};

/// Compares reverse-mode gradients of the scalar program `f` against central
/// differences (f(θ+ε) - f(θ-ε)) / 2ε on `samples` coordinates drawn uniformly
/// from all entries of `params` (every coordinate when samples >= total).
/// Relative error uses a max(|analytic|, |numeric|, 1e-8) denominator.
/// `f` must be deterministic. Throws NumericError on non-finite values.
GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps,
                           std::size_t samples, std::uint64_t seed);

}  // namespace evtrack
