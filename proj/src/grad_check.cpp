#include "evtrack/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "evtrack/errors.hpp"

namespace evtrack {

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps,
                           std::size_t samples, std::uint64_t seed) {
    std::vector<Tensor> ps = params;
    for (auto& p : ps) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    auto loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite loss");
    backward(loss);

    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& p : ps) {
        offsets.push_back(total);
        total += p.numel();
    }
    std::vector<std::size_t> coords;
    if (samples >= total) {
        coords.resize(total);
        std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<std::size_t> pick(0, total - 1);
        for (std::size_t i = 0; i < samples; ++i) coords.push_back(pick(rng));
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (auto flat : coords) {
        auto which = static_cast<std::size_t>(std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin()) - 1;
        auto idx = flat - offsets[which];
        auto& p = ps[which];
        const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
        const double saved = p.data()[idx];
        // Divide by the step actually taken, not the nominal 2 * eps.
        const double hi = saved + eps, lo = saved - eps;
        p.mutable_data()[idx] = hi;
        const double up = f().item();
        p.mutable_data()[idx] = lo;
        const double down = f().item();
        p.mutable_data()[idx] = saved;
        if (!std::isfinite(up) || !std::isfinite(down) || !std::isfinite(analytic)) {
            throw NumericError("grad_check: non-finite value at parameter " + std::to_string(which) + " index " + std::to_string(idx));
        }
        const double numeric = (up - down) / (hi - lo);
        const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
        const double rel = std::fabs(analytic - numeric) / denom;
        ++result.coordinates_checked;
        if (rel > result.max_relative_error || result.coordinates_checked == 1) {
            result.max_relative_error = std::max(result.max_relative_error, rel);
            result.worst_param = which;
            result.worst_index = idx;
            result.worst_analytic = analytic;
            result.worst_numeric = numeric;
        }
    }
    return result;
}

}  // namespace evtrack
