#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mrgseq/num/tensor.hpp"

namespace mrgseq::num {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t entries = 0;
};

/// Compares tape gradients of the scalar `f` with respect to `inputs` against
/// central finite differences.  The error for each entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradCheckResult grad_check(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                  double step = 1e-5, double floor = 1e-5) {
    Tape::current().clear();
    for (auto& in : inputs) in.zero_grad();
    Tensor loss = f();
    backward(loss);

    std::vector<std::vector<double>> analytic;
    for (auto& in : inputs) {
        if (in.has_grad())
            analytic.emplace_back(in.grad().begin(), in.grad().end());
        else
            analytic.emplace_back(in.size(), 0.0);
    }

    GradCheckResult result;
    NoGradGuard no_grad;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto data = inputs[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + step;
            const double up = f().item();
            data[i] = saved - step;
            const double down = f().item();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[k][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
            ++result.entries;
        }
    }
    return result;
}

}  // namespace mrgseq::num
