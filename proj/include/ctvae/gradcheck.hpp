#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "ctvae/param_store.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    size_t entries_checked = 0;
};

// Central-difference check of every parameter entry against the analytic
// gradient. loss_builder must rebuild its graph each call (parameter values
// are perturbed in place between calls). Relative error uses
// |a - n| / (|a| + |n| + 1e-7). The guard sits at the resolution limit of
// central differences at the default step (roundoff in the loss difference
// is around eps*|loss|/h, so gradients below ~1e-10 are pure noise); only
// entries too small for finite differences to measure are forgiven by it.
// The default step balances truncation against roundoff for losses of
// magnitude around one; smaller steps let roundoff dominate on near-zero
// gradient entries.
inline GradCheckResult grad_check(const std::function<TensorD()>& loss_builder,
                                  ParamStoreD& params, double h = 1e-4) {
    params.zero_grad();
    TensorD loss = loss_builder();
    backward(loss);

    GradCheckResult res;
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params.at(i);
        auto& pv = p.values();
        const auto analytic = p.has_grad() ? p.grad() : std::vector<double>(p.numel(), 0.0);
        for (size_t j = 0; j < pv.size(); ++j) {
            const double orig = pv[j];
            pv[j] = orig + h;
            double up = loss_builder().item();
            pv[j] = orig - h;
            double down = loss_builder().item();
            pv[j] = orig;
            double numeric = (up - down) / (2.0 * h);
            double a = analytic[j];
            double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-7);
            ++res.entries_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_param = params.names()[i];
                res.worst_index = j;
                res.analytic = a;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace ctvae
