#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/param_store.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

// Adam with bias correction. Moment buffers are laid out parallel to the
// store's insertion order so they serialize alongside the parameters.
template <class S>
struct AdamStateT {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t t = 0;
    std::vector<std::vector<S>> m;
    std::vector<std::vector<S>> v;

    void init(const ParamStoreT<S>& params) {
        m.clear();
        v.clear();
        for (size_t i = 0; i < params.size(); ++i) {
            m.emplace_back(params.at(i).numel(), S(0));
            v.emplace_back(params.at(i).numel(), S(0));
        }
        t = 0;
    }

    bool initialized() const { return !m.empty(); }
};

using AdamState = AdamStateT<float>;

template <class S>
void adam_step(ParamStoreT<S>& params, AdamStateT<S>& state) {
    if (!state.initialized()) state.init(params);
    if (state.m.size() != params.size())
        throw ContractError("adam: state tracks " + std::to_string(state.m.size()) +
                            " tensors but store has " + std::to_string(params.size()));
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params.at(i);
        if (!p.has_grad()) continue;
        auto& pv = p.values();
        auto& g = p.grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < pv.size(); ++j) {
            double gj = static_cast<double>(g[j]);
            if (!std::isfinite(gj))
                throw NumericError("adam: non-finite gradient in " + params.names()[i]);
            double mj = state.beta1 * m[j] + (1.0 - state.beta1) * gj;
            double vj = state.beta2 * v[j] + (1.0 - state.beta2) * gj * gj;
            m[j] = static_cast<S>(mj);
            v[j] = static_cast<S>(vj);
            double mhat = mj / bc1;
            double vhat = vj / bc2;
            pv[j] = static_cast<S>(pv[j] - state.lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

}  // namespace ctvae
