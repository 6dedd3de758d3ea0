#pragma once

#include <cmath>
#include <cstdint>

#include "ctvae/errors.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

// Diagonal Gaussian over a latent batch, parameterized by mean and log
// variance rows of shape [B, D].
template <class S>
struct GaussianParamsT {
    TensorT<S> mu;
    TensorT<S> logvar;

    GaussianParamsT() = default;
    GaussianParamsT(TensorT<S> m, TensorT<S> lv) : mu(std::move(m)), logvar(std::move(lv)) {
        if (mu.shape() != logvar.shape())
            throw ShapeError("gaussian: mu " + shape_str(mu.shape()) + " vs logvar " +
                             shape_str(logvar.shape()));
    }

    int batch() const { return mu.rows(); }
    int dim() const { return mu.cols(); }
};

using GaussianParams = GaussianParamsT<float>;

// KL(N(mu, sigma^2) || N(0, I)) per example, shape [B,1]:
//   0.5 * sum_d (mu^2 + sigma^2 - logvar - 1)
template <class S>
TensorT<S> kl_vs_standard(const GaussianParamsT<S>& q) {
    TensorT<S> var = exp(q.logvar);
    TensorT<S> terms = add_scalar(sub(add(mul(q.mu, q.mu), var), q.logvar), -1.0);
    return scale(sum_axis(terms, 1), 0.5);
}

// KL(q || p) for two diagonal Gaussians, per example, shape [B,1]:
//   0.5 * sum_d (logvar_p - logvar_q + (var_q + (mu_q - mu_p)^2) / var_p - 1)
template <class S>
TensorT<S> kl_pair(const GaussianParamsT<S>& q, const GaussianParamsT<S>& p) {
    if (q.mu.shape() != p.mu.shape())
        throw ShapeError("kl_pair: q " + shape_str(q.mu.shape()) + " vs p " +
                         shape_str(p.mu.shape()));
    TensorT<S> dmu = sub(q.mu, p.mu);
    TensorT<S> ratio = mul(add(exp(q.logvar), mul(dmu, dmu)), exp(scale(p.logvar, -1.0)));
    TensorT<S> terms = add_scalar(add(sub(p.logvar, q.logvar), ratio), -1.0);
    return scale(sum_axis(terms, 1), 0.5);
}

// z = mu + exp(logvar / 2) * eps, with eps drawn outside the graph so the
// sample stays differentiable in mu and logvar.
template <class S>
TensorT<S> reparameterize(const GaussianParamsT<S>& g, const TensorT<S>& eps) {
    if (eps.shape() != g.mu.shape())
        throw ShapeError("reparameterize: eps " + shape_str(eps.shape()) + " vs mu " +
                         shape_str(g.mu.shape()));
    return add(g.mu, mul(exp(scale(g.logvar, 0.5)), eps));
}

// Log density of z under the diagonal Gaussian, per example, shape [B,1].
template <class S>
TensorT<S> gaussian_log_pdf(const GaussianParamsT<S>& g, const TensorT<S>& z) {
    if (z.shape() != g.mu.shape())
        throw ShapeError("gaussian_log_pdf: z " + shape_str(z.shape()) + " vs mu " +
                         shape_str(g.mu.shape()));
    const double log2pi = std::log(2.0 * 3.14159265358979323846);
    TensorT<S> d = sub(z, g.mu);
    TensorT<S> quad = mul(mul(d, d), exp(scale(g.logvar, -1.0)));
    TensorT<S> terms = add(add_scalar(g.logvar, log2pi), quad);
    return scale(sum_axis(terms, 1), -0.5);
}

// KL weighting schedule: hold the weight at zero for `pretrain_steps`, then
// ramp linearly to one over `ramp_steps`, and only apply the term every
// `kld_period` optimizer steps. `separate` mode alternates whole updates
// between the reconstruction and KL objectives instead of summing them.
struct AnnealSchedule {
    enum class Mode { combined, separate };

    int pretrain_steps = 0;
    int ramp_steps = 5000;
    int kld_period = 3;
    Mode mode = Mode::combined;

    void validate() const {
        if (pretrain_steps < 0) throw ContractError("anneal: pretrain_steps must be >= 0");
        if (ramp_steps < 1) throw ContractError("anneal: ramp_steps must be >= 1");
        if (kld_period < 1) throw ContractError("anneal: kld_period must be >= 1");
    }
};

// Linear ramp position in [0,1], ignoring the period gate.
inline double kl_ramp(const AnnealSchedule& sched, uint64_t step) {
    sched.validate();
    if (step < static_cast<uint64_t>(sched.pretrain_steps)) return 0.0;
    uint64_t s = step - sched.pretrain_steps;
    double w = static_cast<double>(s + 1) / sched.ramp_steps;
    return w < 1.0 ? w : 1.0;
}

// True on steps where the KL term participates at all.
inline bool kl_step_active(const AnnealSchedule& sched, uint64_t step) {
    sched.validate();
    if (step < static_cast<uint64_t>(sched.pretrain_steps)) return false;
    return (step - sched.pretrain_steps) % sched.kld_period == 0;
}

// Effective multiplier on the KL term at this step.
inline double kl_weight(const AnnealSchedule& sched, uint64_t step) {
    return kl_step_active(sched, step) ? kl_ramp(sched, step) : 0.0;
}

}  // namespace ctvae
