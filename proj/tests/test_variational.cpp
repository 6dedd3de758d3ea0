#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctvae/gradcheck.hpp"
#include "ctvae/variational.hpp"
#include "oracles.hpp"

using namespace ctvae;

TEST_CASE("kl against standard normal, hand values") {
    // N(1,1) || N(0,1) = 0.5
    GaussianParamsT<double> g(TensorD::from({1.0}, 1, 1), TensorD::from({0.0}, 1, 1));
    CHECK(kl_vs_standard(g).item() == doctest::Approx(0.5));

    // independent dims add
    GaussianParamsT<double> g2(TensorD::from({1.0, 1.0}, 1, 2), TensorD::from({0.0, 0.0}, 1, 2));
    CHECK(kl_vs_standard(g2).item() == doctest::Approx(1.0));

    // q == p gives zero
    GaussianParamsT<double> id(TensorD::zeros(1, 3), TensorD::zeros(1, 3));
    CHECK(kl_vs_standard(id).item() == doctest::Approx(0.0));

    // per-example rows stay separate
    GaussianParamsT<double> rows(TensorD::from({1.0, 0.0}, 2, 1), TensorD::zeros(2, 1));
    auto kl = kl_vs_standard(rows);
    CHECK(kl.rows() == 2);
    CHECK(kl.at(0, 0) == doctest::Approx(0.5));
    CHECK(kl.at(1, 0) == doctest::Approx(0.0));
}

TEST_CASE("kl between two gaussians matches scalar reference") {
    std::vector<double> mu_q = {0.5, -1.2, 0.0};
    std::vector<double> lv_q = {-1.0, 0.3, 0.0};
    std::vector<double> mu_p = {-0.5, 0.7, 0.0};
    std::vector<double> lv_p = {0.5, -0.2, 0.0};
    GaussianParamsT<double> q(TensorD::row(mu_q), TensorD::row(lv_q));
    GaussianParamsT<double> p(TensorD::row(mu_p), TensorD::row(lv_p));
    CHECK(kl_pair(q, p).item() ==
          doctest::Approx(oracles::closed_kl(mu_q, lv_q, mu_p, lv_p)));
    CHECK(kl_pair(q, q).item() == doctest::Approx(0.0));

    // reduces to kl_vs_standard when p is N(0, I)
    GaussianParamsT<double> std_p(TensorD::zeros(1, 3), TensorD::zeros(1, 3));
    CHECK(kl_pair(q, std_p).item() == doctest::Approx(kl_vs_standard(q).item()));
}

TEST_CASE("monte-carlo estimate agrees with both closed forms") {
    Rng rng(123);
    for (int trial = 0; trial < 3; ++trial) {
        int D = 1 + trial * 3;
        std::vector<double> mu_q(D), lv_q(D), mu_p(D), lv_p(D);
        for (int d = 0; d < D; ++d) {
            mu_q[d] = rng.normal();
            lv_q[d] = 0.5 * rng.normal();
            mu_p[d] = rng.normal();
            lv_p[d] = 0.5 * rng.normal();
        }
        double mc = oracles::mc_kl(mu_q, lv_q, mu_p, lv_p, 200000, rng);
        GaussianParamsT<double> q(TensorD::row(mu_q), TensorD::row(lv_q));
        GaussianParamsT<double> p(TensorD::row(mu_p), TensorD::row(lv_p));
        CHECK(std::abs(kl_pair(q, p).item() - mc) < 2e-2);
        CHECK(std::abs(oracles::closed_kl(mu_q, lv_q, mu_p, lv_p) - kl_pair(q, p).item()) < 1e-10);
    }
}

TEST_CASE("reparameterized samples have the right moments") {
    Rng rng(77);
    GaussianParamsT<double> g(TensorD::from({2.0}, 1, 1), TensorD::from({std::log(0.25)}, 1, 1));
    const int N = 200000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < N; ++i) {
        auto eps = TensorD::from({rng.normal()}, 1, 1);
        double z = reparameterize(g, eps).item();
        sum += z;
        sumsq += z * z;
    }
    double mean = sum / N;
    double var = sumsq / N - mean * mean;
    CHECK(mean == doctest::Approx(2.0).epsilon(0.01));
    CHECK(var == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("gaussian log pdf matches scalar reference") {
    Rng rng(9);
    std::vector<double> mu = {0.3, -0.7}, lv = {-0.5, 0.4}, z = {1.0, 0.0};
    GaussianParamsT<double> g(TensorD::row(mu), TensorD::row(lv));
    double expect = oracles::gauss_logpdf(z[0], mu[0], lv[0]) +
                    oracles::gauss_logpdf(z[1], mu[1], lv[1]);
    CHECK(gaussian_log_pdf(g, TensorD::row(z)).item() == doctest::Approx(expect));
}

TEST_CASE("gradients flow through kl and reparameterization") {
    Rng rng(5);
    ParamStoreD store;
    store.add("mu_q", TensorD::randn(rng, 2, 3, 0.5));
    store.add("lv_q", TensorD::randn(rng, 2, 3, 0.3));
    store.add("mu_p", TensorD::randn(rng, 2, 3, 0.5));
    store.add("lv_p", TensorD::randn(rng, 2, 3, 0.3));
    auto eps = TensorD::randn(rng, 2, 3, 1.0);

    auto builder = [&]() {
        GaussianParamsT<double> q(store.get("mu_q"), store.get("lv_q"));
        GaussianParamsT<double> p(store.get("mu_p"), store.get("lv_p"));
        auto z = reparameterize(q, eps);
        auto kl = kl_pair(q, p);
        auto zsq = sum_axis(mul(z, z), 1);
        return sum_all(add(kl, add(zsq, kl_vs_standard(q))));
    };
    CHECK(grad_check(builder, store).max_rel_err < 1e-5);
}

TEST_CASE("anneal schedule gates and ramps") {
    AnnealSchedule s;
    s.pretrain_steps = 10;
    s.ramp_steps = 5;
    s.kld_period = 3;

    CHECK(kl_weight(s, 0) == 0.0);
    CHECK(kl_weight(s, 9) == 0.0);
    CHECK(kl_weight(s, 10) == doctest::Approx(0.2));   // first active step
    CHECK(kl_weight(s, 11) == 0.0);                    // period gate
    CHECK(kl_weight(s, 12) == 0.0);
    CHECK(kl_weight(s, 13) == doctest::Approx(0.8));
    CHECK(kl_weight(s, 16) == doctest::Approx(1.0));   // ramp saturates
    CHECK(kl_weight(s, 31) == doctest::Approx(1.0));
    CHECK(kl_step_active(s, 13));
    CHECK_FALSE(kl_step_active(s, 14));
    CHECK(kl_ramp(s, 11) == doctest::Approx(0.4));     // ramp ignores the gate

    AnnealSchedule every_step;
    every_step.pretrain_steps = 0;
    every_step.ramp_steps = 1;
    every_step.kld_period = 1;
    CHECK(kl_weight(every_step, 0) == doctest::Approx(1.0));
    CHECK(kl_weight(every_step, 100) == doctest::Approx(1.0));

    AnnealSchedule bad;
    bad.ramp_steps = 0;
    CHECK_THROWS_AS(kl_weight(bad, 0), ContractError);
}
