#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctvae/gradcheck.hpp"
#include "ctvae/models.hpp"

using namespace ctvae;

namespace {

ModelConfig toy_config(ModelKind kind) {
    ModelConfig cfg;
    cfg.kind = kind;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 8;
    cfg.latent_dim = 4;
    cfg.vocab_size = 12;
    cfg.batch_size = 2;
    cfg.max_len = 10;
    cfg.init_std = 0.2;
    return cfg;
}

// two short wrapped pairs over the toy vocab
std::vector<EncodedPair> toy_pairs() {
    return {
        {{2, 4, 5, 3}, {2, 6, 7, 8, 3}},
        {{2, 9, 3}, {2, 10, 3}},
    };
}

TrainBatch toy_batch() { return make_train_batch(toy_pairs(), {0, 1}); }

}  // namespace

TEST_CASE("config json roundtrip") {
    ModelConfig cfg = toy_config(ModelKind::cvae_simple);
    cfg.anneal.pretrain_steps = 7;
    cfg.anneal.ramp_steps = 11;
    cfg.anneal.kld_period = 2;
    cfg.anneal.mode = AnnealSchedule::Mode::separate;
    nlohmann::json j = cfg;
    ModelConfig back = j.get<ModelConfig>();
    CHECK(back.kind == ModelKind::cvae_simple);
    CHECK(back.hidden_dim == cfg.hidden_dim);
    CHECK(back.anneal.pretrain_steps == 7);
    CHECK(back.anneal.mode == AnnealSchedule::Mode::separate);
    CHECK(to_string(model_kind_from_string("ctvae")) == "ctvae");
    CHECK_THROWS_AS(model_kind_from_string("gpt"), ContractError);
}

TEST_CASE("train batch pairs inputs with shifted targets") {
    auto batch = toy_batch();
    CHECK(batch.B == 2);
    CHECK(batch.resp_in.T == 4);           // longest response minus final token
    CHECK(batch.resp_in.steps[0][0] == 2);  // BOS first
    CHECK(batch.targets[0][0] == 6);
    CHECK(batch.targets[3][0] == 3);        // EOS is predicted
    CHECK(batch.targets[0][1] == 10);
    CHECK(batch.targets[1][1] == 3);
    CHECK(batch.resp_in.masks[1][1] == 1.0);
    CHECK(batch.resp_in.masks[2][1] == 0.0);
    CHECK(batch.target_tokens == 6);        // 4 + 2 predictions
}

TEST_CASE("losses produce finite scalars with sane bookkeeping") {
    Rng rng(1);
    auto batch = toy_batch();

    ParamStoreD s1;
    auto s2s = Seq2SeqNetworksT<double>::create(s1, toy_config(ModelKind::seq2seq), rng);
    auto l1 = seq2seq_loss(s2s, batch);
    CHECK(std::isfinite(l1.recon.item()));
    CHECK_FALSE(l1.has_kl);
    CHECK(l1.tokens == 6);
    CHECK(l1.examples == 2);
    // fresh small-weight model predicts near-uniformly
    double per_token = l1.recon_sum / l1.tokens;
    CHECK(per_token > 0.5 * std::log(12.0));
    CHECK(per_token < 1.5 * std::log(12.0));

    ParamStoreD s2;
    auto cvae = CvaeNetworksT<double>::create(s2, toy_config(ModelKind::cvae), rng);
    auto eps = TensorD::randn(rng, 2, 4, 1.0);
    auto l2 = cvae_loss(cvae, batch, eps);
    CHECK(l2.has_kl);
    CHECK(std::isfinite(l2.kl.item()));
    CHECK(l2.kl.item() >= 0.0);

    ParamStoreD s3;
    auto simple = CvaeNetworksT<double>::create(s3, toy_config(ModelKind::cvae_simple), rng);
    CHECK(simple.simple_prior);
    CHECK_FALSE(s3.has("prior.w0"));
    auto l3 = cvae_loss(simple, batch, eps);
    CHECK(l3.kl.item() >= 0.0);

    ParamStoreD s4;
    auto ctv = CtvaeNetworksT<double>::create(s4, toy_config(ModelKind::ctvae), rng);
    auto l4 = ctvae_loss(ctv, batch, eps);
    CHECK(l4.has_kl);
    CHECK(l4.kl.item() >= 0.0);
    CHECK(std::isfinite(l4.recon.item()));
}

TEST_CASE("seq2seq loss gradients pass finite differences") {
    Rng rng(2);
    ParamStoreD store;
    auto net = Seq2SeqNetworksT<double>::create(store, toy_config(ModelKind::seq2seq), rng);
    auto batch = toy_batch();
    auto builder = [&]() { return seq2seq_loss(net, batch).recon; };
    auto res = grad_check(builder, store);
    INFO("worst ", res.worst_param, "[", res.worst_index, "] analytic ", res.analytic,
         " numeric ", res.numeric);
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("cvae elbo gradients pass finite differences") {
    Rng rng(3);
    ParamStoreD store;
    auto net = CvaeNetworksT<double>::create(store, toy_config(ModelKind::cvae), rng);
    auto batch = toy_batch();
    auto eps = TensorD::randn(rng, 2, 4, 1.0);
    auto builder = [&]() {
        auto parts = cvae_loss(net, batch, eps);
        return add(parts.recon, parts.kl);
    };
    auto res = grad_check(builder, store);
    INFO("worst ", res.worst_param, "[", res.worst_index, "]");
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("ctvae elbo gradients pass finite differences") {
    Rng rng(4);
    ParamStoreD store;
    auto net = CtvaeNetworksT<double>::create(store, toy_config(ModelKind::ctvae), rng);
    auto batch = toy_batch();
    auto eps = TensorD::randn(rng, 2, 4, 1.0);
    auto builder = [&]() {
        auto parts = ctvae_loss(net, batch, eps);
        return add(parts.recon, scale(parts.kl, 0.7));
    };
    auto res = grad_check(builder, store);
    INFO("worst ", res.worst_param, "[", res.worst_index, "]");
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("batch loss equals the mean of single-pair losses") {
    Rng rng(5);
    ParamStoreD store;
    auto net = Seq2SeqNetworksT<double>::create(store, toy_config(ModelKind::seq2seq), rng);
    auto pairs = toy_pairs();
    auto both = seq2seq_loss(net, make_train_batch(pairs, {0, 1}));
    auto first = seq2seq_loss(net, make_train_batch(pairs, {0}));
    auto second = seq2seq_loss(net, make_train_batch(pairs, {1}));
    CHECK(both.recon.item() ==
          doctest::Approx(0.5 * (first.recon.item() + second.recon.item())).epsilon(1e-9));
    CHECK(both.recon_sum ==
          doctest::Approx(first.recon_sum + second.recon_sum).epsilon(1e-9));
}

TEST_CASE("training reduces token nll on a tiny corpus") {
    Rng init_rng(6);
    ModelConfig cfg = toy_config(ModelKind::seq2seq);
    cfg.lr = 2e-2;
    cfg.batch_size = 2;
    auto model = Generator<double>::create(cfg, init_rng);
    auto data = toy_pairs();
    AdamStateT<double> opt;
    uint64_t step = 0;
    Rng train_rng(7);
    auto before = train_epoch(*model, data, opt, step, train_rng);
    EpochStats after;
    for (int e = 0; e < 60; ++e) after = train_epoch(*model, data, opt, step, train_rng);
    CHECK(after.recon_per_token < before.recon_per_token * 0.5);
    CHECK(step == 61);
}

TEST_CASE("separate-mode schedule alternates objectives without diverging") {
    Rng init_rng(8);
    ModelConfig cfg = toy_config(ModelKind::ctvae);
    cfg.lr = 5e-3;
    cfg.anneal.pretrain_steps = 2;
    cfg.anneal.ramp_steps = 4;
    cfg.anneal.kld_period = 2;
    cfg.anneal.mode = AnnealSchedule::Mode::separate;
    auto model = Generator<double>::create(cfg, init_rng);
    auto data = toy_pairs();
    AdamStateT<double> opt;
    uint64_t step = 0;
    Rng train_rng(9);
    for (int e = 0; e < 20; ++e) {
        auto stats = train_epoch(*model, data, opt, step, train_rng);
        CHECK(std::isfinite(stats.recon_per_token));
        CHECK(std::isfinite(stats.kl_per_example));
    }
}

TEST_CASE("steppers are deterministic given the rng state") {
    Rng init_rng(10);
    ModelConfig cfg = toy_config(ModelKind::ctvae);
    auto model = Generator<double>::create(cfg, init_rng);
    std::vector<int> post = {2, 4, 5, 3};

    Rng g1(33), g2(33);
    auto s1 = model->make_stepper(post, g1);
    auto s2 = model->make_stepper(post, g2);
    auto lp1 = s1->step({Vocab::bos_id});
    auto lp2 = s2->step({Vocab::bos_id});
    for (int v = 0; v < cfg.vocab_size; ++v) CHECK(lp1.at(0, v) == lp2.at(0, v));

    // different latent draws give different distributions
    Rng g3(34);
    auto s3 = model->make_stepper(post, g3);
    auto lp3 = s3->step({Vocab::bos_id});
    bool any_diff = false;
    for (int v = 0; v < cfg.vocab_size; ++v)
        if (lp1.at(0, v) != lp3.at(0, v)) any_diff = true;
    CHECK(any_diff);

    // log probabilities normalize
    double total = 0;
    for (int v = 0; v < cfg.vocab_size; ++v) total += std::exp(lp1.at(0, v));
    CHECK(total == doctest::Approx(1.0));
}

TEST_CASE("stepper rows stay consistent under reorder") {
    Rng init_rng(11);
    auto model = Generator<double>::create(toy_config(ModelKind::seq2seq), init_rng);
    Rng g(1);
    auto st = model->make_stepper({2, 4, 3}, g);
    auto lp0 = st->step({Vocab::bos_id});
    CHECK(st->rows() == 1);
    st->reorder({0, 0, 0});
    CHECK(st->rows() == 3);
    auto lp1 = st->step({5, 5, 5});
    // identical rows must evolve identically
    for (int v = 0; v < 12; ++v) {
        CHECK(lp1.at(0, v) == lp1.at(1, v));
        CHECK(lp1.at(1, v) == lp1.at(2, v));
    }
    // and diverge when fed different tokens
    st->reorder({0, 1});
    auto lp2 = st->step({6, 7});
    bool diff = false;
    for (int v = 0; v < 12; ++v)
        if (lp2.at(0, v) != lp2.at(1, v)) diff = true;
    CHECK(diff);
}

TEST_CASE("non-finite loss raises the divergence error") {
    Rng init_rng(12);
    auto model = Generator<double>::create(toy_config(ModelKind::seq2seq), init_rng);
    model->params().get("out.w").values()[0] = std::numeric_limits<double>::quiet_NaN();
    auto data = toy_pairs();
    AdamStateT<double> opt;
    uint64_t step = 0;
    Rng train_rng(13);
    CHECK_THROWS_AS(train_epoch(*model, data, opt, step, train_rng), TrainingDiverged);
}
