#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctvae/gradcheck.hpp"
#include "ctvae/layers.hpp"

using namespace ctvae;

TEST_CASE("padded batch layout") {
    auto pb = PaddedBatch::from_rows({{2, 5, 6, 3}, {2, 3}}, 0);
    CHECK(pb.B == 2);
    CHECK(pb.T == 4);
    CHECK(pb.steps[0][0] == 2);
    CHECK(pb.steps[0][1] == 2);
    CHECK(pb.steps[2][1] == 0);
    CHECK(pb.masks[1][1] == 1.0);
    CHECK(pb.masks[2][1] == 0.0);
    CHECK(pb.lens[1] == 2);
    CHECK_THROWS_AS(PaddedBatch::from_rows({{1}, {}}, 0), ContractError);
}

TEST_CASE("embedding lookup returns table rows") {
    Rng rng(1);
    ParamStoreD store;
    auto emb = EmbeddingTableT<double>::create(store, "emb", 6, 3, rng, 0.5);
    auto got = emb.lookup({4, 0, 4});
    for (int j = 0; j < 3; ++j) {
        CHECK(got.at(0, j) == emb.table.at(4, j));
        CHECK(got.at(1, j) == emb.table.at(0, j));
        CHECK(got.at(2, j) == emb.table.at(4, j));
    }
}

TEST_CASE("lstm cell step matches hand-rolled gate math") {
    Rng rng(2);
    ParamStoreD store;
    auto cell = LstmCellParamsT<double>::create(store, "cell", 2, 2, rng, 0.3);
    auto x = TensorD::from({0.5, -0.2}, 1, 2);
    auto [h0, c0] = cell.zero_state(1);
    auto [h1, c1] = cell.step(x, h0, c0);
    CHECK(h1.rows() == 1);
    CHECK(h1.cols() == 2);

    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    for (int j = 0; j < 2; ++j) {
        double pre[4];
        for (int gblock = 0; gblock < 4; ++gblock) {
            int col = gblock * 2 + j;
            double acc = cell.b.at(0, col);
            for (int k = 0; k < 2; ++k) acc += x.at(0, k) * cell.w_ih.at(k, col);
            pre[gblock] = acc;
        }
        double i = sig(pre[0]), f = sig(pre[1]), g = std::tanh(pre[2]), o = sig(pre[3]);
        double c_expect = f * 0.0 + i * g;
        double h_expect = o * std::tanh(c_expect);
        CHECK(c1.at(0, j) == doctest::Approx(c_expect));
        CHECK(h1.at(0, j) == doctest::Approx(h_expect));
        CHECK(h1.at(0, j) > -1.0);
        CHECK(h1.at(0, j) < 1.0);
    }
}

TEST_CASE("forget gate bias starts at one") {
    Rng rng(3);
    ParamStoreD store;
    auto cell = LstmCellParamsT<double>::create(store, "cell", 3, 4, rng, 0.1);
    for (int j = 0; j < 16; ++j) {
        double expect = (j >= 4 && j < 8) ? 1.0 : 0.0;
        CHECK(cell.b.at(0, j) == expect);
    }
}

TEST_CASE("masked updates freeze finished rows") {
    Rng rng(4);
    ParamStoreD store;
    auto emb = EmbeddingTableT<double>::create(store, "emb", 8, 3, rng, 0.4);
    auto cell = LstmCellParamsT<double>::create(store, "cell", 3, 5, rng, 0.4);

    auto batch = PaddedBatch::from_rows({{2, 5, 6, 3}, {2, 3}}, 0);
    auto states = lstm_encode(emb, cell, batch);
    REQUIRE(states.size() == 4);

    // the short row's state must stop changing after its second step
    for (int j = 0; j < 5; ++j) {
        CHECK(states[3].at(1, j) == states[1].at(1, j));
        CHECK(states[2].at(1, j) == states[1].at(1, j));
    }

    // and must equal the state from encoding that row alone
    auto solo = lstm_encode(emb, cell, PaddedBatch::from_rows({{2, 3}}, 0));
    for (int j = 0; j < 5; ++j) CHECK(states[3].at(1, j) == doctest::Approx(solo[1].at(0, j)));
}

TEST_CASE("batch encoding is row-permutation equivariant") {
    Rng rng(5);
    ParamStoreD store;
    auto emb = EmbeddingTableT<double>::create(store, "emb", 10, 4, rng, 0.3);
    auto cell = LstmCellParamsT<double>::create(store, "cell", 4, 6, rng, 0.3);

    std::vector<std::vector<int>> a = {{2, 7, 4, 3}, {2, 9, 3}};
    std::vector<std::vector<int>> b = {{2, 9, 3}, {2, 7, 4, 3}};
    auto sa = lstm_encode(emb, cell, PaddedBatch::from_rows(a, 0));
    auto sb = lstm_encode(emb, cell, PaddedBatch::from_rows(b, 0));
    for (int j = 0; j < 6; ++j) {
        CHECK(sa.back().at(0, j) == doctest::Approx(sb.back().at(1, j)));
        CHECK(sa.back().at(1, j) == doctest::Approx(sb.back().at(0, j)));
    }

    auto pa = mean_pool(sa, PaddedBatch::from_rows(a, 0));
    auto pb = mean_pool(sb, PaddedBatch::from_rows(b, 0));
    for (int j = 0; j < 6; ++j) {
        CHECK(pa.at(0, j) == doctest::Approx(pb.at(1, j)));
        CHECK(pa.at(1, j) == doctest::Approx(pb.at(0, j)));
    }
}

TEST_CASE("mean pool averages only live steps") {
    // hand-built states: step t has value t+1 everywhere
    std::vector<TensorT<double>> states;
    for (int t = 0; t < 3; ++t) states.push_back(TensorD::filled(2, 2, t + 1.0));
    auto batch = PaddedBatch::from_rows({{1, 1, 1}, {1, 1}}, 0);
    auto pooled = mean_pool(states, batch);
    CHECK(pooled.at(0, 0) == doctest::Approx(2.0));        // (1+2+3)/3
    CHECK(pooled.at(1, 1) == doctest::Approx(1.5));        // (1+2)/2
}

TEST_CASE("mlp forward matches hand computation") {
    ParamStoreD store;
    Rng rng(6);
    auto mlp = MlpParamsT<double>::create(store, "mlp", {2, 2, 1}, Activation::tanh_act,
                                          Activation::linear, rng, 0.5);
    auto x = TensorD::from({1.0, -1.0}, 1, 2);
    auto y = mlp_forward(mlp, x);

    double h[2];
    for (int j = 0; j < 2; ++j)
        h[j] = std::tanh(1.0 * mlp.weights[0].at(0, j) - 1.0 * mlp.weights[0].at(1, j) +
                         mlp.biases[0].at(0, j));
    double expect = h[0] * mlp.weights[1].at(0, 0) + h[1] * mlp.weights[1].at(1, 0) +
                    mlp.biases[1].at(0, 0);
    CHECK(y.item() == doctest::Approx(expect));
}

TEST_CASE("zero logit layer yields a uniform softmax") {
    ParamStoreD store;
    Rng rng(7);
    auto mlp = MlpParamsT<double>::create(store, "mlp", {3, 5}, Activation::tanh_act,
                                          Activation::linear, rng, 0.0);
    auto logits = mlp_forward(mlp, TensorD::from({0.2, -0.1, 0.9}, 1, 3));
    auto p = softmax_rows(logits);
    for (int j = 0; j < 5; ++j) CHECK(p.at(0, j) == doctest::Approx(0.2));
}

TEST_CASE("gradients through encode, pool and mlp pass finite differences") {
    Rng rng(8);
    ParamStoreD store;
    auto emb = EmbeddingTableT<double>::create(store, "emb", 7, 3, rng, 0.4);
    auto cell = LstmCellParamsT<double>::create(store, "cell", 3, 4, rng, 0.4);
    auto mlp = MlpParamsT<double>::create(store, "mlp", {4, 4, 2}, Activation::softplus_act,
                                          Activation::linear, rng, 0.4);
    auto batch = PaddedBatch::from_rows({{2, 5, 6, 3}, {2, 4, 3}}, 0);

    auto builder = [&]() {
        auto states = lstm_encode(emb, cell, batch);
        auto pooled = mean_pool(states, batch);
        auto out = mlp_forward(mlp, pooled);
        return softmax_cross_entropy(out, {1, 0});
    };
    // deeper graphs accumulate central-difference truncation error on
    // near-zero entries, so the bar is looser than for single primitives
    auto res = grad_check(builder, store);
    CHECK(res.max_rel_err < 1e-4);
}
