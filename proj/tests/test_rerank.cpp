#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ctvae/gradcheck.hpp"
#include "ctvae/models.hpp"
#include "ctvae/rerank.hpp"

using namespace ctvae;

namespace {

TcdConfig toy_tcd_config() {
    TcdConfig cfg;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 6;
    cfg.vocab_size = 14;
    cfg.batch_size = 8;
    cfg.max_len = 10;
    cfg.init_std = 0.2;
    return cfg;
}

}  // namespace

TEST_CASE("rank score hand values") {
    CHECK(rank_score(-10.0, 0.5, 5.0) == doctest::Approx(-13.465735902799726).epsilon(1e-12));
    CHECK(rank_score(-10.0, 1.0, 5.0) == doctest::Approx(-10.0));
    CHECK(rank_score(-2.5, 0.9, 0.0) == doctest::Approx(-2.5));
    // a confident discriminator overturns a likelihood lead at lambda 5
    double liked = rank_score(-15.0, 0.9, 5.0);
    double fluent = rank_score(-10.0, 0.01, 5.0);
    CHECK(liked > fluent);
    CHECK(rank_score(-10.0, 0.01, 0.0) > rank_score(-15.0, 0.9, 0.0));

    CHECK_THROWS_AS(rank_score(-1.0, 0.0, 5.0), ContractError);
    CHECK_THROWS_AS(rank_score(-1.0, -0.5, 5.0), ContractError);
    CHECK_THROWS_AS(rank_score(-1.0, 1.5, 5.0), ContractError);
}

TEST_CASE("rerank deduplicates and orders by combined score") {
    std::vector<Candidate> cands = {
        {{5, 6, 3}, -4.0, 0},
        {{5, 6, 3}, -3.0, 1},   // duplicate tokens, better loglik
        {{7, 3}, -2.0, 2},
        {{8, 9, 3}, -2.5, 3},
    };
    // discriminator despises the {7,3} response
    auto match = [](const std::vector<int>& toks) {
        return toks == std::vector<int>{7, 3} ? 1e-6 : 0.8;
    };
    auto ranked = rerank_topk(cands, match, 5.0, 5);
    REQUIRE(ranked.size() == 3);
    CHECK(ranked[0].tokens == std::vector<int>{8, 9, 3});
    CHECK(ranked[1].tokens == std::vector<int>{5, 6, 3});
    CHECK(ranked[1].loglik == doctest::Approx(-3.0));  // dedup kept the better copy
    CHECK(ranked[2].tokens == std::vector<int>{7, 3});
    for (const auto& r : ranked)
        CHECK(r.score == doctest::Approx(rank_score(r.loglik, r.tcd_prob, 5.0)));

    auto top1 = rerank_topk(cands, match, 5.0, 1);
    REQUIRE(top1.size() == 1);
    CHECK(top1[0].tokens == std::vector<int>{8, 9, 3});
}

TEST_CASE("lambda zero ranking reduces to likelihood ranking") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        int n = 2 + static_cast<int>(rng.uniform() * 8);
        std::vector<Candidate> cands;
        std::set<std::vector<int>> seen;
        for (int i = 0; i < n; ++i) {
            std::vector<int> toks;
            int len = 1 + static_cast<int>(rng.uniform() * 5);
            for (int t = 0; t < len; ++t) toks.push_back(4 + rng.uniform_int(0, 7));
            toks.push_back(Vocab::eos_id);
            if (!seen.insert(toks).second) continue;
            cands.push_back({toks, -rng.uniform() * 20.0, i});
        }
        if (cands.size() < 2) continue;
        auto match = [&](const std::vector<int>& toks) {
            return 0.05 + 0.9 * (static_cast<double>(toks[0]) / 16.0);
        };
        auto ranked = rerank_topk(cands, match, 0.0, static_cast<int>(cands.size()));
        for (size_t i = 1; i < ranked.size(); ++i)
            CHECK(ranked[i - 1].loglik >= ranked[i].loglik);
    }
}

TEST_CASE("negatives are derangements") {
    Rng rng(3);
    for (size_t n : {2ul, 3ul, 5ul, 17ul}) {
        auto perm = make_negatives(n, rng);
        REQUIRE(perm.size() == n);
        std::set<size_t> uniq(perm.begin(), perm.end());
        CHECK(uniq.size() == n);
        for (size_t i = 0; i < n; ++i) CHECK(perm[i] != i);
    }
    CHECK_THROWS_AS(make_negatives(1, rng), ContractError);
}

TEST_CASE("tcd forward produces one logit pair per row") {
    Rng rng(5);
    ParamStoreD store;
    auto net = TcdNetworksT<double>::create(store, toy_tcd_config(), rng);
    auto post = PaddedBatch::from_rows({{2, 4, 5, 3}, {2, 6, 3}}, Vocab::pad_id);
    auto resp = PaddedBatch::from_rows({{2, 7, 8, 3}, {2, 9, 10, 11, 3}}, Vocab::pad_id);
    auto logits = tcd_forward(net, post, resp);
    CHECK(logits.rows() == 2);
    CHECK(logits.cols() == 2);
    CHECK(logits.all_finite());

    double p = tcd_match_prob(net, {2, 4, 5, 3}, {2, 7, 8, 3});
    CHECK(p > 0.0);
    CHECK(p < 1.0);

    auto bad = PaddedBatch::from_rows({{2, 3}}, Vocab::pad_id);
    CHECK_THROWS_AS(tcd_forward(net, post, bad), ShapeError);
}

TEST_CASE("tcd match probability is row-order independent") {
    Rng rng(6);
    ParamStoreD store;
    auto net = TcdNetworksT<double>::create(store, toy_tcd_config(), rng);
    std::vector<int> p1 = {2, 4, 5, 3}, r1 = {2, 7, 8, 3};
    std::vector<int> p2 = {2, 6, 3}, r2 = {2, 9, 10, 11, 3};

    NoGradGuard guard;
    auto batch_logits = tcd_forward(net, PaddedBatch::from_rows({p1, p2}, Vocab::pad_id),
                                    PaddedBatch::from_rows({r1, r2}, Vocab::pad_id));
    auto solo1 = tcd_forward(net, PaddedBatch::from_rows({p1}, Vocab::pad_id),
                             PaddedBatch::from_rows({r1}, Vocab::pad_id));
    auto solo2 = tcd_forward(net, PaddedBatch::from_rows({p2}, Vocab::pad_id),
                             PaddedBatch::from_rows({r2}, Vocab::pad_id));
    for (int j = 0; j < 2; ++j) {
        CHECK(batch_logits.at(0, j) == doctest::Approx(solo1.at(0, j)).epsilon(1e-9));
        CHECK(batch_logits.at(1, j) == doctest::Approx(solo2.at(0, j)).epsilon(1e-9));
    }
}

TEST_CASE("tcd loss gradients pass finite differences") {
    Rng rng(7);
    ParamStoreD store;
    TcdConfig cfg = toy_tcd_config();
    cfg.hidden_dim = 4;
    cfg.embed_dim = 4;
    auto net = TcdNetworksT<double>::create(store, cfg, rng);
    auto post = PaddedBatch::from_rows({{2, 4, 5, 3}, {2, 6, 3}}, Vocab::pad_id);
    auto resp = PaddedBatch::from_rows({{2, 7, 8, 3}, {2, 9, 3}}, Vocab::pad_id);
    std::vector<int> labels = {1, 0};
    auto builder = [&]() { return tcd_loss(net, post, resp, labels).loss; };
    // the cross-attention graph is deep enough that h=1e-4 lets roundoff
    // dominate its near-zero gradient entries; 1e-3 keeps the check sharp
    auto res = grad_check(builder, store, 1e-3);
    INFO("worst ", res.worst_param, "[", res.worst_index, "]");
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("tcd training separates matched from mismatched pairs") {
    // topic-only corpus: responses are topic-marked, so shuffled pairings
    // are detectably wrong.  note the derangement negatives carry a little
    // label noise (a shuffled response can land on a same-topic post), which
    // caps attainable accuracy below 1.
    SyntheticConfig scfg;
    scfg.num_posts = 48;
    scfg.seed = 5;
    scfg.topic_only = true;
    auto corpus = gen_synthetic(scfg);
    auto vocab = build_vocab(corpus, 35000);

    TcdConfig cfg = toy_tcd_config();
    cfg.vocab_size = vocab.size();
    cfg.embed_dim = 12;
    cfg.hidden_dim = 12;
    cfg.batch_size = 16;
    cfg.lr = 5e-3;

    Rng rng(11);
    ParamStoreD store;
    auto net = TcdNetworksT<double>::create(store, cfg, rng);
    auto data = encode_corpus(corpus, vocab, cfg.max_len);

    AdamStateT<double> opt;
    Rng train_rng(13);
    TcdEpochStats stats;
    for (int e = 0; e < 20; ++e) stats = train_tcd_epoch(net, store, data, opt, train_rng);
    CHECK(stats.accuracy > 0.9);
}
