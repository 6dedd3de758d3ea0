#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "ctvae/metrics.hpp"
#include "ctvae/gradcheck.hpp"
#include "oracles.hpp"

using namespace ctvae;

namespace {

ModelConfig toy_lm_config() {
    ModelConfig cfg;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 8;
    cfg.latent_dim = 4;
    cfg.vocab_size = 12;
    cfg.batch_size = 4;
    cfg.max_len = 10;
    cfg.init_std = 0.2;
    return cfg;
}

std::vector<std::vector<int>> random_responses(Rng& rng, int max_count, int max_len,
                                               int vocab) {
    int count = static_cast<int>(rng.uniform_int(1, max_count));
    std::vector<std::vector<int>> out(count);
    for (auto& r : out) {
        int len = static_cast<int>(rng.uniform_int(0, max_len));
        for (int i = 0; i < len; ++i)
            r.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    }
    return out;
}

}  // namespace

TEST_CASE("distinct_n hand values") {
    // "a b" and "a c" as ids: unigrams {a,b,a,c}, three distinct of four
    std::vector<std::vector<int>> two = {{0, 1}, {0, 2}};
    CHECK(distinct_n(two, 1) == doctest::Approx(0.75));
    // both bigrams distinct
    CHECK(distinct_n(two, 2) == doctest::Approx(1.0));

    std::vector<std::vector<int>> same(7, std::vector<int>{5});
    CHECK(distinct_n(same, 1) == doctest::Approx(1.0 / 7.0));

    std::vector<std::vector<int>> uniq = {{0, 1}, {2, 3}, {4}};
    CHECK(distinct_n(uniq, 1) == doctest::Approx(1.0));

    // repeated bigram across responses
    std::vector<std::vector<int>> rep = {{0, 1, 0}, {1, 0, 1}};
    // bigrams: (0,1),(1,0) and (1,0),(0,1) -> 2 distinct of 4
    CHECK(distinct_n(rep, 2) == doctest::Approx(0.5));

    CHECK_THROWS_AS(distinct_n({{1}, {2}}, 2), ContractError);  // all too short
    CHECK_THROWS_AS(distinct_n(two, 3), ContractError);
    CHECK_THROWS_AS(distinct_n(two, 0), ContractError);
    CHECK_THROWS_AS(distinct_n({}, 1), ContractError);  // no n-grams at all
}

TEST_CASE("unique_pct and matching_pct hand values") {
    std::vector<std::vector<int>> r = {{0}, {0}, {1}};
    CHECK(unique_pct(r) == doctest::Approx(2.0 / 3.0));
    CHECK(unique_pct({{4, 4}, {4, 4}, {4, 4}, {4, 4}}) == doctest::Approx(0.25));
    CHECK(unique_pct({{1}, {2}, {3}}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(unique_pct({}), ContractError);

    std::set<std::vector<int>> train = {{0}, {1}, {2, 3}};
    CHECK(matching_pct({{0}, {1}}, train) == doctest::Approx(1.0));
    CHECK(matching_pct({{9}, {8, 7}}, train) == doctest::Approx(0.0));
    CHECK(matching_pct({{0}, {9}}, train) == doctest::Approx(0.5));
    CHECK_THROWS_AS(matching_pct({}, train), ContractError);
}

TEST_CASE("ratio metrics match brute-force oracles on random inputs") {
    Rng rng(321);
    for (int trial = 0; trial < 300; ++trial) {
        auto responses = random_responses(rng, 8, 5, 5);
        auto train = random_responses(rng, 6, 5, 5);
        std::set<std::vector<int>> train_set(train.begin(), train.end());

        CHECK(unique_pct(responses) == oracles::naive_unique_pct(responses));
        CHECK(matching_pct(responses, train_set) ==
              oracles::naive_matching_pct(responses, train_set));
        for (int n = 1; n <= 2; ++n) {
            bool any = false;
            for (const auto& r : responses) any = any || static_cast<int>(r.size()) >= n;
            if (!any) continue;
            CHECK(distinct_n(responses, n) == oracles::naive_distinct_n(responses, n));
        }
    }
}

TEST_CASE("perplexity from totals") {
    // two tokens scored at probability 0.5 and 0.25
    double nll = -(std::log(0.5) + std::log(0.25));
    CHECK(perplexity_from_nll(nll, 2) == doctest::Approx(2.8284271247461903));
    CHECK(perplexity_from_nll(0.0, 5) == doctest::Approx(1.0));
    CHECK_THROWS_AS(perplexity_from_nll(1.0, 0), ContractError);
}

TEST_CASE("content token canonicalization") {
    std::vector<int> wrapped = {Vocab::bos_id, 7, 8, Vocab::eos_id};
    CHECK(content_tokens(wrapped) == std::vector<int>{7, 8});
    // beam output carries no BOS and may lack EOS
    CHECK(content_tokens({7, 8, Vocab::eos_id}) == std::vector<int>{7, 8});
    CHECK(content_tokens({7, 8}) == std::vector<int>{7, 8});
    CHECK(content_tokens({Vocab::bos_id, Vocab::eos_id}) == std::vector<int>{});
    CHECK(wrap_content({7, 8, Vocab::eos_id}) == wrapped);
    CHECK(wrap_content(wrapped) == wrapped);
}

TEST_CASE("zeroed lm is exactly uniform") {
    ModelConfig cfg = toy_lm_config();
    Rng rng(1);
    ParamStoreD store;
    auto lm = RnnLmD::create(store, cfg, rng);
    for (const auto& name : store.names()) {
        auto& vals = store.get(name).values();
        std::fill(vals.begin(), vals.end(), 0.0);
    }
    std::vector<std::vector<int>> sentences = {{4, 5, 6}, {7}, {8, 9}};
    CHECK(lm_perplexity(lm, sentences) == doctest::Approx(cfg.vocab_size).epsilon(1e-9));
}

TEST_CASE("lm total nll is batch-size independent and counts eos") {
    ModelConfig cfg = toy_lm_config();
    Rng rng(2);
    ParamStoreD store;
    auto lm = RnnLmD::create(store, cfg, rng);
    std::vector<std::vector<int>> sentences = {{4, 5, 6}, {7}, {8, 9}, {10, 4}, {5}};

    size_t tokens_a = 0;
    double whole = lm_total_nll(lm, sentences, &tokens_a);
    CHECK(tokens_a == 3 + 1 + 2 + 2 + 1 + sentences.size());  // content + one EOS each

    double split = 0.0;
    size_t tokens_b = 0;
    for (const auto& s : sentences) {
        size_t t = 0;
        split += lm_total_nll(lm, {s}, &t);
        tokens_b += t;
    }
    CHECK(tokens_b == tokens_a);
    CHECK(whole == doctest::Approx(split).epsilon(1e-9));
}

TEST_CASE("lm gradients agree with finite differences") {
    ModelConfig cfg = toy_lm_config();
    Rng rng(3);
    ParamStoreD store;
    auto lm = RnnLmD::create(store, cfg, rng);
    std::vector<EncodedPair> pairs = {
        {{2, 4, 3}, {2, 6, 7, 8, 3}},
        {{2, 5, 3}, {2, 10, 3}},
    };
    TrainBatch batch = make_train_batch(pairs, {0, 1});
    auto builder = [&]() { return lm_loss(lm, batch).loss; };
    auto res = grad_check(builder, store);
    INFO("worst ", res.worst_param, "[", res.worst_index, "]");
    CHECK(res.max_rel_err < 1e-3);
}

TEST_CASE("lm memorizes a single repeated response") {
    ModelConfig cfg = toy_lm_config();
    cfg.lr = 1e-2;
    Rng rng(4);
    ParamStoreD store;
    auto lm = RnnLmD::create(store, cfg, rng);

    std::vector<EncodedPair> data(16, EncodedPair{{2, 4, 3}, {2, 6, 7, 8, 9, 3}});
    AdamStateT<double> opt;
    Rng train_rng(5);
    LmEpochStats stats;
    for (int e = 0; e < 40; ++e) stats = lm_train_epoch(lm, store, data, opt, train_rng);

    double ppl = lm_perplexity(lm, {{6, 7, 8, 9}});
    CHECK(ppl > 1.0);
    CHECK(ppl < 1.1);
}

TEST_CASE("metrics row over a crafted pool") {
    ModelConfig cfg = toy_lm_config();
    Rng rng(6);
    ParamStoreD store;
    auto lm = RnnLmD::create(store, cfg, rng);
    for (const auto& name : store.names()) {
        auto& vals = store.get(name).values();
        std::fill(vals.begin(), vals.end(), 0.0);
    }

    std::vector<std::vector<int>> pooled = {{4, 5}, {4, 5}, {6}};
    std::set<std::vector<int>> train = {{4, 5}};
    MetricsRow row = compute_metrics_row("demo", pooled, lm, train, 1);

    CHECK(row.model == "demo");
    CHECK(row.ppl_on_lm == doctest::Approx(cfg.vocab_size).epsilon(1e-9));
    CHECK(row.matching_pct == doctest::Approx(100.0 * 2 / 3));
    CHECK(row.distinct_1 == doctest::Approx(60.0));   // {4,5,6} over 5 tokens
    CHECK(row.distinct_2 == doctest::Approx(50.0));   // one distinct bigram of two
    CHECK(row.unique_pct == doctest::Approx(100.0 * 2 / 3));
    CHECK(row.responses == 3);
    CHECK(row.skipped_posts == 1);
}

TEST_CASE("report serialization round trips") {
    MetricsReport report;
    MetricsRow a;
    a.model = "seq2seq";
    a.ppl_on_lm = 7.61;
    a.matching_pct = 92.58;
    a.distinct_1 = 12.5;
    a.distinct_2 = 30.0;
    a.unique_pct = 22.86;
    a.responses = 250;
    a.skipped_posts = 0;
    MetricsRow b = a;
    b.model = "ctvae";
    b.unique_pct = 97.62;
    report.rows = {a, b};

    std::string table = format_metrics_table(report);
    CHECK(table.find("seq2seq") != std::string::npos);
    CHECK(table.find("ctvae") != std::string::npos);
    CHECK(table.find("97.62") != std::string::npos);

    MetricsReport back = metrics_from_jsonl(metrics_to_jsonl(report));
    REQUIRE(back.rows.size() == 2);
    CHECK(back.rows[0].model == "seq2seq");
    CHECK(back.rows[1].unique_pct == doctest::Approx(97.62));
    CHECK(back.rows[0].responses == 250);
}

TEST_CASE("evaluate_models produces one well-formed row per model") {
    SyntheticConfig scfg;
    scfg.num_posts = 6;
    scfg.seed = 9;
    auto corpus = gen_synthetic(scfg);
    auto vocab = build_vocab(corpus, 200);

    ModelConfig base;
    base.embed_dim = 6;
    base.hidden_dim = 8;
    base.latent_dim = 4;
    base.vocab_size = vocab.size();
    base.batch_size = 4;
    base.max_len = 8;
    base.init_std = 0.2;

    Rng init_rng(7);
    std::vector<std::unique_ptr<Generator<double>>> owned;
    std::vector<Generator<double>*> models;
    for (ModelKind kind : {ModelKind::seq2seq, ModelKind::cvae, ModelKind::cvae_simple,
                           ModelKind::ctvae}) {
        ModelConfig cfg = base;
        cfg.kind = kind;
        owned.push_back(Generator<double>::create(cfg, init_rng));
        // untrained decoders otherwise rank the one-token EOS hypothesis
        // first, which makes every pooled response too short for distinct-2
        auto& b = owned.back()->params().get("out.b").values();
        b[Vocab::eos_id] = -40.0;
        models.push_back(owned.back().get());
    }

    TcdConfig tcfg;
    tcfg.embed_dim = 6;
    tcfg.hidden_dim = 8;
    tcfg.vocab_size = vocab.size();
    tcfg.batch_size = 4;
    tcfg.max_len = 8;
    tcfg.init_std = 0.2;
    ParamStoreD tcd_store;
    auto tcd = TcdNetworksT<double>::create(tcd_store, tcfg, init_rng);

    ParamStoreD lm_store;
    auto lm = RnnLmD::create(lm_store, base, init_rng);

    auto pairs = encode_corpus(corpus, vocab, base.max_len);
    auto train_set = response_set(pairs);
    std::vector<std::vector<int>> posts = {pairs[0].post, pairs[pairs.size() - 1].post};

    EvalOptions opts;
    opts.top_k = 3;
    opts.n_z = 4;
    opts.beam = 3;
    opts.seq2seq_beam = 5;
    opts.seed = 11;

    MetricsReport report = evaluate_models(models, tcd, lm, train_set, posts, opts);
    REQUIRE(report.rows.size() == 4);
    CHECK(report.rows[0].model == "seq2seq");
    CHECK(report.rows[3].model == "ctvae");
    for (const auto& row : report.rows) {
        CHECK(row.ppl_on_lm >= 1.0);
        for (double ratio : {row.matching_pct, row.distinct_1, row.distinct_2, row.unique_pct}) {
            CHECK(ratio >= 0.0);
            CHECK(ratio <= 100.0);
        }
        CHECK(row.responses > 0);
        CHECK(row.responses <= posts.size() * opts.top_k);
        CHECK(row.skipped_posts == 0);
    }
}
