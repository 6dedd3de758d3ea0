#pragma once

// Objective evaluation of generated responses: n-gram diversity, sentence
// uniqueness, training-set matching, and perplexity under a separately
// trained recurrent language model. Ratio helpers return fractions in
// [0, 1]; report rows carry them as percentages.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctvae/decoding.hpp"
#include "ctvae/models.hpp"
#include "ctvae/rerank.hpp"

namespace ctvae {

// Strips the sentence delimiters encoding adds, so corpus responses and beam
// outputs compare on the same canonical token form.
inline std::vector<int> content_tokens(std::vector<int> seq) {
    while (!seq.empty() && seq.front() == Vocab::bos_id) seq.erase(seq.begin());
    while (!seq.empty() && (seq.back() == Vocab::eos_id || seq.back() == Vocab::pad_id))
        seq.pop_back();
    return seq;
}

// ---- diversity and matching ratios ----

// distinct n-grams across all responses over total n-gram count.
inline double distinct_n(const std::vector<std::vector<int>>& responses, int n) {
    if (n < 1 || n > 2) throw ContractError("distinct_n: n must be 1 or 2");
    std::set<std::vector<int>> grams;
    size_t total = 0;
    for (const auto& r : responses) {
        for (size_t i = 0; i + n <= r.size(); ++i) {
            grams.insert(std::vector<int>(r.begin() + i, r.begin() + i + n));
            ++total;
        }
    }
    if (total == 0) throw ContractError("distinct_n: every response is shorter than n");
    return static_cast<double>(grams.size()) / static_cast<double>(total);
}

// distinct response sequences over response count.
inline double unique_pct(const std::vector<std::vector<int>>& responses) {
    if (responses.empty()) throw ContractError("unique_pct: no responses");
    std::set<std::vector<int>> uniq(responses.begin(), responses.end());
    return static_cast<double>(uniq.size()) / static_cast<double>(responses.size());
}

// fraction of responses that appear verbatim in the training response set.
inline double matching_pct(const std::vector<std::vector<int>>& responses,
                           const std::set<std::vector<int>>& train_set) {
    if (responses.empty()) throw ContractError("matching_pct: no responses");
    size_t hits = 0;
    for (const auto& r : responses) hits += train_set.count(r) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(responses.size());
}

// Canonical training response set for matching_pct.
inline std::set<std::vector<int>> response_set(const std::vector<EncodedPair>& pairs) {
    std::set<std::vector<int>> out;
    for (const auto& p : pairs) out.insert(content_tokens(p.resp));
    return out;
}

// BOS/EOS-delimited form of a candidate's tokens, matching the encoding the
// discriminator and language model saw in training.
inline std::vector<int> wrap_content(const std::vector<int>& tokens) {
    std::vector<int> content = content_tokens(tokens);
    std::vector<int> out;
    out.reserve(content.size() + 2);
    out.push_back(Vocab::bos_id);
    out.insert(out.end(), content.begin(), content.end());
    out.push_back(Vocab::eos_id);
    return out;
}

inline double perplexity_from_nll(double total_nll, size_t total_tokens) {
    if (total_tokens == 0) throw ContractError("perplexity: zero token count");
    return std::exp(total_nll / static_cast<double>(total_tokens));
}

// ---- recurrent language model ----

// Unconditional next-token model over responses; shares the generator
// embedding/hidden dimensions and training regime. latent_dim and kind of
// the config are ignored.
template <class S>
struct RnnLmT {
    ModelConfig cfg;
    EmbeddingTableT<S> emb;
    LstmCellParamsT<S> cell;
    TensorT<S> w_out;  // [H, V]
    TensorT<S> b_out;

    static RnnLmT create(ParamStoreT<S>& store, const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        RnnLmT n;
        n.cfg = cfg;
        n.emb = EmbeddingTableT<S>::create(store, "emb", cfg.vocab_size, cfg.embed_dim, rng,
                                           cfg.init_std);
        n.cell = LstmCellParamsT<S>::create(store, "cell", cfg.embed_dim, cfg.hidden_dim, rng,
                                            cfg.init_std);
        n.w_out = store.add("out.w",
                            TensorT<S>::randn(rng, cfg.hidden_dim, cfg.vocab_size, cfg.init_std));
        n.b_out = store.add("out.b", TensorT<S>::zeros(1, cfg.vocab_size));
        return n;
    }
};

using RnnLm = RnnLmT<float>;
using RnnLmD = RnnLmT<double>;

template <class S>
struct LmLossT {
    TensorT<S> loss;     // batch-mean per-example NLL, differentiable
    double nll_sum = 0;  // total NLL over all target tokens (EOS included)
    size_t tokens = 0;
};

// Teacher-forced NLL over the response side of a batch; the post side is
// ignored. Zero initial state; per-step input is the previous token's
// embedding alone.
template <class S>
LmLossT<S> lm_loss(const RnnLmT<S>& net, const TrainBatch& batch) {
    TensorT<S> h = TensorT<S>::zeros(batch.B, net.cell.hidden_dim);
    TensorT<S> c = TensorT<S>::zeros(batch.B, net.cell.hidden_dim);
    TensorT<S> total;
    const double inv_b = 1.0 / batch.B;
    for (int t = 0; t < batch.resp_in.T; ++t) {
        TensorT<S> x = net.emb.lookup(batch.resp_in.steps[t]);
        TensorT<S> m = mask_column<S>(batch.resp_in.masks[t]);
        std::tie(h, c) = net.cell.masked_step(x, h, c, m);
        TensorT<S> logits = add(matmul(h, net.w_out), net.b_out);
        std::vector<double> weights(batch.B);
        for (int bi = 0; bi < batch.B; ++bi) weights[bi] = batch.resp_in.masks[t][bi] * inv_b;
        TensorT<S> ce = softmax_cross_entropy(logits, batch.targets[t], weights);
        total = t == 0 ? ce : add(total, ce);
    }
    LmLossT<S> out;
    out.loss = total;
    out.nll_sum = static_cast<double>(total.item()) * batch.B;
    out.tokens = batch.target_tokens;
    return out;
}

struct LmEpochStats {
    double nll_per_token = 0.0;
    size_t steps = 0;
    size_t examples = 0;
    size_t tokens = 0;
};

template <class S>
LmEpochStats lm_train_epoch(const RnnLmT<S>& net, ParamStoreT<S>& store,
                            const std::vector<EncodedPair>& data, AdamStateT<S>& opt, Rng& rng) {
    if (data.empty()) throw ContractError("lm train: empty dataset");
    opt.lr = net.cfg.lr;

    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    LmEpochStats stats;
    for (size_t start = 0; start < order.size(); start += net.cfg.batch_size) {
        size_t end = std::min(order.size(), start + net.cfg.batch_size);
        std::vector<size_t> idxs(order.begin() + start, order.begin() + end);
        TrainBatch batch = make_train_batch(data, idxs);

        LmLossT<S> parts = lm_loss(net, batch);
        if (!std::isfinite(parts.nll_sum))
            throw TrainingDiverged("lm train: non-finite loss", "");

        store.zero_grad();
        backward(parts.loss);
        adam_step(store, opt);

        stats.steps += 1;
        stats.examples += idxs.size();
        stats.tokens += parts.tokens;
        stats.nll_per_token += parts.nll_sum;
    }
    if (stats.tokens > 0) stats.nll_per_token /= static_cast<double>(stats.tokens);
    return stats;
}

// Total NLL of content-token sentences (no delimiters) under the model,
// scoring BOS -> tokens -> EOS. Out-of-vocabulary ids must already be
// mapped to UNK by the encoder.
template <class S>
double lm_total_nll(const RnnLmT<S>& net, const std::vector<std::vector<int>>& sentences,
                    size_t* token_count = nullptr) {
    if (sentences.empty()) throw ContractError("lm: no sentences to score");
    NoGradGuard guard;
    double total = 0.0;
    size_t tokens = 0;
    std::vector<EncodedPair> wrapped(sentences.size());
    for (size_t i = 0; i < sentences.size(); ++i) {
        wrapped[i].resp.push_back(Vocab::bos_id);
        wrapped[i].resp.insert(wrapped[i].resp.end(), sentences[i].begin(), sentences[i].end());
        wrapped[i].resp.push_back(Vocab::eos_id);
        wrapped[i].post = {Vocab::bos_id, Vocab::eos_id};  // unused by the model
    }
    for (size_t start = 0; start < wrapped.size(); start += net.cfg.batch_size) {
        size_t end = std::min(wrapped.size(), start + net.cfg.batch_size);
        std::vector<size_t> idxs(end - start);
        for (size_t i = 0; i < idxs.size(); ++i) idxs[i] = start + i;
        TrainBatch batch = make_train_batch(wrapped, idxs);
        LmLossT<S> parts = lm_loss(net, batch);
        total += parts.nll_sum;
        tokens += parts.tokens;
    }
    if (token_count) *token_count = tokens;
    return total;
}

template <class S>
double lm_perplexity(const RnnLmT<S>& net, const std::vector<std::vector<int>>& sentences) {
    size_t tokens = 0;
    double nll = lm_total_nll(net, sentences, &tokens);
    return perplexity_from_nll(nll, tokens);
}

// ---- report ----

struct MetricsRow {
    std::string model;
    double ppl_on_lm = 0.0;
    double matching_pct = 0.0;  // percentages in [0, 100] from here on
    double distinct_1 = 0.0;
    double distinct_2 = 0.0;
    double unique_pct = 0.0;
    size_t responses = 0;      // pooled top-k responses the row covers
    size_t skipped_posts = 0;  // posts whose generation failed
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
};

inline void to_json(nlohmann::json& j, const MetricsRow& r) {
    j = nlohmann::json{{"model", r.model},
                       {"ppl_on_lm", r.ppl_on_lm},
                       {"matching_pct", r.matching_pct},
                       {"distinct_1", r.distinct_1},
                       {"distinct_2", r.distinct_2},
                       {"unique_pct", r.unique_pct},
                       {"responses", r.responses},
                       {"skipped_posts", r.skipped_posts}};
}

inline void from_json(const nlohmann::json& j, MetricsRow& r) {
    j.at("model").get_to(r.model);
    j.at("ppl_on_lm").get_to(r.ppl_on_lm);
    j.at("matching_pct").get_to(r.matching_pct);
    j.at("distinct_1").get_to(r.distinct_1);
    j.at("distinct_2").get_to(r.distinct_2);
    j.at("unique_pct").get_to(r.unique_pct);
    r.responses = j.value("responses", size_t{0});
    r.skipped_posts = j.value("skipped_posts", size_t{0});
}

// One row over an already-pooled response set (canonical content tokens).
template <class S>
MetricsRow compute_metrics_row(const std::string& model_name,
                               const std::vector<std::vector<int>>& pooled,
                               const RnnLmT<S>& lm, const std::set<std::vector<int>>& train_set,
                               size_t skipped_posts = 0) {
    if (pooled.empty())
        throw ContractError("metrics: no responses pooled for model " + model_name);
    MetricsRow row;
    row.model = model_name;
    row.ppl_on_lm = lm_perplexity(lm, pooled);
    row.matching_pct = 100.0 * matching_pct(pooled, train_set);
    row.distinct_1 = 100.0 * distinct_n(pooled, 1);
    row.distinct_2 = 100.0 * distinct_n(pooled, 2);
    row.unique_pct = 100.0 * unique_pct(pooled);
    row.responses = pooled.size();
    row.skipped_posts = skipped_posts;
    return row;
}

// Decode-and-rerank settings for evaluation runs. The latent-sample and
// beam-width defaults follow the reference setup: 50 z samples with beam 20
// for latent models, one beam of width 50 for the deterministic decoder.
struct EvalOptions {
    int top_k = 5;
    int n_z = 50;
    int beam = 20;
    int seq2seq_beam = 50;
    double lambda = 5.0;
    uint64_t seed = 1;
};

// Generates, reranks, and pools top-k responses for each model over the test
// posts, then fills one metrics row per model. A post whose generation or
// reranking throws is skipped and counted.
template <class S>
MetricsReport evaluate_models(const std::vector<Generator<S>*>& models,
                              const TcdNetworksT<S>& tcd, const RnnLmT<S>& lm,
                              const std::set<std::vector<int>>& train_set,
                              const std::vector<std::vector<int>>& test_posts,
                              const EvalOptions& opts) {
    if (models.empty()) throw ContractError("evaluate: no models");
    if (test_posts.empty()) throw ContractError("evaluate: no test posts");
    MetricsReport report;
    Rng rng(opts.seed);
    for (Generator<S>* model : models) {
        const ModelConfig& cfg = model->config();
        bool variational = cfg.kind != ModelKind::seq2seq;
        int beam = variational ? opts.beam : opts.seq2seq_beam;
        std::vector<std::vector<int>> pooled;
        size_t skipped = 0;
        for (const auto& post : test_posts) {
            try {
                auto factory = [&](int) { return model->make_stepper(post, rng); };
                auto candidates = generate_candidates<S>(factory, variational, opts.n_z, beam,
                                                         cfg.max_len, Vocab::bos_id,
                                                         Vocab::eos_id);
                auto match = [&](const std::vector<int>& resp) {
                    return tcd_match_prob(tcd, post, wrap_content(resp));
                };
                auto ranked = rerank_topk(candidates, match, opts.lambda, opts.top_k);
                for (const auto& r : ranked) pooled.push_back(content_tokens(r.tokens));
            } catch (const std::runtime_error&) {
                ++skipped;
            }
        }
        report.rows.push_back(
            compute_metrics_row(to_string(cfg.kind), pooled, lm, train_set, skipped));
    }
    return report;
}

// ---- emitters ----

// Fixed-width delimited table, one row per model.
inline std::string format_metrics_table(const MetricsReport& report) {
    std::ostringstream out;
    out << std::left << std::setw(14) << "model" << std::right << std::setw(12) << "ppl-on-lm"
        << std::setw(12) << "matching%" << std::setw(12) << "distinct-1" << std::setw(12)
        << "distinct-2" << std::setw(12) << "unique%" << std::setw(11) << "responses"
        << std::setw(9) << "skipped" << '\n';
    out << std::string(94, '-') << '\n';
    out << std::fixed << std::setprecision(2);
    for (const auto& r : report.rows) {
        out << std::left << std::setw(14) << r.model << std::right << std::setw(12) << r.ppl_on_lm
            << std::setw(12) << r.matching_pct << std::setw(12) << r.distinct_1 << std::setw(12)
            << r.distinct_2 << std::setw(12) << r.unique_pct << std::setw(11) << r.responses
            << std::setw(9) << r.skipped_posts << '\n';
    }
    return out.str();
}

// One JSON object per line, in row order.
inline std::string metrics_to_jsonl(const MetricsReport& report) {
    std::ostringstream out;
    for (const auto& r : report.rows) out << nlohmann::json(r).dump() << '\n';
    return out.str();
}

inline MetricsReport metrics_from_jsonl(const std::string& text) {
    MetricsReport report;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        report.rows.push_back(nlohmann::json::parse(line).get<MetricsRow>());
    }
    return report;
}

}  // namespace ctvae
