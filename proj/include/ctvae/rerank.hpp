#pragma once

#include <json.hpp>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ctvae/data.hpp"
#include "ctvae/decoding.hpp"
#include "ctvae/errors.hpp"
#include "ctvae/layers.hpp"
#include "ctvae/optim.hpp"

namespace ctvae {

struct TcdConfig {
    int embed_dim = 300;
    int hidden_dim = 300;
    int vocab_size = 35000;
    int batch_size = 128;
    double lr = 5e-4;
    int max_len = 30;
    double init_std = 0.02;
    double lambda = 5.0;  // weight on ln(p_match) when scoring candidates

    void validate() const {
        if (embed_dim < 1 || hidden_dim < 1) throw ContractError("tcd config: bad dims");
        if (vocab_size < 5) throw ContractError("tcd config: vocab_size too small");
        if (batch_size < 1) throw ContractError("tcd config: bad batch_size");
        if (lr <= 0) throw ContractError("tcd config: lr must be positive");
        if (max_len < 1) throw ContractError("tcd config: bad max_len");
        if (lambda < 0) throw ContractError("tcd config: lambda must be >= 0");
    }
};

inline void to_json(nlohmann::json& j, const TcdConfig& c) {
    j = nlohmann::json{{"embed_dim", c.embed_dim},   {"hidden_dim", c.hidden_dim},
                       {"vocab_size", c.vocab_size}, {"batch_size", c.batch_size},
                       {"lr", c.lr},                 {"max_len", c.max_len},
                       {"init_std", c.init_std},     {"lambda", c.lambda}};
}

inline void from_json(const nlohmann::json& j, TcdConfig& c) {
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("hidden_dim").get_to(c.hidden_dim);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr").get_to(c.lr);
    j.at("max_len").get_to(c.max_len);
    j.at("init_std").get_to(c.init_std);
    j.at("lambda").get_to(c.lambda);
}

// Coherence discriminator: encodes post and response with single-direction
// LSTMs, aligns them with inner-product cross attention, enhances each
// position with [v; aligned; v - aligned; v * aligned], composes with a
// shared LSTM, and classifies mean+max pooled features as match/mismatch.
// Class 1 means the response belongs to the post.
template <class S>
struct TcdNetworksT {
    TcdConfig cfg;
    EmbeddingTableT<S> emb;
    LstmCellParamsT<S> post_cell;
    LstmCellParamsT<S> resp_cell;
    LstmCellParamsT<S> compose_cell;  // shared across both sides
    MlpParamsT<S> head;               // [4H] pooled features -> 2 logits

    static TcdNetworksT create(ParamStoreT<S>& store, const TcdConfig& cfg, Rng& rng) {
        cfg.validate();
        TcdNetworksT n;
        n.cfg = cfg;
        n.emb = EmbeddingTableT<S>::create(store, "emb", cfg.vocab_size, cfg.embed_dim, rng,
                                           cfg.init_std);
        n.post_cell = LstmCellParamsT<S>::create(store, "post_enc", cfg.embed_dim,
                                                 cfg.hidden_dim, rng, cfg.init_std);
        n.resp_cell = LstmCellParamsT<S>::create(store, "resp_enc", cfg.embed_dim,
                                                 cfg.hidden_dim, rng, cfg.init_std);
        n.compose_cell = LstmCellParamsT<S>::create(store, "compose", 4 * cfg.hidden_dim,
                                                    cfg.hidden_dim, rng, cfg.init_std);
        n.head = MlpParamsT<S>::create(store, "head", {4 * cfg.hidden_dim, cfg.hidden_dim, 2},
                                       Activation::tanh_act, Activation::linear, rng,
                                       cfg.init_std);
        return n;
    }
};

namespace detail {

// Soft alignment of `own` positions against `other` positions using the
// pairwise inner products in `scores` ([T_own][T_other] of [B,1] tensors).
template <class S>
std::vector<TensorT<S>> align_side(const std::vector<std::vector<TensorT<S>>>& scores,
                                   const std::vector<TensorT<S>>& other_states,
                                   const TensorT<S>& other_penalty, bool transpose) {
    const size_t T_own = transpose ? scores[0].size() : scores.size();
    const size_t T_other = transpose ? scores.size() : scores[0].size();
    std::vector<TensorT<S>> aligned;
    aligned.reserve(T_own);
    for (size_t i = 0; i < T_own; ++i) {
        std::vector<TensorT<S>> row;
        row.reserve(T_other);
        for (size_t j = 0; j < T_other; ++j)
            row.push_back(transpose ? scores[j][i] : scores[i][j]);
        TensorT<S> alpha = softmax_rows(add(concat<S>(row, 1), other_penalty));
        TensorT<S> ctx;
        for (size_t j = 0; j < T_other; ++j) {
            TensorT<S> term = mul(other_states[j], slice(alpha, 1, static_cast<int>(j), 1));
            ctx = j == 0 ? term : add(ctx, term);
        }
        aligned.push_back(std::move(ctx));
    }
    return aligned;
}

// [v; a; v-a; v*a] stacked along features.
template <class S>
TensorT<S> enhance(const TensorT<S>& v, const TensorT<S>& a) {
    return concat<S>({v, a, sub(v, a), mul(v, a)}, 1);
}

// Composition LSTM over enhanced features, then masked mean and masked max
// over time, concatenated.
template <class S>
TensorT<S> compose_and_pool(const LstmCellParamsT<S>& cell,
                            const std::vector<TensorT<S>>& feats, const PaddedBatch& batch) {
    auto [h, c] = cell.zero_state(batch.B);
    std::vector<TensorT<S>> states;
    states.reserve(feats.size());
    for (int t = 0; t < batch.T; ++t) {
        TensorT<S> m = mask_column<S>(batch.masks[t]);
        std::tie(h, c) = cell.masked_step(feats[t], h, c, m);
        states.push_back(h);
    }
    TensorT<S> mean = mean_pool(states, batch);
    TensorT<S> mx;
    for (int t = 0; t < batch.T; ++t) {
        TensorT<S> m = mask_column<S>(batch.masks[t]);
        TensorT<S> keep = add_scalar(scale(m, -1.0), 1.0);
        TensorT<S> masked = add(mul(states[t], m), scale(keep, -1e9));
        mx = t == 0 ? masked : maximum(mx, masked);
    }
    return concat<S>({mean, mx}, 1);
}

}  // namespace detail

// Match/mismatch logits [B,2] for aligned post-response batches.
template <class S>
TensorT<S> tcd_forward(const TcdNetworksT<S>& net, const PaddedBatch& post,
                       const PaddedBatch& resp) {
    if (post.B != resp.B)
        throw ShapeError("tcd: post batch " + std::to_string(post.B) + " vs resp batch " +
                         std::to_string(resp.B));
    auto a_states = lstm_encode(net.emb, net.post_cell, post);
    auto b_states = lstm_encode(net.emb, net.resp_cell, resp);

    // pairwise inner products, one [B,1] scalar column per (i, j)
    std::vector<std::vector<TensorT<S>>> scores(a_states.size());
    for (size_t i = 0; i < a_states.size(); ++i) {
        scores[i].reserve(b_states.size());
        for (size_t j = 0; j < b_states.size(); ++j)
            scores[i].push_back(sum_axis(mul(a_states[i], b_states[j]), 1));
    }

    TensorT<S> post_pen = detail::attention_penalty<S>(post);
    TensorT<S> resp_pen = detail::attention_penalty<S>(resp);
    auto a_aligned = detail::align_side(scores, b_states, resp_pen, false);
    auto b_aligned = detail::align_side(scores, a_states, post_pen, true);

    std::vector<TensorT<S>> a_feats, b_feats;
    for (size_t i = 0; i < a_states.size(); ++i)
        a_feats.push_back(detail::enhance(a_states[i], a_aligned[i]));
    for (size_t j = 0; j < b_states.size(); ++j)
        b_feats.push_back(detail::enhance(b_states[j], b_aligned[j]));

    TensorT<S> va = detail::compose_and_pool(net.compose_cell, a_feats, post);
    TensorT<S> vb = detail::compose_and_pool(net.compose_cell, b_feats, resp);
    // combine sides by elementwise interaction so the head sees a fixed width
    TensorT<S> features = concat<S>({mul(va, vb), sub(va, vb)}, 1);
    return mlp_forward(net.head, features);
}

template <class S>
struct TcdLossOutT {
    TensorT<S> loss;  // batch-mean binary cross-entropy
    size_t correct = 0;
    size_t examples = 0;
};

template <class S>
TcdLossOutT<S> tcd_loss(const TcdNetworksT<S>& net, const PaddedBatch& post,
                        const PaddedBatch& resp, const std::vector<int>& labels) {
    if (static_cast<int>(labels.size()) != post.B)
        throw ShapeError("tcd loss: " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(post.B));
    for (int l : labels)
        if (l != 0 && l != 1) throw ContractError("tcd loss: labels must be 0 or 1");
    TensorT<S> logits = tcd_forward(net, post, resp);
    std::vector<double> weights(post.B, 1.0 / post.B);
    TcdLossOutT<S> out;
    out.loss = softmax_cross_entropy(logits, labels, weights);
    out.examples = post.B;
    for (int b = 0; b < post.B; ++b) {
        int pred = logits.at(b, 1) > logits.at(b, 0) ? 1 : 0;
        if (pred == labels[b]) ++out.correct;
    }
    return out;
}

// Probability that the response matches the post, for one pair.
template <class S>
double tcd_match_prob(const TcdNetworksT<S>& net, const std::vector<int>& post_ids,
                      const std::vector<int>& resp_ids) {
    NoGradGuard guard;
    auto post = PaddedBatch::from_rows({post_ids}, Vocab::pad_id);
    auto resp = PaddedBatch::from_rows({resp_ids}, Vocab::pad_id);
    TensorT<S> logits = tcd_forward(net, post, resp);
    double a = static_cast<double>(logits.at(0, 0));
    double b = static_cast<double>(logits.at(0, 1));
    double mx = std::max(a, b);
    double pb = std::exp(b - mx);
    return pb / (std::exp(a - mx) + pb);
}

// Mismatched training pairs: shuffle the response assignment until no
// response stays with its own post. One negative per positive.
inline std::vector<size_t> make_negatives(size_t n, Rng& rng) {
    if (n < 2) throw ContractError("negatives: need at least two pairs to mismatch");
    std::vector<size_t> perm(n);
    for (size_t i = 0; i < n; ++i) perm[i] = i;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        rng.shuffle(perm.begin(), perm.end());
        bool derangement = true;
        for (size_t i = 0; i < n; ++i)
            if (perm[i] == i) {
                derangement = false;
                break;
            }
        if (derangement) return perm;
    }
    throw ContractError("negatives: no derangement found");
}

struct TcdEpochStats {
    double loss = 0.0;
    double accuracy = 0.0;
    size_t steps = 0;
};

// One epoch over positive pairs; each batch is doubled with shuffled
// negatives before the update.
template <class S>
TcdEpochStats train_tcd_epoch(TcdNetworksT<S>& net, ParamStoreT<S>& store,
                              const std::vector<EncodedPair>& data, AdamStateT<S>& opt,
                              Rng& rng) {
    if (data.size() < 2) throw ContractError("tcd train: need at least two pairs");
    opt.lr = net.cfg.lr;
    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    TcdEpochStats stats;
    size_t correct = 0, seen = 0;
    double loss_sum = 0.0;
    for (size_t start = 0; start < order.size(); start += net.cfg.batch_size) {
        size_t end = std::min(order.size(), start + net.cfg.batch_size);
        std::vector<size_t> idxs(order.begin() + start, order.begin() + end);
        if (idxs.size() < 2) continue;  // a lone trailing pair cannot be deranged

        auto neg = make_negatives(idxs.size(), rng);
        std::vector<std::vector<int>> posts, resps;
        std::vector<int> labels;
        for (size_t i : idxs) {
            posts.push_back(data[i].post);
            resps.push_back(data[i].resp);
            labels.push_back(1);
        }
        for (size_t k = 0; k < idxs.size(); ++k) {
            posts.push_back(data[idxs[k]].post);
            resps.push_back(data[idxs[neg[k]]].resp);
            labels.push_back(0);
        }

        auto post_b = PaddedBatch::from_rows(posts, Vocab::pad_id);
        auto resp_b = PaddedBatch::from_rows(resps, Vocab::pad_id);
        auto out = tcd_loss(net, post_b, resp_b, labels);
        double value = static_cast<double>(out.loss.item());
        if (!std::isfinite(value))
            throw TrainingDiverged("tcd train: non-finite loss", "");

        store.zero_grad();
        backward(out.loss);
        adam_step(store, opt);

        loss_sum += value;
        correct += out.correct;
        seen += out.examples;
        ++stats.steps;
    }
    if (stats.steps > 0) stats.loss = loss_sum / stats.steps;
    if (seen > 0) stats.accuracy = static_cast<double>(correct) / seen;
    return stats;
}

// Combined candidate score: generator log likelihood plus lambda times the
// log of the discriminator's match probability.
inline double rank_score(double loglik, double tcd_prob, double lambda) {
    if (!(tcd_prob > 0.0) || tcd_prob > 1.0)
        throw ContractError("rank_score: match probability must lie in (0, 1]");
    return loglik + lambda * std::log(tcd_prob);
}

struct RankedResponse {
    std::vector<int> tokens;
    double loglik = 0.0;
    double tcd_prob = 0.0;
    double score = 0.0;
    int z_index = -1;
};

// Deduplicates candidates by token sequence (keeping the best-scoring copy),
// scores each against the discriminator, and returns the top k.
inline std::vector<RankedResponse> rerank_topk(
    const std::vector<Candidate>& candidates,
    const std::function<double(const std::vector<int>&)>& match_prob, double lambda, int k) {
    if (k < 1) throw ContractError("rerank: k must be >= 1");
    if (candidates.empty()) throw ContractError("rerank: empty candidate pool");
    std::map<std::vector<int>, const Candidate*> best;
    for (const auto& c : candidates) {
        auto [it, fresh] = best.emplace(c.tokens, &c);
        // identical tokens share the discriminator term, so the higher
        // loglik wins the dedup
        if (!fresh && c.loglik > it->second->loglik) it->second = &c;
    }
    std::vector<RankedResponse> ranked;
    ranked.reserve(best.size());
    for (const auto& [tokens, cand] : best) {
        double p = match_prob(tokens);
        RankedResponse r;
        r.tokens = tokens;
        r.loglik = cand->loglik;
        r.tcd_prob = p;
        r.score = rank_score(cand->loglik, p, lambda);
        r.z_index = cand->z_index;
        ranked.push_back(std::move(r));
    }
    std::sort(ranked.begin(), ranked.end(), [](const RankedResponse& a, const RankedResponse& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tokens < b.tokens;
    });
    if (static_cast<int>(ranked.size()) > k) ranked.resize(k);
    return ranked;
}

}  // namespace ctvae
