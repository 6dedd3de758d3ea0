#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/param_store.hpp"
#include "ctvae/rng.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

// Step-major view of a batch of padded token sequences. steps[t][b] is the
// token at time t for row b (PAD where t >= len), masks[t][b] is 1 while the
// row is still live at step t.
struct PaddedBatch {
    int B = 0;
    int T = 0;
    std::vector<std::vector<int>> steps;
    std::vector<std::vector<double>> masks;
    std::vector<int> lens;

    static PaddedBatch from_rows(const std::vector<std::vector<int>>& rows, int pad_id) {
        if (rows.empty()) throw ContractError("padded batch: empty row list");
        PaddedBatch pb;
        pb.B = static_cast<int>(rows.size());
        for (const auto& r : rows) {
            if (r.empty()) throw ContractError("padded batch: empty sequence");
            pb.lens.push_back(static_cast<int>(r.size()));
            pb.T = std::max(pb.T, static_cast<int>(r.size()));
        }
        pb.steps.assign(pb.T, std::vector<int>(pb.B, pad_id));
        pb.masks.assign(pb.T, std::vector<double>(pb.B, 0.0));
        for (int b = 0; b < pb.B; ++b)
            for (int t = 0; t < pb.lens[b]; ++t) {
                pb.steps[t][b] = rows[b][t];
                pb.masks[t][b] = 1.0;
            }
        return pb;
    }
};

template <class S>
TensorT<S> mask_column(const std::vector<double>& mask) {
    std::vector<S> v(mask.begin(), mask.end());
    return TensorT<S>::from(std::move(v), static_cast<int>(mask.size()), 1);
}

// Token embedding matrix, rows indexed by vocabulary id.
template <class S>
struct EmbeddingTableT {
    TensorT<S> table;  // [V, d]

    static EmbeddingTableT create(ParamStoreT<S>& store, const std::string& prefix, int vocab,
                                  int dim, Rng& rng, double init_std) {
        EmbeddingTableT e;
        e.table = store.add(prefix + ".table", TensorT<S>::randn(rng, vocab, dim, init_std));
        return e;
    }

    TensorT<S> lookup(const std::vector<int>& ids) const {
        return embedding_gather(table, ids);
    }

    int vocab() const { return table.rows(); }
    int dim() const { return table.cols(); }
};

// Single LSTM cell. The 4H gate axis is laid out [input | forget | cell | output];
// the forget block of the bias starts at 1 so early training does not flush state.
template <class S>
struct LstmCellParamsT {
    TensorT<S> w_ih;  // [input_dim, 4H]
    TensorT<S> w_hh;  // [H, 4H]
    TensorT<S> b;     // [1, 4H]
    int input_dim = 0;
    int hidden_dim = 0;

    static LstmCellParamsT create(ParamStoreT<S>& store, const std::string& prefix, int input_dim,
                                  int hidden_dim, Rng& rng, double init_std) {
        LstmCellParamsT c;
        c.input_dim = input_dim;
        c.hidden_dim = hidden_dim;
        c.w_ih = store.add(prefix + ".w_ih",
                           TensorT<S>::randn(rng, input_dim, 4 * hidden_dim, init_std));
        c.w_hh = store.add(prefix + ".w_hh",
                           TensorT<S>::randn(rng, hidden_dim, 4 * hidden_dim, init_std));
        TensorT<S> bias = TensorT<S>::zeros(1, 4 * hidden_dim);
        for (int j = hidden_dim; j < 2 * hidden_dim; ++j) bias.set(0, j, S(1));
        c.b = store.add(prefix + ".b", std::move(bias));
        return c;
    }

    std::pair<TensorT<S>, TensorT<S>> step(const TensorT<S>& x, const TensorT<S>& h,
                                           const TensorT<S>& c) const {
        if (x.cols() != input_dim)
            throw ShapeError("lstm step: input " + shape_str(x.shape()) + " expects cols " +
                             std::to_string(input_dim));
        const int H = hidden_dim;
        TensorT<S> gates = add(add(matmul(x, w_ih), matmul(h, w_hh)), b);
        TensorT<S> i = sigmoid(slice(gates, 1, 0, H));
        TensorT<S> f = sigmoid(slice(gates, 1, H, H));
        TensorT<S> g = tanh(slice(gates, 1, 2 * H, H));
        TensorT<S> o = sigmoid(slice(gates, 1, 3 * H, H));
        TensorT<S> c_new = add(mul(f, c), mul(i, g));
        TensorT<S> h_new = mul(o, tanh(c_new));
        return {h_new, c_new};
    }

    // Rows with mask 0 keep their previous state, so padded steps are inert.
    std::pair<TensorT<S>, TensorT<S>> masked_step(const TensorT<S>& x, const TensorT<S>& h,
                                                  const TensorT<S>& c,
                                                  const TensorT<S>& mask) const {
        auto [h_new, c_new] = step(x, h, c);
        TensorT<S> keep = add_scalar(scale(mask, -1.0), 1.0);
        TensorT<S> h_out = add(mul(mask, h_new), mul(keep, h));
        TensorT<S> c_out = add(mul(mask, c_new), mul(keep, c));
        return {h_out, c_out};
    }

    std::pair<TensorT<S>, TensorT<S>> zero_state(int batch) const {
        return {TensorT<S>::zeros(batch, hidden_dim), TensorT<S>::zeros(batch, hidden_dim)};
    }
};

enum class Activation { linear, tanh_act, sigmoid_act, softplus_act };

template <class S>
TensorT<S> apply_activation(const TensorT<S>& x, Activation act) {
    switch (act) {
        case Activation::linear: return x;
        case Activation::tanh_act: return tanh(x);
        case Activation::sigmoid_act: return sigmoid(x);
        case Activation::softplus_act: return softplus(x);
    }
    throw ContractError("mlp: unknown activation");
}

// Fully connected stack. dims = {in, h1, ..., out}; the hidden activation is
// applied after every layer except the last, which uses out_act.
template <class S>
struct MlpParamsT {
    std::vector<TensorT<S>> weights;  // [in_i, out_i]
    std::vector<TensorT<S>> biases;   // [1, out_i]
    Activation hidden_act = Activation::tanh_act;
    Activation out_act = Activation::linear;

    static MlpParamsT create(ParamStoreT<S>& store, const std::string& prefix,
                             const std::vector<int>& dims, Activation hidden_act,
                             Activation out_act, Rng& rng, double init_std) {
        if (dims.size() < 2) throw ContractError("mlp: needs at least [in, out] dims");
        MlpParamsT m;
        m.hidden_act = hidden_act;
        m.out_act = out_act;
        for (size_t l = 0; l + 1 < dims.size(); ++l) {
            m.weights.push_back(store.add(prefix + ".w" + std::to_string(l),
                                          TensorT<S>::randn(rng, dims[l], dims[l + 1], init_std)));
            m.biases.push_back(
                store.add(prefix + ".b" + std::to_string(l), TensorT<S>::zeros(1, dims[l + 1])));
        }
        return m;
    }

    int in_dim() const { return weights.front().rows(); }
    int out_dim() const { return weights.back().cols(); }
};

template <class S>
TensorT<S> mlp_forward(const MlpParamsT<S>& mlp, const TensorT<S>& x) {
    TensorT<S> h = x;
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        h = add(matmul(h, mlp.weights[l]), mlp.biases[l]);
        bool last = (l + 1 == mlp.weights.size());
        h = apply_activation(h, last ? mlp.out_act : mlp.hidden_act);
    }
    return h;
}

// Run an LSTM over a padded batch. Returns the [B,H] state after every step;
// because updates are masked, states.back() already holds each row's final
// state regardless of its length.
template <class S>
std::vector<TensorT<S>> lstm_encode(const EmbeddingTableT<S>& emb, const LstmCellParamsT<S>& cell,
                                    const PaddedBatch& batch) {
    auto [h, c] = cell.zero_state(batch.B);
    std::vector<TensorT<S>> states;
    states.reserve(batch.T);
    for (int t = 0; t < batch.T; ++t) {
        TensorT<S> x = emb.lookup(batch.steps[t]);
        TensorT<S> m = mask_column<S>(batch.masks[t]);
        std::tie(h, c) = cell.masked_step(x, h, c, m);
        states.push_back(h);
    }
    return states;
}

// Masked mean over time of per-step [B,H] states: sum of live states divided
// by each row's true length.
template <class S>
TensorT<S> mean_pool(const std::vector<TensorT<S>>& states, const PaddedBatch& batch) {
    if (states.size() != static_cast<size_t>(batch.T))
        throw ShapeError("mean_pool: " + std::to_string(states.size()) + " states for " +
                         std::to_string(batch.T) + " steps");
    TensorT<S> acc;
    for (int t = 0; t < batch.T; ++t) {
        TensorT<S> term = mul(states[t], mask_column<S>(batch.masks[t]));
        acc = t == 0 ? term : add(acc, term);
    }
    std::vector<S> inv(batch.B);
    for (int b = 0; b < batch.B; ++b) {
        if (batch.lens[b] <= 0) throw ContractError("mean_pool: zero-length row");
        inv[b] = S(1) / static_cast<S>(batch.lens[b]);
    }
    return mul(acc, TensorT<S>::from(std::move(inv), batch.B, 1));
}

namespace detail {

// Additive -1e9 penalty rows ([B,T]) that blank out padded positions before
// an attention softmax over the batch's steps.
template <class S>
TensorT<S> attention_penalty(const PaddedBatch& batch) {
    std::vector<S> pen(static_cast<size_t>(batch.B) * batch.T);
    for (int t = 0; t < batch.T; ++t)
        for (int b = 0; b < batch.B; ++b)
            pen[static_cast<size_t>(b) * batch.T + t] = batch.masks[t][b] > 0.5 ? S(0) : S(-1e9);
    return TensorT<S>::from(std::move(pen), batch.B, batch.T);
}

}  // namespace detail

// One decoder step: feed the concatenated input through the cell. Output
// projection stays with the caller, which owns the logit layer.
template <class S>
std::pair<TensorT<S>, TensorT<S>> lstm_decode_step(const LstmCellParamsT<S>& cell,
                                                   const TensorT<S>& input, const TensorT<S>& h,
                                                   const TensorT<S>& c) {
    return cell.step(input, h, c);
}

}  // namespace ctvae
