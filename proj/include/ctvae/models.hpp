#pragma once

#include <json.hpp>
#include <memory>
#include <string>
#include <vector>

#include "ctvae/data.hpp"
#include "ctvae/decoding.hpp"
#include "ctvae/errors.hpp"
#include "ctvae/layers.hpp"
#include "ctvae/optim.hpp"
#include "ctvae/variational.hpp"

namespace ctvae {

enum class ModelKind { seq2seq, cvae, cvae_simple, ctvae };

inline std::string to_string(ModelKind k) {
    switch (k) {
        case ModelKind::seq2seq: return "seq2seq";
        case ModelKind::cvae: return "cvae";
        case ModelKind::cvae_simple: return "cvae-simple";
        case ModelKind::ctvae: return "ctvae";
    }
    throw ContractError("model kind: bad enum value");
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "seq2seq") return ModelKind::seq2seq;
    if (s == "cvae") return ModelKind::cvae;
    if (s == "cvae-simple") return ModelKind::cvae_simple;
    if (s == "ctvae") return ModelKind::ctvae;
    throw ContractError("model kind: unknown name " + s);
}

struct ModelConfig {
    ModelKind kind = ModelKind::ctvae;
    int embed_dim = 300;
    int hidden_dim = 300;
    int latent_dim = 100;
    int vocab_size = 35000;
    int batch_size = 128;
    double lr = 5e-4;
    int max_len = 30;  // content tokens; BOS/EOS ride on top
    double init_std = 0.02;
    AnnealSchedule anneal;

    void validate() const {
        if (embed_dim < 1 || hidden_dim < 1 || latent_dim < 1)
            throw ContractError("config: dims must be positive");
        if (vocab_size < 5) throw ContractError("config: vocab_size must exceed the specials");
        if (batch_size < 1) throw ContractError("config: batch_size must be >= 1");
        if (max_len < 1) throw ContractError("config: max_len must be >= 1");
        if (lr <= 0) throw ContractError("config: lr must be positive");
        anneal.validate();
    }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"kind", to_string(c.kind)},
                       {"embed_dim", c.embed_dim},
                       {"hidden_dim", c.hidden_dim},
                       {"latent_dim", c.latent_dim},
                       {"vocab_size", c.vocab_size},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"max_len", c.max_len},
                       {"init_std", c.init_std},
                       {"anneal",
                        {{"pretrain_steps", c.anneal.pretrain_steps},
                         {"ramp_steps", c.anneal.ramp_steps},
                         {"kld_period", c.anneal.kld_period},
                         {"mode",
                          c.anneal.mode == AnnealSchedule::Mode::combined ? "combined"
                                                                          : "separate"}}}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.kind = model_kind_from_string(j.at("kind").get<std::string>());
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("hidden_dim").get_to(c.hidden_dim);
    j.at("latent_dim").get_to(c.latent_dim);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("batch_size").get_to(c.batch_size);
    j.at("lr").get_to(c.lr);
    j.at("max_len").get_to(c.max_len);
    j.at("init_std").get_to(c.init_std);
    const auto& a = j.at("anneal");
    a.at("pretrain_steps").get_to(c.anneal.pretrain_steps);
    a.at("ramp_steps").get_to(c.anneal.ramp_steps);
    a.at("kld_period").get_to(c.anneal.kld_period);
    std::string mode = a.at("mode").get<std::string>();
    if (mode == "combined")
        c.anneal.mode = AnnealSchedule::Mode::combined;
    else if (mode == "separate")
        c.anneal.mode = AnnealSchedule::Mode::separate;
    else
        throw ContractError("config: unknown anneal mode " + mode);
}

// Wrapped id sequences for one post-response pair.
struct EncodedPair {
    std::vector<int> post;
    std::vector<int> resp;
};

inline std::vector<EncodedPair> encode_corpus(const Corpus& corpus, const Vocab& vocab,
                                              int max_content) {
    std::vector<EncodedPair> out;
    out.reserve(corpus.size());
    for (const auto& pr : corpus.pairs)
        out.push_back({vocab.encode_wrapped(pr.post, max_content),
                       vocab.encode_wrapped(pr.response, max_content)});
    return out;
}

// Teacher-forcing view of a batch: the full response for recognition
// networks, the response minus its last token as decoder input, and the
// response shifted by one as step-major targets. resp_in's masks double as
// the prediction weights since input position t is live exactly when target
// t exists.
struct TrainBatch {
    PaddedBatch post;
    PaddedBatch resp_full;
    PaddedBatch resp_in;
    std::vector<std::vector<int>> targets;  // [T_in][B]
    size_t target_tokens = 0;
    int B = 0;
};

inline TrainBatch make_train_batch(const std::vector<EncodedPair>& data,
                                   const std::vector<size_t>& idxs) {
    if (idxs.empty()) throw ContractError("train batch: empty index list");
    std::vector<std::vector<int>> posts, resps, resp_ins;
    for (size_t i : idxs) {
        const auto& p = data.at(i);
        if (p.resp.size() < 2) throw ContractError("train batch: response shorter than BOS+EOS");
        posts.push_back(p.post);
        resps.push_back(p.resp);
        resp_ins.push_back(std::vector<int>(p.resp.begin(), p.resp.end() - 1));
    }
    TrainBatch b;
    b.B = static_cast<int>(idxs.size());
    b.post = PaddedBatch::from_rows(posts, Vocab::pad_id);
    b.resp_full = PaddedBatch::from_rows(resps, Vocab::pad_id);
    b.resp_in = PaddedBatch::from_rows(resp_ins, Vocab::pad_id);
    b.targets.assign(b.resp_in.T, std::vector<int>(b.B, Vocab::pad_id));
    for (int t = 0; t < b.resp_in.T; ++t)
        for (int bi = 0; bi < b.B; ++bi)
            if (t + 1 < static_cast<int>(resps[bi].size())) {
                b.targets[t][bi] = resps[bi][t + 1];
                ++b.target_tokens;
            }
    return b;
}

// Post encoding shared by every model: run the encoder and keep both the
// per-step states (for attention) and their masked mean (the condition x).
template <class S>
struct EncodedCondition {
    std::vector<TensorT<S>> states;
    TensorT<S> x;
};

template <class S>
EncodedCondition<S> encode_condition(const EmbeddingTableT<S>& emb,
                                     const LstmCellParamsT<S>& cell, const PaddedBatch& post) {
    EncodedCondition<S> out;
    out.states = lstm_encode(emb, cell, post);
    out.x = mean_pool(out.states, post);
    return out;
}

template <class S>
struct LossPartsT {
    TensorT<S> recon;  // scalar: batch-mean summed token cross-entropy
    TensorT<S> kl;     // scalar: batch-mean per-example KL; undefined for seq2seq
    bool has_kl = false;
    double recon_sum = 0.0;  // summed token NLL across the batch
    double kl_sum = 0.0;     // summed per-example KL across the batch
    size_t tokens = 0;
    size_t examples = 0;
};

using LossParts = LossPartsT<float>;

namespace detail {

// Unrolled teacher-forced decoder: h0 = x, c0 = 0, input at each step is
// [emb(prev token); extra] (extra is the static conditioning row, absent for
// attention decoders). Returns the batch-mean summed cross-entropy.
template <class S>
TensorT<S> teacher_forced_ce(const EmbeddingTableT<S>& emb, const LstmCellParamsT<S>& cell,
                             const TensorT<S>& w_out, const TensorT<S>& b_out,
                             const TensorT<S>& h0, const TensorT<S>* extra,
                             const TrainBatch& batch) {
    TensorT<S> h = h0;
    TensorT<S> c = TensorT<S>::zeros(batch.B, cell.hidden_dim);
    TensorT<S> total;
    const double inv_b = 1.0 / batch.B;
    for (int t = 0; t < batch.resp_in.T; ++t) {
        TensorT<S> x = emb.lookup(batch.resp_in.steps[t]);
        TensorT<S> input = extra ? concat<S>({x, *extra}, 1) : x;
        TensorT<S> m = mask_column<S>(batch.resp_in.masks[t]);
        std::tie(h, c) = cell.masked_step(input, h, c, m);
        TensorT<S> logits = add(matmul(h, w_out), b_out);
        std::vector<double> weights(batch.B);
        for (int bi = 0; bi < batch.B; ++bi) weights[bi] = batch.resp_in.masks[t][bi] * inv_b;
        TensorT<S> ce = softmax_cross_entropy(logits, batch.targets[t], weights);
        total = t == 0 ? ce : add(total, ce);
    }
    return total;
}

// Inner-product attention over encoder states for the current decoder state.
template <class S>
TensorT<S> attention_context(const TensorT<S>& h, const std::vector<TensorT<S>>& enc_states,
                             const TensorT<S>& penalty) {
    std::vector<TensorT<S>> scores;
    scores.reserve(enc_states.size());
    for (const auto& st : enc_states) scores.push_back(sum_axis(mul(h, st), 1));
    TensorT<S> alpha = softmax_rows(add(concat<S>(scores, 1), penalty));
    TensorT<S> ctx;
    for (size_t l = 0; l < enc_states.size(); ++l) {
        TensorT<S> term = mul(enc_states[l], slice(alpha, 1, static_cast<int>(l), 1));
        ctx = l == 0 ? term : add(ctx, term);
    }
    return ctx;
}

template <class S>
GaussianParamsT<S> split_gaussian(const TensorT<S>& out, int latent) {
    return GaussianParamsT<S>(slice(out, 1, 0, latent), slice(out, 1, latent, latent));
}

}  // namespace detail

// ---- seq2seq with attention ----

template <class S>
struct Seq2SeqNetworksT {
    ModelConfig cfg;
    // encoder and decoder each own their embedding table
    EmbeddingTableT<S> enc_emb;
    EmbeddingTableT<S> dec_emb;
    LstmCellParamsT<S> enc_cell;
    LstmCellParamsT<S> dec_cell;  // input: embedding only
    TensorT<S> w_out;             // [2H, V]: decoder state and context, concatenated
    TensorT<S> b_out;

    static Seq2SeqNetworksT create(ParamStoreT<S>& store, const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        Seq2SeqNetworksT n;
        n.cfg = cfg;
        n.enc_emb = EmbeddingTableT<S>::create(store, "enc_emb", cfg.vocab_size, cfg.embed_dim,
                                               rng, cfg.init_std);
        n.dec_emb = EmbeddingTableT<S>::create(store, "dec_emb", cfg.vocab_size, cfg.embed_dim,
                                               rng, cfg.init_std);
        n.enc_cell = LstmCellParamsT<S>::create(store, "enc", cfg.embed_dim, cfg.hidden_dim, rng,
                                                cfg.init_std);
        n.dec_cell = LstmCellParamsT<S>::create(store, "dec", cfg.embed_dim, cfg.hidden_dim, rng,
                                                cfg.init_std);
        n.w_out = store.add(
            "out.w", TensorT<S>::randn(rng, 2 * cfg.hidden_dim, cfg.vocab_size, cfg.init_std));
        n.b_out = store.add("out.b", TensorT<S>::zeros(1, cfg.vocab_size));
        return n;
    }
};

template <class S>
LossPartsT<S> seq2seq_loss(const Seq2SeqNetworksT<S>& net, const TrainBatch& batch) {
    auto cond = encode_condition(net.enc_emb, net.enc_cell, batch.post);
    TensorT<S> penalty = detail::attention_penalty<S>(batch.post);

    TensorT<S> h = cond.x;
    TensorT<S> c = TensorT<S>::zeros(batch.B, net.dec_cell.hidden_dim);
    TensorT<S> total;
    const double inv_b = 1.0 / batch.B;
    for (int t = 0; t < batch.resp_in.T; ++t) {
        TensorT<S> x = net.dec_emb.lookup(batch.resp_in.steps[t]);
        TensorT<S> m = mask_column<S>(batch.resp_in.masks[t]);
        std::tie(h, c) = net.dec_cell.masked_step(x, h, c, m);
        TensorT<S> ctx = detail::attention_context(h, cond.states, penalty);
        TensorT<S> logits = add(matmul(concat<S>({h, ctx}, 1), net.w_out), net.b_out);
        std::vector<double> weights(batch.B);
        for (int bi = 0; bi < batch.B; ++bi) weights[bi] = batch.resp_in.masks[t][bi] * inv_b;
        TensorT<S> ce = softmax_cross_entropy(logits, batch.targets[t], weights);
        total = t == 0 ? ce : add(total, ce);
    }

    LossPartsT<S> out;
    out.recon = total;
    out.has_kl = false;
    out.recon_sum = static_cast<double>(total.item()) * batch.B;
    out.tokens = batch.target_tokens;
    out.examples = batch.B;
    return out;
}

// ---- cvae (full prior network or fixed standard-normal prior) ----

template <class S>
struct CvaeNetworksT {
    ModelConfig cfg;
    bool simple_prior = false;  // fix p(z|x) = N(0, I)
    // per-encoder and decoder embedding tables
    EmbeddingTableT<S> post_emb;
    EmbeddingTableT<S> resp_emb;
    EmbeddingTableT<S> dec_emb;
    LstmCellParamsT<S> post_cell;
    LstmCellParamsT<S> resp_cell;
    MlpParamsT<S> recognition;  // [x; y] -> (mu, logvar)
    MlpParamsT<S> prior;        // x -> (mu, logvar); unused when simple_prior
    LstmCellParamsT<S> dec_cell;
    TensorT<S> w_out;  // [H, V]
    TensorT<S> b_out;

    static CvaeNetworksT create(ParamStoreT<S>& store, const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        CvaeNetworksT n;
        n.cfg = cfg;
        n.simple_prior = cfg.kind == ModelKind::cvae_simple;
        n.post_emb = EmbeddingTableT<S>::create(store, "post_emb", cfg.vocab_size, cfg.embed_dim,
                                                rng, cfg.init_std);
        n.resp_emb = EmbeddingTableT<S>::create(store, "resp_emb", cfg.vocab_size, cfg.embed_dim,
                                                rng, cfg.init_std);
        n.dec_emb = EmbeddingTableT<S>::create(store, "dec_emb", cfg.vocab_size, cfg.embed_dim,
                                               rng, cfg.init_std);
        n.post_cell = LstmCellParamsT<S>::create(store, "post_enc", cfg.embed_dim, cfg.hidden_dim,
                                                 rng, cfg.init_std);
        n.resp_cell = LstmCellParamsT<S>::create(store, "resp_enc", cfg.embed_dim, cfg.hidden_dim,
                                                 rng, cfg.init_std);
        n.recognition = MlpParamsT<S>::create(
            store, "recognition", {2 * cfg.hidden_dim, cfg.hidden_dim, 2 * cfg.latent_dim},
            Activation::softplus_act, Activation::linear, rng, cfg.init_std);
        if (!n.simple_prior)
            n.prior = MlpParamsT<S>::create(
                store, "prior", {cfg.hidden_dim, cfg.hidden_dim, 2 * cfg.latent_dim},
                Activation::softplus_act, Activation::linear, rng, cfg.init_std);
        n.dec_cell = LstmCellParamsT<S>::create(
            store, "dec", cfg.embed_dim + cfg.hidden_dim + cfg.latent_dim, cfg.hidden_dim, rng,
            cfg.init_std);
        n.w_out = store.add("out.w",
                            TensorT<S>::randn(rng, cfg.hidden_dim, cfg.vocab_size, cfg.init_std));
        n.b_out = store.add("out.b", TensorT<S>::zeros(1, cfg.vocab_size));
        return n;
    }
};

// Evidence lower bound with the sign flipped for minimization:
//   loss = E_q[-log p(y|x,z)] + w * KL(q(z|x,y) || p(z|x))
// one reparameterized z draw per example.
template <class S>
LossPartsT<S> cvae_loss(const CvaeNetworksT<S>& net, const TrainBatch& batch,
                        const TensorT<S>& eps) {
    auto cond = encode_condition(net.post_emb, net.post_cell, batch.post);
    auto resp_states = lstm_encode(net.resp_emb, net.resp_cell, batch.resp_full);
    TensorT<S> y = mean_pool(resp_states, batch.resp_full);

    auto q = detail::split_gaussian(mlp_forward(net.recognition, concat<S>({cond.x, y}, 1)),
                                    net.cfg.latent_dim);
    TensorT<S> kl_rows;
    if (net.simple_prior) {
        kl_rows = kl_vs_standard(q);
    } else {
        auto p = detail::split_gaussian(mlp_forward(net.prior, cond.x), net.cfg.latent_dim);
        kl_rows = kl_pair(q, p);
    }

    TensorT<S> z = reparameterize(q, eps);
    TensorT<S> enc = concat<S>({cond.x, z}, 1);
    TensorT<S> recon = detail::teacher_forced_ce(net.dec_emb, net.dec_cell, net.w_out, net.b_out,
                                                 cond.x, &enc, batch);

    LossPartsT<S> out;
    out.recon = recon;
    out.kl = mean_axis(kl_rows, 0);
    out.has_kl = true;
    out.recon_sum = static_cast<double>(recon.item()) * batch.B;
    out.kl_sum = static_cast<double>(out.kl.item()) * batch.B;
    out.tokens = batch.target_tokens;
    out.examples = batch.B;
    return out;
}

// ---- ctvae ----

template <class S>
struct CtvaeNetworksT {
    ModelConfig cfg;
    // per-encoder and decoder embedding tables
    EmbeddingTableT<S> post_emb;
    EmbeddingTableT<S> resp_emb;
    EmbeddingTableT<S> dec_emb;
    LstmCellParamsT<S> post_cell;
    LstmCellParamsT<S> resp_cell;
    MlpParamsT<S> recognition;  // y -> (mu, logvar) over t
    MlpParamsT<S> transform;    // [x; t] -> z
    LstmCellParamsT<S> dec_cell;
    TensorT<S> w_out;
    TensorT<S> b_out;

    static CtvaeNetworksT create(ParamStoreT<S>& store, const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        CtvaeNetworksT n;
        n.cfg = cfg;
        n.post_emb = EmbeddingTableT<S>::create(store, "post_emb", cfg.vocab_size, cfg.embed_dim,
                                                rng, cfg.init_std);
        n.resp_emb = EmbeddingTableT<S>::create(store, "resp_emb", cfg.vocab_size, cfg.embed_dim,
                                                rng, cfg.init_std);
        n.dec_emb = EmbeddingTableT<S>::create(store, "dec_emb", cfg.vocab_size, cfg.embed_dim,
                                               rng, cfg.init_std);
        n.post_cell = LstmCellParamsT<S>::create(store, "post_enc", cfg.embed_dim, cfg.hidden_dim,
                                                 rng, cfg.init_std);
        n.resp_cell = LstmCellParamsT<S>::create(store, "resp_enc", cfg.embed_dim, cfg.hidden_dim,
                                                 rng, cfg.init_std);
        n.recognition = MlpParamsT<S>::create(
            store, "recognition", {cfg.hidden_dim, cfg.hidden_dim, 2 * cfg.latent_dim},
            Activation::softplus_act, Activation::linear, rng, cfg.init_std);
        n.transform = MlpParamsT<S>::create(
            store, "transform",
            {cfg.hidden_dim + cfg.latent_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.latent_dim},
            Activation::tanh_act, Activation::linear, rng, cfg.init_std);
        n.dec_cell = LstmCellParamsT<S>::create(
            store, "dec", cfg.embed_dim + cfg.hidden_dim + cfg.latent_dim, cfg.hidden_dim, rng,
            cfg.init_std);
        n.w_out = store.add("out.w",
                            TensorT<S>::randn(rng, cfg.hidden_dim, cfg.vocab_size, cfg.init_std));
        n.b_out = store.add("out.b", TensorT<S>::zeros(1, cfg.vocab_size));
        return n;
    }
};

// Same bound, but the latent t is recognized from the response alone against
// a fixed N(0, I) prior, and z is a deterministic transformation of [x; t]:
//   loss = E_q[-log p(y | x, transform(x, t))] + w * KL(q(t|y) || N(0, I))
template <class S>
LossPartsT<S> ctvae_loss(const CtvaeNetworksT<S>& net, const TrainBatch& batch,
                         const TensorT<S>& eps) {
    auto cond = encode_condition(net.post_emb, net.post_cell, batch.post);
    auto resp_states = lstm_encode(net.resp_emb, net.resp_cell, batch.resp_full);
    TensorT<S> y = mean_pool(resp_states, batch.resp_full);

    auto q = detail::split_gaussian(mlp_forward(net.recognition, y), net.cfg.latent_dim);
    TensorT<S> kl_rows = kl_vs_standard(q);

    TensorT<S> t = reparameterize(q, eps);
    TensorT<S> z = mlp_forward(net.transform, concat<S>({cond.x, t}, 1));
    TensorT<S> enc = concat<S>({cond.x, z}, 1);
    TensorT<S> recon = detail::teacher_forced_ce(net.dec_emb, net.dec_cell, net.w_out, net.b_out,
                                                 cond.x, &enc, batch);

    LossPartsT<S> out;
    out.recon = recon;
    out.kl = mean_axis(kl_rows, 0);
    out.has_kl = true;
    out.recon_sum = static_cast<double>(recon.item()) * batch.B;
    out.kl_sum = static_cast<double>(out.kl.item()) * batch.B;
    out.tokens = batch.target_tokens;
    out.examples = batch.B;
    return out;
}

// ---- steppers ----

// Decoder whose input is [emb(prev); enc] with a fixed conditioning row enc.
// Shared by all latent-variable models; enc bakes in the z draw.
template <class S>
class ConditionedStepper : public BeamStepper<S> {
  public:
    ConditionedStepper(const EmbeddingTableT<S>& emb, const LstmCellParamsT<S>& cell,
                       const TensorT<S>& w_out, const TensorT<S>& b_out, const TensorT<S>& x,
                       const TensorT<S>& enc)
        : emb_(emb), cell_(cell), w_out_(w_out), b_out_(b_out), enc_(enc) {
        NoGradGuard guard;
        h_ = x;
        c_ = TensorT<S>::zeros(1, cell.hidden_dim);
    }

    int vocab() const override { return w_out_.cols(); }
    int rows() const override { return h_.rows(); }

    TensorT<S> step(const std::vector<int>& prev) override {
        NoGradGuard guard;
        if (static_cast<int>(prev.size()) != rows())
            throw ContractError("stepper: got " + std::to_string(prev.size()) + " tokens for " +
                                std::to_string(rows()) + " rows");
        TensorT<S> x = emb_.lookup(prev);
        TensorT<S> enc_rows = rows() == 1 ? enc_ : broadcast_rows(enc_, rows());
        std::tie(h_, c_) = cell_.step(concat<S>({x, enc_rows}, 1), h_, c_);
        return log_softmax_rows(add(matmul(h_, w_out_), b_out_));
    }

    void reorder(const std::vector<int>& sel) override {
        NoGradGuard guard;
        h_ = gather_rows(h_, sel);
        c_ = gather_rows(c_, sel);
    }

  private:
    const EmbeddingTableT<S>& emb_;
    const LstmCellParamsT<S>& cell_;
    const TensorT<S>& w_out_;
    const TensorT<S>& b_out_;
    TensorT<S> enc_;  // [1, H + latent]
    TensorT<S> h_, c_;
};

// Attention decoder over the encoded post.
template <class S>
class AttentionStepper : public BeamStepper<S> {
  public:
    AttentionStepper(const EmbeddingTableT<S>& emb, const LstmCellParamsT<S>& cell,
                     const TensorT<S>& w_out, const TensorT<S>& b_out,
                     EncodedCondition<S> cond)
        : emb_(emb), cell_(cell), w_out_(w_out), b_out_(b_out), cond_(std::move(cond)) {
        NoGradGuard guard;
        h_ = cond_.x;
        c_ = TensorT<S>::zeros(1, cell.hidden_dim);
    }

    int vocab() const override { return w_out_.cols(); }
    int rows() const override { return h_.rows(); }

    TensorT<S> step(const std::vector<int>& prev) override {
        NoGradGuard guard;
        if (static_cast<int>(prev.size()) != rows())
            throw ContractError("stepper: got " + std::to_string(prev.size()) + " tokens for " +
                                std::to_string(rows()) + " rows");
        TensorT<S> x = emb_.lookup(prev);
        std::tie(h_, c_) = cell_.step(x, h_, c_);
        std::vector<TensorT<S>> states;
        states.reserve(cond_.states.size());
        for (const auto& st : cond_.states)
            states.push_back(rows() == 1 ? st : broadcast_rows(st, rows()));
        TensorT<S> penalty = TensorT<S>::zeros(rows(), static_cast<int>(states.size()));
        TensorT<S> ctx = detail::attention_context(h_, states, penalty);
        return log_softmax_rows(add(matmul(concat<S>({h_, ctx}, 1), w_out_), b_out_));
    }

    void reorder(const std::vector<int>& sel) override {
        NoGradGuard guard;
        h_ = gather_rows(h_, sel);
        c_ = gather_rows(c_, sel);
    }

  private:
    const EmbeddingTableT<S>& emb_;
    const LstmCellParamsT<S>& cell_;
    const TensorT<S>& w_out_;
    const TensorT<S>& b_out_;
    EncodedCondition<S> cond_;  // single-row encoding of one post
    TensorT<S> h_, c_;
};

// ---- model front end ----

// Owns the parameter store and dispatches loss/stepper construction for one
// model kind. The training RNG is passed in so callers control determinism.
template <class S>
class Generator {
  public:
    virtual ~Generator() = default;
    virtual ModelKind kind() const = 0;
    virtual const ModelConfig& config() const = 0;
    virtual ParamStoreT<S>& params() = 0;

    // One reparameterization draw per example, taken from rng.
    virtual LossPartsT<S> loss(const TrainBatch& batch, Rng& rng) = 0;

    // Stepper for one post; latent models consume one latent draw from rng.
    virtual std::unique_ptr<BeamStepper<S>> make_stepper(const std::vector<int>& post,
                                                         Rng& rng) = 0;

    static std::unique_ptr<Generator<S>> create(const ModelConfig& cfg, Rng& init_rng);
};

template <class S>
class Seq2SeqGenerator : public Generator<S> {
  public:
    Seq2SeqGenerator(const ModelConfig& cfg, Rng& rng)
        : net_(Seq2SeqNetworksT<S>::create(store_, cfg, rng)) {}

    ModelKind kind() const override { return ModelKind::seq2seq; }
    const ModelConfig& config() const override { return net_.cfg; }
    ParamStoreT<S>& params() override { return store_; }

    LossPartsT<S> loss(const TrainBatch& batch, Rng&) override {
        return seq2seq_loss(net_, batch);
    }

    std::unique_ptr<BeamStepper<S>> make_stepper(const std::vector<int>& post, Rng&) override {
        NoGradGuard guard;
        auto cond = encode_condition(net_.enc_emb, net_.enc_cell,
                                     PaddedBatch::from_rows({post}, Vocab::pad_id));
        return std::make_unique<AttentionStepper<S>>(net_.dec_emb, net_.dec_cell, net_.w_out,
                                                     net_.b_out, std::move(cond));
    }

    Seq2SeqNetworksT<S>& networks() { return net_; }

  private:
    ParamStoreT<S> store_;
    Seq2SeqNetworksT<S> net_;
};

template <class S>
class CvaeGenerator : public Generator<S> {
  public:
    CvaeGenerator(const ModelConfig& cfg, Rng& rng)
        : net_(CvaeNetworksT<S>::create(store_, cfg, rng)) {}

    ModelKind kind() const override {
        return net_.simple_prior ? ModelKind::cvae_simple : ModelKind::cvae;
    }
    const ModelConfig& config() const override { return net_.cfg; }
    ParamStoreT<S>& params() override { return store_; }

    LossPartsT<S> loss(const TrainBatch& batch, Rng& rng) override {
        TensorT<S> eps = TensorT<S>::randn(rng, batch.B, net_.cfg.latent_dim, 1.0);
        return cvae_loss(net_, batch, eps);
    }

    std::unique_ptr<BeamStepper<S>> make_stepper(const std::vector<int>& post,
                                                 Rng& rng) override {
        NoGradGuard guard;
        auto cond = encode_condition(net_.post_emb, net_.post_cell,
                                     PaddedBatch::from_rows({post}, Vocab::pad_id));
        TensorT<S> eps = TensorT<S>::randn(rng, 1, net_.cfg.latent_dim, 1.0);
        TensorT<S> z;
        if (net_.simple_prior) {
            z = eps;  // N(0, I) prior sample
        } else {
            auto p = detail::split_gaussian(mlp_forward(net_.prior, cond.x), net_.cfg.latent_dim);
            z = reparameterize(p, eps);
        }
        TensorT<S> enc = concat<S>({cond.x, z}, 1);
        return std::make_unique<ConditionedStepper<S>>(net_.dec_emb, net_.dec_cell, net_.w_out,
                                                       net_.b_out, cond.x, enc);
    }

    CvaeNetworksT<S>& networks() { return net_; }

  private:
    ParamStoreT<S> store_;
    CvaeNetworksT<S> net_;
};

template <class S>
class CtvaeGenerator : public Generator<S> {
  public:
    CtvaeGenerator(const ModelConfig& cfg, Rng& rng)
        : net_(CtvaeNetworksT<S>::create(store_, cfg, rng)) {}

    ModelKind kind() const override { return ModelKind::ctvae; }
    const ModelConfig& config() const override { return net_.cfg; }
    ParamStoreT<S>& params() override { return store_; }

    LossPartsT<S> loss(const TrainBatch& batch, Rng& rng) override {
        TensorT<S> eps = TensorT<S>::randn(rng, batch.B, net_.cfg.latent_dim, 1.0);
        return ctvae_loss(net_, batch, eps);
    }

    std::unique_ptr<BeamStepper<S>> make_stepper(const std::vector<int>& post,
                                                 Rng& rng) override {
        NoGradGuard guard;
        auto cond = encode_condition(net_.post_emb, net_.post_cell,
                                     PaddedBatch::from_rows({post}, Vocab::pad_id));
        // t from the N(0, I) prior, then the deterministic transformation
        TensorT<S> t = TensorT<S>::randn(rng, 1, net_.cfg.latent_dim, 1.0);
        TensorT<S> z = mlp_forward(net_.transform, concat<S>({cond.x, t}, 1));
        TensorT<S> enc = concat<S>({cond.x, z}, 1);
        return std::make_unique<ConditionedStepper<S>>(net_.dec_emb, net_.dec_cell, net_.w_out,
                                                       net_.b_out, cond.x, enc);
    }

    CtvaeNetworksT<S>& networks() { return net_; }

  private:
    ParamStoreT<S> store_;
    CtvaeNetworksT<S> net_;
};

template <class S>
std::unique_ptr<Generator<S>> Generator<S>::create(const ModelConfig& cfg, Rng& init_rng) {
    switch (cfg.kind) {
        case ModelKind::seq2seq: return std::make_unique<Seq2SeqGenerator<S>>(cfg, init_rng);
        case ModelKind::cvae:
        case ModelKind::cvae_simple: return std::make_unique<CvaeGenerator<S>>(cfg, init_rng);
        case ModelKind::ctvae: return std::make_unique<CtvaeGenerator<S>>(cfg, init_rng);
    }
    throw ContractError("generator: bad model kind");
}

// ---- training ----

struct EpochStats {
    double recon_per_token = 0.0;
    double kl_per_example = 0.0;
    double kl_weight_last = 0.0;
    size_t steps = 0;
    size_t examples = 0;
    size_t tokens = 0;
};

// One pass over the data in seeded-shuffle order. The global step counter
// drives the KL schedule and keeps ticking across epochs. In combined mode
// active steps optimize recon + w * KL; in separate mode they optimize the
// KL term alone and every other step optimizes the reconstruction alone.
template <class S>
EpochStats train_epoch(Generator<S>& model, const std::vector<EncodedPair>& data,
                       AdamStateT<S>& opt, uint64_t& global_step, Rng& rng) {
    if (data.empty()) throw ContractError("train: empty dataset");
    const ModelConfig& cfg = model.config();
    const AnnealSchedule& anneal = cfg.anneal;
    opt.lr = cfg.lr;

    std::vector<size_t> order(data.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order.begin(), order.end());

    EpochStats stats;
    double kl_weighted_examples = 0.0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
        size_t end = std::min(order.size(), start + cfg.batch_size);
        std::vector<size_t> idxs(order.begin() + start, order.begin() + end);
        TrainBatch batch = make_train_batch(data, idxs);

        LossPartsT<S> parts = model.loss(batch, rng);
        double w = kl_weight(anneal, global_step);
        TensorT<S> total;
        if (!parts.has_kl) {
            total = parts.recon;
        } else if (anneal.mode == AnnealSchedule::Mode::separate &&
                   kl_step_active(anneal, global_step)) {
            total = scale(parts.kl, kl_ramp(anneal, global_step));
        } else if (anneal.mode == AnnealSchedule::Mode::separate) {
            total = parts.recon;
        } else {
            total = w > 0.0 ? add(parts.recon, scale(parts.kl, w)) : parts.recon;
        }

        double value = static_cast<double>(total.item());
        if (!std::isfinite(value))
            throw TrainingDiverged("train: non-finite loss at step " +
                                       std::to_string(global_step),
                                   "");

        model.params().zero_grad();
        backward(total);
        adam_step(model.params(), opt);

        stats.steps += 1;
        stats.examples += parts.examples;
        stats.tokens += parts.tokens;
        stats.recon_per_token += parts.recon_sum;
        stats.kl_per_example += parts.kl_sum;
        stats.kl_weight_last = w;
        kl_weighted_examples += parts.examples;
        ++global_step;
    }
    if (stats.tokens > 0) stats.recon_per_token /= static_cast<double>(stats.tokens);
    if (kl_weighted_examples > 0) stats.kl_per_example /= kl_weighted_examples;
    return stats;
}

}  // namespace ctvae
