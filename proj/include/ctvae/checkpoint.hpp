#pragma once

// Versioned binary checkpoints: magic bytes, a u16 format version, a JSON
// header (kind, config, vocabulary, rng state, step counter), and a table of
// named little-endian f32 tensors, each with its own crc32 plus a whole-file
// crc32 trailer. Any single-byte corruption is detected on load.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctvae/errors.hpp"
#include "ctvae/metrics.hpp"
#include "ctvae/models.hpp"
#include "ctvae/optim.hpp"
#include "ctvae/param_store.hpp"
#include "ctvae/rerank.hpp"

namespace ctvae {

inline constexpr uint16_t kCheckpointVersion = 1;
inline constexpr const char* kTcdKind = "tcd";
inline constexpr const char* kLmKind = "lm";

struct RawTensorEntry {
    std::string name;
    uint32_t rows = 0;
    uint32_t cols = 0;
    std::vector<float> data;
};

struct RawCheckpoint {
    nlohmann::json header;
    std::vector<RawTensorEntry> tensors;
};

// Byte-level format, implemented in checkpoint.cpp. read_checkpoint_file
// validates magic, version, per-tensor checksums, and the file checksum.
void write_checkpoint_file(const std::string& path, const RawCheckpoint& ck);
RawCheckpoint read_checkpoint_file(const std::string& path);

struct CheckpointMeta {
    std::string kind;
    nlohmann::json config;
    std::vector<std::string> vocab_tokens;
    std::string rng_state;
    uint64_t step = 0;
    bool has_optimizer = false;
};

namespace detail {

inline CheckpointMeta meta_from_header(const nlohmann::json& h) {
    CheckpointMeta meta;
    h.at("kind").get_to(meta.kind);
    meta.config = h.at("config");
    h.at("vocab").get_to(meta.vocab_tokens);
    h.at("rng").get_to(meta.rng_state);
    h.at("step").get_to(meta.step);
    h.at("has_optimizer").get_to(meta.has_optimizer);
    return meta;
}

}  // namespace detail

// Header fields without the parameter table.
inline CheckpointMeta peek_checkpoint(const std::string& path) {
    return detail::meta_from_header(read_checkpoint_file(path).header);
}

// Parameters are stored as f32 regardless of the in-memory scalar type, per
// the format contract; a double store is rounded on save.
template <class S>
void save_checkpoint(const std::string& path, const std::string& kind,
                     const nlohmann::json& config, const ParamStoreT<S>& params,
                     const std::vector<std::string>& vocab_tokens, const std::string& rng_state,
                     uint64_t step, const AdamStateT<S>* opt = nullptr) {
    RawCheckpoint ck;
    ck.header = nlohmann::json{{"kind", kind},          {"config", config},
                               {"vocab", vocab_tokens}, {"rng", rng_state},
                               {"step", step},          {"has_optimizer", false}};
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& t = params.at(i);
        RawTensorEntry e;
        e.name = params.names()[i];
        e.rows = static_cast<uint32_t>(t.rows());
        e.cols = static_cast<uint32_t>(t.cols());
        e.data.reserve(t.numel());
        for (S v : t.values()) e.data.push_back(static_cast<float>(v));
        ck.tensors.push_back(std::move(e));
    }
    if (opt && opt->initialized()) {
        if (opt->m.size() != params.size())
            throw CheckpointError("checkpoint: optimizer tracks " +
                                  std::to_string(opt->m.size()) + " tensors but store has " +
                                  std::to_string(params.size()));
        ck.header["has_optimizer"] = true;
        ck.header["adam"] = nlohmann::json{{"t", opt->t},
                                           {"lr", opt->lr},
                                           {"beta1", opt->beta1},
                                           {"beta2", opt->beta2},
                                           {"eps", opt->eps}};
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& t = params.at(i);
            for (const char* side : {"opt.m:", "opt.v:"}) {
                const auto& buf = side[4] == 'm' ? opt->m[i] : opt->v[i];
                RawTensorEntry e;
                e.name = side + params.names()[i];
                e.rows = static_cast<uint32_t>(t.rows());
                e.cols = static_cast<uint32_t>(t.cols());
                e.data.reserve(buf.size());
                for (S v : buf) e.data.push_back(static_cast<float>(v));
                ck.tensors.push_back(std::move(e));
            }
        }
    }
    write_checkpoint_file(path, ck);
}

// Fills an already-constructed store (same names and shapes, normally built
// from the peeked config) and optionally the optimizer moments.
template <class S>
CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<S>& params,
                               AdamStateT<S>* opt = nullptr) {
    RawCheckpoint ck = read_checkpoint_file(path);
    CheckpointMeta meta = detail::meta_from_header(ck.header);

    std::map<std::string, const RawTensorEntry*> by_name;
    for (const auto& e : ck.tensors) {
        if (!by_name.emplace(e.name, &e).second)
            throw CheckpointError("checkpoint: duplicate tensor '" + e.name + "'");
    }
    auto take = [&](const std::string& name, int rows, int cols) -> const RawTensorEntry* {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw CheckpointError("checkpoint: tensor '" + name + "' missing");
        const RawTensorEntry* e = it->second;
        if (static_cast<int>(e->rows) != rows || static_cast<int>(e->cols) != cols)
            throw CheckpointError("checkpoint: tensor '" + name + "' has shape [" +
                                  std::to_string(e->rows) + ", " + std::to_string(e->cols) +
                                  "], store expects [" + std::to_string(rows) + ", " +
                                  std::to_string(cols) + "]");
        by_name.erase(it);
        return e;
    };

    for (size_t i = 0; i < params.size(); ++i) {
        auto& t = params.at(i);
        const RawTensorEntry* e = take(params.names()[i], t.rows(), t.cols());
        auto& vals = t.values();
        for (size_t j = 0; j < vals.size(); ++j) vals[j] = static_cast<S>(e->data[j]);
    }

    if (meta.has_optimizer && opt) {
        const auto& adam = ck.header.at("adam");
        adam.at("t").get_to(opt->t);
        adam.at("lr").get_to(opt->lr);
        adam.at("beta1").get_to(opt->beta1);
        adam.at("beta2").get_to(opt->beta2);
        adam.at("eps").get_to(opt->eps);
        opt->m.assign(params.size(), {});
        opt->v.assign(params.size(), {});
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& t = params.at(i);
            for (const char* side : {"opt.m:", "opt.v:"}) {
                const RawTensorEntry* e = take(side + params.names()[i], t.rows(), t.cols());
                auto& buf = side[4] == 'm' ? opt->m[i] : opt->v[i];
                buf.reserve(e->data.size());
                for (float v : e->data) buf.push_back(static_cast<S>(v));
            }
        }
    } else if (meta.has_optimizer) {
        // moments present but not requested: drop them
        for (size_t i = 0; i < params.size(); ++i) {
            take("opt.m:" + params.names()[i], params.at(i).rows(), params.at(i).cols());
            take("opt.v:" + params.names()[i], params.at(i).rows(), params.at(i).cols());
        }
    }
    if (!by_name.empty())
        throw CheckpointError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
    return meta;
}

// ---- typed wrappers ----

template <class S>
void save_generator_checkpoint(const std::string& path, Generator<S>& model, const Vocab& vocab,
                               const Rng& rng, uint64_t step,
                               const AdamStateT<S>* opt = nullptr) {
    save_checkpoint(path, to_string(model.kind()), nlohmann::json(model.config()),
                    model.params(), vocab.tokens(), rng.serialize(), step, opt);
}

// Rebuilds the generator from the stored config and fills its parameters.
template <class S>
std::unique_ptr<Generator<S>> load_generator_checkpoint(const std::string& path,
                                                        CheckpointMeta* meta_out = nullptr,
                                                        AdamStateT<S>* opt = nullptr) {
    CheckpointMeta meta = peek_checkpoint(path);
    if (meta.kind == kTcdKind || meta.kind == kLmKind)
        throw CheckpointError("checkpoint: kind '" + meta.kind + "' is not a generator");
    ModelConfig cfg = meta.config.get<ModelConfig>();
    if (to_string(cfg.kind) != meta.kind)
        throw CheckpointError("checkpoint: kind '" + meta.kind + "' does not match config kind '" +
                              to_string(cfg.kind) + "'");
    Rng init_rng(0);  // values are overwritten by the load
    auto model = Generator<S>::create(cfg, init_rng);
    meta = load_checkpoint(path, model->params(), opt);
    if (meta_out) *meta_out = meta;
    return model;
}

template <class S>
void save_tcd_checkpoint(const std::string& path, const TcdNetworksT<S>& net,
                         const ParamStoreT<S>& params, const Vocab& vocab, const Rng& rng,
                         uint64_t step, const AdamStateT<S>* opt = nullptr) {
    save_checkpoint(path, kTcdKind, nlohmann::json(net.cfg), params, vocab.tokens(),
                    rng.serialize(), step, opt);
}

template <class S>
TcdNetworksT<S> load_tcd_checkpoint(const std::string& path, ParamStoreT<S>& params,
                                    CheckpointMeta* meta_out = nullptr,
                                    AdamStateT<S>* opt = nullptr) {
    CheckpointMeta meta = peek_checkpoint(path);
    if (meta.kind != kTcdKind)
        throw CheckpointError("checkpoint: expected kind 'tcd', found '" + meta.kind + "'");
    TcdConfig cfg = meta.config.get<TcdConfig>();
    Rng init_rng(0);
    auto net = TcdNetworksT<S>::create(params, cfg, init_rng);
    meta = load_checkpoint(path, params, opt);
    if (meta_out) *meta_out = meta;
    return net;
}

template <class S>
void save_lm_checkpoint(const std::string& path, const RnnLmT<S>& net,
                        const ParamStoreT<S>& params, const Vocab& vocab, const Rng& rng,
                        uint64_t step, const AdamStateT<S>* opt = nullptr) {
    save_checkpoint(path, kLmKind, nlohmann::json(net.cfg), params, vocab.tokens(),
                    rng.serialize(), step, opt);
}

template <class S>
RnnLmT<S> load_lm_checkpoint(const std::string& path, ParamStoreT<S>& params,
                             CheckpointMeta* meta_out = nullptr, AdamStateT<S>* opt = nullptr) {
    CheckpointMeta meta = peek_checkpoint(path);
    if (meta.kind != kLmKind)
        throw CheckpointError("checkpoint: expected kind 'lm', found '" + meta.kind + "'");
    ModelConfig cfg = meta.config.get<ModelConfig>();
    Rng init_rng(0);
    auto net = RnnLmT<S>::create(params, cfg, init_rng);
    meta = load_checkpoint(path, params, opt);
    if (meta_out) *meta_out = meta;
    return net;
}

// Vocabulary restored from the header's token list.
inline Vocab vocab_from_meta(const CheckpointMeta& meta) {
    if (meta.vocab_tokens.empty())
        throw CheckpointError("checkpoint: no vocabulary stored");
    return Vocab(meta.vocab_tokens);
}

}  // namespace ctvae
