#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "ctvae/checkpoint.hpp"
#include "ctvae/decoding.hpp"
#include "ctvae/metrics.hpp"
#include "ctvae/models.hpp"
#include "ctvae/rerank.hpp"

namespace py = pybind11;
using namespace ctvae;

namespace {

using StringPairs = std::vector<std::pair<std::string, std::string>>;

Corpus corpus_from_pairs(const StringPairs& pairs) {
    Corpus c;
    for (const auto& [post, resp] : pairs) c.push({post, resp});
    return c;
}

StringPairs pairs_from_corpus(const Corpus& c) {
    StringPairs out;
    out.reserve(c.size());
    for (const auto& pr : c.pairs) out.emplace_back(pr.post, pr.response);
    return out;
}

std::vector<EncodedPair> encode_pairs(const StringPairs& pairs, const Vocab& vocab,
                                      int max_content) {
    Corpus c = corpus_from_pairs(pairs);
    return encode_corpus(c, vocab, max_content);
}

py::dict epoch_dict(const EpochStats& st) {
    py::dict d;
    d["recon_per_token"] = st.recon_per_token;
    d["kl_per_example"] = st.kl_per_example;
    d["kl_weight_last"] = st.kl_weight_last;
    d["steps"] = st.steps;
    d["examples"] = st.examples;
    d["tokens"] = st.tokens;
    return d;
}

// Generator plus everything a training or decoding session needs: the
// vocabulary the ids refer to, the optimizer moments, the global step that
// drives the KL schedule, and the training rng.
struct GeneratorModel {
    std::unique_ptr<Generator<float>> model;
    Vocab vocab;
    AdamState opt;
    uint64_t step = 0;
    Rng rng{1};

    GeneratorModel(const ModelConfig& config, const Vocab& vocab_in, uint64_t seed)
        : vocab(vocab_in), rng(seed) {
        ModelConfig cfg = config;
        cfg.vocab_size = vocab.size();
        cfg.validate();
        model = Generator<float>::create(cfg, rng);
    }

    explicit GeneratorModel(const std::string& path) {
        CheckpointMeta meta;
        model = load_generator_checkpoint<float>(path, &meta, &opt);
        vocab = vocab_from_meta(meta);
        step = meta.step;
        rng.deserialize(meta.rng_state);
    }

    std::vector<py::dict> train(const StringPairs& pairs, int epochs) {
        if (epochs < 1) throw ContractError("train: epochs must be >= 1");
        auto data = encode_pairs(pairs, vocab, model->config().max_len);
        std::vector<py::dict> log;
        for (int e = 0; e < epochs; ++e)
            log.push_back(epoch_dict(train_epoch(*model, data, opt, step, rng)));
        return log;
    }

    std::vector<py::dict> generate(const std::string& post, int n_z, int beam, uint64_t seed) {
        const ModelConfig& cfg = model->config();
        bool variational = cfg.kind != ModelKind::seq2seq;
        if (beam < 1) beam = variational ? 20 : 50;
        std::vector<int> post_ids = vocab.encode_wrapped(post, cfg.max_len);
        Rng gen_rng(seed);
        auto factory = [&](int) { return model->make_stepper(post_ids, gen_rng); };
        auto candidates = generate_candidates<float>(factory, variational, n_z, beam, cfg.max_len,
                                                     Vocab::bos_id, Vocab::eos_id);
        std::vector<py::dict> out;
        out.reserve(candidates.size());
        for (const auto& c : candidates) {
            py::dict d;
            d["ids"] = c.tokens;
            d["text"] = vocab.decode(c.tokens);
            d["loglik"] = c.loglik;
            d["z_index"] = c.z_index;
            out.push_back(std::move(d));
        }
        return out;
    }

    void save(const std::string& path) const {
        save_generator_checkpoint(path, *model, vocab, rng, step, &opt);
    }

    std::string kind() const { return to_string(model->config().kind); }
};

struct TcdModel {
    ParamStoreT<float> store;
    TcdNetworksT<float> net;
    Vocab vocab;
    AdamState opt;
    uint64_t step = 0;
    Rng rng{1};

    TcdModel(const TcdConfig& config, const Vocab& vocab_in, uint64_t seed)
        : vocab(vocab_in), rng(seed) {
        TcdConfig cfg = config;
        cfg.vocab_size = vocab.size();
        cfg.validate();
        net = TcdNetworksT<float>::create(store, cfg, rng);
    }

    explicit TcdModel(const std::string& path) {
        CheckpointMeta meta;
        net = load_tcd_checkpoint<float>(path, store, &meta, &opt);
        vocab = vocab_from_meta(meta);
        step = meta.step;
        rng.deserialize(meta.rng_state);
    }

    std::vector<py::dict> train(const StringPairs& pairs, int epochs) {
        if (epochs < 1) throw ContractError("train: epochs must be >= 1");
        auto data = encode_pairs(pairs, vocab, net.cfg.max_len);
        std::vector<py::dict> log;
        for (int e = 0; e < epochs; ++e) {
            TcdEpochStats st = train_tcd_epoch(net, store, data, opt, rng);
            step += st.steps;
            py::dict d;
            d["loss"] = st.loss;
            d["accuracy"] = st.accuracy;
            d["steps"] = st.steps;
            log.push_back(std::move(d));
        }
        return log;
    }

    double match_prob(const std::string& post, const std::string& response) const {
        return tcd_match_prob(net, vocab.encode_wrapped(post, net.cfg.max_len),
                              vocab.encode_wrapped(response, net.cfg.max_len));
    }

    void save(const std::string& path) const {
        save_tcd_checkpoint(path, net, store, vocab, rng, step, &opt);
    }
};

struct LmModel {
    ParamStoreT<float> store;
    RnnLmT<float> net;
    Vocab vocab;
    AdamState opt;
    uint64_t step = 0;
    Rng rng{1};

    LmModel(const ModelConfig& config, const Vocab& vocab_in, uint64_t seed)
        : vocab(vocab_in), rng(seed) {
        ModelConfig cfg = config;
        cfg.vocab_size = vocab.size();
        cfg.validate();
        net = RnnLmT<float>::create(store, cfg, rng);
    }

    explicit LmModel(const std::string& path) {
        CheckpointMeta meta;
        net = load_lm_checkpoint<float>(path, store, &meta, &opt);
        vocab = vocab_from_meta(meta);
        step = meta.step;
        rng.deserialize(meta.rng_state);
    }

    std::vector<py::dict> train(const StringPairs& pairs, int epochs) {
        if (epochs < 1) throw ContractError("train: epochs must be >= 1");
        auto data = encode_pairs(pairs, vocab, net.cfg.max_len);
        std::vector<py::dict> log;
        for (int e = 0; e < epochs; ++e) {
            LmEpochStats st = lm_train_epoch(net, store, data, opt, rng);
            step += st.steps;
            py::dict d;
            d["nll_per_token"] = st.nll_per_token;
            d["steps"] = st.steps;
            d["tokens"] = st.tokens;
            log.push_back(std::move(d));
        }
        return log;
    }

    // Scores raw texts; ids beyond max_len content tokens are truncated the
    // same way training data is.
    double perplexity(const std::vector<std::string>& texts) const {
        std::vector<std::vector<int>> sentences;
        sentences.reserve(texts.size());
        for (const auto& t : texts) {
            std::vector<int> ids = vocab.encode(t);
            if (static_cast<int>(ids.size()) > net.cfg.max_len) ids.resize(net.cfg.max_len);
            sentences.push_back(std::move(ids));
        }
        size_t tokens = 0;
        double nll = lm_total_nll(net, sentences, &tokens);
        return perplexity_from_nll(nll, tokens);
    }

    void save(const std::string& path) const {
        save_lm_checkpoint(path, net, store, vocab, rng, step, &opt);
    }
};

// Candidates as produced by GeneratorModel.generate, scored against the
// discriminator and cut to the top k.
std::vector<py::dict> rerank_with_tcd(const TcdModel& tcd, const std::string& post,
                                      const std::vector<py::dict>& candidates, double lambda,
                                      int top_k) {
    std::vector<Candidate> pool;
    pool.reserve(candidates.size());
    for (const auto& d : candidates) {
        Candidate c;
        c.tokens = d["ids"].cast<std::vector<int>>();
        c.loglik = d["loglik"].cast<double>();
        c.z_index = d.contains("z_index") ? d["z_index"].cast<int>() : -1;
        pool.push_back(std::move(c));
    }
    std::vector<int> post_ids = tcd.vocab.encode_wrapped(post, tcd.net.cfg.max_len);
    auto match = [&](const std::vector<int>& resp) {
        return tcd_match_prob(tcd.net, post_ids, wrap_content(resp));
    };
    auto ranked = rerank_topk(pool, match, lambda, top_k);
    std::vector<py::dict> out;
    out.reserve(ranked.size());
    for (const auto& r : ranked) {
        py::dict d;
        d["ids"] = r.tokens;
        d["text"] = tcd.vocab.decode(r.tokens);
        d["loglik"] = r.loglik;
        d["tcd_prob"] = r.tcd_prob;
        d["score"] = r.score;
        d["z_index"] = r.z_index;
        out.push_back(std::move(d));
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Variational conversation-response generators with TCD reranking";

    py::class_<AnnealSchedule> anneal(m, "AnnealSchedule");
    anneal.def(py::init<>())
        .def_readwrite("pretrain_steps", &AnnealSchedule::pretrain_steps)
        .def_readwrite("ramp_steps", &AnnealSchedule::ramp_steps)
        .def_readwrite("kld_period", &AnnealSchedule::kld_period)
        .def_property(
            "mode",
            [](const AnnealSchedule& s) {
                return s.mode == AnnealSchedule::Mode::combined ? "combined" : "separate";
            },
            [](AnnealSchedule& s, const std::string& v) {
                if (v == "combined")
                    s.mode = AnnealSchedule::Mode::combined;
                else if (v == "separate")
                    s.mode = AnnealSchedule::Mode::separate;
                else
                    throw ContractError("anneal: unknown mode " + v);
            });

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_property(
            "kind", [](const ModelConfig& c) { return to_string(c.kind); },
            [](ModelConfig& c, const std::string& v) { c.kind = model_kind_from_string(v); })
        .def_readwrite("embed_dim", &ModelConfig::embed_dim)
        .def_readwrite("hidden_dim", &ModelConfig::hidden_dim)
        .def_readwrite("latent_dim", &ModelConfig::latent_dim)
        .def_readwrite("vocab_size", &ModelConfig::vocab_size)
        .def_readwrite("batch_size", &ModelConfig::batch_size)
        .def_readwrite("lr", &ModelConfig::lr)
        .def_readwrite("max_len", &ModelConfig::max_len)
        .def_readwrite("init_std", &ModelConfig::init_std)
        .def_readwrite("anneal", &ModelConfig::anneal);

    py::class_<TcdConfig>(m, "TcdConfig")
        .def(py::init<>())
        .def_readwrite("embed_dim", &TcdConfig::embed_dim)
        .def_readwrite("hidden_dim", &TcdConfig::hidden_dim)
        .def_readwrite("vocab_size", &TcdConfig::vocab_size)
        .def_readwrite("batch_size", &TcdConfig::batch_size)
        .def_readwrite("lr", &TcdConfig::lr)
        .def_readwrite("max_len", &TcdConfig::max_len)
        .def_readwrite("init_std", &TcdConfig::init_std)
        .def_readwrite("lambda_", &TcdConfig::lambda);

    py::class_<Vocab>(m, "Vocab")
        .def(py::init<std::vector<std::string>>(), py::arg("tokens"))
        .def_property_readonly_static("pad_id", [](py::object) { return Vocab::pad_id; })
        .def_property_readonly_static("unk_id", [](py::object) { return Vocab::unk_id; })
        .def_property_readonly_static("bos_id", [](py::object) { return Vocab::bos_id; })
        .def_property_readonly_static("eos_id", [](py::object) { return Vocab::eos_id; })
        .def("__len__", &Vocab::size)
        .def("id", &Vocab::id, py::arg("token"))
        .def("token", &Vocab::token, py::arg("id"))
        .def("tokens", &Vocab::tokens)
        .def("encode", &Vocab::encode, py::arg("text"))
        .def("encode_wrapped", &Vocab::encode_wrapped, py::arg("text"), py::arg("max_content"))
        .def("decode", &Vocab::decode, py::arg("ids"));

    m.def("tokenize", &tokenize, py::arg("text"));

    m.def(
        "synthesize_corpus",
        [](int num_posts, uint64_t seed, bool topic_only) {
            SyntheticConfig cfg;
            cfg.num_posts = num_posts;
            cfg.seed = seed;
            cfg.topic_only = topic_only;
            return pairs_from_corpus(gen_synthetic(cfg));
        },
        py::arg("num_posts") = 200, py::arg("seed") = 1, py::arg("topic_only") = false);

    m.def(
        "split_pairs",
        [](const StringPairs& pairs, uint64_t seed, double train_frac, double valid_frac) {
            CorpusSplits s = split_corpus(corpus_from_pairs(pairs), seed, train_frac, valid_frac);
            return py::make_tuple(pairs_from_corpus(s.train), pairs_from_corpus(s.valid),
                                  pairs_from_corpus(s.test));
        },
        py::arg("pairs"), py::arg("seed"), py::arg("train_frac") = 0.90,
        py::arg("valid_frac") = 0.05);

    m.def(
        "build_vocab",
        [](const StringPairs& pairs, int max_size) {
            return build_vocab(corpus_from_pairs(pairs), max_size);
        },
        py::arg("pairs"), py::arg("max_size") = 35000);

    py::class_<GeneratorModel>(m, "GeneratorModel")
        .def(py::init<const ModelConfig&, const Vocab&, uint64_t>(), py::arg("config"),
             py::arg("vocab"), py::arg("seed") = 1)
        .def_static("load", [](const std::string& path) { return GeneratorModel(path); },
                    py::arg("path"))
        .def("train", &GeneratorModel::train, py::arg("pairs"), py::arg("epochs") = 1)
        .def("generate", &GeneratorModel::generate, py::arg("post"), py::arg("n_z") = 10,
             py::arg("beam") = 0, py::arg("seed") = 1)
        .def("save", &GeneratorModel::save, py::arg("path"))
        .def_property_readonly("kind", &GeneratorModel::kind)
        .def_property_readonly("step", [](const GeneratorModel& g) { return g.step; })
        .def_property_readonly("vocab", [](const GeneratorModel& g) { return g.vocab; })
        .def_property_readonly("config",
                               [](const GeneratorModel& g) { return g.model->config(); });

    py::class_<TcdModel>(m, "TcdModel")
        .def(py::init<const TcdConfig&, const Vocab&, uint64_t>(), py::arg("config"),
             py::arg("vocab"), py::arg("seed") = 1)
        .def_static("load", [](const std::string& path) { return TcdModel(path); },
                    py::arg("path"))
        .def("train", &TcdModel::train, py::arg("pairs"), py::arg("epochs") = 1)
        .def("match_prob", &TcdModel::match_prob, py::arg("post"), py::arg("response"))
        .def("save", &TcdModel::save, py::arg("path"))
        .def_property_readonly("vocab", [](const TcdModel& t) { return t.vocab; });

    py::class_<LmModel>(m, "LmModel")
        .def(py::init<const ModelConfig&, const Vocab&, uint64_t>(), py::arg("config"),
             py::arg("vocab"), py::arg("seed") = 1)
        .def_static("load", [](const std::string& path) { return LmModel(path); },
                    py::arg("path"))
        .def("train", &LmModel::train, py::arg("pairs"), py::arg("epochs") = 1)
        .def("perplexity", &LmModel::perplexity, py::arg("texts"))
        .def("save", &LmModel::save, py::arg("path"))
        .def_property_readonly("vocab", [](const LmModel& l) { return l.vocab; });

    m.def("rerank", &rerank_with_tcd, py::arg("tcd"), py::arg("post"), py::arg("candidates"),
          py::arg("lambda_") = 5.0, py::arg("top_k") = 5);

    m.def("rank_score", &rank_score, py::arg("loglik"), py::arg("tcd_prob"), py::arg("lambda_"));
    m.def("distinct_n", &distinct_n, py::arg("responses"), py::arg("n"));
    m.def("unique_pct", &unique_pct, py::arg("responses"));
    m.def(
        "matching_pct",
        [](const std::vector<std::vector<int>>& responses,
           const std::vector<std::vector<int>>& train_responses) {
            std::set<std::vector<int>> train_set(train_responses.begin(), train_responses.end());
            return matching_pct(responses, train_set);
        },
        py::arg("responses"), py::arg("train_responses"));
}
