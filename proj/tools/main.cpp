// Command-line driver for the conversation-response toolkit: synthetic data
// generation, model/TCD/LM training, candidate generation, TCD reranking,
// metric evaluation, and a finite-difference gradient audit. Every command
// writes its artifacts plus a run manifest; outputs are deterministic for a
// fixed seed and config (the manifest's wall time is the one exception).
//
// Exit codes: 0 ok, 1 usage error, 2 runtime failure.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <zlib.h>

#include "ctvae/checkpoint.hpp"
#include "ctvae/data.hpp"
#include "ctvae/decoding.hpp"
#include "ctvae/gradcheck.hpp"
#include "ctvae/metrics.hpp"
#include "ctvae/models.hpp"
#include "ctvae/rerank.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctvae;

namespace {

constexpr const char* kCliVersion = "v1.0.0";

class Stopwatch {
  public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

  private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string config_hash(const json& config) {
    std::string dump = config.dump();
    uint32_t crc = static_cast<uint32_t>(
        ::crc32(0L, reinterpret_cast<const unsigned char*>(dump.data()),
                static_cast<uInt>(dump.size())));
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%08x", crc);
    return buf;
}

void ensure_parent_dir(const std::string& path) {
    fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_text_file(const std::string& path, const std::string& text) {
    ensure_parent_dir(path);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open '" + path + "' for writing");
    f << text;
    if (!f) throw DataError("write to '" + path + "' failed");
}

void write_manifest(const std::string& path, const std::string& command, const json& config,
                    uint64_t seed, double wall_seconds, const std::vector<std::string>& artifacts) {
    json m = {{"command", command},
              {"version", kCliVersion},
              {"seed", seed},
              {"config", config},
              {"config_hash", config_hash(config)},
              {"wall_time_seconds", wall_seconds},
              {"artifacts", artifacts}};
    write_text_file(path, m.dump(2) + "\n");
}

json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    try {
        return json::parse(f);
    } catch (const json::exception& e) {
        throw DataError("'" + path + "': " + e.what());
    }
}

// Defaults serialized, then user keys recursively merged on top, so partial
// config files work and the full strict parse still runs.
template <class Config>
Config merged_config(const Config& defaults, const std::string& config_path) {
    json effective = defaults;
    if (!config_path.empty()) effective.update(read_json_file(config_path), true);
    return effective.get<Config>();
}

std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::vector<json> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            records.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw DataError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return records;
}

// Distinct posts in first-appearance order; a TSV corpus lists one pair per
// line so repeated posts are the norm.
std::vector<std::string> unique_posts(const Corpus& corpus, size_t limit) {
    std::vector<std::string> posts;
    std::unordered_set<std::string> seen;
    for (const auto& pr : corpus.pairs) {
        if (limit > 0 && posts.size() >= limit) break;
        if (seen.insert(pr.post).second) posts.push_back(pr.post);
    }
    return posts;
}

// ---- gen-data ----

struct GenDataArgs {
    std::string out;
    uint64_t seed = 1;
    int num_posts = 200;
    bool topic_only = false;
    double train_frac = 0.90;
    double valid_frac = 0.05;
};

void run_gen_data(const GenDataArgs& a) {
    Stopwatch watch;
    SyntheticConfig scfg;
    scfg.num_posts = a.num_posts;
    scfg.seed = a.seed;
    scfg.topic_only = a.topic_only;
    Corpus corpus = gen_synthetic(scfg);
    CorpusSplits splits = split_corpus(corpus, a.seed, a.train_frac, a.valid_frac);

    fs::create_directories(a.out);
    std::vector<std::string> artifacts;
    for (auto [name, part] : {std::pair<const char*, const Corpus*>{"train.tsv", &splits.train},
                              {"valid.tsv", &splits.valid},
                              {"test.tsv", &splits.test}}) {
        std::string path = (fs::path(a.out) / name).string();
        save_corpus(path, *part);
        artifacts.push_back(path);
        std::cout << name << ": " << part->size() << " pairs, " << part->num_posts()
                  << " posts\n";
    }

    json config = {{"num_posts", a.num_posts},
                   {"topic_only", a.topic_only},
                   {"train_frac", a.train_frac},
                   {"valid_frac", a.valid_frac}};
    write_manifest((fs::path(a.out) / "manifest.json").string(), "gen-data", config, a.seed,
                   watch.seconds(), artifacts);
}

// ---- train ----

struct TrainArgs {
    std::string model_kind;
    std::string data;
    std::string out;
    std::string config;
    std::string checkpoint;  // resume point; config then comes from the file
    uint64_t seed = 1;
    int epochs = 10;
    int min_freq = 1;
};

struct EpochLogger {
    std::ofstream file;
    explicit EpochLogger(const std::string& path) : file(path, std::ios::trunc) {
        if (!file) throw DataError("cannot open '" + path + "' for writing");
    }
    void line(const json& rec) { file << rec.dump() << "\n"; }
};

void train_generator(const TrainArgs& a, const Corpus& corpus, const std::string& log_path,
                     json& config_out) {
    std::unique_ptr<Generator<float>> model;
    Vocab vocab;
    AdamState opt;
    Rng rng(a.seed);
    uint64_t step = 0;

    if (!a.checkpoint.empty()) {
        CheckpointMeta meta;
        model = load_generator_checkpoint<float>(a.checkpoint, &meta, &opt);
        if (to_string(model->kind()) != a.model_kind)
            throw CheckpointError("resume: checkpoint holds a " + to_string(model->kind()) +
                                  " model, --model-kind says " + a.model_kind);
        vocab = vocab_from_meta(meta);
        rng.deserialize(meta.rng_state);
        step = meta.step;
    } else {
        ModelConfig defaults;
        defaults.kind = model_kind_from_string(a.model_kind);
        ModelConfig cfg = merged_config(defaults, a.config);
        cfg.kind = defaults.kind;  // the flag names the model; config files stay shareable
        vocab = build_vocab(corpus, cfg.vocab_size);
        cfg.vocab_size = vocab.size();
        model = Generator<float>::create(cfg, rng);
    }
    config_out = model->config();

    auto data = encode_corpus(corpus, vocab, model->config().max_len);
    EpochLogger log(log_path);
    for (int epoch = 1; epoch <= a.epochs; ++epoch) {
        EpochStats st;
        try {
            st = train_epoch(*model, data, opt, step, rng);
        } catch (const TrainingDiverged& e) {
            // the failing update was never applied, so the parameters still
            // hold the last good state; keep them for a post-mortem
            std::string rescue = a.out + ".last-good.bin";
            save_generator_checkpoint(rescue, *model, vocab, rng, step, &opt);
            throw TrainingDiverged(std::string(e.what()) + " (last good state saved to " +
                                       rescue + ")",
                                   rescue);
        }
        log.line({{"epoch", epoch},
                  {"step", step},
                  {"recon_per_token", st.recon_per_token},
                  {"kl_per_example", st.kl_per_example},
                  {"kl_weight", st.kl_weight_last},
                  {"examples", st.examples},
                  {"tokens", st.tokens}});
        std::cout << "epoch " << epoch << ": recon/token " << st.recon_per_token
                  << ", kl/example " << st.kl_per_example << ", kl weight " << st.kl_weight_last
                  << "\n";
    }
    save_generator_checkpoint(a.out, *model, vocab, rng, step, &opt);
}

void train_tcd(const TrainArgs& a, const Corpus& corpus, const std::string& log_path,
               json& config_out) {
    ParamStoreT<float> store;
    Vocab vocab;
    AdamState opt;
    Rng rng(a.seed);
    uint64_t step = 0;
    std::unique_ptr<TcdNetworksT<float>> net;

    if (!a.checkpoint.empty()) {
        CheckpointMeta meta;
        net = std::make_unique<TcdNetworksT<float>>(
            load_tcd_checkpoint(a.checkpoint, store, &meta, &opt));
        vocab = vocab_from_meta(meta);
        rng.deserialize(meta.rng_state);
        step = meta.step;
    } else {
        TcdConfig cfg = merged_config(TcdConfig{}, a.config);
        vocab = build_vocab(corpus, cfg.vocab_size);
        cfg.vocab_size = vocab.size();
        net = std::make_unique<TcdNetworksT<float>>(TcdNetworksT<float>::create(store, cfg, rng));
    }
    config_out = net->cfg;

    auto data = encode_corpus(corpus, vocab, net->cfg.max_len);
    EpochLogger log(log_path);
    for (int epoch = 1; epoch <= a.epochs; ++epoch) {
        TcdEpochStats st = train_tcd_epoch(*net, store, data, opt, rng);
        step += st.steps;
        log.line({{"epoch", epoch},
                  {"step", step},
                  {"loss", st.loss},
                  {"accuracy", st.accuracy}});
        std::cout << "epoch " << epoch << ": loss " << st.loss << ", accuracy " << st.accuracy
                  << "\n";
    }
    save_tcd_checkpoint(a.out, *net, store, vocab, rng, step, &opt);
}

void train_lm(const TrainArgs& a, const Corpus& corpus, const std::string& log_path,
              json& config_out) {
    ParamStoreT<float> store;
    Vocab vocab;
    AdamState opt;
    Rng rng(a.seed);
    uint64_t step = 0;
    std::unique_ptr<RnnLmT<float>> net;

    if (!a.checkpoint.empty()) {
        CheckpointMeta meta;
        net = std::make_unique<RnnLmT<float>>(load_lm_checkpoint(a.checkpoint, store, &meta, &opt));
        vocab = vocab_from_meta(meta);
        rng.deserialize(meta.rng_state);
        step = meta.step;
    } else {
        // the LM shares the generator config shape; kind and latent_dim are
        // simply unused by an unconditional response model
        ModelConfig cfg = merged_config(ModelConfig{}, a.config);
        vocab = build_vocab(corpus, cfg.vocab_size);
        cfg.vocab_size = vocab.size();
        net = std::make_unique<RnnLmT<float>>(RnnLmT<float>::create(store, cfg, rng));
    }
    config_out = net->cfg;

    auto data = encode_corpus(corpus, vocab, net->cfg.max_len);
    EpochLogger log(log_path);
    for (int epoch = 1; epoch <= a.epochs; ++epoch) {
        LmEpochStats st = lm_train_epoch(*net, store, data, opt, rng);
        step += st.steps;
        log.line({{"epoch", epoch},
                  {"step", step},
                  {"nll_per_token", st.nll_per_token},
                  {"tokens", st.tokens}});
        std::cout << "epoch " << epoch << ": nll/token " << st.nll_per_token << "\n";
    }
    save_lm_checkpoint(a.out, *net, store, vocab, rng, step, &opt);
}

void run_train(const TrainArgs& a) {
    Stopwatch watch;
    if (!a.checkpoint.empty() && !a.config.empty())
        throw ContractError("train: --config conflicts with --checkpoint; a resumed run keeps "
                            "the stored config");
    Corpus corpus = load_corpus(a.data);
    if (a.min_freq > 1) corpus = filter_min_freq(corpus, a.min_freq);
    if (corpus.size() == 0) throw DataError("train: no usable pairs in '" + a.data + "'");

    ensure_parent_dir(a.out);
    std::string log_path = a.out + ".log.jsonl";
    json config;
    if (a.model_kind == "tcd")
        train_tcd(a, corpus, log_path, config);
    else if (a.model_kind == "lm")
        train_lm(a, corpus, log_path, config);
    else
        train_generator(a, corpus, log_path, config);

    write_manifest(a.out + ".manifest.json", "train", config, a.seed, watch.seconds(),
                   {a.out, log_path});
    std::cout << "saved " << a.out << "\n";
}

// ---- generate ----

struct GenerateArgs {
    std::string checkpoint;
    std::string posts;
    std::string out;
    uint64_t seed = 1;
    int n_z = 50;
    int beam = 0;  // 0 picks the kind-specific default below
    size_t max_posts = 0;
};

void run_generate(const GenerateArgs& a) {
    Stopwatch watch;
    CheckpointMeta meta;
    auto model = load_generator_checkpoint<float>(a.checkpoint, &meta);
    Vocab vocab = vocab_from_meta(meta);
    const ModelConfig& cfg = model->config();

    bool variational = cfg.kind != ModelKind::seq2seq;
    // reference decode widths: 50 latent draws with beam 20 for latent
    // models, one beam of width 50 for the deterministic decoder
    int beam = a.beam > 0 ? a.beam : (variational ? 20 : 50);

    Corpus corpus = load_corpus(a.posts);
    std::vector<std::string> posts = unique_posts(corpus, a.max_posts);
    if (posts.empty()) throw DataError("generate: no posts in '" + a.posts + "'");

    Rng rng(a.seed);
    ensure_parent_dir(a.out);
    std::ofstream out(a.out, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + a.out + "' for writing");

    size_t failed = 0;
    for (const auto& text : posts) {
        std::vector<int> post_ids = vocab.encode_wrapped(text, cfg.max_len);
        json rec = {{"model", meta.kind}, {"post", text}, {"post_ids", post_ids}};
        try {
            auto factory = [&](int) { return model->make_stepper(post_ids, rng); };
            auto candidates = generate_candidates<float>(factory, variational, a.n_z, beam,
                                                         cfg.max_len, Vocab::bos_id,
                                                         Vocab::eos_id);
            json arr = json::array();
            for (const auto& c : candidates)
                arr.push_back({{"ids", c.tokens},
                               {"text", vocab.decode(c.tokens)},
                               {"loglik", c.loglik},
                               {"z_index", c.z_index}});
            rec["candidates"] = std::move(arr);
        } catch (const std::runtime_error& e) {
            rec["error"] = e.what();
            ++failed;
        }
        out << rec.dump() << "\n";
    }

    json config = {{"model", meta.kind}, {"n_z", a.n_z}, {"beam", beam}, {"max_posts", a.max_posts}};
    write_manifest(a.out + ".manifest.json", "generate", config, a.seed, watch.seconds(), {a.out});
    std::cout << posts.size() - failed << "/" << posts.size() << " posts decoded ("
              << meta.kind << ")\n";
}

// ---- rerank ----

struct RerankArgs {
    std::string candidates;
    std::string checkpoint;  // TCD
    std::string out;
    double lambda = -1.0;  // <0 takes the value stored in the TCD config
    int top_k = 5;
};

void run_rerank(const RerankArgs& a) {
    Stopwatch watch;
    ParamStoreT<float> store;
    CheckpointMeta meta;
    auto tcd = load_tcd_checkpoint(a.checkpoint, store, &meta);
    Vocab vocab = vocab_from_meta(meta);
    double lambda = a.lambda >= 0 ? a.lambda : tcd.cfg.lambda;

    ensure_parent_dir(a.out);
    std::ofstream out(a.out, std::ios::trunc);
    if (!out) throw DataError("cannot open '" + a.out + "' for writing");

    size_t ranked_posts = 0, passthrough = 0;
    for (const auto& rec : read_jsonl(a.candidates)) {
        if (rec.contains("error")) {
            // a post whose generation failed stays in the stream so eval can
            // count it
            out << rec.dump() << "\n";
            ++passthrough;
            continue;
        }
        std::vector<int> post_ids = rec.at("post_ids").get<std::vector<int>>();
        std::vector<Candidate> candidates;
        for (const auto& c : rec.at("candidates")) {
            Candidate cand;
            cand.tokens = c.at("ids").get<std::vector<int>>();
            cand.loglik = c.at("loglik").get<double>();
            cand.z_index = c.at("z_index").get<int>();
            candidates.push_back(std::move(cand));
        }
        // the discriminator was trained on BOS/EOS-wrapped pairs, so score
        // candidates in that same form
        auto match = [&](const std::vector<int>& resp) {
            return tcd_match_prob(tcd, post_ids, wrap_content(resp));
        };
        auto ranked = rerank_topk(candidates, match, lambda, a.top_k);
        json arr = json::array();
        for (const auto& r : ranked)
            arr.push_back({{"ids", r.tokens},
                           {"text", vocab.decode(r.tokens)},
                           {"loglik", r.loglik},
                           {"tcd_prob", r.tcd_prob},
                           {"score", r.score},
                           {"z_index", r.z_index}});
        json out_rec = {{"model", rec.at("model")},
                        {"post", rec.at("post")},
                        {"post_ids", post_ids},
                        {"responses", std::move(arr)}};
        out << out_rec.dump() << "\n";
        ++ranked_posts;
    }

    json config = {{"lambda", lambda}, {"top_k", a.top_k}};
    write_manifest(a.out + ".manifest.json", "rerank", config, 0, watch.seconds(), {a.out});
    std::cout << ranked_posts << " posts reranked";
    if (passthrough > 0) std::cout << ", " << passthrough << " failed posts passed through";
    std::cout << "\n";
}

// ---- eval ----

struct EvalArgs {
    std::vector<std::string> ranked;
    std::string run_dir;
    std::string lm;
    std::string train;
    std::string out;
};

void run_eval(const EvalArgs& a) {
    Stopwatch watch;
    std::vector<std::string> files = a.ranked;
    if (!a.run_dir.empty()) {
        std::vector<std::string> found;
        for (const auto& entry : fs::directory_iterator(a.run_dir)) {
            std::string name = entry.path().filename().string();
            if (name.rfind("ranked", 0) == 0 && entry.path().extension() == ".jsonl")
                found.push_back(entry.path().string());
        }
        std::sort(found.begin(), found.end());
        files.insert(files.end(), found.begin(), found.end());
    }
    if (files.empty()) throw DataError("eval: no ranked response files given");

    ParamStoreT<float> lm_store;
    CheckpointMeta lm_meta;
    auto lm = load_lm_checkpoint(a.lm, lm_store, &lm_meta);
    Vocab vocab = vocab_from_meta(lm_meta);

    Corpus train_corpus = load_corpus(a.train);
    auto train_set = response_set(encode_corpus(train_corpus, vocab, lm.cfg.max_len));

    MetricsReport report;
    for (const auto& path : files) {
        std::string model;
        std::vector<std::vector<int>> pooled;
        size_t skipped = 0;
        for (const auto& rec : read_jsonl(path)) {
            std::string rec_model = rec.at("model").get<std::string>();
            if (model.empty())
                model = rec_model;
            else if (model != rec_model)
                throw DataError("eval: '" + path + "' mixes models " + model + " and " +
                                rec_model);
            if (rec.contains("error")) {
                ++skipped;
                continue;
            }
            for (const auto& r : rec.at("responses"))
                pooled.push_back(content_tokens(r.at("ids").get<std::vector<int>>()));
        }
        if (model.empty()) throw DataError("eval: '" + path + "' holds no records");
        report.rows.push_back(compute_metrics_row(model, pooled, lm, train_set, skipped));
    }

    fs::create_directories(a.out);
    std::string table = format_metrics_table(report);
    std::string table_path = (fs::path(a.out) / "metrics.txt").string();
    std::string rows_path = (fs::path(a.out) / "metrics.jsonl").string();
    write_text_file(table_path, table);
    write_text_file(rows_path, metrics_to_jsonl(report));
    std::cout << table;

    json config = {{"ranked_files", files}, {"lm", a.lm}, {"train", a.train}};
    write_manifest((fs::path(a.out) / "manifest.json").string(), "eval", config, 0,
                   watch.seconds(), {table_path, rows_path});
}

// ---- gradcheck ----

struct GradcheckArgs {
    std::string out;
    double threshold = 1e-3;
};

void run_gradcheck(const GradcheckArgs& a) {
    ModelConfig cfg;
    cfg.embed_dim = 6;
    cfg.hidden_dim = 8;
    cfg.latent_dim = 4;
    cfg.vocab_size = 12;
    cfg.batch_size = 2;
    cfg.max_len = 10;
    cfg.init_std = 0.2;

    std::vector<EncodedPair> pairs = {
        {{2, 4, 5, 3}, {2, 6, 7, 8, 3}},
        {{2, 9, 3}, {2, 10, 3}},
    };
    TrainBatch batch = make_train_batch(pairs, {0, 1});
    Rng rng(1);

    struct Check {
        std::string name;
        GradCheckResult result;
    };
    std::vector<Check> checks;

    {
        ParamStoreD store;
        cfg.kind = ModelKind::seq2seq;
        auto net = Seq2SeqNetworksT<double>::create(store, cfg, rng);
        auto builder = [&]() { return seq2seq_loss(net, batch).recon; };
        checks.push_back({"seq2seq", grad_check(builder, store)});
    }
    for (ModelKind kind : {ModelKind::cvae, ModelKind::cvae_simple}) {
        ParamStoreD store;
        cfg.kind = kind;
        auto net = CvaeNetworksT<double>::create(store, cfg, rng);
        auto eps = TensorD::randn(rng, 2, cfg.latent_dim, 1.0);
        auto builder = [&]() {
            auto parts = cvae_loss(net, batch, eps);
            return add(parts.recon, parts.kl);
        };
        checks.push_back({to_string(kind), grad_check(builder, store)});
    }
    {
        ParamStoreD store;
        cfg.kind = ModelKind::ctvae;
        auto net = CtvaeNetworksT<double>::create(store, cfg, rng);
        auto eps = TensorD::randn(rng, 2, cfg.latent_dim, 1.0);
        auto builder = [&]() {
            auto parts = ctvae_loss(net, batch, eps);
            return add(parts.recon, parts.kl);
        };
        checks.push_back({"ctvae", grad_check(builder, store)});
    }
    {
        ParamStoreD store;
        TcdConfig tcfg;
        tcfg.embed_dim = 4;
        tcfg.hidden_dim = 4;
        tcfg.vocab_size = 12;
        tcfg.batch_size = 2;
        tcfg.max_len = 10;
        tcfg.init_std = 0.2;
        auto net = TcdNetworksT<double>::create(store, tcfg, rng);
        auto post = PaddedBatch::from_rows({{2, 4, 5, 3}, {2, 6, 3}}, Vocab::pad_id);
        auto resp = PaddedBatch::from_rows({{2, 7, 8, 3}, {2, 9, 3}}, Vocab::pad_id);
        std::vector<int> labels = {1, 0};
        auto builder = [&]() { return tcd_loss(net, post, resp, labels).loss; };
        // the cross-attention graph is deep enough that the default step
        // lets roundoff dominate near-zero entries
        checks.push_back({"tcd", grad_check(builder, store, 1e-3)});
    }
    {
        ParamStoreD store;
        cfg.kind = ModelKind::ctvae;
        auto net = RnnLmD::create(store, cfg, rng);
        auto builder = [&]() { return lm_loss(net, batch).loss; };
        checks.push_back({"lm", grad_check(builder, store)});
    }

    std::string report;
    bool all_ok = true;
    for (const auto& c : checks) {
        bool ok = c.result.max_rel_err < a.threshold;
        all_ok = all_ok && ok;
        std::ostringstream line;
        line << (ok ? "PASS" : "FAIL") << " " << c.name << ": max relative error "
             << c.result.max_rel_err << " over " << c.result.entries_checked << " entries";
        if (!ok)
            line << " (worst " << c.result.worst_param << "[" << c.result.worst_index
                 << "]: analytic " << c.result.analytic << ", numeric " << c.result.numeric
                 << ")";
        std::cout << line.str() << "\n";
        report += line.str() + "\n";
    }
    if (!a.out.empty()) write_text_file(a.out, report);
    if (!all_ok)
        throw NumericError("gradcheck: at least one loss exceeded the threshold " +
                           std::to_string(a.threshold));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conversation-response toolkit: variational generators, TCD reranking, and "
                 "diversity/fluency evaluation"};
    app.set_version_flag("--version", kCliVersion);
    app.require_subcommand(1);

    GenDataArgs gd;
    auto* gen_data = app.add_subcommand("gen-data", "Generate a synthetic corpus triple");
    gen_data->add_option("--out", gd.out, "Output directory")->required();
    gen_data->add_option("--seed", gd.seed, "Random seed");
    gen_data->add_option("--num-posts", gd.num_posts, "Distinct posts to generate")
        ->check(CLI::PositiveNumber);
    gen_data->add_flag("--topic-only", gd.topic_only, "Drop the generic-response pool");
    gen_data->add_option("--train-frac", gd.train_frac, "Training split fraction");
    gen_data->add_option("--valid-frac", gd.valid_frac, "Validation split fraction");

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a generator, the TCD, or the metric LM");
    train->add_option("--model-kind", tr.model_kind, "seq2seq|cvae|cvae-simple|ctvae|tcd|lm")
        ->required()
        ->check(CLI::IsMember({"seq2seq", "cvae", "cvae-simple", "ctvae", "tcd", "lm"}));
    train->add_option("--data", tr.data, "Training corpus (TSV)")->required();
    train->add_option("--out", tr.out, "Checkpoint path to write")->required();
    train->add_option("--config", tr.config, "JSON config overrides");
    train->add_option("--checkpoint", tr.checkpoint, "Checkpoint to resume from");
    train->add_option("--seed", tr.seed, "Random seed");
    train->add_option("--epochs", tr.epochs, "Epochs to run")->check(CLI::PositiveNumber);
    train->add_option("--min-freq", tr.min_freq,
                      "Drop pairs containing tokens rarer than this corpus count");

    GenerateArgs ge;
    auto* generate = app.add_subcommand("generate", "Decode response candidates for posts");
    generate->add_option("--checkpoint", ge.checkpoint, "Generator checkpoint")->required();
    generate->add_option("--posts", ge.posts, "Corpus file supplying the posts")->required();
    generate->add_option("--out", ge.out, "Candidates file to write (JSON lines)")->required();
    generate->add_option("--seed", ge.seed, "Random seed");
    generate->add_option("--n-z", ge.n_z, "Latent draws per post")->check(CLI::PositiveNumber);
    generate->add_option("--beam", ge.beam, "Beam width (default 20, or 50 for seq2seq)");
    generate->add_option("--max-posts", ge.max_posts, "Cap on distinct posts (0 = all)");

    RerankArgs rr;
    auto* rerank = app.add_subcommand("rerank", "Rerank candidates with the TCD");
    rerank->add_option("--candidates", rr.candidates, "Candidates file from generate")
        ->required();
    rerank->add_option("--checkpoint", rr.checkpoint, "TCD checkpoint")->required();
    rerank->add_option("--out", rr.out, "Ranked responses file to write (JSON lines)")
        ->required();
    rerank->add_option("--lambda", rr.lambda, "Match log-probability weight (default: stored)");
    rerank->add_option("--top-k", rr.top_k, "Responses to keep per post")
        ->check(CLI::PositiveNumber);

    EvalArgs ev;
    auto* eval = app.add_subcommand("eval", "Compute the metrics table over ranked responses");
    eval->add_option("--ranked", ev.ranked, "Ranked responses file (repeatable)");
    auto* run_dir_opt =
        eval->add_option("--run-dir", ev.run_dir, "Directory scanned for ranked*.jsonl");
    run_dir_opt->excludes("--ranked");
    eval->add_option("--lm", ev.lm, "Metric language model checkpoint")->required();
    eval->add_option("--train", ev.train, "Training corpus for the matching metric")->required();
    eval->add_option("--out", ev.out, "Output directory")->required();

    GradcheckArgs gc;
    auto* gradcheck =
        app.add_subcommand("gradcheck", "Finite-difference audit of every loss at toy size");
    gradcheck->add_option("--out", gc.out, "Report file to write");
    gradcheck->add_option("--threshold", gc.threshold, "Max relative error allowed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (gen_data->parsed()) run_gen_data(gd);
        if (train->parsed()) run_train(tr);
        if (generate->parsed()) run_generate(ge);
        if (rerank->parsed()) run_rerank(rr);
        if (eval->parsed()) run_eval(ev);
        if (gradcheck->parsed()) run_gradcheck(gc);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
