#include "ctvae/data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace ctvae {

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream ss(text);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

Vocab::Vocab() : id_to_token_{"<pad>", "<unk>", "<bos>", "<eos>"} {
    for (size_t i = 0; i < id_to_token_.size(); ++i)
        token_to_id_[id_to_token_[i]] = static_cast<int>(i);
}

Vocab::Vocab(std::vector<std::string> tokens) : id_to_token_(std::move(tokens)) {
    if (id_to_token_.size() < 4 || id_to_token_[0] != "<pad>" || id_to_token_[1] != "<unk>" ||
        id_to_token_[2] != "<bos>" || id_to_token_[3] != "<eos>")
        throw DataError("vocab: token list must begin with <pad> <unk> <bos> <eos>");
    for (size_t i = 0; i < id_to_token_.size(); ++i) {
        if (!token_to_id_.emplace(id_to_token_[i], static_cast<int>(i)).second)
            throw DataError("vocab: duplicate token " + id_to_token_[i]);
    }
}

int Vocab::id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? unk_id : it->second;
}

const std::string& Vocab::token(int tid) const {
    if (tid < 0 || tid >= size())
        throw ContractError("vocab: id " + std::to_string(tid) + " out of range " +
                            std::to_string(size()));
    return id_to_token_[tid];
}

std::vector<int> Vocab::encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& tok : tokenize(text)) out.push_back(id(tok));
    return out;
}

std::vector<int> Vocab::encode_wrapped(const std::string& text, int max_content) const {
    if (max_content < 1) throw ContractError("vocab: max_content must be >= 1");
    std::vector<int> ids = encode(text);
    if (static_cast<int>(ids.size()) > max_content) ids.resize(max_content);
    std::vector<int> out;
    out.reserve(ids.size() + 2);
    out.push_back(bos_id);
    out.insert(out.end(), ids.begin(), ids.end());
    out.push_back(eos_id);
    return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
    std::string out;
    for (int tid : ids) {
        if (tid == pad_id || tid == bos_id || tid == eos_id) continue;
        if (!out.empty()) out += ' ';
        out += token(tid);
    }
    return out;
}

Vocab build_vocab(const Corpus& corpus, int max_size) {
    if (max_size < 5) throw ContractError("vocab: max_size must leave room beyond specials");
    std::map<std::string, long long> freq;
    for (const auto& pr : corpus.pairs) {
        for (const auto& t : tokenize(pr.post)) ++freq[t];
        for (const auto& t : tokenize(pr.response)) ++freq[t];
    }
    std::vector<std::pair<std::string, long long>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens = {"<pad>", "<unk>", "<bos>", "<eos>"};
    for (const auto& [tok, n] : items) {
        if (static_cast<int>(tokens.size()) >= max_size) break;
        tokens.push_back(tok);
    }
    return Vocab(std::move(tokens));
}

Corpus load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("corpus: cannot open " + path);
    Corpus c;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": expected post<TAB>response");
        if (line.find('\t', tab + 1) != std::string::npos)
            throw DataError(path + ":" + std::to_string(lineno) + ": more than one tab");
        std::string post = line.substr(0, tab);
        std::string resp = line.substr(tab + 1);
        if (tokenize(post).empty())
            throw DataError(path + ":" + std::to_string(lineno) + ": empty post");
        if (tokenize(resp).empty())
            throw DataError(path + ":" + std::to_string(lineno) + ": empty response");
        c.push({std::move(post), std::move(resp)});
    }
    if (c.pairs.empty()) throw DataError("corpus: " + path + " has no pairs");
    return c;
}

void save_corpus(const std::string& path, const Corpus& corpus) {
    std::ofstream out(path);
    if (!out) throw DataError("corpus: cannot write " + path);
    for (const auto& pr : corpus.pairs) out << pr.post << '\t' << pr.response << '\n';
    if (!out) throw DataError("corpus: write failed for " + path);
}

Corpus filter_min_freq(const Corpus& corpus, int min_freq) {
    if (min_freq <= 1) return corpus;
    std::unordered_map<std::string, long long> freq;
    for (const auto& pr : corpus.pairs) {
        for (const auto& t : tokenize(pr.post)) ++freq[t];
        for (const auto& t : tokenize(pr.response)) ++freq[t];
    }
    auto all_frequent = [&](const std::string& text) {
        for (const auto& t : tokenize(text))
            if (freq[t] < min_freq) return false;
        return true;
    };
    Corpus out;
    for (const auto& pr : corpus.pairs)
        if (all_frequent(pr.post) && all_frequent(pr.response)) out.push(pr);
    if (out.pairs.empty()) throw DataError("corpus: min-freq filter removed every pair");
    return out;
}

CorpusSplits split_corpus(const Corpus& corpus, uint64_t seed, double train_frac,
                          double valid_frac) {
    if (train_frac <= 0 || valid_frac < 0 || train_frac + valid_frac >= 1.0 + 1e-12)
        throw ContractError("split: fractions must satisfy 0 < train, train + valid <= 1");
    // distinct posts in first-appearance order, then a seeded shuffle
    std::vector<std::string> posts;
    std::unordered_map<std::string, bool> seen;
    for (const auto& pr : corpus.pairs)
        if (!seen[pr.post]) {
            seen[pr.post] = true;
            posts.push_back(pr.post);
        }
    Rng rng(seed);
    rng.shuffle(posts.begin(), posts.end());

    size_t n = posts.size();
    size_t n_train = static_cast<size_t>(n * train_frac);
    size_t n_valid = static_cast<size_t>(n * valid_frac);
    if (n_train == 0) n_train = 1;
    std::unordered_map<std::string, int> bucket;
    for (size_t i = 0; i < n; ++i)
        bucket[posts[i]] = i < n_train ? 0 : (i < n_train + n_valid ? 1 : 2);

    CorpusSplits s;
    for (const auto& pr : corpus.pairs) {
        switch (bucket[pr.post]) {
            case 0: s.train.push(pr); break;
            case 1: s.valid.push(pr); break;
            default: s.test.push(pr); break;
        }
    }
    return s;
}

}  // namespace ctvae
