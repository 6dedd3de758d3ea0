#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/rng.hpp"

namespace ctvae {

std::vector<std::string> tokenize(const std::string& text);

struct PostResponse {
    std::string post;
    std::string response;
};

// A post-response corpus plus an index from each distinct post to the pair
// rows that share it.
struct Corpus {
    std::vector<PostResponse> pairs;
    std::unordered_map<std::string, std::vector<size_t>> by_post;

    void push(PostResponse pr) {
        by_post[pr.post].push_back(pairs.size());
        pairs.push_back(std::move(pr));
    }

    size_t size() const { return pairs.size(); }
    size_t num_posts() const { return by_post.size(); }
};

// Fixed-id token inventory. Ids 0..3 are reserved; everything else is
// assigned by descending corpus frequency with lexicographic tie-breaks.
class Vocab {
  public:
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;
    static constexpr int bos_id = 2;
    static constexpr int eos_id = 3;

    Vocab();
    explicit Vocab(std::vector<std::string> tokens);  // full list including specials

    int id(const std::string& token) const;
    const std::string& token(int id) const;
    int size() const { return static_cast<int>(id_to_token_.size()); }
    const std::vector<std::string>& tokens() const { return id_to_token_; }

    // Raw ids for a whitespace-tokenized string, unknowns mapped to unk.
    std::vector<int> encode(const std::string& text) const;

    // BOS + ids (content truncated to max_content tokens) + EOS.
    std::vector<int> encode_wrapped(const std::string& text, int max_content) const;

    // Tokens joined by single spaces, specials dropped.
    std::string decode(const std::vector<int>& ids) const;

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

Vocab build_vocab(const Corpus& corpus, int max_size = 35000);

// TSV with one "post<TAB>response" pair per line. Blank lines are skipped;
// anything else malformed raises DataError naming the line.
Corpus load_corpus(const std::string& path);
void save_corpus(const std::string& path, const Corpus& corpus);

// Drops pairs containing any token rarer than min_freq in the corpus.
// min_freq <= 1 is a no-op.
Corpus filter_min_freq(const Corpus& corpus, int min_freq);

struct CorpusSplits {
    Corpus train;
    Corpus valid;
    Corpus test;
};

// Partition by post (all responses to a post travel together) using a
// seeded shuffle, 90/5/5 by default.
CorpusSplits split_corpus(const Corpus& corpus, uint64_t seed, double train_frac = 0.90,
                          double valid_frac = 0.05);

struct SyntheticConfig {
    int num_posts = 200;
    uint64_t seed = 1;
    bool topic_only = false;  // drop the generic-response pool
};

// Template-grammar conversation corpus: each post names one of 16 topics and
// receives a mix of topic-specific and generic replies, 19 per post on
// average.
Corpus gen_synthetic(const SyntheticConfig& cfg);

}  // namespace ctvae
