#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "ctvae/data.hpp"

namespace ctvae {

namespace {

const std::array<const char*, 16> kTopics = {
    "weather", "football", "cooking",  "music",   "movies",  "travel",  "gardening",   "coffee",
    "books",   "running",  "painting", "chess",   "fishing", "camping", "photography", "cycling",
};

const std::array<const char*, 5> kPostTemplates = {
    "anyone here into # ?",
    "thinking about # again ?",
    "what do you all make of # ?",
    "so much # talk lately ?",
    "need advice on # ?",
};

const std::array<const char*, 12> kPostTags = {
    "today",  "tonight", "lately",   "honestly", "seriously", "folks",
    "friends", "everyone", "please",  "right",    "somehow",   "still",
};

const std::array<const char*, 16> kTopicResponses = {
    "i really love #",
    "# is the best thing ever",
    "been doing # for years",
    "my weekend is all about #",
    "# keeps me sane honestly",
    "cannot get enough #",
    "# with friends is great",
    "started # last spring",
    "everyone should try #",
    "# takes real patience",
    "i practice # every morning",
    "nothing beats good #",
    "# changed my life",
    "still learning # slowly",
    "# season is coming soon",
    "saving up for better # gear",
};

const std::array<const char*, 10> kGenericResponses = {
    "i do not know",     "that sounds good", "yeah totally agree", "interesting question",
    "no idea sorry",     "sure why not",     "tell me more",       "hard to say",
    "maybe later",       "good luck with that",
};

std::string fill(const std::string& tmpl, const std::string& topic, const std::string& tag) {
    std::string out;
    for (char ch : tmpl) {
        if (ch == '#')
            out += topic;
        else if (ch == '?')
            out += tag;
        else
            out += ch;
    }
    return out;
}

// k distinct indices from [0, n), order randomized by the shuffle
std::vector<int> pick(Rng& rng, int n, int k) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(k);
    return idx;
}

}  // namespace

Corpus gen_synthetic(const SyntheticConfig& cfg) {
    const int max_posts =
        static_cast<int>(kTopics.size() * kPostTemplates.size() * kPostTags.size());
    if (cfg.num_posts < 1 || cfg.num_posts > max_posts)
        throw ContractError("synthetic: num_posts must be in [1, " + std::to_string(max_posts) +
                            "]");
    Rng rng(cfg.seed);

    // enumerate every (topic, template, tag) combination, then draw posts
    // from a shuffle so any prefix is a distinct-post sample
    struct Combo {
        int topic, tmpl, tag;
    };
    std::vector<Combo> combos;
    for (size_t ti = 0; ti < kTopics.size(); ++ti)
        for (size_t pi = 0; pi < kPostTemplates.size(); ++pi)
            for (size_t gi = 0; gi < kPostTags.size(); ++gi)
                combos.push_back({static_cast<int>(ti), static_cast<int>(pi),
                                  static_cast<int>(gi)});
    rng.shuffle(combos.begin(), combos.end());
    combos.resize(cfg.num_posts);

    Corpus c;
    for (const auto& combo : combos) {
        const std::string topic = kTopics[combo.topic];
        std::string post = fill(kPostTemplates[combo.tmpl], topic, kPostTags[combo.tag]);

        // 8-14 topic-specific replies, expectation 11
        int n_topic = rng.uniform_int(8, 14);
        for (int idx : pick(rng, static_cast<int>(kTopicResponses.size()), n_topic))
            c.push({post, fill(kTopicResponses[idx], topic, "")});

        if (!cfg.topic_only) {
            // 6-10 generic replies, expectation 8; total expectation 19
            int n_gen = rng.uniform_int(6, 10);
            for (int idx : pick(rng, static_cast<int>(kGenericResponses.size()), n_gen))
                c.push({post, kGenericResponses[idx]});
        }
    }
    return c;
}

}  // namespace ctvae
