#pragma once

// Independent reference implementations used only by tests: plain-double
// Monte-Carlo estimates and brute-force enumerations that the library code
// is checked against.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ctvae/rng.hpp"

namespace oracles {

inline double gauss_logpdf(double z, double mu, double logvar) {
    static const double log2pi = std::log(2.0 * 3.14159265358979323846);
    double d = z - mu;
    return -0.5 * (log2pi + logvar + d * d * std::exp(-logvar));
}

// Monte-Carlo KL(q||p) for diagonal Gaussians given per-dim parameters.
inline double mc_kl(const std::vector<double>& mu_q, const std::vector<double>& logvar_q,
                    const std::vector<double>& mu_p, const std::vector<double>& logvar_p,
                    size_t draws, ctvae::Rng& rng) {
    const size_t D = mu_q.size();
    double acc = 0.0;
    for (size_t n = 0; n < draws; ++n) {
        double diff = 0.0;
        for (size_t d = 0; d < D; ++d) {
            double z = mu_q[d] + std::exp(0.5 * logvar_q[d]) * rng.normal();
            diff += gauss_logpdf(z, mu_q[d], logvar_q[d]) - gauss_logpdf(z, mu_p[d], logvar_p[d]);
        }
        acc += diff;
    }
    return acc / static_cast<double>(draws);
}

// Closed-form diagonal-Gaussian KL, written independently of the library's
// tensor expression (scalar loop, textbook form).
inline double closed_kl(const std::vector<double>& mu_q, const std::vector<double>& logvar_q,
                        const std::vector<double>& mu_p, const std::vector<double>& logvar_p) {
    double acc = 0.0;
    for (size_t d = 0; d < mu_q.size(); ++d) {
        double vq = std::exp(logvar_q[d]);
        double vp = std::exp(logvar_p[d]);
        double dm = mu_q[d] - mu_p[d];
        acc += 0.5 * (logvar_p[d] - logvar_q[d] + (vq + dm * dm) / vp - 1.0);
    }
    return acc;
}

// Exhaustive top-B search over all token sequences up to max_len for a
// scorer that maps a (partial) sequence position to per-token log
// probabilities. EOS terminates a sequence; sequences reaching max_len
// without EOS are scored as-is. Scores are plain sums of token log probs.
struct EnumItem {
    std::vector<int> tokens;  // excludes BOS, includes EOS when emitted
    double score;
};

template <class StepLogProbs>
inline std::vector<EnumItem> enumerate_topk(StepLogProbs&& step_logprobs, int vocab, int eos_id,
                                            int max_len, int k) {
    std::vector<EnumItem> finished;
    struct Partial {
        std::vector<int> tokens;
        double score;
    };
    std::vector<Partial> frontier{{{}, 0.0}};
    for (int t = 0; t < max_len; ++t) {
        std::vector<Partial> next;
        for (const auto& p : frontier) {
            std::vector<double> lp = step_logprobs(p.tokens);
            for (int v = 0; v < vocab; ++v) {
                Partial q{p.tokens, p.score + lp[v]};
                q.tokens.push_back(v);
                if (v == eos_id)
                    finished.push_back({q.tokens, q.score});
                else if (t + 1 < max_len)
                    next.push_back(std::move(q));
                else
                    finished.push_back({q.tokens, q.score});
            }
        }
        frontier = std::move(next);
    }
    std::sort(finished.begin(), finished.end(), [](const EnumItem& a, const EnumItem& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.tokens < b.tokens;
    });
    if (static_cast<int>(finished.size()) > k) finished.resize(k);
    return finished;
}

// Plain-container diversity metrics over whitespace-free token id sequences.
inline double naive_distinct_n(const std::vector<std::vector<int>>& responses, int n) {
    std::set<std::vector<int>> grams;
    size_t total = 0;
    for (const auto& r : responses) {
        if (static_cast<int>(r.size()) < n) continue;
        for (size_t i = 0; i + n <= r.size(); ++i) {
            grams.insert(std::vector<int>(r.begin() + i, r.begin() + i + n));
            ++total;
        }
    }
    if (total == 0) return 0.0;
    return static_cast<double>(grams.size()) / static_cast<double>(total);
}

inline double naive_unique_pct(const std::vector<std::vector<int>>& responses) {
    std::set<std::vector<int>> uniq(responses.begin(), responses.end());
    return static_cast<double>(uniq.size()) / static_cast<double>(responses.size());
}

inline double naive_matching_pct(const std::vector<std::vector<int>>& responses,
                                 const std::set<std::vector<int>>& train_set) {
    size_t hit = 0;
    for (const auto& r : responses) hit += train_set.count(r) ? 1 : 0;
    return static_cast<double>(hit) / static_cast<double>(responses.size());
}

}  // namespace oracles
