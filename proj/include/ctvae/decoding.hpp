#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

// Batched decoder interface consumed by beam search. A stepper holds the
// recurrent state for `rows()` live hypotheses; step() advances every row by
// one token and returns per-row log probabilities, reorder() permutes or
// duplicates rows when the beam is reshuffled.
template <class S>
class BeamStepper {
  public:
    virtual ~BeamStepper() = default;
    virtual int vocab() const = 0;
    virtual int rows() const = 0;
    virtual TensorT<S> step(const std::vector<int>& prev_tokens) = 0;  // [rows, V] log probs
    virtual void reorder(const std::vector<int>& sel) = 0;
};

struct Hypothesis {
    std::vector<int> tokens;  // excludes BOS; includes EOS when one was emitted
    double score = 0.0;       // sum of token log probabilities
};

struct Candidate {
    std::vector<int> tokens;
    double loglik = 0.0;
    int z_index = -1;  // which latent draw produced it; -1 for deterministic decoders
};

namespace detail {

// Orders by score descending, breaking exact ties by lexicographically
// smaller token sequence. Both beam search and any exhaustive reference
// must sort with this same rule for results to be comparable.
inline bool hyp_better(const Hypothesis& a, const Hypothesis& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
}

}  // namespace detail

// Length-unnormalized beam search. Every EOS child is banked into the
// finished pool; the top `beam` non-EOS children stay active. Search stops
// early once the pool's beam-th score cannot be beaten by extending any
// active row (token log probs are never positive, so scores only fall).
// Rows still active at max_len are finished as-is without an EOS term.
template <class S>
std::vector<Hypothesis> beam_search(BeamStepper<S>& stepper, int beam, int max_len, int bos_id,
                                    int eos_id) {
    if (beam < 1) throw ContractError("beam_search: beam must be >= 1");
    if (max_len < 1) throw ContractError("beam_search: max_len must be >= 1");
    if (stepper.rows() != 1) throw ContractError("beam_search: stepper must start with one row");
    const int V = stepper.vocab();
    if (eos_id < 0 || eos_id >= V) throw ContractError("beam_search: eos outside vocab");

    NoGradGuard guard;
    std::vector<Hypothesis> active{{{}, 0.0}};
    std::vector<int> prev{bos_id};
    std::vector<Hypothesis> finished;

    auto trim_finished = [&]() {
        std::sort(finished.begin(), finished.end(), detail::hyp_better);
        if (static_cast<int>(finished.size()) > beam) finished.resize(beam);
    };

    for (int t = 0; t < max_len; ++t) {
        TensorT<S> lp = stepper.step(prev);
        if (lp.rows() != static_cast<int>(active.size()) || lp.cols() != V)
            throw ShapeError("beam_search: stepper returned " + shape_str(lp.shape()));

        struct Child {
            double score;
            int row;
            int tok;
        };
        std::vector<Child> expand;
        for (size_t r = 0; r < active.size(); ++r) {
            // bank the EOS child unconditionally
            finished.push_back(active[r]);
            finished.back().tokens.push_back(eos_id);
            finished.back().score += static_cast<double>(lp.at(static_cast<int>(r), eos_id));

            // per-row top `beam` non-EOS children; anything below that can
            // never enter the global top `beam`
            std::vector<Child> row_children;
            row_children.reserve(V - 1);
            for (int v = 0; v < V; ++v) {
                if (v == eos_id) continue;
                row_children.push_back(
                    {active[r].score + static_cast<double>(lp.at(static_cast<int>(r), v)),
                     static_cast<int>(r), v});
            }
            size_t keep = std::min<size_t>(beam, row_children.size());
            std::partial_sort(row_children.begin(), row_children.begin() + keep,
                              row_children.end(), [](const Child& a, const Child& b) {
                                  if (a.score != b.score) return a.score > b.score;
                                  return a.tok < b.tok;
                              });
            row_children.resize(keep);
            expand.insert(expand.end(), row_children.begin(), row_children.end());
        }
        trim_finished();

        if (t + 1 == max_len) {
            // out of budget: finish whatever the beam would have kept
            for (const auto& ch : expand) {
                Hypothesis h = active[ch.row];
                h.tokens.push_back(ch.tok);
                h.score = ch.score;
                finished.push_back(std::move(h));
            }
            break;
        }

        std::sort(expand.begin(), expand.end(), [&](const Child& a, const Child& b) {
            if (a.score != b.score) return a.score > b.score;
            std::vector<int> ta = active[a.row].tokens;
            ta.push_back(a.tok);
            std::vector<int> tb = active[b.row].tokens;
            tb.push_back(b.tok);
            return ta < tb;
        });
        if (static_cast<int>(expand.size()) > beam) expand.resize(beam);
        if (expand.empty()) break;

        std::vector<Hypothesis> next;
        std::vector<int> sel, next_prev;
        for (const auto& ch : expand) {
            Hypothesis h = active[ch.row];
            h.tokens.push_back(ch.tok);
            h.score = ch.score;
            next.push_back(std::move(h));
            sel.push_back(ch.row);
            next_prev.push_back(ch.tok);
        }
        stepper.reorder(sel);
        active = std::move(next);
        prev = std::move(next_prev);

        // strict comparison: an equal-score future hypothesis could still win
        // the lexicographic tie-break, so only a strictly better pool stops us
        if (static_cast<int>(finished.size()) >= beam &&
            finished[beam - 1].score > active.front().score)
            break;
    }

    trim_finished();
    return finished;
}

// Walks the stepper along a fixed token sequence and accumulates its log
// likelihood. tokens is the target sequence without BOS (EOS included if it
// should be scored).
template <class S>
double forced_loglik(BeamStepper<S>& stepper, const std::vector<int>& tokens, int bos_id) {
    if (tokens.empty()) throw ContractError("forced_loglik: empty token sequence");
    if (stepper.rows() != 1) throw ContractError("forced_loglik: stepper must have one row");
    NoGradGuard guard;
    double total = 0.0;
    int prev = bos_id;
    for (int tok : tokens) {
        TensorT<S> lp = stepper.step({prev});
        if (tok < 0 || tok >= lp.cols())
            throw ContractError("forced_loglik: token " + std::to_string(tok) + " outside vocab");
        total += static_cast<double>(lp.at(0, tok));
        prev = tok;
    }
    return total;
}

// Produces the candidate pool for one post. Deterministic decoders run one
// beam of width `beam` and keep every finished hypothesis; latent-variable
// decoders draw `n_z` fresh steppers (one latent sample each) and keep the
// single best hypothesis per draw.
template <class S>
std::vector<Candidate> generate_candidates(
    const std::function<std::unique_ptr<BeamStepper<S>>(int)>& make_stepper, bool variational,
    int n_z, int beam, int max_len, int bos_id, int eos_id) {
    std::vector<Candidate> out;
    if (variational) {
        if (n_z < 1) throw ContractError("generate_candidates: n_z must be >= 1");
        for (int i = 0; i < n_z; ++i) {
            auto stepper = make_stepper(i);
            auto hyps = beam_search(*stepper, beam, max_len, bos_id, eos_id);
            if (hyps.empty()) throw ContractError("generate_candidates: empty beam result");
            out.push_back({hyps.front().tokens, hyps.front().score, i});
        }
    } else {
        auto stepper = make_stepper(-1);
        auto hyps = beam_search(*stepper, beam, max_len, bos_id, eos_id);
        for (const auto& h : hyps) out.push_back({h.tokens, h.score, -1});
    }
    return out;
}

}  // namespace ctvae
