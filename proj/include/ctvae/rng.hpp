#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace ctvae {

// Seeded random source. One instance per training session / data pipeline;
// every stochastic choice in the toolkit goes through one of these so that
// a run is reproducible from its seed.
class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    double normal() { return normal_(engine_); }

    std::vector<double> normal_vec(size_t n) {
        std::vector<double> out(n);
        for (auto& v : out) v = normal();
        return out;
    }

    double uniform() { return uniform_(engine_); }

    // Inclusive range [lo, hi].
    int64_t uniform_int(int64_t lo, int64_t hi) {
        std::uniform_int_distribution<int64_t> d(lo, hi);
        return d(engine_);
    }

    template <class It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, engine_);
    }

    uint64_t raw() { return engine_(); }

    // Engine + distribution state as text, for checkpointing.
    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << ' ' << normal_ << ' ' << uniform_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_ >> normal_ >> uniform_;
    }

  private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
    std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace ctvae
