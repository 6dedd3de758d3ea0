#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/tensor.hpp"

namespace ctvae {

// Named registry of trainable tensors. Iteration follows insertion order so
// optimizer sweeps and checkpoints are reproducible run to run.
template <class S>
class ParamStoreT {
  public:
    TensorT<S>& add(const std::string& name, TensorT<S> t) {
        if (index_.count(name)) throw ContractError("param store: duplicate name " + name);
        t.node()->requires_grad = true;
        index_[name] = names_.size();
        names_.push_back(name);
        params_.push_back(std::move(t));
        return params_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    TensorT<S>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("param store: unknown name " + name);
        return params_[it->second];
    }

    const TensorT<S>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("param store: unknown name " + name);
        return params_[it->second];
    }

    size_t size() const { return params_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    TensorT<S>& at(size_t i) { return params_[i]; }
    const TensorT<S>& at(size_t i) const { return params_[i]; }

    size_t numel() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

  private:
    std::vector<std::string> names_;
    std::vector<TensorT<S>> params_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;
using ParamStoreD = ParamStoreT<double>;

}  // namespace ctvae
