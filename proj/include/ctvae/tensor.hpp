#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "ctvae/errors.hpp"
#include "ctvae/rng.hpp"

namespace ctvae {

namespace detail {
inline std::atomic<uint64_t> g_next_node_id{1};
inline thread_local int g_no_grad_depth = 0;
}  // namespace detail

// While alive, newly created tensors record no graph structure. Used for
// frozen-parameter inference (beam search, TCD scoring, metric evaluation).
struct NoGradGuard {
    NoGradGuard() { ++detail::g_no_grad_depth; }
    ~NoGradGuard() { --detail::g_no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::g_no_grad_depth == 0; }

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// One node of a define-by-run computation graph: a value buffer, a lazily
// allocated gradient buffer, and the backward rule that routes gradients
// to the parents. Parents are held alive by shared_ptr for the lifetime
// of any downstream node.
template <class S>
struct NodeT {
    std::vector<int> shape;  // row-major; rank 2 throughout ([rows, cols])
    std::vector<S> values;
    std::vector<S> grad;  // empty until touched
    bool requires_grad = false;
    uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<NodeT<S>>> parents;
    std::function<void(NodeT<S>&)> backward_fn;

    size_t numel() const { return values.size(); }

    std::vector<S>& grad_buf() {
        if (grad.empty()) grad.assign(values.size(), S(0));
        return grad;
    }
};

// Value-semantics handle to a graph node. Copying shares the node.
template <class S>
class TensorT {
  public:
    using Scalar = S;

    TensorT() = default;

    static TensorT zeros(int rows, int cols, bool requires_grad = false) {
        return filled(rows, cols, S(0), requires_grad);
    }

    static TensorT filled(int rows, int cols, S value, bool requires_grad = false) {
        TensorT t = make(rows, cols);
        std::fill(t.node_->values.begin(), t.node_->values.end(), value);
        t.node_->requires_grad = requires_grad && grad_enabled();
        return t;
    }

    static TensorT scalar(S value, bool requires_grad = false) {
        return filled(1, 1, value, requires_grad);
    }

    static TensorT from(std::vector<S> values, int rows, int cols, bool requires_grad = false) {
        if (static_cast<size_t>(rows) * static_cast<size_t>(cols) != values.size())
            throw ShapeError("tensor: " + std::to_string(values.size()) + " values do not fill [" +
                             std::to_string(rows) + "," + std::to_string(cols) + "]");
        TensorT t;
        t.node_ = std::make_shared<NodeT<S>>();
        t.node_->shape = {rows, cols};
        t.node_->values = std::move(values);
        t.node_->id = detail::g_next_node_id.fetch_add(1);
        t.node_->requires_grad = requires_grad && grad_enabled();
        return t;
    }

    static TensorT row(std::vector<S> values, bool requires_grad = false) {
        int n = static_cast<int>(values.size());
        return from(std::move(values), 1, n, requires_grad);
    }

    static TensorT randn(Rng& rng, int rows, int cols, double stddev, bool requires_grad = false) {
        TensorT t = make(rows, cols);
        for (auto& v : t.node_->values) v = static_cast<S>(rng.normal() * stddev);
        t.node_->requires_grad = requires_grad && grad_enabled();
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int rows() const { return node_->shape[0]; }
    int cols() const { return node_->shape[1]; }
    size_t numel() const { return node_->values.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    uint64_t id() const { return node_->id; }

    std::vector<S>& values() { return node_->values; }
    const std::vector<S>& values() const { return node_->values; }
    std::vector<S>& grad() { return node_->grad_buf(); }

    bool has_grad() const { return !node_->grad.empty(); }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    S item() const {
        if (numel() != 1)
            throw ContractError("item: tensor " + shape_str(node_->shape) + " is not a scalar");
        return node_->values[0];
    }

    S at(int r, int c) const { return node_->values[static_cast<size_t>(r) * cols() + c]; }
    void set(int r, int c, S v) { node_->values[static_cast<size_t>(r) * cols() + c] = v; }

    std::shared_ptr<NodeT<S>>& node() { return node_; }
    const std::shared_ptr<NodeT<S>>& node() const { return node_; }

    bool all_finite() const {
        for (S v : node_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

  private:
    static TensorT make(int rows, int cols) {
        if (rows <= 0 || cols <= 0)
            throw ShapeError("tensor: non-positive dims [" + std::to_string(rows) + "," +
                             std::to_string(cols) + "]");
        TensorT t;
        t.node_ = std::make_shared<NodeT<S>>();
        t.node_->shape = {rows, cols};
        t.node_->values.assign(static_cast<size_t>(rows) * cols, S(0));
        t.node_->id = detail::g_next_node_id.fetch_add(1);
        return t;
    }

    std::shared_ptr<NodeT<S>> node_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

namespace detail {

template <class S>
TensorT<S> make_result(int rows, int cols, const char* op,
                       std::initializer_list<TensorT<S>> inputs) {
    TensorT<S> out = TensorT<S>::zeros(rows, cols);
    out.node()->op = op;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    if (rg && grad_enabled()) {
        out.node()->requires_grad = true;
        for (const auto& in : inputs) out.node()->parents.push_back(in.node());
    }
    return out;
}

inline void check_same_rank2(const char* op, const std::vector<int>& a,
                             const std::vector<int>& b) {
    if (a.size() != 2 || b.size() != 2)
        throw ShapeError(std::string(op) + ": expects rank-2 tensors, got " + shape_str(a) +
                         " and " + shape_str(b));
}

// Row-major broadcast helpers for rank-2 shapes where each axis matches or is 1.
struct Bcast {
    int rows, cols;      // output shape
    int ar, ac, br, bc;  // input dims
    bool ok;
};

inline Bcast broadcast2(const char* op, const std::vector<int>& a, const std::vector<int>& b) {
    check_same_rank2(op, a, b);
    Bcast r{};
    r.ar = a[0];
    r.ac = a[1];
    r.br = b[0];
    r.bc = b[1];
    r.ok = (r.ar == r.br || r.ar == 1 || r.br == 1) && (r.ac == r.bc || r.ac == 1 || r.bc == 1);
    if (!r.ok)
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                         shape_str(b));
    r.rows = std::max(r.ar, r.br);
    r.cols = std::max(r.ac, r.bc);
    return r;
}

// Accumulate an [R,C] gradient into a possibly-broadcast parent of shape [pr,pc].
template <class S>
void reduce_into(const std::vector<S>& g, int R, int C, std::vector<S>& dst, int pr, int pc) {
    for (int i = 0; i < R; ++i) {
        int pi = (pr == 1) ? 0 : i;
        for (int j = 0; j < C; ++j) {
            int pj = (pc == 1) ? 0 : j;
            dst[static_cast<size_t>(pi) * pc + pj] += g[static_cast<size_t>(i) * C + j];
        }
    }
}

template <class S, class FwdF, class DaF, class DbF>
TensorT<S> binary_elementwise(const char* op, const TensorT<S>& a, const TensorT<S>& b, FwdF fwd,
                              DaF da, DbF db) {
    Bcast bc = broadcast2(op, a.shape(), b.shape());
    TensorT<S> out = make_result<S>(bc.rows, bc.cols, op, {a, b});
    auto& ov = out.values();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (int i = 0; i < bc.rows; ++i) {
        size_t ai = static_cast<size_t>(bc.ar == 1 ? 0 : i) * bc.ac;
        size_t bi = static_cast<size_t>(bc.br == 1 ? 0 : i) * bc.bc;
        for (int j = 0; j < bc.cols; ++j) {
            S x = av[ai + (bc.ac == 1 ? 0 : j)];
            S y = bv[bi + (bc.bc == 1 ? 0 : j)];
            ov[static_cast<size_t>(i) * bc.cols + j] = fwd(x, y);
        }
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward_fn = [bc, an, bn, da, db](NodeT<S>& self) {
            std::vector<S> ga, gb;
            bool need_a = an->requires_grad;
            bool need_b = bn->requires_grad;
            if (need_a) ga.assign(self.grad.size(), S(0));
            if (need_b) gb.assign(self.grad.size(), S(0));
            for (int i = 0; i < bc.rows; ++i) {
                size_t ai = static_cast<size_t>(bc.ar == 1 ? 0 : i) * bc.ac;
                size_t bi = static_cast<size_t>(bc.br == 1 ? 0 : i) * bc.bc;
                for (int j = 0; j < bc.cols; ++j) {
                    size_t o = static_cast<size_t>(i) * bc.cols + j;
                    S x = an->values[ai + (bc.ac == 1 ? 0 : j)];
                    S y = bn->values[bi + (bc.bc == 1 ? 0 : j)];
                    S g = self.grad[o];
                    if (need_a) ga[o] = g * da(x, y);
                    if (need_b) gb[o] = g * db(x, y);
                }
            }
            if (need_a) reduce_into(ga, bc.rows, bc.cols, an->grad_buf(), bc.ar, bc.ac);
            if (need_b) reduce_into(gb, bc.rows, bc.cols, bn->grad_buf(), bc.br, bc.bc);
        };
    }
    return out;
}

template <class S, class FwdF, class DF>
TensorT<S> unary_elementwise(const char* op, const TensorT<S>& a, FwdF fwd, DF dfn) {
    TensorT<S> out = make_result<S>(a.rows(), a.cols(), op, {a});
    const auto& av = a.values();
    auto& ov = out.values();
    for (size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i]);
    if (out.requires_grad()) {
        auto an = a.node();
        // capture `self` via the callback argument, not the node's own shared_ptr:
        // a backward_fn that owns its node would form a reference cycle and leak
        // the whole upstream graph.
        out.node()->backward_fn = [an, dfn](NodeT<S>& self) {
            auto& g = an->grad_buf();
            for (size_t i = 0; i < self.grad.size(); ++i)
                g[i] += self.grad[i] * dfn(an->values[i], self.values[i]);
        };
    }
    return out;
}

}  // namespace detail

// ---- elementwise binaries (2-D broadcasting) ----

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_elementwise<S>(
        "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
        [](S, S) { return S(1); });
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_elementwise<S>(
        "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
        [](S, S) { return S(-1); });
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_elementwise<S>(
        "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
        [](S x, S) { return x; });
}

template <class S>
TensorT<S> maximum(const TensorT<S>& a, const TensorT<S>& b) {
    return detail::binary_elementwise<S>(
        "maximum", a, b, [](S x, S y) { return x >= y ? x : y; },
        [](S x, S y) { return x >= y ? S(1) : S(0); },
        [](S x, S y) { return x >= y ? S(0) : S(1); });
}

// ---- elementwise unaries ----

template <class S>
TensorT<S> scale(const TensorT<S>& a, double c) {
    return detail::unary_elementwise<S>(
        "scale", a, [c](S x) { return static_cast<S>(x * c); },
        [c](S, S) { return static_cast<S>(c); });
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
    return detail::unary_elementwise<S>(
        "add_scalar", a, [c](S x) { return static_cast<S>(x + c); }, [](S, S) { return S(1); });
}

template <class S>
TensorT<S> tanh(const TensorT<S>& a) {
    return detail::unary_elementwise<S>(
        "tanh", a, [](S x) { return static_cast<S>(std::tanh(static_cast<double>(x))); },
        [](S, S y) { return S(1) - y * y; });
}

namespace detail {
template <class S>
S sigmoid_val(S x) {
    if (x >= S(0)) return S(1) / (S(1) + static_cast<S>(std::exp(static_cast<double>(-x))));
    S e = static_cast<S>(std::exp(static_cast<double>(x)));
    return e / (S(1) + e);
}
}  // namespace detail

template <class S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    return detail::unary_elementwise<S>(
        "sigmoid", a, [](S x) { return detail::sigmoid_val(x); },
        [](S, S y) { return y * (S(1) - y); });
}

// ln(1 + e^x), evaluated as max(x,0) + log1p(e^-|x|) for stability.
template <class S>
TensorT<S> softplus(const TensorT<S>& a) {
    return detail::unary_elementwise<S>(
        "softplus", a,
        [](S x) {
            double xd = static_cast<double>(x);
            return static_cast<S>(std::max(xd, 0.0) + std::log1p(std::exp(-std::abs(xd))));
        },
        [](S x, S) { return detail::sigmoid_val(x); });
}

template <class S>
TensorT<S> exp(const TensorT<S>& a) {
    return detail::unary_elementwise<S>(
        "exp", a, [](S x) { return static_cast<S>(std::exp(static_cast<double>(x))); },
        [](S, S y) { return y; });
}

template <class S>
TensorT<S> log(const TensorT<S>& a) {
    return detail::unary_elementwise<S>(
        "log", a, [](S x) { return static_cast<S>(std::log(static_cast<double>(x))); },
        [](S x, S) { return S(1) / x; });
}

// ---- matmul ----

template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_rank2("matmul", a.shape(), b.shape());
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    TensorT<S> out = detail::make_result<S>(m, n, "matmul", {a, b});
    const S* av = a.values().data();
    const S* bv = b.values().data();
    S* ov = out.values().data();
    for (int i = 0; i < m; ++i) {
        const S* arow = av + static_cast<size_t>(i) * k;
        S* orow = ov + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const S x = arow[kk];
            if (x == S(0)) continue;
            const S* brow = bv + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += x * brow[j];
        }
    }
    if (out.requires_grad()) {
        auto an = a.node();
        auto bn = b.node();
        out.node()->backward_fn = [an, bn, m, k, n](NodeT<S>& self) {
            const S* g = self.grad.data();
            if (an->requires_grad) {  // dA = G * B^T
                S* ga = an->grad_buf().data();
                const S* bv2 = bn->values.data();
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        S acc = S(0);
                        const S* grow = g + static_cast<size_t>(i) * n;
                        const S* brow = bv2 + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        ga[static_cast<size_t>(i) * k + kk] += acc;
                    }
            }
            if (bn->requires_grad) {  // dB = A^T * G
                S* gb = bn->grad_buf().data();
                const S* av2 = an->values.data();
                for (int kk = 0; kk < k; ++kk)
                    for (int i = 0; i < m; ++i) {
                        const S x = av2[static_cast<size_t>(i) * k + kk];
                        if (x == S(0)) continue;
                        const S* grow = g + static_cast<size_t>(i) * n;
                        S* brow = gb + static_cast<size_t>(kk) * n;
                        for (int j = 0; j < n; ++j) brow[j] += x * grow[j];
                    }
            }
        };
    }
    return out;
}

// ---- shape ops ----

template <class S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    if (axis != 0 && axis != 1) throw ContractError("concat: axis must be 0 or 1");
    int other = 1 - axis;
    int fixed = parts[0].shape()[other];
    int total = 0;
    for (const auto& p : parts) {
        detail::check_same_rank2("concat", p.shape(), parts[0].shape());
        if (p.shape()[other] != fixed)
            throw ShapeError("concat: mismatched shapes " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(p.shape()));
        total += p.shape()[axis];
    }
    int rows = axis == 0 ? total : fixed;
    int cols = axis == 0 ? fixed : total;
    TensorT<S> out = TensorT<S>::zeros(rows, cols);
    out.node()->op = "concat";
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    if (rg && grad_enabled()) {
        out.node()->requires_grad = true;
        for (const auto& p : parts) out.node()->parents.push_back(p.node());
    }
    auto& ov = out.values();
    int offset = 0;
    for (const auto& p : parts) {
        if (axis == 0) {
            std::copy(p.values().begin(), p.values().end(),
                      ov.begin() + static_cast<size_t>(offset) * cols);
        } else {
            for (int i = 0; i < rows; ++i)
                std::copy(p.values().begin() + static_cast<size_t>(i) * p.cols(),
                          p.values().begin() + static_cast<size_t>(i + 1) * p.cols(),
                          ov.begin() + static_cast<size_t>(i) * cols + offset);
        }
        offset += p.shape()[axis];
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<NodeT<S>>> nodes;
        for (const auto& p : parts) nodes.push_back(p.node());
        out.node()->backward_fn = [nodes, axis, rows, cols](NodeT<S>& self) {
            int offset = 0;
            for (auto& pn : nodes) {
                int prows = pn->shape[0], pcols = pn->shape[1];
                if (pn->requires_grad) {
                    auto& g = pn->grad_buf();
                    if (axis == 0) {
                        for (size_t i = 0; i < g.size(); ++i)
                            g[i] += self.grad[static_cast<size_t>(offset) * cols + i];
                    } else {
                        for (int i = 0; i < rows; ++i)
                            for (int j = 0; j < pcols; ++j)
                                g[static_cast<size_t>(i) * pcols + j] +=
                                    self.grad[static_cast<size_t>(i) * cols + offset + j];
                    }
                }
                offset += (axis == 0) ? prows : pcols;
            }
        };
    }
    return out;
}

template <class S>
TensorT<S> slice(const TensorT<S>& a, int axis, int start, int len) {
    if (axis != 0 && axis != 1) throw ContractError("slice: axis must be 0 or 1");
    if (start < 0 || len <= 0 || start + len > a.shape()[axis])
        throw ShapeError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + len) + ") out of " + shape_str(a.shape()) +
                         " on axis " + std::to_string(axis));
    int rows = axis == 0 ? len : a.rows();
    int cols = axis == 0 ? a.cols() : len;
    TensorT<S> out = detail::make_result<S>(rows, cols, "slice", {a});
    auto& ov = out.values();
    const auto& av = a.values();
    const int acols = a.cols();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            int si = axis == 0 ? i + start : i;
            int sj = axis == 1 ? j + start : j;
            ov[static_cast<size_t>(i) * cols + j] = av[static_cast<size_t>(si) * acols + sj];
        }
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backward_fn = [an, axis, start, rows, cols, acols](NodeT<S>& self) {
            auto& g = an->grad_buf();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < cols; ++j) {
                    int si = axis == 0 ? i + start : i;
                    int sj = axis == 1 ? j + start : j;
                    g[static_cast<size_t>(si) * acols + sj] +=
                        self.grad[static_cast<size_t>(i) * cols + j];
                }
        };
    }
    return out;
}

template <class S>
TensorT<S> sum_axis(const TensorT<S>& a, int axis) {
    if (axis != 0 && axis != 1) throw ContractError("sum_axis: axis must be 0 or 1");
    int rows = axis == 0 ? 1 : a.rows();
    int cols = axis == 1 ? 1 : a.cols();
    TensorT<S> out = detail::make_result<S>(rows, cols, "sum_axis", {a});
    auto& ov = out.values();
    const auto& av = a.values();
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) {
            size_t o = axis == 0 ? j : static_cast<size_t>(i);
            ov[o] += av[static_cast<size_t>(i) * a.cols() + j];
        }
    if (out.requires_grad()) {
        auto an = a.node();
        int ar = a.rows(), ac = a.cols();
        out.node()->backward_fn = [an, axis, ar, ac](NodeT<S>& self) {
            auto& g = an->grad_buf();
            for (int i = 0; i < ar; ++i)
                for (int j = 0; j < ac; ++j) {
                    size_t o = axis == 0 ? j : static_cast<size_t>(i);
                    g[static_cast<size_t>(i) * ac + j] += self.grad[o];
                }
        };
    }
    return out;
}

template <class S>
TensorT<S> mean_axis(const TensorT<S>& a, int axis) {
    return scale(sum_axis(a, axis), 1.0 / a.shape()[axis]);
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    TensorT<S> out = detail::make_result<S>(1, 1, "sum_all", {a});
    S acc = S(0);
    for (S v : a.values()) acc += v;
    out.values()[0] = acc;
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backward_fn = [an](NodeT<S>& self) {
            auto& g = an->grad_buf();
            for (auto& gv : g) gv += self.grad[0];
        };
    }
    return out;
}

// Repeat a [1,n] row `rows` times.
template <class S>
TensorT<S> broadcast_rows(const TensorT<S>& a, int rows) {
    if (a.rows() != 1)
        throw ShapeError("broadcast_rows: expects [1,n], got " + shape_str(a.shape()));
    const int n = a.cols();
    TensorT<S> out = detail::make_result<S>(rows, n, "broadcast_rows", {a});
    auto& ov = out.values();
    for (int i = 0; i < rows; ++i)
        std::copy(a.values().begin(), a.values().end(), ov.begin() + static_cast<size_t>(i) * n);
    if (out.requires_grad()) {
        auto an = a.node();
        out.node()->backward_fn = [an, rows, n](NodeT<S>& self) {
            auto& g = an->grad_buf();
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < n; ++j) g[j] += self.grad[static_cast<size_t>(i) * n + j];
        };
    }
    return out;
}

// ---- embedding gather ----

template <class S>
TensorT<S> embedding_gather(const TensorT<S>& table, const std::vector<int>& ids) {
    if (ids.empty()) throw ContractError("embedding_gather: empty id list");
    const int V = table.rows(), d = table.cols();
    for (int id : ids)
        if (id < 0 || id >= V)
            throw ContractError("embedding_gather: id " + std::to_string(id) +
                                " out of vocab size " + std::to_string(V));
    TensorT<S> out = detail::make_result<S>(static_cast<int>(ids.size()), d, "embedding_gather",
                                            {table});
    auto& ov = out.values();
    const auto& tv = table.values();
    for (size_t b = 0; b < ids.size(); ++b)
        std::copy(tv.begin() + static_cast<size_t>(ids[b]) * d,
                  tv.begin() + static_cast<size_t>(ids[b] + 1) * d, ov.begin() + b * d);
    if (out.requires_grad()) {
        auto tn = table.node();
        out.node()->backward_fn = [tn, ids, d](NodeT<S>& self) {
            auto& g = tn->grad_buf();
            for (size_t b = 0; b < ids.size(); ++b)
                for (int j = 0; j < d; ++j)
                    g[static_cast<size_t>(ids[b]) * d + j] += self.grad[b * d + j];
        };
    }
    return out;
}

// ---- fused softmax cross-entropy over logits ----
//
// Per row b: loss_b = logsumexp(logits_b) - logits_b[target_b], scaled by
// weights[b] when given. Returns the scalar sum over rows. The log-sum-exp
// is max-shifted so large logits stay finite.
template <class S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits, const std::vector<int>& targets,
                                 const std::vector<double>& weights = {}) {
    const int B = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != B)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_str(logits.shape()));
    if (!weights.empty() && static_cast<int>(weights.size()) != B)
        throw ShapeError("softmax_cross_entropy: weights size " + std::to_string(weights.size()) +
                         " != batch " + std::to_string(B));
    for (int t : targets)
        if (t < 0 || t >= V)
            throw ContractError("softmax_cross_entropy: target " + std::to_string(t) +
                                " out of vocab " + std::to_string(V));
    TensorT<S> out = detail::make_result<S>(1, 1, "softmax_cross_entropy", {logits});
    const auto& lv = logits.values();
    auto probs = std::make_shared<std::vector<S>>(lv.size());
    double total = 0;
    for (int b = 0; b < B; ++b) {
        const S* row = lv.data() + static_cast<size_t>(b) * V;
        S* prow = probs->data() + static_cast<size_t>(b) * V;
        S mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int j = 0; j < V; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        double lse = static_cast<double>(mx) + std::log(denom);
        for (int j = 0; j < V; ++j)
            prow[j] = static_cast<S>(std::exp(static_cast<double>(row[j]) - lse));
        double w = weights.empty() ? 1.0 : weights[b];
        total += w * (lse - static_cast<double>(row[targets[b]]));
    }
    out.values()[0] = static_cast<S>(total);
    if (out.requires_grad()) {
        auto ln = logits.node();
        out.node()->backward_fn = [ln, probs, targets, weights, B, V](NodeT<S>& self) {
            auto& g = ln->grad_buf();
            const S up = self.grad[0];
            for (int b = 0; b < B; ++b) {
                double w = weights.empty() ? 1.0 : weights[b];
                if (w == 0.0) continue;
                const S* prow = probs->data() + static_cast<size_t>(b) * V;
                S* grow = g.data() + static_cast<size_t>(b) * V;
                for (int j = 0; j < V; ++j)
                    grow[j] += up * static_cast<S>(w) * prow[j];
                grow[targets[b]] -= up * static_cast<S>(w);
            }
        };
    }
    return out;
}

// ---- composed helpers ----

// Numerically stable row softmax built from graph primitives; the max shift
// is a constant, so gradients are exact.
template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    std::vector<S> mx(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        S m = x.at(i, 0);
        for (int j = 1; j < x.cols(); ++j) m = std::max(m, x.at(i, j));
        mx[i] = m;
    }
    TensorT<S> shift = TensorT<S>::from(std::move(mx), x.rows(), 1);
    TensorT<S> centered = sub(x, shift);
    TensorT<S> e = exp(centered);
    TensorT<S> lse = log(sum_axis(e, 1));
    return exp(sub(centered, lse));
}

// Stable log softmax per row, same max-shift scheme as softmax_rows.
template <class S>
TensorT<S> log_softmax_rows(const TensorT<S>& x) {
    std::vector<S> mx(x.rows());
    for (int i = 0; i < x.rows(); ++i) {
        S m = x.at(i, 0);
        for (int j = 1; j < x.cols(); ++j) m = std::max(m, x.at(i, j));
        mx[i] = m;
    }
    TensorT<S> shift = TensorT<S>::from(std::move(mx), x.rows(), 1);
    TensorT<S> centered = sub(x, shift);
    return sub(centered, log(sum_axis(exp(centered), 1)));
}

// Row selection with repetition allowed; same mechanics as an embedding
// lookup but named for state-shuffling call sites.
template <class S>
TensorT<S> gather_rows(const TensorT<S>& x, const std::vector<int>& rows) {
    return embedding_gather(x, rows);
}

// ---- backward ----

template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.numel() != 1)
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative topological order over the reachable subgraph.
    std::vector<NodeT<S>*> order;
    std::unordered_set<const NodeT<S>*> visited;
    struct Frame {
        NodeT<S>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            NodeT<S>* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buf()[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<S>* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
    }
}

}  // namespace ctvae
