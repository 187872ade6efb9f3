#pragma once

// Reverse-mode automatic differentiation over dense f32 arrays.
// Define-by-run: every op builds a fresh graph node; backward() walks the
// graph once in reverse topological order. Storage is 32-bit float,
// reductions accumulate in 64-bit.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "common.hpp"

namespace vcstar {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        if (d <= 0) throw ShapeError("dimension sizes must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // allocated on demand, same length as value
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    int64_t numel() const { return static_cast<int64_t>(value.size()); }

    std::vector<float>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
        return grad;
    }
};

// ---------------------------------------------------------------------------
// GEMM: C[M,N] = beta*C + A[M,N? no: M,K] * B[K,N], all row-major.
// Each output element is accumulated sequentially over k by a single worker,
// so results are bitwise identical for any thread count.

constexpr int kGemmMR = 8;
constexpr int kGemmNR = 32;

// K-innermost register tile; every output element is accumulated
// sequentially over k, so results do not depend on thread count.
template <int MR, int NR>
inline void gemm_microkernel(int K, const float* __restrict a, int lda, const float* __restrict b,
                             int ldb, float* __restrict c, int ldc) {
    float acc[MR][NR];
    for (int i = 0; i < MR; ++i)
        for (int j = 0; j < NR; ++j) acc[i][j] = 0.0f;
    for (int k = 0; k < K; ++k) {
        const float* brow = b + static_cast<int64_t>(k) * ldb;
        for (int i = 0; i < MR; ++i) {
            float av = a[static_cast<int64_t>(i) * lda + k];
            for (int j = 0; j < NR; ++j) acc[i][j] += av * brow[j];
        }
    }
    for (int i = 0; i < MR; ++i)
        for (int j = 0; j < NR; ++j) c[static_cast<int64_t>(i) * ldc + j] += acc[i][j];
}

// One MR-row block over a K panel: tiled columns first, scalar tails after.
// Rows that do not fill a tile run the scalar path entirely. lda is the full
// row stride of A (panels offset into rows).
template <int MR>
inline int gemm_tiled_columns(int N, int K, const float* a, int lda, const float* B, float* c) {
    int j0 = 0;
    for (; j0 + 32 <= N; j0 += 32) gemm_microkernel<MR, 32>(K, a, lda, B + j0, N, c + j0, N);
    if (j0 + 16 <= N) {
        gemm_microkernel<MR, 16>(K, a, lda, B + j0, N, c + j0, N);
        j0 += 16;
    }
    if (j0 + 8 <= N) {
        gemm_microkernel<MR, 8>(K, a, lda, B + j0, N, c + j0, N);
        j0 += 8;
    }
    return j0;
}

inline void gemm_block_row(int N, int K, int i0, int mr, const float* A, const float* B, float* C,
                           int lda) {
    const float* a = A + static_cast<int64_t>(i0) * lda;
    float* c = C + static_cast<int64_t>(i0) * N;
    int tiled_rows = 0, col_done = 0;
    if (mr >= 8) {
        col_done = gemm_tiled_columns<8>(N, K, a, lda, B, c);
        tiled_rows = 8;
    } else if (mr >= 4) {
        col_done = gemm_tiled_columns<4>(N, K, a, lda, B, c);
        tiled_rows = 4;
    } else if (mr >= 2) {
        col_done = gemm_tiled_columns<2>(N, K, a, lda, B, c);
        tiled_rows = 2;
    }
    for (int i = i0; i < i0 + tiled_rows; ++i) {
        const float* arow = A + static_cast<int64_t>(i) * lda;
        float* crow = C + static_cast<int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            float av = arow[k];
            const float* brow = B + static_cast<int64_t>(k) * N;
            for (int j = col_done; j < N; ++j) crow[j] += av * brow[j];
        }
    }
    for (int i = i0 + tiled_rows; i < i0 + mr; ++i) {
        const float* arow = A + static_cast<int64_t>(i) * lda;
        float* crow = C + static_cast<int64_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            float av = arow[k];
            const float* brow = B + static_cast<int64_t>(k) * N;
            for (int j = 0; j < N; ++j) crow[j] += av * brow[j];
        }
    }
}

inline void sgemm(int M, int N, int K, const float* A, const float* B, float* C,
                  float beta = 0.0f) {
    if (beta == 0.0f) {
        std::memset(C, 0, sizeof(float) * static_cast<size_t>(M) * N);
    } else if (beta != 1.0f) {
        for (int64_t i = 0; i < static_cast<int64_t>(M) * N; ++i) C[i] *= beta;
    }
    if (M == 0 || N == 0 || K == 0) return;
    // K panels sized so a B panel stays cache-resident while a thread's M
    // blocks sweep it. One parallel region per GEMM; panels iterate inside
    // each thread. Accumulation order per output element stays k-ascending.
    int kc = std::max(128, std::min(K, static_cast<int>(384 * 1024 / (std::max(N, 1) * 4))));
    int mblocks = (M + kGemmMR - 1) / kGemmMR;
    parallel_for(mblocks, [&](int64_t mb0, int64_t mb1) {
        for (int k0 = 0; k0 < K; k0 += kc) {
            int kpanel = std::min(kc, K - k0);
            const float* a0 = A + k0;
            const float* b0 = B + static_cast<int64_t>(k0) * N;
            for (int64_t mb = mb0; mb < mb1; ++mb) {
                int i0 = static_cast<int>(mb) * kGemmMR;
                int mr = std::min(kGemmMR, M - i0);
                gemm_block_row(N, kpanel, i0, mr, a0, b0, C, K);
            }
        }
    });
}

// C[M,N] += At^T * B where At is stored row-major [K,M].
inline void sgemm_tn(int M, int N, int K, const float* At, const float* B, float* C, float beta) {
    thread_local std::vector<float> packed;
    packed.resize(static_cast<size_t>(M) * K);
    float* pk = packed.data();
    parallel_for(M, [&](int64_t m0, int64_t m1) {
        for (int64_t m = m0; m < m1; ++m)
            for (int k = 0; k < K; ++k)
                pk[m * K + k] = At[static_cast<int64_t>(k) * M + m];
    });
    sgemm(M, N, K, pk, B, C, beta);
}

// C[M,N] += A * Bt^T where Bt is stored row-major [N,K].
inline void sgemm_nt(int M, int N, int K, const float* A, const float* Bt, float* C, float beta) {
    thread_local std::vector<float> packed;
    packed.resize(static_cast<size_t>(K) * N);
    float* pk = packed.data();
    parallel_for(K, [&](int64_t k0, int64_t k1) {
        for (int64_t k = k0; k < k1; ++k)
            for (int n = 0; n < N; ++n)
                pk[k * N + n] = Bt[static_cast<int64_t>(n) * K + k];
    });
    sgemm(M, N, K, A, pk, C, beta);
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return filled(shape, 0.0f, requires_grad);
    }

    static Tensor filled(const Shape& shape, float v, bool requires_grad = false) {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = shape;
        t.node_->value.assign(static_cast<size_t>(shape_numel(shape)), v);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor from_data(const Shape& shape, std::vector<float> data,
                            bool requires_grad = false) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ShapeError("from_data: buffer length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        for (float v : data)
            if (!std::isfinite(v)) throw NumericError("from_data: non-finite element");
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = shape;
        t.node_->value = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(float v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    // Fan-in scaling is the caller's job; this is a plain uniform fill.
    static Tensor uniform(const Shape& shape, float lo, float hi, Pcg32& rng,
                          bool requires_grad = false) {
        Tensor t = zeros(shape, requires_grad);
        for (auto& v : t.node_->value) v = rng.uniform(lo, hi);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return check().shape; }
    int ndim() const { return static_cast<int>(check().shape.size()); }
    int dim(int i) const { return check().shape.at(static_cast<size_t>(i)); }
    int64_t numel() const { return check().numel(); }

    const std::vector<float>& value() const { return check().value; }
    std::vector<float>& mutable_value() { return check().value; }
    float item() const {
        if (numel() != 1) throw ShapeError("item: tensor is not scalar");
        return check().value[0];
    }

    bool requires_grad() const { return check().requires_grad; }
    const std::vector<float>& grad() const {
        auto& n = const_cast<detail::Node&>(check());
        return n.grad_buffer();
    }
    void zero_grad() {
        auto& n = check();
        std::fill(n.grad_buffer().begin(), n.grad_buffer().end(), 0.0f);
    }

    Tensor detach() const {
        Tensor t;
        t.node_ = std::make_shared<detail::Node>();
        t.node_->shape = check().shape;
        t.node_->value = check().value;
        t.node_->requires_grad = false;
        t.node_->name = check().name;
        return t;
    }

    const std::string& name() const { return check().name; }
    Tensor& set_name(std::string n) {
        check().name = std::move(n);
        return *this;
    }

    bool all_finite() const {
        for (float v : check().value)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Reverse-mode sweep from a scalar. Gradients accumulate additively
    // across repeated calls; callers zero them between steps.
    void backward() const {
        auto& root = check();
        if (root.numel() != 1) throw ShapeError("backward: loss must be scalar");
        if (!root.requires_grad)
            throw Error("backward: tensor is not tracked by the autodiff graph");

        std::vector<detail::Node*> order;
        std::unordered_set<detail::Node*> visited;
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(&root, 0);
        visited.insert(&root);
        while (!stack.empty()) {
            auto& [node, idx] = stack.back();
            if (idx < node->parents.size()) {
                detail::Node* p = node->parents[idx].get();
                ++idx;
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        // Interior grads are transient per sweep; only leaves accumulate
        // across repeated backward calls. Fresh nodes get a zeroed buffer
        // from grad_buffer() anyway, so only reused ones need clearing.
        for (detail::Node* n : order)
            if (n->backprop && n->grad.size() == n->value.size())
                std::fill(n->grad.begin(), n->grad.end(), 0.0f);
        root.grad_buffer()[0] += 1.0f;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if ((*it)->backprop) (*it)->backprop(**it);
        }
    }

    // Walks the graph and returns the name of a node holding a non-finite
    // value, or empty string if the whole graph is finite.
    std::string find_non_finite() const {
        std::unordered_set<detail::Node*> visited;
        std::vector<detail::Node*> stack{&check()};
        std::string found;
        while (!stack.empty()) {
            detail::Node* n = stack.back();
            stack.pop_back();
            if (!visited.insert(n).second) continue;
            for (float v : n->value)
                if (!std::isfinite(v)) {
                    found = n->name.empty() ? "<unnamed>" : n->name;
                    break;
                }
            for (auto& p : n->parents) stack.push_back(p.get());
        }
        return found;
    }

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    friend Tensor make_op_result(Shape shape, std::vector<Tensor> parents, std::string name);
    detail::Node& check() const {
        if (!node_) throw Error("use of undefined tensor");
        return *node_;
    }
    std::shared_ptr<detail::Node> node_;
};

inline Tensor make_op_result(Shape shape, std::vector<Tensor> parents, std::string name) {
    tune_allocator_once();
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value.assign(static_cast<size_t>(shape_numel(t.node_->shape)), 0.0f);
    t.node_->name = std::move(name);
    for (auto& p : parents) {
        t.node_->parents.push_back(p.node());
        if (p.requires_grad()) t.node_->requires_grad = true;
    }
    return t;
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Tensor operator+(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out = make_op_result(a.shape(), {a, b}, "add");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    };
    return out;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out = make_op_result(a.shape(), {a, b}, "sub");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    };
    return out;
}

inline Tensor operator*(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out = make_op_result(a.shape(), {a, b}, "mul");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](detail::Node& self) {
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * an->value[i];
        }
    };
    return out;
}

inline Tensor operator*(const Tensor& a, float s) {
    Tensor out = make_op_result(a.shape(), {a}, "scale");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * s;
    auto an = a.node();
    out.node()->backprop = [an, s](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    };
    return out;
}

inline Tensor operator*(float s, const Tensor& a) { return a * s; }
inline Tensor operator-(const Tensor& a) { return a * -1.0f; }

inline Tensor operator+(const Tensor& a, float s) {
    Tensor out = make_op_result(a.shape(), {a}, "offset");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
    auto an = a.node();
    out.node()->backprop = [an](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
    return out;
}

template <typename F, typename DF>
inline Tensor elementwise_unary(const Tensor& a, F f, DF df, const char* name) {
    Tensor out = make_op_result(a.shape(), {a}, name);
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = f(av[i]);
    auto an = a.node();
    out.node()->backprop = [an, df](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(an->value[i], self.value[i]);
    };
    return out;
}

inline Tensor exp(const Tensor& a) {
    return elementwise_unary(
        a, [](float x) { return std::exp(x); }, [](float, float y) { return y; }, "exp");
}

inline Tensor log(const Tensor& a) {
    return elementwise_unary(
        a, [](float x) { return std::log(x); }, [](float x, float) { return 1.0f / x; }, "log");
}

inline Tensor sigmoid(const Tensor& a) {
    return elementwise_unary(
        a,
        [](float x) {
            return x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
        },
        [](float, float y) { return y * (1.0f - y); }, "sigmoid");
}

// log(sigmoid(x)), computed without overflow on either tail.
inline Tensor log_sigmoid(const Tensor& a) {
    return elementwise_unary(
        a,
        [](float x) {
            return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
        },
        [](float x, float) {
            // d/dx log sigmoid(x) = sigmoid(-x)
            return x >= 0 ? std::exp(-x) / (1.0f + std::exp(-x)) : 1.0f / (1.0f + std::exp(x));
        },
        "log_sigmoid");
}

// log(1 - exp(x)) for x < 0. Used to turn log D into log(1-D).
inline Tensor log1mexp(const Tensor& a) {
    for (float v : a.value())
        if (v >= 0.0f) throw NumericError("log1mexp: input must be strictly negative");
    return elementwise_unary(
        a,
        [](float x) {
            double xd = x;
            return static_cast<float>(xd > -0.6931471805599453 ? std::log(-std::expm1(xd))
                                                               : std::log1p(-std::exp(xd)));
        },
        [](float x, float y) { return static_cast<float>(-std::exp(static_cast<double>(x) - y)); },
        "log1mexp");
}

// Gradient passes only where x stays strictly inside (lo, hi).
inline Tensor clamp(const Tensor& a, float lo, float hi) {
    if (!(lo < hi)) throw ConfigError("clamp: lo must be < hi");
    return elementwise_unary(
        a, [lo, hi](float x) { return std::min(std::max(x, lo), hi); },
        [lo, hi](float x, float) { return (x > lo && x < hi) ? 1.0f : 0.0f; }, "clamp");
}

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)

inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.value()) acc += v;
    Tensor out = make_op_result({1}, {a}, "sum");
    out.mutable_value()[0] = static_cast<float>(acc);
    auto an = a.node();
    out.node()->backprop = [an](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        float seed = self.grad[0];
        for (auto& v : g) v += seed;
    };
    return out;
}

inline Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (float v : a.value()) acc += v;
    int64_t n = a.numel();
    Tensor out = make_op_result({1}, {a}, "mean");
    out.mutable_value()[0] = static_cast<float>(acc / static_cast<double>(n));
    auto an = a.node();
    out.node()->backprop = [an, n](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        float seed = self.grad[0] / static_cast<float>(n);
        for (auto& v : g) v += seed;
    };
    return out;
}

// Sums all dimensions except dim 0; result shape [B].
inline Tensor sum_per_sample(const Tensor& a) {
    if (a.ndim() < 1) throw ShapeError("sum_per_sample: needs at least one dimension");
    int b = a.dim(0);
    int64_t inner = a.numel() / b;
    Tensor out = make_op_result({b}, {a}, "sum_per_sample");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (int i = 0; i < b; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < inner; ++j) acc += av[static_cast<size_t>(i * inner + j)];
        ov[static_cast<size_t>(i)] = static_cast<float>(acc);
    }
    auto an = a.node();
    out.node()->backprop = [an, b, inner](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (int i = 0; i < b; ++i) {
            float seed = self.grad[static_cast<size_t>(i)];
            for (int64_t j = 0; j < inner; ++j) g[static_cast<size_t>(i * inner + j)] += seed;
        }
    };
    return out;
}

// Sums over H,W of [B,C,H,W]; result shape [B,C].
inline Tensor sum_spatial(const Tensor& a) {
    if (a.ndim() != 4) throw ShapeError("sum_spatial: expected 4-d tensor");
    int B = a.dim(0), C = a.dim(1);
    int64_t hw = static_cast<int64_t>(a.dim(2)) * a.dim(3);
    Tensor out = make_op_result({B, C}, {a}, "sum_spatial");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
        double acc = 0.0;
        for (int64_t i = 0; i < hw; ++i) acc += av[static_cast<size_t>(bc * hw + i)];
        ov[static_cast<size_t>(bc)] = static_cast<float>(acc);
    }
    auto an = a.node();
    out.node()->backprop = [an, B, C, hw](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (int64_t bc = 0; bc < static_cast<int64_t>(B) * C; ++bc) {
            float seed = self.grad[static_cast<size_t>(bc)];
            for (int64_t i = 0; i < hw; ++i) g[static_cast<size_t>(bc * hw + i)] += seed;
        }
    };
    return out;
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: element count mismatch for " + shape_str(shape));
    Tensor out = make_op_result(shape, {a}, "reshape");
    out.mutable_value() = a.value();
    auto an = a.node();
    out.node()->backprop = [an](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
    return out;
}

// ---------------------------------------------------------------------------
// GLU: linear path modulated by a sigmoid output gate.

inline Tensor glu(const Tensor& linear_path, const Tensor& gate_path) {
    detail::require_same_shape(linear_path, gate_path, "glu");
    Tensor out = make_op_result(linear_path.shape(), {linear_path, gate_path}, "glu");
    auto& ov = out.mutable_value();
    const auto& lv = linear_path.value();
    const auto& gv = gate_path.value();
    parallel_for(static_cast<int64_t>(ov.size()), [&](int64_t i0, int64_t i1) {
        for (int64_t i = i0; i < i1; ++i) {
            float g = gv[static_cast<size_t>(i)];
            float s = g >= 0 ? 1.0f / (1.0f + std::exp(-g)) : std::exp(g) / (1.0f + std::exp(g));
            ov[static_cast<size_t>(i)] = lv[static_cast<size_t>(i)] * s;
        }
    });
    auto ln = linear_path.node(), gn = gate_path.node();
    out.node()->backprop = [ln, gn](detail::Node& self) {
        float* lg = ln->requires_grad ? ln->grad_buffer().data() : nullptr;
        float* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
        parallel_for(static_cast<int64_t>(self.value.size()), [&](int64_t i0, int64_t i1) {
            for (int64_t i = i0; i < i1; ++i) {
                float x = gn->value[static_cast<size_t>(i)];
                float s = x >= 0 ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
                if (lg) lg[i] += self.grad[static_cast<size_t>(i)] * s;
                if (gg)
                    gg[i] += self.grad[static_cast<size_t>(i)] * ln->value[static_cast<size_t>(i)] *
                             s * (1.0f - s);
            }
        });
    };
    return out;
}

// ---------------------------------------------------------------------------
// Channel softmax over dim 1 of [B,K,H,W], stable via max subtraction.

namespace detail {

inline void check_4d(const Tensor& t, const char* op) {
    if (t.ndim() != 4) throw ShapeError(std::string(op) + ": expected 4-d tensor, got " +
                                        shape_str(t.shape()));
}

}  // namespace detail

inline Tensor softmax_channels(const Tensor& a) {
    detail::check_4d(a, "softmax_channels");
    int B = a.dim(0), K = a.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t hw = static_cast<int64_t>(H) * W;
    Tensor out = make_op_result(a.shape(), {a}, "softmax_channels");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p) {
            int64_t base = b * K * hw + p;
            float mx = -std::numeric_limits<float>::infinity();
            for (int k = 0; k < K; ++k) mx = std::max(mx, av[base + k * hw]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(av[base + k * hw] - mx));
            for (int k = 0; k < K; ++k)
                ov[base + k * hw] =
                    static_cast<float>(std::exp(static_cast<double>(av[base + k * hw] - mx)) / z);
        }
    auto an = a.node();
    out.node()->backprop = [an, B, K, hw](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (int b = 0; b < B; ++b)
            for (int64_t p = 0; p < hw; ++p) {
                int64_t base = b * K * hw + p;
                double dot = 0.0;
                for (int k = 0; k < K; ++k)
                    dot += static_cast<double>(self.grad[base + k * hw]) * self.value[base + k * hw];
                for (int k = 0; k < K; ++k)
                    g[base + k * hw] += self.value[base + k * hw] *
                                        (self.grad[base + k * hw] - static_cast<float>(dot));
            }
    };
    return out;
}

inline Tensor log_softmax_channels(const Tensor& a) {
    detail::check_4d(a, "log_softmax_channels");
    int B = a.dim(0), K = a.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t hw = static_cast<int64_t>(H) * W;
    Tensor out = make_op_result(a.shape(), {a}, "log_softmax_channels");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < hw; ++p) {
            int64_t base = b * K * hw + p;
            float mx = -std::numeric_limits<float>::infinity();
            for (int k = 0; k < K; ++k) mx = std::max(mx, av[base + k * hw]);
            double z = 0.0;
            for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(av[base + k * hw] - mx));
            double logz = std::log(z) + mx;
            for (int k = 0; k < K; ++k)
                ov[base + k * hw] = static_cast<float>(av[base + k * hw] - logz);
        }
    auto an = a.node();
    out.node()->backprop = [an, B, K, hw](detail::Node& self) {
        if (!an->requires_grad) return;
        auto& g = an->grad_buffer();
        for (int b = 0; b < B; ++b)
            for (int64_t p = 0; p < hw; ++p) {
                int64_t base = b * K * hw + p;
                double gsum = 0.0;
                for (int k = 0; k < K; ++k) gsum += self.grad[base + k * hw];
                for (int k = 0; k < K; ++k)
                    g[base + k * hw] +=
                        self.grad[base + k * hw] -
                        static_cast<float>(std::exp(static_cast<double>(self.value[base + k * hw])) *
                                           gsum);
            }
    };
    return out;
}

// ---------------------------------------------------------------------------
// lp loss: sum of |a-b|^rho over all elements, averaged over dim-0 batch.

inline Tensor lp_loss(const Tensor& a, const Tensor& b, float rho) {
    detail::require_same_shape(a, b, "lp_loss");
    if (rho < 1.0f) throw ConfigError("lp_loss: rho must be >= 1");
    int batch = a.ndim() >= 1 ? a.dim(0) : 1;
    double acc = 0.0;
    const auto& av = a.value();
    const auto& bv = b.value();
    for (size_t i = 0; i < av.size(); ++i) {
        double d = std::abs(static_cast<double>(av[i]) - bv[i]);
        acc += (rho == 1.0f) ? d : (rho == 2.0f ? d * d : std::pow(d, rho));
    }
    Tensor out = make_op_result({1}, {a, b}, "lp_loss");
    out.mutable_value()[0] = static_cast<float>(acc / batch);
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn, rho, batch](detail::Node& self) {
        float seed = self.grad[0] / static_cast<float>(batch);
        for (size_t i = 0; i < an->value.size(); ++i) {
            float d = an->value[i] - bn->value[i];
            float mag = std::abs(d);
            float sign = d > 0 ? 1.0f : (d < 0 ? -1.0f : 0.0f);
            float dd = (rho == 1.0f) ? sign : rho * std::pow(mag, rho - 1.0f) * sign;
            if (an->requires_grad) an->grad_buffer()[i] += seed * dd;
            if (bn->requires_grad) bn->grad_buffer()[i] -= seed * dd;
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// concat along channel dim of [B,C,H,W]

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::check_4d(a, "concat_channels");
    detail::check_4d(b, "concat_channels");
    if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ShapeError("concat_channels: non-channel dims must match, got " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    int B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t hw = static_cast<int64_t>(H) * W;
    Tensor out = make_op_result({B, Ca + Cb, H, W}, {a, b}, "concat_channels");
    auto& ov = out.mutable_value();
    const auto& av = a.value();
    const auto& bv = b.value();
    for (int i = 0; i < B; ++i) {
        std::memcpy(ov.data() + (static_cast<int64_t>(i) * (Ca + Cb)) * hw,
                    av.data() + static_cast<int64_t>(i) * Ca * hw, sizeof(float) * Ca * hw);
        std::memcpy(ov.data() + (static_cast<int64_t>(i) * (Ca + Cb) + Ca) * hw,
                    bv.data() + static_cast<int64_t>(i) * Cb * hw, sizeof(float) * Cb * hw);
    }
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn, B, Ca, Cb, hw](detail::Node& self) {
        for (int i = 0; i < B; ++i) {
            if (an->requires_grad) {
                auto& g = an->grad_buffer();
                const float* src = self.grad.data() + (static_cast<int64_t>(i) * (Ca + Cb)) * hw;
                float* dst = g.data() + static_cast<int64_t>(i) * Ca * hw;
                for (int64_t j = 0; j < Ca * hw; ++j) dst[j] += src[j];
            }
            if (bn->requires_grad) {
                auto& g = bn->grad_buffer();
                const float* src =
                    self.grad.data() + (static_cast<int64_t>(i) * (Ca + Cb) + Ca) * hw;
                float* dst = g.data() + static_cast<int64_t>(i) * Cb * hw;
                for (int64_t j = 0; j < Cb * hw; ++j) dst[j] += src[j];
            }
        }
    };
    return out;
}

// Concatenation along dim 0; trailing dims must match. Used to stack the
// linear- and gate-path weights of a gated layer into one convolution.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != b.ndim()) throw ShapeError("concat_rows: rank mismatch");
    for (int i = 1; i < a.ndim(); ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("concat_rows: trailing dims must match");
    Shape shape = a.shape();
    shape[0] += b.dim(0);
    Tensor out = make_op_result(shape, {a, b}, "concat_rows");
    auto& ov = out.mutable_value();
    std::memcpy(ov.data(), a.value().data(), a.value().size() * sizeof(float));
    std::memcpy(ov.data() + a.numel(), b.value().data(), b.value().size() * sizeof(float));
    auto an = a.node(), bn = b.node();
    out.node()->backprop = [an, bn](detail::Node& self) {
        size_t na = an->value.size();
        if (an->requires_grad) {
            auto& g = an->grad_buffer();
            for (size_t i = 0; i < na; ++i) g[i] += self.grad[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->grad_buffer();
            for (size_t i = 0; i < bn->value.size(); ++i) g[i] += self.grad[na + i];
        }
    };
    return out;
}

// Channel slice of [B,C,H,W].
inline Tensor slice_channels(const Tensor& x, int c_begin, int c_end) {
    detail::check_4d(x, "slice_channels");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (c_begin < 0 || c_end > C || c_begin >= c_end)
        throw ShapeError("slice_channels: bad channel range");
    int Cs = c_end - c_begin;
    int64_t hw = static_cast<int64_t>(H) * W;
    Tensor out = make_op_result({B, Cs, H, W}, {x}, "slice_channels");
    auto& ov = out.mutable_value();
    const auto& xv = x.value();
    for (int b = 0; b < B; ++b)
        std::memcpy(ov.data() + static_cast<int64_t>(b) * Cs * hw,
                    xv.data() + (static_cast<int64_t>(b) * C + c_begin) * hw,
                    sizeof(float) * Cs * hw);
    auto xn = x.node();
    out.node()->backprop = [xn, B, C, Cs, c_begin, hw](detail::Node& self) {
        if (!xn->requires_grad) return;
        auto& g = xn->grad_buffer();
        for (int b = 0; b < B; ++b) {
            const float* src = self.grad.data() + static_cast<int64_t>(b) * Cs * hw;
            float* dst = g.data() + (static_cast<int64_t>(b) * C + c_begin) * hw;
            for (int64_t i = 0; i < Cs * hw; ++i) dst[i] += src[i];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// conv2d and its adjoint

struct Conv2dGeometry {
    int batch, cin, h, w;
    int cout, kh, kw;
    int sh, sw, ph, pw;
    int oh, ow;
};

namespace detail {

inline Conv2dGeometry conv_geometry(const Tensor& x, const Tensor& weight, std::pair<int, int> stride,
                                    std::pair<int, int> padding) {
    check_4d(x, "conv2d");
    check_4d(weight, "conv2d");
    Conv2dGeometry g;
    g.batch = x.dim(0);
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.sh = stride.first;
    g.sw = stride.second;
    g.ph = padding.first;
    g.pw = padding.second;
    if (g.sh < 1 || g.sw < 1) throw ConfigError("conv2d: stride must be >= 1");
    if (g.ph < 0 || g.pw < 0) throw ConfigError("conv2d: padding must be >= 0");
    if (weight.dim(1) != g.cin)
        throw ShapeError("conv2d: input channels " + std::to_string(g.cin) +
                         " do not match weight " + shape_str(weight.shape()));
    g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
    g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;
    if (g.h + 2 * g.ph < g.kh || g.w + 2 * g.pw < g.kw || g.oh < 1 || g.ow < 1)
        throw ShapeError("conv2d: kernel does not fit padded input");
    return g;
}

// Batched column matrix: col[Cin*kh*kw, B*oh*ow], sample b occupying the
// column block [b*S, (b+1)*S). Parallel over (sample, row) pairs.
inline void im2col_batched(const float* x, const Conv2dGeometry& g, float* col) {
    int64_t S = static_cast<int64_t>(g.oh) * g.ow;
    int64_t ld = static_cast<int64_t>(g.batch) * S;
    int rows = g.cin * g.kh * g.kw;
    parallel_for(static_cast<int64_t>(g.batch) * rows, [&](int64_t t0, int64_t t1) {
        for (int64_t t = t0; t < t1; ++t) {
            int b = static_cast<int>(t / rows);
            int64_t r = t % rows;
            int c = static_cast<int>(r / (g.kh * g.kw));
            int rem = static_cast<int>(r % (g.kh * g.kw));
            int ki = rem / g.kw;
            int kj = rem % g.kw;
            const float* xc =
                x + (static_cast<int64_t>(b) * g.cin + c) * g.h * g.w;
            float* dst = col + r * ld + static_cast<int64_t>(b) * S;
            for (int oi = 0; oi < g.oh; ++oi) {
                int ii = oi * g.sh - g.ph + ki;
                if (ii < 0 || ii >= g.h) {
                    std::memset(dst + static_cast<int64_t>(oi) * g.ow, 0, sizeof(float) * g.ow);
                    continue;
                }
                const float* xrow = xc + static_cast<int64_t>(ii) * g.w;
                float* drow = dst + static_cast<int64_t>(oi) * g.ow;
                for (int oj = 0; oj < g.ow; ++oj) {
                    int jj = oj * g.sw - g.pw + kj;
                    drow[oj] = (jj >= 0 && jj < g.w) ? xrow[jj] : 0.0f;
                }
            }
        }
    });
}

// Adjoint scatter of im2col_batched. A fixed (sample, channel) pair touches
// a disjoint image slab, so that is the parallel domain.
inline void col2im_batched_accumulate(const float* col, const Conv2dGeometry& g, float* x) {
    int64_t S = static_cast<int64_t>(g.oh) * g.ow;
    int64_t ld = static_cast<int64_t>(g.batch) * S;
    parallel_for(static_cast<int64_t>(g.batch) * g.cin, [&](int64_t t0, int64_t t1) {
        for (int64_t t = t0; t < t1; ++t) {
            int b = static_cast<int>(t / g.cin);
            int c = static_cast<int>(t % g.cin);
            float* xc = x + (static_cast<int64_t>(b) * g.cin + c) * g.h * g.w;
            for (int ki = 0; ki < g.kh; ++ki)
                for (int kj = 0; kj < g.kw; ++kj) {
                    const float* src = col + ((static_cast<int64_t>(c) * g.kh + ki) * g.kw + kj) * ld +
                                       static_cast<int64_t>(b) * S;
                    for (int oi = 0; oi < g.oh; ++oi) {
                        int ii = oi * g.sh - g.ph + ki;
                        if (ii < 0 || ii >= g.h) continue;
                        float* xrow = xc + static_cast<int64_t>(ii) * g.w;
                        const float* srow = src + static_cast<int64_t>(oi) * g.ow;
                        for (int oj = 0; oj < g.ow; ++oj) {
                            int jj = oj * g.sw - g.pw + kj;
                            if (jj >= 0 && jj < g.w) xrow[jj] += srow[oj];
                        }
                    }
                }
        }
    });
}

// Copies between [B,C,S] image layout and [C, B*S] GEMM layout.
inline void image_to_rows(const float* img, int batch, int ch, int64_t S, float* rows) {
    parallel_for(static_cast<int64_t>(batch) * ch, [&](int64_t t0, int64_t t1) {
        for (int64_t t = t0; t < t1; ++t) {
            int64_t b = t / ch, c = t % ch;
            std::memcpy(rows + c * batch * S + b * S, img + (b * ch + c) * S, sizeof(float) * S);
        }
    });
}

inline void rows_to_image(const float* rows, int batch, int ch, int64_t S, float* img,
                          const float* bias_per_ch, bool accumulate) {
    parallel_for(static_cast<int64_t>(batch) * ch, [&](int64_t t0, int64_t t1) {
        for (int64_t t = t0; t < t1; ++t) {
            int64_t b = t / ch, c = t % ch;
            const float* src = rows + c * batch * S + b * S;
            float* dst = img + (b * ch + c) * S;
            float add = bias_per_ch ? bias_per_ch[c] : 0.0f;
            if (accumulate)
                for (int64_t i = 0; i < S; ++i) dst[i] += src[i] + add;
            else
                for (int64_t i = 0; i < S; ++i) dst[i] = src[i] + add;
        }
    });
}

struct ColScratch {
    std::vector<float> buf;
    float* get(int64_t n) {
        if (static_cast<int64_t>(buf.size()) < n) buf.resize(static_cast<size_t>(n));
        return buf.data();
    }
};

inline ColScratch& scratch_a() {
    thread_local ColScratch s;
    return s;
}
inline ColScratch& scratch_b() {
    thread_local ColScratch s;
    return s;
}

inline void check_bias(const Tensor& bias, int ch, const char* op) {
    if (!bias.defined()) return;
    if (bias.ndim() != 1 || bias.dim(0) != ch)
        throw ShapeError(std::string(op) + ": bias must have shape [" + std::to_string(ch) + "]");
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     std::pair<int, int> stride, std::pair<int, int> padding) {
    Conv2dGeometry g = detail::conv_geometry(x, weight, stride, padding);
    detail::check_bias(bias, g.cout, "conv2d");
    std::vector<Tensor> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    Tensor out = make_op_result({g.batch, g.cout, g.oh, g.ow}, parents, "conv2d");

    int64_t S = static_cast<int64_t>(g.oh) * g.ow;
    int64_t cols = static_cast<int64_t>(g.batch) * S;
    int64_t ck = static_cast<int64_t>(g.cin) * g.kh * g.kw;

    // the column matrix is kept alive for the backward pass; at batch 1 the
    // [C, B*S] GEMM layout coincides with the image layout, so the
    // gather/scatter copies drop out
    auto col = std::make_shared<std::vector<float>>(static_cast<size_t>(ck * cols));
    detail::im2col_batched(x.value().data(), g, col->data());
    if (g.batch == 1) {
        detail::sgemm(g.cout, static_cast<int>(cols), static_cast<int>(ck), weight.value().data(),
                      col->data(), out.mutable_value().data(), 0.0f);
        if (bias.defined()) {
            auto& ov = out.mutable_value();
            for (int c = 0; c < g.cout; ++c) {
                float add = bias.value()[static_cast<size_t>(c)];
                float* dst = ov.data() + static_cast<int64_t>(c) * S;
                for (int64_t i = 0; i < S; ++i) dst[i] += add;
            }
        }
    } else {
        float* tmp = detail::scratch_a().get(static_cast<int64_t>(g.cout) * cols);
        detail::sgemm(g.cout, static_cast<int>(cols), static_cast<int>(ck), weight.value().data(),
                      col->data(), tmp, 0.0f);
        detail::rows_to_image(tmp, g.batch, g.cout, S, out.mutable_value().data(),
                              bias.defined() ? bias.value().data() : nullptr, false);
    }

    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    out.node()->backprop = [xn, wn, bn, g, S, cols, ck, col](detail::Node& self) {
        const float* gout = self.grad.data();
        if (bn && bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (int c = 0; c < g.cout; ++c) {
                double acc = 0.0;
                for (int b = 0; b < g.batch; ++b) {
                    const float* src = gout + (static_cast<int64_t>(b) * g.cout + c) * S;
                    for (int64_t i = 0; i < S; ++i) acc += src[i];
                }
                gb[static_cast<size_t>(c)] += static_cast<float>(acc);
            }
        }
        if (!wn->requires_grad && !xn->requires_grad) return;
        const float* gout_rows;
        if (g.batch == 1) {
            gout_rows = gout;
        } else {
            float* tmp = detail::scratch_a().get(static_cast<int64_t>(g.cout) * cols);
            detail::image_to_rows(gout, g.batch, g.cout, S, tmp);
            gout_rows = tmp;
        }
        if (wn->requires_grad) {
            detail::sgemm_nt(g.cout, static_cast<int>(ck), static_cast<int>(cols), gout_rows,
                             col->data(), wn->grad_buffer().data(), 1.0f);
        }
        if (xn->requires_grad) {
            float* dcol = detail::scratch_b().get(ck * cols);
            detail::sgemm_tn(static_cast<int>(ck), static_cast<int>(cols), g.cout,
                             wn->value.data(), gout_rows, dcol, 0.0f);
            detail::col2im_batched_accumulate(dcol, g, xn->grad_buffer().data());
        }
    };
    return out;
}

// Transposed convolution: the exact adjoint of conv2d under the same
// stride/padding. Weight layout matches conv2d ([Cout, Cin, kh, kw]); the
// input here plays conv2d's output role. output_padding selects among the
// input sizes that map to the same conv2d output size.
inline Tensor conv2d_transposed(const Tensor& x, const Tensor& weight, const Tensor& bias,
                                std::pair<int, int> stride, std::pair<int, int> padding,
                                std::pair<int, int> output_padding = {0, 0}) {
    detail::check_4d(x, "conv2d_transposed");
    detail::check_4d(weight, "conv2d_transposed");
    Conv2dGeometry g;
    g.batch = x.dim(0);
    g.cout = weight.dim(0);
    g.cin = weight.dim(1);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.sh = stride.first;
    g.sw = stride.second;
    g.ph = padding.first;
    g.pw = padding.second;
    g.oh = x.dim(2);
    g.ow = x.dim(3);
    if (x.dim(1) != g.cout)
        throw ShapeError("conv2d_transposed: input channels " + std::to_string(x.dim(1)) +
                         " do not match weight " + shape_str(weight.shape()));
    if (g.sh < 1 || g.sw < 1) throw ConfigError("conv2d_transposed: stride must be >= 1");
    int oph = output_padding.first, opw = output_padding.second;
    if (oph < 0 || oph >= g.sh || opw < 0 || opw >= g.sw)
        throw ConfigError("conv2d_transposed: output_padding must lie in [0, stride)");
    g.h = (g.oh - 1) * g.sh - 2 * g.ph + g.kh + oph;
    g.w = (g.ow - 1) * g.sw - 2 * g.pw + g.kw + opw;
    if (g.h < 1 || g.w < 1) throw ShapeError("conv2d_transposed: empty output");
    detail::check_bias(bias, g.cin, "conv2d_transposed");

    std::vector<Tensor> parents{x, weight};
    if (bias.defined()) parents.push_back(bias);
    Tensor out = make_op_result({g.batch, g.cin, g.h, g.w}, parents, "conv2d_transposed");

    int64_t S = static_cast<int64_t>(g.oh) * g.ow;
    int64_t cols = static_cast<int64_t>(g.batch) * S;
    int64_t ck = static_cast<int64_t>(g.cin) * g.kh * g.kw;
    {
        const float* x_rows;
        if (g.batch == 1) {
            x_rows = x.value().data();
        } else {
            float* tmp = detail::scratch_a().get(static_cast<int64_t>(g.cout) * cols);
            detail::image_to_rows(x.value().data(), g.batch, g.cout, S, tmp);
            x_rows = tmp;
        }
        float* dcol = detail::scratch_b().get(ck * cols);
        detail::sgemm_tn(static_cast<int>(ck), static_cast<int>(cols), g.cout,
                         weight.value().data(), x_rows, dcol, 0.0f);
        detail::col2im_batched_accumulate(dcol, g, out.mutable_value().data());
    }
    if (bias.defined()) {
        const auto& bv = bias.value();
        int64_t imhw = static_cast<int64_t>(g.h) * g.w;
        auto& ov = out.mutable_value();
        parallel_for(static_cast<int64_t>(g.batch) * g.cin, [&](int64_t t0, int64_t t1) {
            for (int64_t t = t0; t < t1; ++t) {
                float* dst = ov.data() + t * imhw;
                float add = bv[static_cast<size_t>(t % g.cin)];
                for (int64_t i = 0; i < imhw; ++i) dst[i] += add;
            }
        });
    }

    auto xn = x.node(), wn = weight.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    out.node()->backprop = [xn, wn, bn, g, S, cols, ck](detail::Node& self) {
        int64_t imhw = static_cast<int64_t>(g.h) * g.w;
        if (bn && bn->requires_grad) {
            auto& gb = bn->grad_buffer();
            for (int c = 0; c < g.cin; ++c) {
                double acc = 0.0;
                for (int b = 0; b < g.batch; ++b) {
                    const float* src = self.grad.data() + (static_cast<int64_t>(b) * g.cin + c) * imhw;
                    for (int64_t i = 0; i < imhw; ++i) acc += src[i];
                }
                gb[static_cast<size_t>(c)] += static_cast<float>(acc);
            }
        }
        if (!xn->requires_grad && !wn->requires_grad) return;
        // one im2col of the incoming gradient serves both dX and dW
        std::vector<float> col_dy(static_cast<size_t>(ck * cols));
        detail::im2col_batched(self.grad.data(), g, col_dy.data());
        if (xn->requires_grad) {
            if (g.batch == 1) {
                detail::sgemm(g.cout, static_cast<int>(cols), static_cast<int>(ck),
                              wn->value.data(), col_dy.data(), xn->grad_buffer().data(), 1.0f);
            } else {
                float* tmp = detail::scratch_a().get(static_cast<int64_t>(g.cout) * cols);
                detail::sgemm(g.cout, static_cast<int>(cols), static_cast<int>(ck),
                              wn->value.data(), col_dy.data(), tmp, 0.0f);
                detail::rows_to_image(tmp, g.batch, g.cout, S, xn->grad_buffer().data(), nullptr,
                                      true);
            }
        }
        if (wn->requires_grad) {
            const float* x_rows;
            if (g.batch == 1) {
                x_rows = xn->value.data();
            } else {
                float* tmp = detail::scratch_a().get(static_cast<int64_t>(g.cout) * cols);
                detail::image_to_rows(xn->value.data(), g.batch, g.cout, S, tmp);
                x_rows = tmp;
            }
            detail::sgemm_nt(g.cout, static_cast<int>(ck), static_cast<int>(cols), x_rows,
                             col_dy.data(), wn->grad_buffer().data(), 1.0f);
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over (B,H,W) per channel.

struct RunningStats {
    std::vector<float> mean;
    std::vector<float> var;
};

inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         RunningStats& running, bool train_mode, float momentum, float epsilon) {
    detail::check_4d(x, "batch_norm");
    if (epsilon <= 0.0f) throw ConfigError("batch_norm: epsilon must be positive");
    int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        throw ShapeError("batch_norm: gamma/beta must have shape [C]");
    if (static_cast<int>(running.mean.size()) != C || static_cast<int>(running.var.size()) != C)
        throw ShapeError("batch_norm: running stats must have length C");
    int64_t hw = static_cast<int64_t>(H) * W;
    int64_t n = static_cast<int64_t>(B) * hw;
    if (train_mode && n < 2)
        throw NumericError("batch_norm: train mode needs at least 2 samples per channel");

    Tensor out = make_op_result(x.shape(), {x, gamma, beta}, "batch_norm");
    auto& ov = out.mutable_value();
    const auto& xv = x.value();
    const auto& gv = gamma.value();
    const auto& bv = beta.value();

    std::vector<float> mean_used(static_cast<size_t>(C)), inv_std(static_cast<size_t>(C));
    if (train_mode) {
        parallel_for(C, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c) {
                double m = 0.0;
                for (int b = 0; b < B; ++b) {
                    const float* src = xv.data() + (static_cast<int64_t>(b) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) m += src[i];
                }
                m /= static_cast<double>(n);
                double var = 0.0;
                for (int b = 0; b < B; ++b) {
                    const float* src = xv.data() + (static_cast<int64_t>(b) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        double d = src[i] - m;
                        var += d * d;
                    }
                }
                var /= static_cast<double>(n);
                mean_used[static_cast<size_t>(c)] = static_cast<float>(m);
                inv_std[static_cast<size_t>(c)] = static_cast<float>(1.0 / std::sqrt(var + epsilon));
                running.mean[static_cast<size_t>(c)] = (1.0f - momentum) * running.mean[static_cast<size_t>(c)] +
                                                       momentum * static_cast<float>(m);
                running.var[static_cast<size_t>(c)] = (1.0f - momentum) * running.var[static_cast<size_t>(c)] +
                                                      momentum * static_cast<float>(var);
            }
        });
    } else {
        for (int c = 0; c < C; ++c) {
            mean_used[static_cast<size_t>(c)] = running.mean[static_cast<size_t>(c)];
            inv_std[static_cast<size_t>(c)] = static_cast<float>(
                1.0 / std::sqrt(static_cast<double>(running.var[static_cast<size_t>(c)]) + epsilon));
        }
    }
    parallel_for(static_cast<int64_t>(B) * C, [&](int64_t bc0, int64_t bc1) {
        for (int64_t bc = bc0; bc < bc1; ++bc) {
            int c = static_cast<int>(bc % C);
            const float* src = xv.data() + bc * hw;
            float* dst = ov.data() + bc * hw;
            float m = mean_used[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
            float gm = gv[static_cast<size_t>(c)], bt = bv[static_cast<size_t>(c)];
            for (int64_t i = 0; i < hw; ++i) dst[i] = (src[i] - m) * is * gm + bt;
        }
    });

    auto xn = x.node(), gn = gamma.node(), btn = beta.node();
    out.node()->backprop = [xn, gn, btn, mean_used, inv_std, B, C, hw, n,
                            train_mode](detail::Node& self) {
        float* gg = gn->requires_grad ? gn->grad_buffer().data() : nullptr;
        float* gb = btn->requires_grad ? btn->grad_buffer().data() : nullptr;
        float* gx = xn->requires_grad ? xn->grad_buffer().data() : nullptr;
        parallel_for(C, [&](int64_t c0, int64_t c1) {
            for (int64_t c = c0; c < c1; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                float m = mean_used[static_cast<size_t>(c)], is = inv_std[static_cast<size_t>(c)];
                for (int b = 0; b < B; ++b) {
                    const float* dy = self.grad.data() + (static_cast<int64_t>(b) * C + c) * hw;
                    const float* xs = xn->value.data() + (static_cast<int64_t>(b) * C + c) * hw;
                    for (int64_t i = 0; i < hw; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += static_cast<double>(dy[i]) * ((xs[i] - m) * is);
                    }
                }
                if (gg) gg[c] += static_cast<float>(sum_dy_xhat);
                if (gb) gb[c] += static_cast<float>(sum_dy);
                if (gx) {
                    float gm = gn->value[static_cast<size_t>(c)];
                    float mean_dy = static_cast<float>(sum_dy / static_cast<double>(n));
                    float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(n));
                    for (int b = 0; b < B; ++b) {
                        const float* dy = self.grad.data() + (static_cast<int64_t>(b) * C + c) * hw;
                        const float* xs = xn->value.data() + (static_cast<int64_t>(b) * C + c) * hw;
                        float* dst = gx + (static_cast<int64_t>(b) * C + c) * hw;
                        if (train_mode) {
                            for (int64_t i = 0; i < hw; ++i) {
                                float xhat = (xs[i] - m) * is;
                                dst[i] += gm * is * (dy[i] - mean_dy - xhat * mean_dy_xhat);
                            }
                        } else {
                            for (int64_t i = 0; i < hw; ++i) dst[i] += gm * is * dy[i];
                        }
                    }
                }
            }
        });
    };
    return out;
}

}  // namespace vcstar
