#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cdlm/array.hpp"

namespace cdlm {

// ---------------------------------------------------------------------------
// Reverse-mode autodiff over Array<T>. Graphs are built fresh for every
// forward pass and discarded after backward; leaves (parameters) persist and
// accumulate gradients until explicitly zeroed.
// ---------------------------------------------------------------------------

template <class T>
struct Expr {
    Array<T> value;
    Array<T> grad;            // materialized lazily, same shape as value
    bool requires_grad = false;
    bool grad_ready = false;  // grad buffer allocated
    bool backwarded = false;  // backward() already consumed this loss
    std::vector<std::shared_ptr<Expr>> parents;
    std::function<void(Expr&)> back;  // propagates this->grad into parents
    std::string name;                 // parameter name (leaves only)
};

template <class T>
using Node = std::shared_ptr<Expr<T>>;

template <class T>
void ensure_grad(Expr<T>& e) {
    if (!e.grad_ready) {
        e.grad = Array<T>(e.value.shape);
        e.grad_ready = true;
    }
}

template <class T>
void zero_grad(const Node<T>& n) {
    n->grad_ready = false;
    n->grad = Array<T>();
}

template <class T>
Node<T> leaf(Array<T> v, bool requires_grad = true, std::string name = "") {
    auto e = std::make_shared<Expr<T>>();
    e->value = std::move(v);
    e->requires_grad = requires_grad;
    e->name = std::move(name);
    return e;
}

template <class T>
Node<T> constant(Array<T> v) {
    return leaf(std::move(v), false);
}

template <class T>
Node<T> make_node(Array<T> v, std::vector<Node<T>> parents, std::function<void(Expr<T>&)> back) {
    auto e = std::make_shared<Expr<T>>();
    e->value = std::move(v);
    e->parents = std::move(parents);
    for (auto& p : e->parents)
        if (p->requires_grad) e->requires_grad = true;
    if (e->requires_grad) e->back = std::move(back);
    return e;
}

/// Same value, no gradient path to ancestors.
template <class T>
Node<T> detach(const Node<T>& x) {
    return leaf(x->value, false);
}

/// Deterministic topological-order gradient accumulation from a scalar loss.
template <class T>
void backward(const Node<T>& loss) {
    check(loss->value.size() == 1, "backward: loss must be scalar");
    check(!loss->backwarded, "backward: repeated call on the same loss without reset");
    loss->backwarded = true;

    // iterative post-order DFS; parent visit order is fixed by construction
    std::vector<Expr<T>*> order;
    std::unordered_set<Expr<T>*> seen;
    std::vector<std::pair<Expr<T>*, std::size_t>> stack;
    stack.push_back({loss.get(), 0});
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Expr<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    ensure_grad(*loss);
    loss->grad.data[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Expr<T>* e = *it;
        if (e->back && e->grad_ready) e->back(*e);
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

template <class T>
Node<T> add(const Node<T>& a, const Node<T>& b) {
    check(a->value.same_shape(b->value), "add: shape mismatch");
    Array<T> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Expr<T>& e) {
        for (int k = 0; k < 2; ++k) {
            auto& p = *e.parents[k];
            if (!p.requires_grad) continue;
            ensure_grad(p);
            for (std::size_t i = 0; i < e.grad.size(); ++i) p.grad.data[i] += e.grad.data[i];
        }
    });
}

/// x[MxN] + row-broadcast bias[N]
template <class T>
Node<T> add_bias(const Node<T>& x, const Node<T>& bias) {
    check(x->value.rank() == 2 && bias->value.rank() == 1 && bias->value.shape[0] == x->value.cols(),
          "add_bias: shape mismatch");
    Array<T> out = x->value;
    const std::size_t m = out.rows(), n = out.cols();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += bias->value.data[j];
    return make_node<T>(std::move(out), {x, bias}, [m, n](Expr<T>& e) {
        auto& px = *e.parents[0];
        auto& pb = *e.parents[1];
        if (px.requires_grad) {
            ensure_grad(px);
            for (std::size_t i = 0; i < e.grad.size(); ++i) px.grad.data[i] += e.grad.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) pb.grad.data[j] += e.grad.at(i, j);
        }
    });
}

/// elementwise add of a non-differentiable constant (attention mask bias)
template <class T>
Node<T> add_const(const Node<T>& x, const Array<T>& c) {
    check(x->value.same_shape(c), "add_const: shape mismatch");
    Array<T> out = x->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += c.data[i];
    return make_node<T>(std::move(out), {x}, [](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < e.grad.size(); ++i) p.grad.data[i] += e.grad.data[i];
    });
}

template <class T>
Node<T> mul(const Node<T>& a, const Node<T>& b) {
    check(a->value.same_shape(b->value), "mul: shape mismatch");
    Array<T> out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b->value.data[i];
    return make_node<T>(std::move(out), {a, b}, [](Expr<T>& e) {
        auto& pa = *e.parents[0];
        auto& pb = *e.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            for (std::size_t i = 0; i < e.grad.size(); ++i)
                pa.grad.data[i] += e.grad.data[i] * pb.value.data[i];
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            for (std::size_t i = 0; i < e.grad.size(); ++i)
                pb.grad.data[i] += e.grad.data[i] * pa.value.data[i];
        }
    });
}

template <class T>
Node<T> mul_scalar(const Node<T>& x, T s) {
    Array<T> out = x->value;
    for (auto& v : out.data) v *= s;
    return make_node<T>(std::move(out), {x}, [s](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < e.grad.size(); ++i) p.grad.data[i] += e.grad.data[i] * s;
    });
}

template <class T>
Node<T> matmul(const Node<T>& a, const Node<T>& b) {
    check(a->value.rank() == 2 && b->value.rank() == 2, "matmul: operands must be matrices");
    check(a->value.cols() == b->value.rows(), "matmul: inner dimension mismatch (" +
                                                  std::to_string(a->value.cols()) + " vs " +
                                                  std::to_string(b->value.rows()) + ")");
    Array<T> out;
    gemm_nn(a->value, b->value, out, false);
    return make_node<T>(std::move(out), {a, b}, [](Expr<T>& e) {
        auto& pa = *e.parents[0];
        auto& pb = *e.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            gemm_nt(e.grad, pb.value, pa.grad, true);  // dA += G B^T
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            gemm_tn(pa.value, e.grad, pb.grad, true);  // dB += A^T G
        }
    });
}

/// a[MxK] * b[NxK]^T
template <class T>
Node<T> matmul_nt(const Node<T>& a, const Node<T>& b) {
    check(a->value.rank() == 2 && b->value.rank() == 2 && a->value.cols() == b->value.cols(),
          "matmul_nt: inner dimension mismatch");
    Array<T> out;
    gemm_nt(a->value, b->value, out, false);
    return make_node<T>(std::move(out), {a, b}, [](Expr<T>& e) {
        auto& pa = *e.parents[0];
        auto& pb = *e.parents[1];
        if (pa.requires_grad) {
            ensure_grad(pa);
            gemm_nn(e.grad, pb.value, pa.grad, true);  // dA += G B
        }
        if (pb.requires_grad) {
            ensure_grad(pb);
            gemm_tn(e.grad, pa.value, pb.grad, true);  // dB += G^T A
        }
    });
}

template <class T>
Node<T> relu(const Node<T>& x) {
    Array<T> out = x->value;
    for (auto& v : out.data)
        if (v < T(0)) v = T(0);
    return make_node<T>(std::move(out), {x}, [](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < e.grad.size(); ++i)
            if (p.value.data[i] > T(0)) p.grad.data[i] += e.grad.data[i];
    });
}

/// Row-wise softmax over the last axis at the given temperature.
/// Max-subtracted for stability.
template <class T>
Node<T> softmax(const Node<T>& x, T temperature = T(1)) {
    check(temperature > T(0), "softmax: temperature must be positive");
    check(x->value.rank() >= 1, "softmax: rank must be >= 1");
    const std::size_t n = x->value.shape.back();
    const std::size_t rows = x->value.size() / n;
    Array<T> out(x->value.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x->value.data.data() + r * n;
        T* o = out.data.data() + r * n;
        T mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp((in[j] - mx) / temperature);
            sum += static_cast<double>(o[j]);
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (std::size_t j = 0; j < n; ++j) o[j] *= inv;
    }
    return make_node<T>(std::move(out), {x}, [n, rows, temperature](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = e.value.data.data() + r * n;
            const T* g = e.grad.data.data() + r * n;
            T* d = p.grad.data.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += static_cast<double>(g[j]) * y[j];
            const T dt = static_cast<T>(dot);
            for (std::size_t j = 0; j < n; ++j) d[j] += y[j] * (g[j] - dt) / temperature;
        }
    });
}

/// Row-wise log-softmax over the last axis (max-subtracted).
template <class T>
Node<T> log_softmax(const Node<T>& x) {
    const std::size_t n = x->value.shape.back();
    const std::size_t rows = x->value.size() / n;
    Array<T> out(x->value.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x->value.data.data() + r * n;
        T* o = out.data.data() + r * n;
        T mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) sum += std::exp(static_cast<double>(in[j] - mx));
        const T lse = mx + static_cast<T>(std::log(sum));
        for (std::size_t j = 0; j < n; ++j) o[j] = in[j] - lse;
    }
    return make_node<T>(std::move(out), {x}, [n, rows](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = e.value.data.data() + r * n;
            const T* g = e.grad.data.data() + r * n;
            T* d = p.grad.data.data() + r * n;
            double gsum = 0.0;
            for (std::size_t j = 0; j < n; ++j) gsum += static_cast<double>(g[j]);
            const T gs = static_cast<T>(gsum);
            for (std::size_t j = 0; j < n; ++j) d[j] += g[j] - std::exp(y[j]) * gs;
        }
    });
}

/// Per-row zero mean / unit variance over the last axis, then affine.
template <class T>
Node<T> layer_norm(const Node<T>& x, const Node<T>& gain, const Node<T>& bias, T eps = T(1e-5)) {
    const std::size_t n = x->value.shape.back();
    check(gain->value.size() == n && bias->value.size() == n, "layer_norm: gain/bias size mismatch");
    const std::size_t rows = x->value.size() / n;
    Array<T> out(x->value.shape);
    Array<T> xhat(x->value.shape);
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x->value.data.data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += static_cast<double>(in[j]);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = static_cast<double>(in[j]) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
        inv_std[r] = istd;
        T* xh = xhat.data.data() + r * n;
        T* o = out.data.data() + r * n;
        for (std::size_t j = 0; j < n; ++j) {
            xh[j] = (in[j] - static_cast<T>(mean)) * istd;
            o[j] = xh[j] * gain->value.data[j] + bias->value.data[j];
        }
    }
    auto xh_keep = std::make_shared<Array<T>>(std::move(xhat));
    auto istd_keep = std::make_shared<std::vector<T>>(std::move(inv_std));
    return make_node<T>(std::move(out), {x, gain, bias}, [n, rows, xh_keep, istd_keep](Expr<T>& e) {
        auto& px = *e.parents[0];
        auto& pg = *e.parents[1];
        auto& pb = *e.parents[2];
        for (std::size_t r = 0; r < rows; ++r) {
            const T* g = e.grad.data.data() + r * n;
            const T* xh = xh_keep->data.data() + r * n;
            if (pg.requires_grad) {
                ensure_grad(pg);
                for (std::size_t j = 0; j < n; ++j) pg.grad.data[j] += g[j] * xh[j];
            }
            if (pb.requires_grad) {
                ensure_grad(pb);
                for (std::size_t j = 0; j < n; ++j) pb.grad.data[j] += g[j];
            }
            if (px.requires_grad) {
                ensure_grad(px);
                T* d = px.grad.data.data() + r * n;
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gq = static_cast<double>(g[j]) * pg.value.data[j];
                    m1 += gq;
                    m2 += gq * xh[j];
                }
                m1 /= static_cast<double>(n);
                m2 /= static_cast<double>(n);
                const T istd = (*istd_keep)[r];
                for (std::size_t j = 0; j < n; ++j) {
                    const T gq = g[j] * pg.value.data[j];
                    d[j] += istd * (gq - static_cast<T>(m1) - xh[j] * static_cast<T>(m2));
                }
            }
        }
    });
}

/// out[r] = table[ids[r]]; gradient scatters back into the table rows.
template <class T>
Node<T> embedding(const Node<T>& table, std::vector<int> ids) {
    check(table->value.rank() == 2, "embedding: table must be 2-D");
    const std::size_t v = table->value.rows(), d = table->value.cols();
    Array<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        check(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < v, "embedding: id out of range");
        std::copy(table->value.row(ids[i]), table->value.row(ids[i]) + d, out.row(i));
    }
    auto ids_keep = std::make_shared<std::vector<int>>(std::move(ids));
    return make_node<T>(std::move(out), {table}, [ids_keep, d](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < ids_keep->size(); ++i) {
            T* dst = p.grad.row((*ids_keep)[i]);
            const T* src = e.grad.row(i);
            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
Node<T> slice_cols(const Node<T>& x, std::size_t start, std::size_t width) {
    check(x->value.rank() == 2 && start + width <= x->value.cols(), "slice_cols: out of range");
    const std::size_t m = x->value.rows();
    Array<T> out({m, width});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(x->value.row(i) + start, x->value.row(i) + start + width, out.row(i));
    return make_node<T>(std::move(out), {x}, [start, width, m](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < m; ++i) {
            const T* src = e.grad.row(i);
            T* dst = p.grad.row(i) + start;
            for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
Node<T> concat_cols(const std::vector<Node<T>>& parts) {
    check(!parts.empty(), "concat_cols: empty input");
    const std::size_t m = parts[0]->value.rows();
    std::size_t total = 0;
    for (auto& p : parts) {
        check(p->value.rows() == m, "concat_cols: row mismatch");
        total += p->value.cols();
    }
    Array<T> out({m, total});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (auto& p : parts) {
        offsets.push_back(off);
        const std::size_t w = p->value.cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p->value.row(i), p->value.row(i) + w, out.row(i) + off);
        off += w;
    }
    auto offs = std::make_shared<std::vector<std::size_t>>(std::move(offsets));
    return make_node<T>(std::move(out), parts, [offs, m](Expr<T>& e) {
        for (std::size_t k = 0; k < e.parents.size(); ++k) {
            auto& p = *e.parents[k];
            if (!p.requires_grad) continue;
            ensure_grad(p);
            const std::size_t w = p.value.cols();
            for (std::size_t i = 0; i < m; ++i) {
                const T* src = e.grad.row(i) + (*offs)[k];
                T* dst = p.grad.row(i);
                for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
            }
        }
    });
}

template <class T>
Node<T> gather_rows(const Node<T>& x, std::vector<int> rows_idx) {
    check(x->value.rank() == 2, "gather_rows: input must be 2-D");
    const std::size_t n = x->value.cols();
    Array<T> out({rows_idx.size(), n});
    for (std::size_t i = 0; i < rows_idx.size(); ++i) {
        check(rows_idx[i] >= 0 && static_cast<std::size_t>(rows_idx[i]) < x->value.rows(),
              "gather_rows: index out of range");
        std::copy(x->value.row(rows_idx[i]), x->value.row(rows_idx[i]) + n, out.row(i));
    }
    auto idx = std::make_shared<std::vector<int>>(std::move(rows_idx));
    return make_node<T>(std::move(out), {x}, [idx, n](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        for (std::size_t i = 0; i < idx->size(); ++i) {
            const T* src = e.grad.row(i);
            T* dst = p.grad.row((*idx)[i]);
            for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
}

template <class T>
Node<T> sum_all(const Node<T>& x) {
    double s = 0.0;
    for (T v : x->value.data) s += static_cast<double>(v);
    Array<T> out({1});
    out.data[0] = static_cast<T>(s);
    return make_node<T>(std::move(out), {x}, [](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        const T g = e.grad.data[0];
        for (auto& v : p.grad.data) v += g;
    });
}

/// Forward KL(p || q) averaged over rows. p carries no gradient; rows of both
/// must sum to 1 within 1e-6. Indices where p < 1e-12 contribute 0.
template <class T>
Node<T> kl_divergence(const Array<T>& p_target, const Node<T>& q_pred) {
    check(p_target.same_shape(q_pred->value), "kl_divergence: shape mismatch");
    const std::size_t n = p_target.shape.back();
    const std::size_t rows = p_target.size() / n;
    check(rows > 0, "kl_divergence: empty input");
    for (std::size_t r = 0; r < rows; ++r) {
        double sp = 0.0, sq = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            sp += static_cast<double>(p_target.data[r * n + j]);
            sq += static_cast<double>(q_pred->value.data[r * n + j]);
        }
        check(std::abs(sp - 1.0) < 1e-6, "kl_divergence: target row does not sum to 1");
        check(std::abs(sq - 1.0) < 1e-6, "kl_divergence: prediction row does not sum to 1");
    }
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            const double p = static_cast<double>(p_target.data[r * n + j]);
            if (p < 1e-12) continue;  // 0*log 0 := 0
            const double q = static_cast<double>(q_pred->value.data[r * n + j]);
            loss += p * (std::log(p) - std::log(q));
        }
    }
    loss /= static_cast<double>(rows);
    Array<T> out({1});
    out.data[0] = static_cast<T>(loss);
    auto p_keep = std::make_shared<Array<T>>(p_target);
    return make_node<T>(std::move(out), {q_pred}, [p_keep, n, rows](Expr<T>& e) {
        auto& q = *e.parents[0];
        ensure_grad(q);
        const T g = e.grad.data[0] / static_cast<T>(rows);
        for (std::size_t i = 0; i < p_keep->size(); ++i) {
            const T p = p_keep->data[i];
            if (p < T(1e-12)) continue;
            q.grad.data[i] -= g * p / q.value.data[i];
        }
    });
}

/// -sum over masked positions of weight(row) * log q(target).
/// log_probs is [LxV]; mask selects positions; weight is per row.
template <class T>
Node<T> nll_masked(const Node<T>& log_probs, const std::vector<int>& targets,
                   const std::vector<char>& mask, const std::vector<T>& weight) {
    check(log_probs->value.rank() == 2, "nll_masked: log_probs must be 2-D");
    const std::size_t m = log_probs->value.rows(), v = log_probs->value.cols();
    check(targets.size() == m && mask.size() == m && weight.size() == m,
          "nll_masked: per-row input size mismatch");
    std::size_t n_masked = 0;
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (!mask[i]) continue;
        check(targets[i] >= 0 && static_cast<std::size_t>(targets[i]) < v,
              "nll_masked: target out of range");
        ++n_masked;
        loss -= static_cast<double>(weight[i]) *
                static_cast<double>(log_probs->value.at(i, targets[i]));
    }
    check(n_masked > 0, "nll_masked: empty mask (caller must resample t)");
    Array<T> out({1});
    out.data[0] = static_cast<T>(loss);
    auto tgt = std::make_shared<std::vector<int>>(targets);
    auto msk = std::make_shared<std::vector<char>>(mask);
    auto wgt = std::make_shared<std::vector<T>>(weight);
    return make_node<T>(std::move(out), {log_probs}, [tgt, msk, wgt, m](Expr<T>& e) {
        auto& p = *e.parents[0];
        ensure_grad(p);
        const T g = e.grad.data[0];
        for (std::size_t i = 0; i < m; ++i)
            if ((*msk)[i]) p.grad.at(i, (*tgt)[i]) -= g * (*wgt)[i];
    });
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and linear warmup.
// ---------------------------------------------------------------------------

template <class T>
struct AdamW {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
    T weight_decay = T(0);
    std::size_t warmup_steps = 0;

    std::size_t t = 0;
    std::unordered_map<Expr<T>*, std::pair<std::vector<T>, std::vector<T>>> state;

    void step(const std::vector<Node<T>>& params) {
        ++t;
        T lr_t = lr;
        if (warmup_steps > 0 && t < warmup_steps)
            lr_t = lr * static_cast<T>(t) / static_cast<T>(warmup_steps);
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(t));
        for (auto& p : params) {
            check(p->grad_ready, "adamw_step: parameter is missing its gradient");
            auto& [mv, vv] = state[p.get()];
            if (mv.empty()) {
                mv.assign(p->value.size(), T(0));
                vv.assign(p->value.size(), T(0));
            }
            for (std::size_t i = 0; i < p->value.size(); ++i) {
                const T g = p->grad.data[i];
                mv[i] = beta1 * mv[i] + (T(1) - beta1) * g;
                vv[i] = beta2 * vv[i] + (T(1) - beta2) * g * g;
                const T mhat = static_cast<T>(mv[i] / bc1);
                const T vhat = static_cast<T>(vv[i] / bc2);
                p->value.data[i] -= lr_t * (mhat / (std::sqrt(vhat) + eps) +
                                            weight_decay * p->value.data[i]);
            }
        }
    }
};

}  // namespace cdlm
