#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdlm {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

/// Dense row-major multidimensional array. T is float for model math;
/// tests instantiate double to run finite-difference oracles at full precision.
template <class T>
struct Array {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Array() = default;

    explicit Array(std::vector<std::size_t> s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(count(shape), fill);
    }

    Array(std::vector<std::size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        check(count(shape) == data.size(), "Array: shape/data size mismatch");
    }

    static std::size_t count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (auto d : s) n *= d;
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // 2-D accessors; most of the model lives in matrices.
    std::size_t rows() const {
        check(rank() == 2, "Array: rows() on non-matrix");
        return shape[0];
    }
    std::size_t cols() const {
        check(rank() == 2, "Array: cols() on non-matrix");
        return shape[1];
    }
    T& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    T at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    T* row(std::size_t i) { return data.data() + i * shape[1]; }
    const T* row(std::size_t i) const { return data.data() + i * shape[1]; }

    bool same_shape(const Array& o) const { return shape == o.shape; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

template <class T>
Array<T> random_normal(std::vector<std::size_t> shape, T stddev, std::mt19937_64& rng) {
    Array<T> a(std::move(shape));
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    for (auto& v : a.data) v = static_cast<T>(dist(rng));
    return a;
}

// ---------------------------------------------------------------------------
// GEMM kernels. C is MxN. Inner loops run over contiguous rows so the
// compiler can vectorize without relaxed FP semantics; summation order is
// fixed, keeping results bit-deterministic across runs.
// ---------------------------------------------------------------------------

namespace detail {

/// Inner saxpy sweep: C[i] += sum_p a(i,p) * B[p]. Unrolled by four over p to
/// cut traffic on the output row; summation order is fixed.
template <class T>
void saxpy_rows(const T* arow, const T* b, T* __restrict crow, std::size_t k, std::size_t n) {
    std::size_t p = 0;
    for (; p + 4 <= k; p += 4) {
        const T a0 = arow[p], a1 = arow[p + 1], a2 = arow[p + 2], a3 = arow[p + 3];
        const T* __restrict b0 = b + p * n;
        const T* __restrict b1 = b0 + n;
        const T* __restrict b2 = b1 + n;
        const T* __restrict b3 = b2 + n;
        for (std::size_t j = 0; j < n; ++j)
            crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
    }
    for (; p < k; ++p) {
        const T av = arow[p];
        const T* __restrict brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

}  // namespace detail

/// C (+)= A[MxK] * B[KxN]
template <class T>
void gemm_nn(const Array<T>& a, const Array<T>& b, Array<T>& c, bool accumulate) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    check(b.rows() == k, "gemm_nn: inner dimension mismatch");
    if (!accumulate) {
        c.shape = {m, n};
        c.data.assign(m * n, T(0));
    } else {
        check(c.rows() == m && c.cols() == n, "gemm_nn: output shape mismatch");
    }
    for (std::size_t i = 0; i < m; ++i)
        detail::saxpy_rows(a.row(i), b.data.data(), c.row(i), k, n);
}

/// C (+)= A[MxK] * B[NxK]^T. B is transposed into scratch so the same
/// fixed-order saxpy sweep serves all three kernels.
template <class T>
void gemm_nt(const Array<T>& a, const Array<T>& b, Array<T>& c, bool accumulate) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    check(b.cols() == k, "gemm_nt: inner dimension mismatch");
    if (!accumulate) {
        c.shape = {m, n};
        c.data.assign(m * n, T(0));
    } else {
        check(c.rows() == m && c.cols() == n, "gemm_nt: output shape mismatch");
    }
    thread_local std::vector<T> bt;
    bt.resize(k * n);
    for (std::size_t j = 0; j < n; ++j) {
        const T* brow = b.row(j);
        for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = brow[p];
    }
    for (std::size_t i = 0; i < m; ++i) detail::saxpy_rows(a.row(i), bt.data(), c.row(i), k, n);
}

/// C (+)= A[KxM]^T * B[KxN]
template <class T>
void gemm_tn(const Array<T>& a, const Array<T>& b, Array<T>& c, bool accumulate) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    check(b.rows() == k, "gemm_tn: inner dimension mismatch");
    if (!accumulate) {
        c.shape = {m, n};
        c.data.assign(m * n, T(0));
    } else {
        check(c.rows() == m && c.cols() == n, "gemm_tn: output shape mismatch");
    }
    thread_local std::vector<T> at;
    at.resize(k * m);
    for (std::size_t p = 0; p < k; ++p) {
        const T* arow = a.row(p);
        for (std::size_t i = 0; i < m; ++i) at[i * k + p] = arow[i];
    }
    for (std::size_t i = 0; i < m; ++i)
        detail::saxpy_rows(at.data() + i * k, b.data.data(), c.row(i), k, n);
}

}  // namespace cdlm
