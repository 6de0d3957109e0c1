#pragma once

// Dense row-major tensors, matmul and stabilized softmax. Immutable-by-
// convention: ops return new tensors, mutation happens only through
// construction. Complex quantities elsewhere in gecko are stored as
// interleaved (re, im) pairs via std::complex arrays.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/parallel.hpp"

namespace gecko {

template <typename T>
struct Tensor {
    std::vector<size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<size_t> s) : shape(std::move(s)) {
        data.assign(count(shape), T(0));
    }
    Tensor(std::vector<size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        GECKO_CHECK(data.size() == count(shape),
                    "tensor data length " << data.size() << " != shape product " << count(shape));
    }

    static size_t count(const std::vector<size_t>& s) {
        size_t n = 1;
        for (size_t e : s) n *= e;
        return n;
    }

    static Tensor zeros(std::vector<size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<size_t> s, T v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    size_t size() const { return data.size(); }
    size_t rank() const { return shape.size(); }
    size_t extent(size_t i) const { return shape[i]; }
    size_t rows() const { return shape.size() > 0 ? shape[0] : 1; }
    size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }

    T& operator()(size_t i) { return data[i]; }
    T operator()(size_t i) const { return data[i]; }
    T& operator()(size_t i, size_t j) { return data[i * shape[1] + j]; }
    T operator()(size_t i, size_t j) const { return data[i * shape[1] + j]; }
    T& operator()(size_t i, size_t j, size_t k) { return data[(i * shape[1] + j) * shape[2] + k]; }
    T operator()(size_t i, size_t j, size_t k) const { return data[(i * shape[1] + j) * shape[2] + k]; }

    T* row_ptr(size_t i) { return data.data() + i * shape[1]; }
    const T* row_ptr(size_t i) const { return data.data() + i * shape[1]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
    std::string s = "[";
    for (size_t i = 0; i < t.shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.shape[i]);
    }
    return s + "]";
}

template <typename T>
void assert_all_finite(const Tensor<T>& t, const char* what) {
    for (size_t i = 0; i < t.data.size(); ++i) {
        GECKO_CHECK(is_finite_value(t.data[i]),
                    "non-finite value in " << what << " at flat index " << i);
    }
}

// ---------------------------------------------------------------------------
// matmul: C[m,n] = A[m,k] * B[k,n]. f64 inputs accumulate in f64; f32 inputs
// accumulate in f32 so that slice-parallel runs stay bitwise reproducible.
// ---------------------------------------------------------------------------

template <typename T>
void matmul_into(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    parallel_for(0, m, [&](size_t i) {
        T* crow = c + i * n;
        std::fill(crow, crow + n, T(0));
        const T* arow = a + i * k;
        for (size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            const T* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    GECKO_CHECK(a.rank() == 2 && b.rank() == 2,
                "matmul expects rank-2 tensors, got " << shape_str(a) << " and " << shape_str(b));
    GECKO_CHECK(a.shape[1] == b.shape[0],
                "matmul shape mismatch: " << shape_str(a) << " x " << shape_str(b));
    Tensor<T> c({a.shape[0], b.shape[1]});
    matmul_into(a.data.data(), b.data.data(), c.data.data(), a.shape[0], a.shape[1], b.shape[1]);
    return c;
}

// C[m,n] += / = A[m,k] * B[n,k]^T  (dot-product form, contiguous rows)
template <typename T>
void matmul_nt_into(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    parallel_for(0, m, [&](size_t i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    });
}

// C[k,n] += A[m,k]^T * B[m,n]
template <typename T>
void matmul_tn_accum(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        const T* brow = b + i * n;
        for (size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            if (aik == T(0)) continue;
            T* crow = c + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

// ---------------------------------------------------------------------------
// softmax along an axis, with running-max subtraction.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, size_t axis) {
    GECKO_CHECK(axis < x.rank(), "softmax axis " << axis << " out of range for " << shape_str(x));
    assert_all_finite(x, "softmax input");
    Tensor<T> y(x.shape);
    const size_t extent = x.shape[axis];
    size_t inner = 1;
    for (size_t i = axis + 1; i < x.rank(); ++i) inner *= x.shape[i];
    size_t outer = x.size() / (extent * inner);
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * extent * inner + in;
            T mx = x.data[base];
            for (size_t e = 1; e < extent; ++e) mx = std::max(mx, x.data[base + e * inner]);
            T sum = T(0);
            for (size_t e = 0; e < extent; ++e) {
                T v = std::exp(x.data[base + e * inner] - mx);
                y.data[base + e * inner] = v;
                sum += v;
            }
            for (size_t e = 0; e < extent; ++e) y.data[base + e * inner] /= sum;
        }
    }
    return y;
}

// In-place row softmax for 2-d work buffers; rows with all -inf are rejected.
template <typename T>
void softmax_rows_inplace(T* x, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i) {
        T* r = x + i * cols;
        T mx = r[0];
        for (size_t j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
        GECKO_CHECK(mx > -std::numeric_limits<T>::infinity(),
                    "softmax row " << i << " has no permitted entries");
        T sum = T(0);
        for (size_t j = 0; j < cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        const T inv = T(1) / sum;
        for (size_t j = 0; j < cols; ++j) r[j] *= inv;
    }
}

// backward of row softmax: dx = p .* (dp - rowdot(dp, p))
template <typename T>
void softmax_rows_backward(const T* p, const T* dp, T* dx, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i) {
        const T* pr = p + i * cols;
        const T* dpr = dp + i * cols;
        T dot = T(0);
        for (size_t j = 0; j < cols; ++j) dot += pr[j] * dpr[j];
        T* dxr = dx + i * cols;
        for (size_t j = 0; j < cols; ++j) dxr[j] = pr[j] * (dpr[j] - dot);
    }
}

}  // namespace gecko
