#pragma once

// Affine algebra for linear recurrences h_t = q_t * h_{t-1} + p_t, and a
// Blelloch exclusive scan over it. combine(b, a) composes "a first, then b":
//
//   (q_b, p_b) (x) (q_a, p_a) = (q_b * q_a, q_b * p_a + p_b)
//
// Identity element is (1, 0). Document-boundary resets are embedded in the
// algebra by zeroing q at masked steps, so h_t = p_t there.

#include <complex>
#include <vector>

#include "gecko/common.hpp"

namespace gecko {

template <typename T>
struct AffineState {
    std::complex<T> q{T(1), T(0)};
    std::complex<T> p{T(0), T(0)};
};

template <typename T>
inline AffineState<T> affine_combine(const AffineState<T>& b, const AffineState<T>& a) {
    return {b.q * a.q, b.q * a.p + b.p};
}

template <typename T>
inline std::complex<T> affine_apply(const AffineState<T>& s, std::complex<T> h) {
    return s.q * h + s.p;
}

// In-place Blelloch up/down sweep. On return, elems[i] holds the composition
// of the original elems[0..i-1] (exclusive prefix; elems[0] = identity).
template <typename T>
void affine_exclusive_scan(std::vector<AffineState<T>>& elems) {
    const size_t n = elems.size();
    if (n == 0) return;
    size_t m = 1;
    while (m < n) m <<= 1;
    elems.resize(m);  // pad with identity
    // up-sweep: node at k+2^{d+1}-1 accumulates (left-subtree then right-subtree)
    for (size_t d = 1; d < m; d <<= 1) {
        for (size_t k = 0; k + 2 * d <= m; k += 2 * d) {
            const size_t left = k + d - 1;
            const size_t right = k + 2 * d - 1;
            elems[right] = affine_combine(elems[right], elems[left]);
        }
    }
    // down-sweep: carry = composition of everything before the subtree
    elems[m - 1] = AffineState<T>{};
    for (size_t d = m >> 1; d >= 1; d >>= 1) {
        for (size_t k = 0; k + 2 * d <= m; k += 2 * d) {
            const size_t left = k + d - 1;
            const size_t right = k + 2 * d - 1;
            const AffineState<T> t = elems[left];
            elems[left] = elems[right];                      // carry
            elems[right] = affine_combine(t, elems[right]);  // carry, then left subtree
        }
    }
    elems.resize(n);
}

}  // namespace gecko
