#pragma once

// Gated projections, RoPE, and the sparse attention patterns:
//
//   Z  = X' W_z + b_z,  Z' = Z / max(||Z_t||, 1e-8)   (per-timestep L2 norm)
//   Q  = kappa_q . Z' + nu_q,  K = kappa_k . Z' + nu_k
//   V  = silu(X W_v + b_v)
//
//   chunk-wise:      softmax(Q_s K_s^T) V_s per chunk, causal inside the chunk
//   sliding window:  token i attends [i-w+1, i]
//   sliding chunk:   softmax(Q_s [K_{s-1}, K_s]^T) [V_{s-1}, V_s], previous
//                    chunk fully visible, causal inside the current chunk
//
// Scores are scaled by 1/sqrt(z). A partial final chunk is padded to c rows;
// padded keys sit causally after every valid query, so they are masked by the
// causal rule, and padded query rows are dropped when writing the output.
//
// Matrix work is performed at chunk granularity (full c x 2c blocks plus
// masking). MacCounter counts exactly the multiply-adds of those block
// products: SCA totals c(z+v)(2*n_pad - c).

#include <type_traits>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/parallel.hpp"
#include "gecko/tensor.hpp"

namespace gecko {

struct MacCounter {
    unsigned long long macs = 0;
};

inline void count_macs(MacCounter* mac, size_t rows, size_t inner, size_t cols) {
    if (mac) mac->macs += static_cast<unsigned long long>(rows) * inner * cols;
}

// ---------------------------------------------------------------------------
// projections
// ---------------------------------------------------------------------------

template <typename T>
struct ProjParams {
    Tensor<T> w_z, b_z;               // [d, z], [z]
    Tensor<T> kappa_q, nu_q;          // [z]
    Tensor<T> kappa_k, nu_k;          // [z]
    Tensor<T> w_v, b_v;               // [d, v], [v]
};

template <typename T>
struct ProjTrace {
    Tensor<T> z_raw;                  // [n, z] before normalization
    std::vector<T> inv_norm;          // [n] 1 / max(||Z_t||, floor)
    std::vector<uint8_t> floored;     // [n]
    Tensor<T> v_pre;                  // [n, v] before SiLU
};

template <typename T>
struct Projections {
    Tensor<T> z_prime;                // [n, z]
    Tensor<T> q, k;                   // [n, z]
    Tensor<T> v;                      // [n, v]
};

inline constexpr double kNormFloor = 1e-8;

// xp is the CEMA output feeding Z; x is the raw sublayer input feeding V.
template <typename T>
Projections<T> project(const Tensor<T>& xp, const Tensor<T>& x, const ProjParams<T>& prm,
                       ProjTrace<T>* trace = nullptr) {
    const size_t n = xp.shape[0];
    const size_t z = prm.w_z.shape[1], v = prm.w_v.shape[1];
    GECKO_CHECK(xp.shape[1] == prm.w_z.shape[0] && x.shape[1] == prm.w_v.shape[0],
                "project input dims " << shape_str(xp) << "/" << shape_str(x) << " mismatch");
    Projections<T> out;
    out.z_prime = matmul(xp, prm.w_z);
    if (trace) trace->z_raw = out.z_prime;
    out.q = Tensor<T>({n, z});
    out.k = Tensor<T>({n, z});
    if (trace) {
        trace->inv_norm.assign(n, T(0));
        trace->floored.assign(n, 0);
    }
    for (size_t t = 0; t < n; ++t) {
        T* zr = out.z_prime.row_ptr(t);
        double ss = 0;
        for (size_t j = 0; j < z; ++j) {
            zr[j] += prm.b_z.data[j];
            ss += static_cast<double>(zr[j]) * static_cast<double>(zr[j]);
        }
        if (trace) for (size_t j = 0; j < z; ++j) trace->z_raw(t, j) = zr[j];
        const double norm = std::sqrt(ss);
        const bool floored = norm < kNormFloor;
        const T inv = static_cast<T>(1.0 / (floored ? kNormFloor : norm));
        if (trace) {
            trace->inv_norm[t] = inv;
            trace->floored[t] = floored;
        }
        for (size_t j = 0; j < z; ++j) {
            zr[j] *= inv;
            out.q(t, j) = prm.kappa_q.data[j] * zr[j] + prm.nu_q.data[j];
            out.k(t, j) = prm.kappa_k.data[j] * zr[j] + prm.nu_k.data[j];
        }
    }
    out.v = matmul(x, prm.w_v);
    if (trace) trace->v_pre = Tensor<T>({n, v});
    for (size_t t = 0; t < n; ++t)
        for (size_t j = 0; j < v; ++j) {
            const T pre = out.v(t, j) + prm.b_v.data[j];
            if (trace) trace->v_pre(t, j) = pre;
            out.v(t, j) = silu(pre);
        }
    return out;
}

template <typename T>
struct ProjGrads {
    Tensor<T> dxp, dx;
    Tensor<T> dw_z, db_z, dkappa_q, dnu_q, dkappa_k, dnu_k, dw_v, db_v;
};

// dz_prime_extra carries cotangents from additional consumers of Z' (the
// memory projections); pass an empty tensor when there are none.
template <typename T>
ProjGrads<T> project_backward(const Tensor<T>& xp, const Tensor<T>& x, const ProjParams<T>& prm,
                              const ProjTrace<T>& trace, const Projections<T>& fwd,
                              const Tensor<T>& dq, const Tensor<T>& dk, const Tensor<T>& dv,
                              const Tensor<T>& dz_prime_extra) {
    const size_t n = xp.shape[0];
    const size_t z = prm.w_z.shape[1], v = prm.w_v.shape[1];
    ProjGrads<T> g;
    g.dxp = Tensor<T>({n, xp.shape[1]});
    g.dx = Tensor<T>({n, x.shape[1]});
    g.dw_z = Tensor<T>(prm.w_z.shape);
    g.db_z = Tensor<T>(prm.b_z.shape);
    g.dkappa_q = Tensor<T>(prm.kappa_q.shape);
    g.dnu_q = Tensor<T>(prm.nu_q.shape);
    g.dkappa_k = Tensor<T>(prm.kappa_k.shape);
    g.dnu_k = Tensor<T>(prm.nu_k.shape);
    g.dw_v = Tensor<T>(prm.w_v.shape);
    g.db_v = Tensor<T>(prm.b_v.shape);

    // V path
    Tensor<T> dv_pre({n, v});
    for (size_t t = 0; t < n; ++t)
        for (size_t j = 0; j < v; ++j) {
            dv_pre(t, j) = dv(t, j) * silu_grad(trace.v_pre(t, j));
            g.db_v.data[j] += dv_pre(t, j);
        }
    matmul_tn_accum(x.data.data(), dv_pre.data.data(), g.dw_v.data.data(), n, x.shape[1], v);
    matmul_nt_into(dv_pre.data.data(), prm.w_v.data.data(), g.dx.data.data(), n, v, x.shape[1]);

    // Q/K and the shared normalized representation
    Tensor<T> dz({n, z});
    std::vector<T> dzp(z);
    for (size_t t = 0; t < n; ++t) {
        for (size_t j = 0; j < z; ++j) {
            const T zp = fwd.z_prime(t, j);
            g.dkappa_q.data[j] += dq(t, j) * zp;
            g.dnu_q.data[j] += dq(t, j);
            g.dkappa_k.data[j] += dk(t, j) * zp;
            g.dnu_k.data[j] += dk(t, j);
            dzp[j] = dq(t, j) * prm.kappa_q.data[j] + dk(t, j) * prm.kappa_k.data[j];
            if (dz_prime_extra.size()) dzp[j] += dz_prime_extra(t, j);
        }
        const T inv = trace.inv_norm[t];
        if (trace.floored[t]) {
            for (size_t j = 0; j < z; ++j) dz(t, j) = dzp[j] * inv;
        } else {
            // d(Z/||Z||) : dZ = dZ'/||Z|| - Z (Z . dZ') / ||Z||^3
            T dot = T(0);
            for (size_t j = 0; j < z; ++j) dot += trace.z_raw(t, j) * dzp[j];
            const T inv3 = inv * inv * inv;
            for (size_t j = 0; j < z; ++j)
                dz(t, j) = dzp[j] * inv - trace.z_raw(t, j) * dot * inv3;
        }
        for (size_t j = 0; j < z; ++j) g.db_z.data[j] += dz(t, j);
    }
    matmul_tn_accum(xp.data.data(), dz.data.data(), g.dw_z.data.data(), n, xp.shape[1], z);
    matmul_nt_into(dz.data.data(), prm.w_z.data.data(), g.dxp.data.data(), n, z, xp.shape[1]);
    return g;
}

// ---------------------------------------------------------------------------
// RoPE: pairwise rotations with angle pos * 10000^{-2i/z}; global positions.
// ---------------------------------------------------------------------------

template <typename T>
void rope_inplace(Tensor<T>& m, size_t pos0, bool inverse = false) {
    const size_t n = m.shape[0], z = m.shape[1];
    GECKO_CHECK(z % 2 == 0, "rope requires an even feature dim, got " << z);
    for (size_t t = 0; t < n; ++t) {
        const double pos = static_cast<double>(pos0 + t);
        T* row = m.row_ptr(t);
        for (size_t i = 0; i < z / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(z));
            const double ang = (inverse ? -pos : pos) * freq;
            const T c = static_cast<T>(std::cos(ang)), s = static_cast<T>(std::sin(ang));
            const T a = row[2 * i], b = row[2 * i + 1];
            row[2 * i] = c * a - s * b;
            row[2 * i + 1] = s * a + c * b;
        }
    }
}

// ---------------------------------------------------------------------------
// chunked attention (chunk-wise and sliding chunk share this kernel)
// ---------------------------------------------------------------------------

template <typename T>
struct KvCache {
    Tensor<T> k;  // [c, z]
    Tensor<T> v;  // [c, v]
    bool filled = false;

    size_t byte_size() const { return sizeof(T) * (k.size() + v.size()) + 1; }
};

template <typename T>
struct AttnTrace {
    size_t c = 0, n_chunks = 0;
    std::vector<std::vector<T>> probs;  // per chunk [c, kcols]
    std::vector<size_t> kcols;
};

// C[m, n] written into rows of stride dst_stride: scores blocks.
template <typename T>
void matmul_nt_strided(const T* a, const T* b, T* c, size_t m, size_t k, size_t n,
                       size_t dst_stride) {
    for (size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * dst_stride;
        for (size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] = acc;
        }
    }
}

// Q,K: [n, z]; V: [n, v]. A partial final chunk is zero-padded to c rows so
// every chunk runs the same c x kcols block kernel; padded keys are hidden by
// the causal mask and padded query rows are dropped from the output.
// sliding=false restricts attention to the current chunk (chunk-wise).
// cache_in provides the chunk preceding row 0 (streaming); cache_out, when
// given, receives the last chunk's K/V and requires whole-chunk input.
template <typename T>
Tensor<T> attend_chunked(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, size_t c,
                         bool sliding, const std::type_identity_t<KvCache<T>>* cache_in,
                         std::type_identity_t<KvCache<T>>* cache_out, MacCounter* mac = nullptr,
                         std::type_identity_t<AttnTrace<T>>* trace = nullptr) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    GECKO_CHECK(K.shape[0] == n && V.shape[0] == n, "attend: Q/K/V row mismatch");
    GECKO_CHECK(c >= 1, "chunk size must be positive");
    if (cache_in && cache_in->filled)
        GECKO_CHECK(cache_in->k.shape[0] == c && cache_in->k.shape[1] == z &&
                        cache_in->v.shape[1] == v,
                    "kv cache shape " << shape_str(cache_in->k) << " does not match chunk " << c);
    const size_t S = ceil_div(n, c);
    const size_t n_pad = S * c;
    const bool padded = n_pad != n;
    Tensor<T> qp, kp, vp;
    if (padded) {
        qp = Tensor<T>({n_pad, z});
        kp = Tensor<T>({n_pad, z});
        vp = Tensor<T>({n_pad, v});
        std::copy(Q.data.begin(), Q.data.end(), qp.data.begin());
        std::copy(K.data.begin(), K.data.end(), kp.data.begin());
        std::copy(V.data.begin(), V.data.end(), vp.data.begin());
    }
    const Tensor<T>& Qp = padded ? qp : Q;
    const Tensor<T>& Kp = padded ? kp : K;
    const Tensor<T>& Vp = padded ? vp : V;

    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(z)));
    Tensor<T> O({n, v});
    if (trace) {
        trace->c = c;
        trace->n_chunks = S;
        trace->probs.assign(S, {});
        trace->kcols.assign(S, 0);
    }
    std::vector<MacCounter> chunk_macs(S);

    parallel_for(0, S, [&](size_t s) {
        const size_t q0 = s * c;
        const bool has_prev = sliding && (s > 0 || (cache_in && cache_in->filled));
        const size_t kcols = has_prev ? 2 * c : c;
        const size_t cur0 = has_prev ? c : 0;  // column of the current chunk's first key
        std::vector<T> scores(c * kcols);
        const T* kprev = nullptr;
        const T* vprev = nullptr;
        if (has_prev) {
            kprev = s > 0 ? Kp.row_ptr(q0 - c) : cache_in->k.data.data();
            vprev = s > 0 ? Vp.row_ptr(q0 - c) : cache_in->v.data.data();
            matmul_nt_strided(Qp.row_ptr(q0), kprev, scores.data(), c, z, c, kcols);
        }
        matmul_nt_strided(Qp.row_ptr(q0), Kp.row_ptr(q0), scores.data() + cur0, c, z, c, kcols);
        count_macs(&chunk_macs[s], c, z, kcols);
        for (size_t i = 0; i < c; ++i) {
            T* srow = scores.data() + i * kcols;
            for (size_t j = 0; j < kcols; ++j) srow[j] *= scale;
            for (size_t j = i + 1; j < c; ++j)
                srow[cur0 + j] = -std::numeric_limits<T>::infinity();
        }
        softmax_rows_inplace(scores.data(), c, kcols);
        // O_s = P [V_{s-1}; V_s]
        const size_t out_rows = std::min(c, n - q0);
        for (size_t i = 0; i < out_rows; ++i) {
            const T* p = scores.data() + i * kcols;
            T* orow = O.row_ptr(q0 + i);
            std::fill(orow, orow + v, T(0));
            if (has_prev)
                for (size_t j = 0; j < c; ++j) {
                    const T pj = p[j];
                    const T* vrow = vprev + j * v;
                    for (size_t u = 0; u < v; ++u) orow[u] += pj * vrow[u];
                }
            for (size_t j = 0; j < c; ++j) {
                const T pj = p[cur0 + j];
                if (pj == T(0)) continue;
                const T* vrow = Vp.row_ptr(q0 + j);
                for (size_t u = 0; u < v; ++u) orow[u] += pj * vrow[u];
            }
        }
        count_macs(&chunk_macs[s], c, kcols, v);
        if (trace) {
            trace->probs[s].assign(scores.begin(), scores.end());
            trace->kcols[s] = kcols;
        }
    });
    if (mac)
        for (const auto& cm : chunk_macs) mac->macs += cm.macs;

    if (cache_out) {
        GECKO_CHECK(n >= c && n % c == 0,
                    "kv cache handoff requires whole chunks, got n=" << n << " c=" << c);
        cache_out->k = Tensor<T>({c, z});
        cache_out->v = Tensor<T>({c, v});
        std::copy_n(K.row_ptr(n - c), c * z, cache_out->k.data.data());
        std::copy_n(V.row_ptr(n - c), c * v, cache_out->v.data.data());
        cache_out->filled = true;
    }
    return O;
}

// Backward for the batch path (whole chunks, no incoming cache). Gradients
// land in dQ/dK/dV at global row positions.
template <typename T>
void attend_chunked_backward(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, size_t c,
                             const AttnTrace<T>& trace, const Tensor<T>& dO, Tensor<T>& dQ,
                             Tensor<T>& dK, Tensor<T>& dV) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    GECKO_CHECK(n % c == 0, "attention backward requires whole chunks, n=" << n << " c=" << c);
    const size_t S = trace.n_chunks;
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(z)));
    std::vector<T> dP(c * 2 * c), dS(c * 2 * c);
    for (size_t s = 0; s < S; ++s) {
        const size_t q0 = s * c;
        const size_t kcols = trace.kcols[s];
        const bool has_prev = kcols == 2 * c;
        const T* P = trace.probs[s].data();
        for (size_t i = 0; i < c; ++i) {
            const T* dor = dO.row_ptr(q0 + i);
            T* dprow = dP.data() + i * kcols;
            // dP = dO Vcat^T ; dV += P^T dO
            for (size_t j = 0; j < kcols; ++j) {
                const size_t g = has_prev ? q0 - c + j : q0 + j;  // global key row
                const T* vrow = V.row_ptr(g);
                T* dvrow = dV.row_ptr(g);
                T acc = T(0);
                const T pij = P[i * kcols + j];
                for (size_t u = 0; u < v; ++u) {
                    acc += dor[u] * vrow[u];
                    dvrow[u] += pij * dor[u];
                }
                dprow[j] = acc;
            }
        }
        softmax_rows_backward(P, dP.data(), dS.data(), c, kcols);
        for (size_t i = 0; i < c; ++i) {
            const T* dsrow = dS.data() + i * kcols;
            T* dqrow = dQ.row_ptr(q0 + i);
            const T* qrow = Q.row_ptr(q0 + i);
            // dQ += dS Kcat * scale ; dK += dS^T Q * scale
            for (size_t j = 0; j < kcols; ++j) {
                const T dsv = dsrow[j] * scale;
                if (dsv == T(0)) continue;
                const size_t g = has_prev ? q0 - c + j : q0 + j;
                const T* krow = K.row_ptr(g);
                T* dkrow = dK.row_ptr(g);
                for (size_t u = 0; u < z; ++u) {
                    dqrow[u] += dsv * krow[u];
                    dkrow[u] += dsv * qrow[u];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// sliding window attention
// ---------------------------------------------------------------------------

// Naive per-token variant: one small matrix-vector product per query.
template <typename T>
Tensor<T> attend_sliding_window(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                size_t w, MacCounter* mac = nullptr,
                                std::type_identity_t<AttnTrace<T>>* trace = nullptr) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    GECKO_CHECK(w >= 1, "window must be positive");
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(z)));
    Tensor<T> O({n, v});
    if (trace) {
        trace->c = w;
        trace->n_chunks = n;
        trace->probs.assign(n, {});
        trace->kcols.assign(n, 0);
    }
    std::vector<T> scores(w);
    for (size_t i = 0; i < n; ++i) {
        const size_t k0 = i + 1 >= w ? i + 1 - w : 0;
        const size_t len = i - k0 + 1;
        matmul_nt_into(Q.row_ptr(i), K.row_ptr(k0), scores.data(), 1, z, len);
        for (size_t j = 0; j < len; ++j) scores[j] *= scale;
        softmax_rows_inplace(scores.data(), 1, len);
        T* orow = O.row_ptr(i);
        std::fill(orow, orow + v, T(0));
        for (size_t j = 0; j < len; ++j) {
            const T* vrow = V.row_ptr(k0 + j);
            for (size_t u = 0; u < v; ++u) orow[u] += scores[j] * vrow[u];
        }
        count_macs(mac, 1, z, len);
        count_macs(mac, 1, len, v);
        if (trace) {
            trace->probs[i].assign(scores.begin(), scores.begin() + len);
            trace->kcols[i] = len;
        }
    }
    return O;
}

template <typename T>
void attend_sliding_window_backward(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                    size_t w, const AttnTrace<T>& trace, const Tensor<T>& dO,
                                    Tensor<T>& dQ, Tensor<T>& dK, Tensor<T>& dV) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(z)));
    std::vector<T> dP(w), dS(w);
    for (size_t i = 0; i < n; ++i) {
        const size_t k0 = i + 1 >= w ? i + 1 - w : 0;
        const size_t len = i - k0 + 1;
        const T* P = trace.probs[i].data();
        const T* dor = dO.row_ptr(i);
        for (size_t j = 0; j < len; ++j) {
            const T* vrow = V.row_ptr(k0 + j);
            T* dvrow = dV.row_ptr(k0 + j);
            T acc = T(0);
            for (size_t u = 0; u < v; ++u) {
                acc += dor[u] * vrow[u];
                dvrow[u] += P[j] * dor[u];
            }
            dP[j] = acc;
        }
        softmax_rows_backward(P, dP.data(), dS.data(), 1, len);
        T* dqrow = dQ.row_ptr(i);
        const T* qrow = Q.row_ptr(i);
        for (size_t j = 0; j < len; ++j) {
            const T dsv = dS[j] * scale;
            const T* krow = K.row_ptr(k0 + j);
            T* dkrow = dK.row_ptr(k0 + j);
            for (size_t u = 0; u < z; ++u) {
                dqrow[u] += dsv * krow[u];
                dkrow[u] += dsv * qrow[u];
            }
        }
    }
}

// Block-banded variant: queries processed w at a time against a 2w-1 key
// band, one big masked product per block instead of w small ones.
template <typename T>
Tensor<T> attend_sliding_window_banded(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V,
                                       size_t w, MacCounter* mac = nullptr) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    GECKO_CHECK(w >= 1, "window must be positive");
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(z)));
    Tensor<T> O({n, v});
    const size_t nb = ceil_div(n, w);
    parallel_for(0, nb, [&](size_t b) {
        const size_t q0 = b * w;
        const size_t rows = std::min(w, n - q0);
        const size_t k0 = q0 + 1 >= w ? q0 + 1 - w : 0;
        const size_t kcols = (q0 + rows - 1) - k0 + 1;  // <= 2w-1
        std::vector<T> scores(rows * kcols);
        matmul_nt_into(Q.row_ptr(q0), K.row_ptr(k0), scores.data(), rows, z, kcols);
        count_macs(mac, rows, z, kcols);
        for (size_t i = 0; i < rows; ++i) {
            const size_t gi = q0 + i;
            T* srow = scores.data() + i * kcols;
            for (size_t j = 0; j < kcols; ++j) {
                const size_t gj = k0 + j;
                const bool visible = gj <= gi && gi < gj + w;
                srow[j] = visible ? srow[j] * scale : -std::numeric_limits<T>::infinity();
            }
        }
        softmax_rows_inplace(scores.data(), rows, kcols);
        for (size_t i = 0; i < rows; ++i) {
            const T* p = scores.data() + i * kcols;
            T* orow = O.row_ptr(q0 + i);
            std::fill(orow, orow + v, T(0));
            for (size_t j = 0; j < kcols; ++j) {
                const T* vrow = V.row_ptr(k0 + j);
                for (size_t u = 0; u < v; ++u) orow[u] += p[j] * vrow[u];
            }
        }
        count_macs(mac, rows, kcols, v);
    });
    return O;
}

// ---------------------------------------------------------------------------
// dense masked attention oracle (f64)
// ---------------------------------------------------------------------------

// mask[i*n + j] != 0 means query i may attend key j. Every query needs at
// least one permitted key.
inline Tensor<double> full_attention_oracle(const Tensor<double>& Q, const Tensor<double>& K,
                                            const Tensor<double>& V,
                                            const std::vector<uint8_t>& mask) {
    const size_t n = Q.shape[0], z = Q.shape[1], v = V.shape[1];
    GECKO_CHECK(mask.size() == n * n, "oracle mask must be n*n");
    const double scale = 1.0 / std::sqrt(static_cast<double>(z));
    Tensor<double> O({n, v});
    std::vector<double> scores(n);
    for (size_t i = 0; i < n; ++i) {
        bool any = false;
        for (size_t j = 0; j < n; ++j) any = any || mask[i * n + j];
        GECKO_CHECK(any, "oracle: query " << i << " has no permitted keys");
        for (size_t j = 0; j < n; ++j) {
            double dot = 0;
            for (size_t u = 0; u < z; ++u) dot += Q(i, u) * K(j, u);
            scores[j] = mask[i * n + j] ? dot * scale : -std::numeric_limits<double>::infinity();
        }
        softmax_rows_inplace(scores.data(), 1, n);
        for (size_t j = 0; j < n; ++j) {
            if (scores[j] == 0.0) continue;
            for (size_t u = 0; u < v; ++u) O(i, u) += scores[j] * V(j, u);
        }
    }
    return O;
}

// mask builders for the three patterns (test oracles and the receptive-field
// property use these)
inline std::vector<uint8_t> mask_chunkwise(size_t n, size_t c) {
    std::vector<uint8_t> m(n * n, 0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j)
            if (i / c == j / c) m[i * n + j] = 1;
    return m;
}

inline std::vector<uint8_t> mask_sliding_window(size_t n, size_t w) {
    std::vector<uint8_t> m(n * n, 0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j)
            if (i < j + w) m[i * n + j] = 1;
    return m;
}

inline std::vector<uint8_t> mask_sliding_chunk(size_t n, size_t c) {
    std::vector<uint8_t> m(n * n, 0);
    for (size_t i = 0; i < n; ++i)
        for (size_t j = 0; j <= i; ++j) {
            const size_t ci = i / c, cj = j / c;
            if (cj == ci || cj + 1 == ci) m[i * n + j] = 1;
        }
    return m;
}

}  // namespace gecko
