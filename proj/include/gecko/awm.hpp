#pragma once

// Adaptive working memory: a fixed-size compressive memory updated chunk by
// chunk through linear attention with position-aware online softmax key
// kernels.
//
// Per chunk s with keys K_s in R^{c x z} (per feature dimension j):
//
//   w_s = sum_i exp(k_{s,i})         current chunk denominator
//   z_s = z_{s-1} + w_s              accumulated denominator
//   phi(k)   = exp(k) / w_s          local key kernel (column softmax)
//   phi_s(k) = exp(k) / z_s = (w_s/z_s) phi(k)
//   psi(q)   = softmax over the feature dimension (rows sum to 1)
//
//   M_s = (z_{s-1}/z_s) . M_{s-1} + (w_s/z_s) . phi(K_s)^T (V_s - psi(K_s) M_{s-1})
//
// with M_0 = 0. Retrieval: O_m = psi(Q_m) M. With these kernels the
// normalization term psi(Q) tau is the constant 1, so no division appears in
// the output path.
//
// Overflow control: z is stored as (r, z_hat) with z = z_hat * exp(r), r a
// per-dimension running max of key entries. When r grows, the old
// accumulator is rescaled by exp(r_old - r_new); every quantity that reaches
// the output is a ratio, so results are invariant to the pivot. r is a
// scaling pivot only, so it is treated as constant by the backward pass
// (outputs are exactly invariant to it).
//
// The caller owns the shifted-index discipline: the retrieval for chunk s
// happens against the memory before chunk s-1 is folded in, i.e. per chunk:
// retrieve first, then fold the previous chunk's keys/values.

#include <type_traits>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/tensor.hpp"

namespace gecko {

template <typename T>
struct MemoryState {
    size_t zdim = 0, vdim = 0;
    Tensor<T> M;           // [z, v]
    std::vector<T> z_hat;  // [z] scaled accumulator, z = z_hat * exp(r)
    std::vector<T> r;      // [z] running max pivot
    uint64_t chunks_folded = 0;

    static MemoryState fresh(size_t z, size_t v) {
        MemoryState s;
        s.zdim = z;
        s.vdim = v;
        s.M = Tensor<T>({z, v});
        s.z_hat.assign(z, T(0));
        s.r.assign(z, -std::numeric_limits<T>::infinity());
        return s;
    }

    size_t byte_size() const {
        return sizeof(T) * (M.size() + z_hat.size() + r.size()) + sizeof(uint64_t);
    }
};

// softmax along the feature dimension of each row
template <typename T>
Tensor<T> psi(const Tensor<T>& x) {
    Tensor<T> y = x;
    softmax_rows_inplace(y.data.data(), y.shape[0], y.shape[1]);
    return y;
}

// ---------------------------------------------------------------------------
// online softmax kernels
// ---------------------------------------------------------------------------

template <typename T>
struct KernelOut {
    Tensor<T> phi;              // [c, z] exp(k)/w_s, column-normalized per dim
    Tensor<T> phi_global;       // [c, z] exp(k)/z_s
    std::vector<T> ratio_prev;  // [z] z_{s-1}/z_s
    std::vector<T> ratio_w;     // [z] w_s/z_s
};

// Computes the kernels of one chunk and advances the accumulator (z_s updated
// in place, with running-max rebasing).
template <typename T>
KernelOut<T> awm_kernels(MemoryState<T>& state, const Tensor<T>& K) {
    const size_t c = K.shape[0], z = K.shape[1];
    GECKO_CHECK(z == state.zdim, "awm keys " << shape_str(K) << " vs zdim " << state.zdim);
    assert_all_finite(K, "awm keys");
    KernelOut<T> out;
    out.phi = Tensor<T>({c, z});
    out.phi_global = Tensor<T>({c, z});
    out.ratio_prev.assign(z, T(0));
    out.ratio_w.assign(z, T(0));
    for (size_t j = 0; j < z; ++j) {
        T m_chunk = K(0, j);
        for (size_t i = 1; i < c; ++i) m_chunk = std::max(m_chunk, K(i, j));
        const T r_new = std::max(state.r[j], m_chunk);
        T w_chunk = T(0);  // w_s * exp(-m_chunk)
        for (size_t i = 0; i < c; ++i) {
            const T e = std::exp(K(i, j) - m_chunk);
            out.phi(i, j) = e;
            w_chunk += e;
        }
        const T zr = state.z_hat[j] * std::exp(state.r[j] - r_new);  // z_{s-1} * exp(-r_new)
        const T wr = w_chunk * std::exp(m_chunk - r_new);            // w_s * exp(-r_new)
        const T z_new = zr + wr;
        out.ratio_prev[j] = zr / z_new;
        out.ratio_w[j] = wr / z_new;
        const T inv_w = T(1) / w_chunk;
        for (size_t i = 0; i < c; ++i) {
            out.phi(i, j) *= inv_w;
            out.phi_global(i, j) = out.phi(i, j) * out.ratio_w[j];
        }
        state.z_hat[j] = z_new;
        state.r[j] = r_new;
    }
    return out;
}

// ---------------------------------------------------------------------------
// memory updates
// ---------------------------------------------------------------------------

// Delta-rule update: folds one chunk of keys/values into the memory.
template <typename T>
void awm_update(MemoryState<T>& state, const Tensor<T>& K, const Tensor<T>& V) {
    const size_t c = K.shape[0], z = state.zdim, v = state.vdim;
    GECKO_CHECK(V.shape[0] == c && V.shape[1] == v, "awm values " << shape_str(V) << " mismatch");
    auto kern = awm_kernels(state, K);
    Tensor<T> psi_k = psi(K);
    // C = V - psi(K) M
    Tensor<T> C = V;
    for (size_t i = 0; i < c; ++i)
        for (size_t j = 0; j < z; ++j) {
            const T p = psi_k(i, j);
            if (p == T(0)) continue;
            const T* mrow = state.M.row_ptr(j);
            T* crow = C.row_ptr(i);
            for (size_t u = 0; u < v; ++u) crow[u] -= p * mrow[u];
        }
    // M <- a . M + b . phi^T C
    for (size_t j = 0; j < z; ++j) {
        T* mrow = state.M.row_ptr(j);
        const T a = kern.ratio_prev[j], b = kern.ratio_w[j];
        for (size_t u = 0; u < v; ++u) mrow[u] *= a;
        for (size_t i = 0; i < c; ++i) {
            const T pb = kern.phi(i, j) * b;
            const T* crow = C.row_ptr(i);
            for (size_t u = 0; u < v; ++u) mrow[u] += pb * crow[u];
        }
    }
    state.chunks_folded += 1;
}

// Non-delta verification variant: M_s = (z_{s-1}/z_s) . M_{s-1} + phi_s(K)^T V.
template <typename T>
void awm_update_nodelta(MemoryState<T>& state, const Tensor<T>& K, const Tensor<T>& V) {
    const size_t c = K.shape[0], z = state.zdim, v = state.vdim;
    GECKO_CHECK(V.shape[0] == c && V.shape[1] == v, "awm values " << shape_str(V) << " mismatch");
    auto kern = awm_kernels(state, K);
    for (size_t j = 0; j < z; ++j) {
        T* mrow = state.M.row_ptr(j);
        const T a = kern.ratio_prev[j];
        for (size_t u = 0; u < v; ++u) mrow[u] *= a;
        for (size_t i = 0; i < c; ++i) {
            const T pg = kern.phi_global(i, j);
            const T* vrow = V.row_ptr(i);
            for (size_t u = 0; u < v; ++u) mrow[u] += pg * vrow[u];
        }
    }
    state.chunks_folded += 1;
}

// O_m = psi(Q_m) M. Zero memory (stream start) yields zero output.
template <typename T>
Tensor<T> awm_retrieve(const MemoryState<T>& state, const Tensor<T>& Qm) {
    const size_t rows = Qm.shape[0];
    GECKO_CHECK(Qm.shape[1] == state.zdim, "awm query " << shape_str(Qm) << " mismatch");
    Tensor<T> psi_q = psi(Qm);
    Tensor<T> O({rows, state.vdim});
    matmul_into(psi_q.data.data(), state.M.data.data(), O.data.data(), rows, state.zdim,
                state.vdim);
    return O;
}

// ---------------------------------------------------------------------------
// memory projections (learnable per-dim scale/offset of the shared Z')
// ---------------------------------------------------------------------------

template <typename T>
struct MemProjParams {
    Tensor<T> eta_q, rho_q;  // [z]
    Tensor<T> eta_k, rho_k;  // [z]
};

template <typename T>
void memory_projections(const Tensor<T>& z_prime, const MemProjParams<T>& prm, Tensor<T>& qm,
                        Tensor<T>& km) {
    const size_t n = z_prime.shape[0], z = z_prime.shape[1];
    qm = Tensor<T>({n, z});
    km = Tensor<T>({n, z});
    for (size_t t = 0; t < n; ++t)
        for (size_t j = 0; j < z; ++j) {
            qm(t, j) = prm.eta_q.data[j] * z_prime(t, j) + prm.rho_q.data[j];
            km(t, j) = prm.eta_k.data[j] * z_prime(t, j) + prm.rho_k.data[j];
        }
}

template <typename T>
struct MemProjGrads {
    Tensor<T> dz_prime;
    Tensor<T> deta_q, drho_q, deta_k, drho_k;
};

template <typename T>
MemProjGrads<T> memory_projections_backward(const Tensor<T>& z_prime, const MemProjParams<T>& prm,
                                            const Tensor<T>& dqm, const Tensor<T>& dkm) {
    const size_t n = z_prime.shape[0], z = z_prime.shape[1];
    MemProjGrads<T> g;
    g.dz_prime = Tensor<T>({n, z});
    g.deta_q = Tensor<T>({z});
    g.drho_q = Tensor<T>({z});
    g.deta_k = Tensor<T>({z});
    g.drho_k = Tensor<T>({z});
    for (size_t t = 0; t < n; ++t)
        for (size_t j = 0; j < z; ++j) {
            g.deta_q.data[j] += dqm(t, j) * z_prime(t, j);
            g.drho_q.data[j] += dqm(t, j);
            g.deta_k.data[j] += dkm(t, j) * z_prime(t, j);
            g.drho_k.data[j] += dkm(t, j);
            g.dz_prime(t, j) =
                dqm(t, j) * prm.eta_q.data[j] + dkm(t, j) * prm.eta_k.data[j];
        }
    return g;
}

// ---------------------------------------------------------------------------
// whole-sequence driver with the shifted-index discipline
// ---------------------------------------------------------------------------

template <typename T>
struct AwmTrace {
    size_t c = 0, n_chunks = 0;
    // state before chunk s is processed (the memory the retrieval sees)
    std::vector<Tensor<T>> m_pre;           // [S] each [z, v]
    std::vector<std::vector<T>> zhat_pre;   // [S][z]
    std::vector<std::vector<T>> r_pre;      // [S][z]
};

// Per chunk s: O_m rows = psi(Qm_s) M (memory covering chunks <= s-2), then
// fold chunk s-1's (Km, V). A partial final chunk is retrieved but never
// folded. Advances `state` so a later call continues the stream.
template <typename T>
Tensor<T> awm_chain_forward(MemoryState<T>& state, const Tensor<T>& qm, const Tensor<T>& km,
                            const Tensor<T>& v, size_t c,
                            std::type_identity_t<AwmTrace<T>>* trace = nullptr) {
    const size_t n = qm.shape[0], vdim = state.vdim;
    const size_t S = ceil_div(n, c);
    Tensor<T> om({n, vdim});
    if (trace) {
        trace->c = c;
        trace->n_chunks = S;
        trace->m_pre.assign(S, {});
        trace->zhat_pre.assign(S, {});
        trace->r_pre.assign(S, {});
    }
    for (size_t s = 0; s < S; ++s) {
        if (trace) {
            trace->m_pre[s] = state.M;
            trace->zhat_pre[s] = state.z_hat;
            trace->r_pre[s] = state.r;
        }
        const size_t q0 = s * c;
        const size_t rows = std::min(c, n - q0);
        Tensor<T> qs({rows, qm.shape[1]});
        std::copy_n(qm.row_ptr(q0), rows * qm.shape[1], qs.data.begin());
        Tensor<T> os = awm_retrieve(state, qs);
        std::copy_n(os.data.begin(), rows * vdim, om.row_ptr(q0));
        if (s >= 1) {
            // chunk s-1 leaves the attention window: fold it
            const size_t p0 = (s - 1) * c;
            Tensor<T> kc({c, km.shape[1]}), vc({c, vdim});
            std::copy_n(km.row_ptr(p0), c * km.shape[1], kc.data.begin());
            std::copy_n(v.row_ptr(p0), c * vdim, vc.data.begin());
            awm_update(state, kc, vc);
        }
    }
    return om;
}

template <typename T>
struct AwmGrads {
    Tensor<T> dqm, dkm, dv;
};

// Reverse sweep over the chunk chain. Kernels are recomputed from the stored
// (z_hat, r) checkpoints; zeta carries the accumulator cotangent in the
// scaled form dz * z. dm_final, when given, seeds the cotangent of the
// memory as it stands after the whole call (streaming continuation).
template <typename T>
AwmGrads<T> awm_chain_backward(const Tensor<T>& qm, const Tensor<T>& km, const Tensor<T>& v,
                               size_t c, const AwmTrace<T>& trace, const Tensor<T>& dom,
                               const std::type_identity_t<Tensor<T>>* dm_final = nullptr) {
    const size_t n = qm.shape[0], z = qm.shape[1], vdim = v.shape[1];
    const size_t S = trace.n_chunks;
    AwmGrads<T> g;
    g.dqm = Tensor<T>({n, z});
    g.dkm = Tensor<T>({n, z});
    g.dv = Tensor<T>({n, vdim});

    Tensor<T> dm({z, vdim});          // cotangent of the post-fold memory at chunk s
    if (dm_final) dm = *dm_final;
    std::vector<T> zeta(z, T(0));     // dz * z for the post-fold accumulator
    for (size_t s = S; s-- > 0;) {
        const Tensor<T>& m_pre = trace.m_pre[s];
        if (s >= 1) {
            // ---- backward of the fold of chunk s-1 ----
            const size_t p0 = (s - 1) * c;
            // recompute kernels from the checkpointed accumulator
            MemoryState<T> tmp;
            tmp.zdim = z;
            tmp.vdim = vdim;
            tmp.M = Tensor<T>({0, 0});
            tmp.z_hat = trace.zhat_pre[s];
            tmp.r = trace.r_pre[s];
            Tensor<T> kc({c, z}), vc({c, vdim});
            std::copy_n(km.row_ptr(p0), c * z, kc.data.begin());
            std::copy_n(v.row_ptr(p0), c * vdim, vc.data.begin());
            auto kern = awm_kernels(tmp, kc);
            Tensor<T> psi_k = psi(kc);
            // C = V - psi(K) m_pre ; T = phi^T C
            Tensor<T> C = vc;
            for (size_t i = 0; i < c; ++i)
                for (size_t j = 0; j < z; ++j) {
                    const T p = psi_k(i, j);
                    const T* mrow = m_pre.row_ptr(j);
                    T* crow = C.row_ptr(i);
                    for (size_t u = 0; u < vdim; ++u) crow[u] -= p * mrow[u];
                }
            Tensor<T> tmat({z, vdim});
            matmul_tn_accum(kern.phi.data.data(), C.data.data(), tmat.data.data(), c, z, vdim);

            std::vector<T> da(z, T(0)), db(z, T(0));
            Tensor<T> dtmat({z, vdim});
            Tensor<T> dm_pre({z, vdim});
            for (size_t j = 0; j < z; ++j) {
                const T a = kern.ratio_prev[j], b = kern.ratio_w[j];
                const T* dmrow = dm.row_ptr(j);
                const T* mrow = m_pre.row_ptr(j);
                const T* trow = tmat.row_ptr(j);
                T* dtrow = dtmat.row_ptr(j);
                T* dmprow = dm_pre.row_ptr(j);
                T acc_a = T(0), acc_b = T(0);
                for (size_t u = 0; u < vdim; ++u) {
                    acc_a += dmrow[u] * mrow[u];
                    acc_b += dmrow[u] * trow[u];
                    dtrow[u] = b * dmrow[u];
                    dmprow[u] = a * dmrow[u];
                }
                da[j] = acc_a;
                db[j] = acc_b;
            }
            // dphi = C dT^T ; dC = phi dT
            Tensor<T> dphi({c, z});
            Tensor<T> dC({c, vdim});
            for (size_t i = 0; i < c; ++i)
                for (size_t j = 0; j < z; ++j) {
                    const T* crow = C.row_ptr(i);
                    const T* dtrow = dtmat.row_ptr(j);
                    T acc = T(0);
                    for (size_t u = 0; u < vdim; ++u) acc += crow[u] * dtrow[u];
                    dphi(i, j) = acc;
                }
            matmul_into(kern.phi.data.data(), dtmat.data.data(), dC.data.data(), c, z, vdim);
            // C consumers: dV, dpsiK, dm_pre
            Tensor<T> dpsi_k({c, z});
            for (size_t i = 0; i < c; ++i) {
                T* dvrow = g.dv.row_ptr(p0 + i);
                const T* dcrow = dC.row_ptr(i);
                for (size_t u = 0; u < vdim; ++u) dvrow[u] += dcrow[u];
                for (size_t j = 0; j < z; ++j) {
                    const T* mrow = m_pre.row_ptr(j);
                    T acc = T(0);
                    for (size_t u = 0; u < vdim; ++u) acc += dcrow[u] * mrow[u];
                    dpsi_k(i, j) = -acc;
                    const T p = psi_k(i, j);
                    T* dmprow = dm_pre.row_ptr(j);
                    for (size_t u = 0; u < vdim; ++u) dmprow[u] -= p * dcrow[u];
                }
            }
            // psi backward into dkm
            {
                Tensor<T> dk_psi({c, z});
                softmax_rows_backward(psi_k.data.data(), dpsi_k.data.data(), dk_psi.data.data(),
                                      c, z);
                for (size_t i = 0; i < c; ++i)
                    for (size_t j = 0; j < z; ++j) g.dkm(p0 + i, j) += dk_psi(i, j);
            }
            // phi and ratio backward into dkm; zeta carry
            for (size_t j = 0; j < z; ++j) {
                const T a = kern.ratio_prev[j], b = kern.ratio_w[j];
                T G = T(0);
                for (size_t i = 0; i < c; ++i) G += dphi(i, j) * kern.phi(i, j);
                const T zeta_full = zeta[j] - da[j] * a - db[j] * b;
                const T extra = (db[j] + zeta_full) * b - G;
                for (size_t i = 0; i < c; ++i)
                    g.dkm(p0 + i, j) += kern.phi(i, j) * (dphi(i, j) + extra);
                zeta[j] = a * (da[j] + zeta_full);
            }
            dm = std::move(dm_pre);
        }
        // ---- backward of the retrieval at chunk s ----
        const size_t q0 = s * c;
        const size_t rows = std::min(n - q0, c);
        Tensor<T> qs({rows, z});
        std::copy_n(qm.row_ptr(q0), rows * z, qs.data.begin());
        Tensor<T> psi_q = psi(qs);
        Tensor<T> dpsi_q({rows, z});
        for (size_t i = 0; i < rows; ++i) {
            const T* dorow = dom.row_ptr(q0 + i);
            for (size_t j = 0; j < z; ++j) {
                const T* mrow = m_pre.row_ptr(j);
                T acc = T(0);
                for (size_t u = 0; u < vdim; ++u) acc += dorow[u] * mrow[u];
                dpsi_q(i, j) = acc;
                T* dmrow = dm.row_ptr(j);
                const T p = psi_q(i, j);
                for (size_t u = 0; u < vdim; ++u) dmrow[u] += p * dorow[u];
            }
        }
        Tensor<T> dq_psi({rows, z});
        softmax_rows_backward(psi_q.data.data(), dpsi_q.data.data(), dq_psi.data.data(), rows, z);
        for (size_t i = 0; i < rows; ++i)
            for (size_t j = 0; j < z; ++j) g.dqm(q0 + i, j) += dq_psi(i, j);
    }
    return g;
}

// ---------------------------------------------------------------------------
// DeltaNet baseline (Eq. 15-17 ablation): element-wise SiLU feature kernels
// and the tau normalization term the online-softmax kernels eliminate.
// ---------------------------------------------------------------------------

inline constexpr double kTauClamp = 1e-8;

template <typename T>
struct DeltaNetState {
    size_t zdim = 0, vdim = 0;
    Tensor<T> M;         // [z, v]
    std::vector<T> tau;  // [z]
    uint64_t clamp_events = 0;

    static DeltaNetState fresh(size_t z, size_t v) {
        DeltaNetState s;
        s.zdim = z;
        s.vdim = v;
        s.M = Tensor<T>({z, v});
        s.tau.assign(z, T(0));
        return s;
    }
};

template <typename T>
struct DeltaNetTrace {
    size_t c = 0, n_chunks = 0;
    std::vector<Tensor<T>> m_pre;           // [S][z, v]
    std::vector<std::vector<T>> tau_pre;    // [S][z]
};

// Processes whole chunks: per chunk, output from the previous state, then the
// delta update. Denominators below kTauClamp are clamped and counted.
template <typename T>
Tensor<T> deltanet_forward(DeltaNetState<T>& state, const Tensor<T>& q, const Tensor<T>& k,
                           const Tensor<T>& v, size_t c,
                           std::type_identity_t<DeltaNetTrace<T>>* trace = nullptr) {
    const size_t n = q.shape[0], z = state.zdim, vdim = state.vdim;
    GECKO_CHECK(n % c == 0, "deltanet feeds whole chunks, n=" << n << " c=" << c);
    const size_t S = n / c;
    Tensor<T> out({n, vdim});
    if (trace) {
        trace->c = c;
        trace->n_chunks = S;
        trace->m_pre.assign(S, {});
        trace->tau_pre.assign(S, {});
    }
    auto clamp_den = [&](T den) {
        if (den < static_cast<T>(kTauClamp)) {
            state.clamp_events += 1;
            return static_cast<T>(kTauClamp);
        }
        return den;
    };
    for (size_t s = 0; s < S; ++s) {
        if (trace) {
            trace->m_pre[s] = state.M;
            trace->tau_pre[s] = state.tau;
        }
        const size_t q0 = s * c;
        // O_s = psi(Q) M / (psi(Q) tau)
        for (size_t i = 0; i < c; ++i) {
            std::vector<T> pq(z);
            T den = T(0);
            for (size_t j = 0; j < z; ++j) {
                pq[j] = silu(q(q0 + i, j));
                den += pq[j] * state.tau[j];
            }
            den = clamp_den(den);
            T* orow = out.row_ptr(q0 + i);
            for (size_t j = 0; j < z; ++j) {
                const T* mrow = state.M.row_ptr(j);
                for (size_t u = 0; u < vdim; ++u) orow[u] += pq[j] * mrow[u];
            }
            for (size_t u = 0; u < vdim; ++u) orow[u] /= den;
        }
        // M_s = M + phi(K)^T (V - psi(K) M / (psi(K) tau)); tau += colsum phi(K)
        Tensor<T> corr({c, vdim});
        for (size_t i = 0; i < c; ++i) {
            T den = T(0);
            for (size_t j = 0; j < z; ++j) den += silu(k(q0 + i, j)) * state.tau[j];
            den = clamp_den(den);
            T* crow = corr.row_ptr(i);
            for (size_t j = 0; j < z; ++j) {
                const T pk = silu(k(q0 + i, j));
                const T* mrow = state.M.row_ptr(j);
                for (size_t u = 0; u < vdim; ++u) crow[u] += pk * mrow[u];
            }
            for (size_t u = 0; u < vdim; ++u) crow[u] = v(q0 + i, u) - crow[u] / den;
        }
        for (size_t i = 0; i < c; ++i)
            for (size_t j = 0; j < z; ++j) {
                const T pk = silu(k(q0 + i, j));
                T* mrow = state.M.row_ptr(j);
                const T* crow = corr.row_ptr(i);
                for (size_t u = 0; u < vdim; ++u) mrow[u] += pk * crow[u];
                state.tau[j] += pk;
            }
    }
    return out;
}

template <typename T>
AwmGrads<T> deltanet_backward(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                              size_t c, const DeltaNetTrace<T>& trace, const Tensor<T>& dout) {
    const size_t n = q.shape[0], z = trace.m_pre[0].shape[0], vdim = v.shape[1];
    const size_t S = trace.n_chunks;
    AwmGrads<T> g;
    g.dqm = Tensor<T>({n, z});
    g.dkm = Tensor<T>({n, z});
    g.dv = Tensor<T>({n, vdim});
    Tensor<T> dm({z, vdim});
    std::vector<T> dtau(z, T(0));
    for (size_t s = S; s-- > 0;) {
        const size_t q0 = s * c;
        const Tensor<T>& m_pre = trace.m_pre[s];
        const std::vector<T>& tau = trace.tau_pre[s];
        // ---- update backward ----
        // recompute psi(K), denominators and C
        Tensor<T> pk({c, z});
        std::vector<T> denk(c);
        Tensor<T> corr({c, vdim});
        for (size_t i = 0; i < c; ++i) {
            T den = T(0);
            for (size_t j = 0; j < z; ++j) {
                pk(i, j) = silu(k(q0 + i, j));
                den += pk(i, j) * tau[j];
            }
            denk[i] = den;
            T* crow = corr.row_ptr(i);
            for (size_t j = 0; j < z; ++j) {
                const T* mrow = m_pre.row_ptr(j);
                for (size_t u = 0; u < vdim; ++u) crow[u] += pk(i, j) * mrow[u];
            }
            const T dc = std::max(den, static_cast<T>(kTauClamp));
            for (size_t u = 0; u < vdim; ++u) crow[u] = v(q0 + i, u) - crow[u] / dc;
        }
        // tau_new = tau + colsum(phi); phi == pk here (same SiLU kernel)
        // M_new = M + pk^T corr
        Tensor<T> dpk({c, z});
        Tensor<T> dcorr({c, vdim});
        matmul_into(pk.data.data(), dm.data.data(), dcorr.data.data(), c, z, vdim);
        for (size_t i = 0; i < c; ++i)
            for (size_t j = 0; j < z; ++j) {
                const T* crow = corr.row_ptr(i);
                const T* dmrow = dm.row_ptr(j);
                T acc = T(0);
                for (size_t u = 0; u < vdim; ++u) acc += crow[u] * dmrow[u];
                dpk(i, j) = acc + dtau[j];  // tau carry lands on the kernel colsum
            }
        Tensor<T> dm_pre = dm;  // identity term of M_new = M + ...
        for (size_t i = 0; i < c; ++i) {
            const T den = denk[i];
            const bool clamped = den < static_cast<T>(kTauClamp);
            const T dc = clamped ? static_cast<T>(kTauClamp) : den;
            const T* dcrow = dcorr.row_ptr(i);
            // corr = V - num/dc with num = pk_i M
            T* dvrow = g.dv.row_ptr(q0 + i);
            T dden = T(0);
            for (size_t u = 0; u < vdim; ++u) {
                dvrow[u] += dcrow[u];
            }
            // dnum = -dcorr/dc ; dden += sum_u dcorr * num/dc^2
            for (size_t j = 0; j < z; ++j) {
                const T* mrow = m_pre.row_ptr(j);
                T acc = T(0);
                for (size_t u = 0; u < vdim; ++u) acc += dcrow[u] * mrow[u];
                dpk(i, j) += -acc / dc;
                T* dmrow = dm_pre.row_ptr(j);
                const T w = -pk(i, j) / dc;
                for (size_t u = 0; u < vdim; ++u) dmrow[u] += w * dcrow[u];
            }
            if (!clamped) {
                T num_dot = T(0);
                for (size_t u = 0; u < vdim; ++u) {
                    // num_u = sum_j pk M ; reuse corr: num/dc = V - corr
                    const T num_over_dc = v(q0 + i, u) - corr(i, u);
                    num_dot += dcrow[u] * num_over_dc;
                }
                dden = num_dot / dc;
                for (size_t j = 0; j < z; ++j) dpk(i, j) += dden * tau[j];
                for (size_t j = 0; j < z; ++j) dtau[j] += dden * pk(i, j);
            }
        }
        for (size_t i = 0; i < c; ++i)
            for (size_t j = 0; j < z; ++j)
                g.dkm(q0 + i, j) += dpk(i, j) * silu_grad(k(q0 + i, j));
        dm = std::move(dm_pre);
        // ---- output backward ----
        for (size_t i = 0; i < c; ++i) {
            std::vector<T> pq(z);
            T den = T(0);
            for (size_t j = 0; j < z; ++j) {
                pq[j] = silu(q(q0 + i, j));
                den += pq[j] * tau[j];
            }
            const bool clamped = den < static_cast<T>(kTauClamp);
            const T dc = clamped ? static_cast<T>(kTauClamp) : den;
            const T* dorow = dout.row_ptr(q0 + i);
            // o = num/dc, num = pq M
            std::vector<T> dnum(vdim);
            for (size_t u = 0; u < vdim; ++u) dnum[u] = dorow[u] / dc;
            T dden = T(0);
            if (!clamped) {
                // o_u = num_u/dc ; dden = -sum dorow*o/dc
                for (size_t u = 0; u < vdim; ++u) {
                    T num_u = T(0);
                    for (size_t j = 0; j < z; ++j) num_u += pq[j] * m_pre(j, u);
                    dden -= dorow[u] * num_u / (dc * dc);
                }
            }
            for (size_t j = 0; j < z; ++j) {
                const T* mrow = m_pre.row_ptr(j);
                T acc = T(0);
                for (size_t u = 0; u < vdim; ++u) acc += dnum[u] * mrow[u];
                T dpq = acc + (clamped ? T(0) : dden * tau[j]);
                g.dqm(q0 + i, j) += dpq * silu_grad(q(q0 + i, j));
                T* dmrow = dm.row_ptr(j);
                for (size_t u = 0; u < vdim; ++u) dmrow[u] += pq[j] * dnum[u];
                if (!clamped) dtau[j] += dden * pq[j];
            }
        }
    }
    return g;
}

}  // namespace gecko
