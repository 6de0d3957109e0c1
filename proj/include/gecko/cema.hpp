#pragma once

// CEMA: complex multi-dimensional damped EMA. Each input feature j is
// expanded into h lanes, each lane runs an independent complex recurrence
//
//   h_t = alpha * beta * x[t,j] + (1 - alpha*delta) e^{i theta} * M_t * h_{t-1}
//   y[t,j] = sum_k Re(eta[j,k] * h_t[j,k])
//
// with alpha, delta in (0,1) (stored unconstrained, squashed by a sigmoid)
// and theta[j,k] = 2 pi k / h * omega[j], k = 1..h. M_t is the document
// boundary mask (0 resets the state).
//
// The chunked scan computes the same recurrence through the affine algebra in
// scan.hpp: per-chunk summaries, a Blelloch combine across chunks, then a
// sequential pass inside each chunk. Only per-chunk carry-in states are kept
// for the backward pass, which rematerializes interior states chunk by chunk.

#include <complex>
#include <numbers>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/parallel.hpp"
#include "gecko/rng.hpp"
#include "gecko/scan.hpp"
#include "gecko/tensor.hpp"

namespace gecko {

using BoundaryMask = std::vector<uint8_t>;  // 1 = carry state, 0 = document reset; empty = all 1

template <typename T>
struct CemaParams {
    size_t d = 0, h = 0;
    Tensor<T> beta;       // [d, h] expansion
    Tensor<T> alpha_raw;  // [d, h] sigmoid -> decay in (0,1)
    Tensor<T> delta_raw;  // [d, h] sigmoid -> damping in (0,1)
    Tensor<T> omega;      // [d]    base angles
    Tensor<T> eta_re;     // [d, h] output projection, real part
    Tensor<T> eta_im;     // [d, h] output projection, imag part

    // The paper does not state initialization; squashed alpha/delta are drawn
    // uniformly in (0.1, 0.9) and omega log-uniformly in [1e-2, 1] so base
    // angles span slow and fast rotations.
    static CemaParams init(size_t d, size_t h, uint64_t seed) {
        CemaParams p;
        p.d = d;
        p.h = h;
        p.beta = Tensor<T>({d, h});
        p.alpha_raw = Tensor<T>({d, h});
        p.delta_raw = Tensor<T>({d, h});
        p.omega = Tensor<T>({d});
        p.eta_re = Tensor<T>({d, h});
        p.eta_im = Tensor<T>({d, h});
        Rng r_a(seed, "cema.alpha"), r_d(seed, "cema.delta"), r_w(seed, "cema.omega");
        Rng r_b(seed, "cema.beta"), r_er(seed, "cema.eta_re"), r_ei(seed, "cema.eta_im");
        const double lane_scale = 1.0 / std::sqrt(static_cast<double>(h));
        for (size_t j = 0; j < d; ++j) {
            p.omega.data[j] = static_cast<T>(std::exp(r_w.uniform(j, std::log(1e-2), std::log(1.0))));
            for (size_t k = 0; k < h; ++k) {
                const uint64_t c = j * h + k;
                const double a = r_a.uniform(c, 0.1, 0.9);
                const double dd = r_d.uniform(c, 0.1, 0.9);
                p.alpha_raw(j, k) = static_cast<T>(std::log(a / (1.0 - a)));
                p.delta_raw(j, k) = static_cast<T>(std::log(dd / (1.0 - dd)));
                p.beta(j, k) = static_cast<T>(r_b.normal(c) * lane_scale);
                p.eta_re(j, k) = static_cast<T>(r_er.normal(c) * lane_scale);
                p.eta_im(j, k) = static_cast<T>(r_ei.normal(c) * lane_scale);
            }
        }
        return p;
    }
};

template <typename T>
struct CemaLane {
    T alpha, delta, beta, theta;
    std::complex<T> q;    // (1 - alpha*delta) e^{i theta}
    std::complex<T> eta;  // output projection
};

template <typename T>
std::vector<CemaLane<T>> cema_lanes(const CemaParams<T>& p) {
    std::vector<CemaLane<T>> lanes(p.d * p.h);
    const T two_pi = static_cast<T>(2.0 * std::numbers::pi);
    for (size_t j = 0; j < p.d; ++j) {
        for (size_t k = 0; k < p.h; ++k) {
            CemaLane<T>& L = lanes[j * p.h + k];
            L.alpha = sigmoid(p.alpha_raw(j, k));
            L.delta = sigmoid(p.delta_raw(j, k));
            L.beta = p.beta(j, k);
            L.theta = two_pi * static_cast<T>(k + 1) / static_cast<T>(p.h) * p.omega.data[j];
            const T mag = T(1) - L.alpha * L.delta;
            L.q = std::complex<T>(mag * std::cos(L.theta), mag * std::sin(L.theta));
            L.eta = std::complex<T>(p.eta_re(j, k), p.eta_im(j, k));
        }
    }
    return lanes;
}

inline bool mask_keep(const BoundaryMask& mask, size_t t) {
    return mask.empty() || mask[t] != 0;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <typename T>
struct CemaOut {
    Tensor<T> y;                              // [n, d]
    std::vector<std::complex<T>> h_final;     // [d*h]
    std::vector<std::complex<T>> boundary;    // [n_chunks, d*h] carry-in per chunk
    size_t n = 0, chunk = 0, n_chunks = 0;

    // states retained for backward, per lane
    size_t stored_state_count() const { return n_chunks; }
};

// Exact recurrence; the oracle for the chunked scan and the streaming step.
template <typename T>
void cema_sequential(const Tensor<T>& x, const CemaParams<T>& p, const BoundaryMask& mask,
                     const std::vector<std::complex<T>>& h0, Tensor<T>& y,
                     std::vector<std::complex<T>>& h_final) {
    const size_t n = x.shape[0];
    GECKO_CHECK(x.rank() == 2 && x.shape[1] == p.d,
                "cema input " << shape_str(x) << " does not match d=" << p.d);
    GECKO_CHECK(h0.size() == p.d * p.h, "cema h0 size " << h0.size() << " != d*h");
    GECKO_CHECK(mask.empty() || mask.size() == n, "boundary mask length mismatch");
    const auto lanes = cema_lanes(p);
    y = Tensor<T>({n, p.d});
    h_final = h0;
    std::vector<std::complex<T>>& h = h_final;
    for (size_t t = 0; t < n; ++t) {
        const bool keep = mask_keep(mask, t);
        for (size_t j = 0; j < p.d; ++j) {
            const T xv = x(t, j);
            T acc = T(0);
            for (size_t k = 0; k < p.h; ++k) {
                const CemaLane<T>& L = lanes[j * p.h + k];
                std::complex<T>& hs = h[j * p.h + k];
                const std::complex<T> prev = keep ? hs : std::complex<T>(0, 0);
                hs = std::complex<T>(L.alpha * L.beta * xv, T(0)) + L.q * prev;
                acc += L.eta.real() * hs.real() - L.eta.imag() * hs.imag();
            }
            y(t, j) = acc;
        }
    }
}

// Chunked associative scan. Matches cema_sequential to floating-point noise
// and retains only per-chunk carry-in states.
template <typename T>
CemaOut<T> cema_scan(const Tensor<T>& x, const CemaParams<T>& p, const BoundaryMask& mask,
                     const std::vector<std::complex<T>>& h0, size_t chunk) {
    GECKO_CHECK(chunk >= 1, "scan chunk must be >= 1, got " << chunk);
    const size_t n = x.shape[0];
    GECKO_CHECK(x.rank() == 2 && x.shape[1] == p.d,
                "cema input " << shape_str(x) << " does not match d=" << p.d);
    GECKO_CHECK(h0.size() == p.d * p.h, "cema h0 size " << h0.size() << " != d*h");
    GECKO_CHECK(mask.empty() || mask.size() == n, "boundary mask length mismatch");
    const auto lanes = cema_lanes(p);
    CemaOut<T> out;
    out.n = n;
    out.chunk = chunk;
    out.n_chunks = ceil_div(n, chunk);
    out.y = Tensor<T>({n, p.d});
    out.h_final.assign(p.d * p.h, {});
    out.boundary.assign(out.n_chunks * p.d * p.h, {});

    parallel_for(0, p.d, [&](size_t j) {
        std::vector<AffineState<T>> summaries(out.n_chunks);
        for (size_t k = 0; k < p.h; ++k) {
            const CemaLane<T>& L = lanes[j * p.h + k];
            const size_t lane = j * p.h + k;
            // per-chunk summary = composition of the chunk's per-step affines
            for (size_t c = 0; c < out.n_chunks; ++c) {
                AffineState<T> acc{};  // identity
                const size_t t_end = std::min(n, (c + 1) * chunk);
                for (size_t t = c * chunk; t < t_end; ++t) {
                    const std::complex<T> q_eff = mask_keep(mask, t) ? L.q : std::complex<T>(0, 0);
                    const std::complex<T> pt(L.alpha * L.beta * x(t, j), T(0));
                    acc = affine_combine(AffineState<T>{q_eff, pt}, acc);
                }
                summaries[c] = acc;
            }
            affine_exclusive_scan(summaries);
            // carry-in state per chunk, then the sequential pass inside it
            for (size_t c = 0; c < out.n_chunks; ++c) {
                std::complex<T> hs = affine_apply(summaries[c], h0[lane]);
                out.boundary[c * p.d * p.h + lane] = hs;
                const size_t t_end = std::min(n, (c + 1) * chunk);
                for (size_t t = c * chunk; t < t_end; ++t) {
                    const std::complex<T> prev = mask_keep(mask, t) ? hs : std::complex<T>(0, 0);
                    hs = std::complex<T>(L.alpha * L.beta * x(t, j), T(0)) + L.q * prev;
                    out.y(t, j) += L.eta.real() * hs.real() - L.eta.imag() * hs.imag();
                }
                if (c + 1 == out.n_chunks) out.h_final[lane] = hs;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
struct CemaGrads {
    Tensor<T> dx;  // [n, d]
    Tensor<T> dbeta, dalpha_raw, ddelta_raw;  // [d, h]
    Tensor<T> domega;                         // [d]
    Tensor<T> deta_re, deta_im;               // [d, h]
    std::vector<std::complex<T>> dh0;         // [d*h]
};

namespace detail {

// Runs the adjoint recurrence for one lane over one chunk, using the
// rematerialized states hbuf (hbuf[i] = h at chunk-local step i).
// lam enters as the carry from the later chunk and leaves as the carry into
// the earlier one. Returns accumulated dq for the lane.
template <typename T>
struct LaneAccum {
    std::complex<T> dq{}, deta{};
    T dalpha_p = 0, dbeta = 0;
};

}  // namespace detail

template <typename T>
CemaGrads<T> cema_backward_impl(const Tensor<T>& x, const CemaParams<T>& p,
                                const BoundaryMask& mask, const std::vector<std::complex<T>>& h0,
                                const CemaOut<T>& fwd, const Tensor<T>& dy,
                                const std::vector<std::complex<T>>* dh_final, bool rematerialize) {
    const size_t n = fwd.n, chunk = fwd.chunk;
    GECKO_CHECK(!fwd.boundary.empty(), "cema backward requires stored boundary states");
    GECKO_CHECK(dy.same_shape(fwd.y), "cotangent shape " << shape_str(dy) << " != output shape");
    const auto lanes = cema_lanes(p);
    CemaGrads<T> g;
    g.dx = Tensor<T>({n, p.d});
    g.dbeta = Tensor<T>({p.d, p.h});
    g.dalpha_raw = Tensor<T>({p.d, p.h});
    g.ddelta_raw = Tensor<T>({p.d, p.h});
    g.domega = Tensor<T>({p.d});
    g.deta_re = Tensor<T>({p.d, p.h});
    g.deta_im = Tensor<T>({p.d, p.h});
    g.dh0.assign(p.d * p.h, {});
    const T two_pi = static_cast<T>(2.0 * std::numbers::pi);

    parallel_for(0, p.d, [&](size_t j) {
        std::vector<std::complex<T>> hbuf;
        for (size_t k = 0; k < p.h; ++k) {
            const size_t lane = j * p.h + k;
            const CemaLane<T>& L = lanes[lane];
            detail::LaneAccum<T> acc;
            std::complex<T> lam = dh_final ? (*dh_final)[lane] : std::complex<T>(0, 0);
            for (size_t c = fwd.n_chunks; c-- > 0;) {
                const size_t t0 = c * chunk;
                const size_t t1 = std::min(n, (c + 1) * chunk);
                const std::complex<T> carry_in = fwd.boundary[c * p.d * p.h + lane];
                hbuf.assign(t1 - t0, {});
                // rematerialize interior states of this chunk
                std::complex<T> hs = carry_in;
                for (size_t t = t0; t < t1; ++t) {
                    const std::complex<T> prev = mask_keep(mask, t) ? hs : std::complex<T>(0, 0);
                    hs = std::complex<T>(L.alpha * L.beta * x(t, j), T(0)) + L.q * prev;
                    hbuf[t - t0] = hs;
                }
                (void)rematerialize;
                for (size_t t = t1; t-- > t0;) {
                    const T dyv = dy(t, j);
                    lam += dyv * std::conj(L.eta);
                    const std::complex<T> ht = hbuf[t - t0];
                    acc.deta += dyv * std::conj(ht);
                    const std::complex<T> hprev = (t == t0) ? carry_in : hbuf[t - t0 - 1];
                    const bool keep = mask_keep(mask, t);
                    if (keep) acc.dq += lam * std::conj(hprev);
                    const T rl = lam.real();
                    g.dx(t, j) += L.alpha * L.beta * rl;
                    acc.dalpha_p += L.beta * x(t, j) * rl;
                    acc.dbeta += L.alpha * x(t, j) * rl;
                    lam = keep ? std::conj(L.q) * lam : std::complex<T>(0, 0);
                }
            }
            g.dh0[lane] = lam;
            // chain dq -> (alpha, delta, theta, omega)
            const std::complex<T> eitheta(std::cos(L.theta), std::sin(L.theta));
            const T dalpha_q = (std::conj(acc.dq) * (-L.delta * eitheta)).real();
            const T ddelta_q = (std::conj(acc.dq) * (-L.alpha * eitheta)).real();
            const T dtheta = (std::conj(acc.dq) * (std::complex<T>(0, 1) * L.q)).real();
            const T dalpha = acc.dalpha_p + dalpha_q;
            g.dalpha_raw(j, k) = dalpha * L.alpha * (T(1) - L.alpha);
            g.ddelta_raw(j, k) = ddelta_q * L.delta * (T(1) - L.delta);
            g.domega.data[j] += dtheta * two_pi * static_cast<T>(k + 1) / static_cast<T>(p.h);
            g.dbeta(j, k) = acc.dbeta;
            g.deta_re(j, k) = acc.deta.real();
            g.deta_im(j, k) = acc.deta.imag();
        }
    });
    return g;
}

// Rematerialized backward: interior states are recomputed per chunk from the
// stored carry-in states, never all retained.
template <typename T>
CemaGrads<T> cema_backward(const Tensor<T>& x, const CemaParams<T>& p, const BoundaryMask& mask,
                           const std::vector<std::complex<T>>& h0, const CemaOut<T>& fwd,
                           const Tensor<T>& dy,
                           const std::vector<std::complex<T>>* dh_final = nullptr) {
    return cema_backward_impl(x, p, mask, h0, fwd, dy, dh_final, true);
}

// Full-storage oracle: forward with chunk = 1 stores every state, so the
// backward never recomputes more than one step. Used to validate the
// rematerialized path.
template <typename T>
CemaGrads<T> cema_backward_fullstore(const Tensor<T>& x, const CemaParams<T>& p,
                                     const BoundaryMask& mask,
                                     const std::vector<std::complex<T>>& h0, const Tensor<T>& dy,
                                     const std::vector<std::complex<T>>* dh_final = nullptr) {
    CemaOut<T> fwd = cema_scan(x, p, mask, h0, 1);
    return cema_backward_impl(x, p, mask, h0, fwd, dy, dh_final, false);
}

}  // namespace gecko
