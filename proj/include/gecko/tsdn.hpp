#pragma once

// Timestep (Decay) Normalization. Per timestep, the input vector is split
// into k groups; group mean/variance are folded into running statistics
// across time and the vector is normalized group-wise with a per-feature
// affine output.
//
//   TSN  (baseline):  m_t = (1/t) sum mu_i,            v_t likewise
//   TSDN:             m_t = b1 m_{t-1} + (1-b1) mu_t,  v_t with b2
//                     m'_t = m_t / (1 - b1^t),         v'_t = v_t / (1 - b2^t)
//
// The printed bias-correction for the mean reads mu_t / (1 - b1^t); the Adam
// analogy and the v' term point at m_t, which is what NormVariant::tsdn
// computes. NormVariant::tsdn_literal reproduces the printed form.
//
// Statistics are always carried in f64: with b2 = 0.9999 the per-step
// increment is 1e-4 of the state, which f32 cannot track. b1^t / b2^t are
// maintained as running products, which decay toward zero and cannot
// overflow for any t; (1 - b^t) -> 1 as t grows.
//
// The batch path evaluates the same recurrence through the affine scan of
// scan.hpp (q = beta, p = (1-beta) mu_t), so it matches the per-step fold
// only up to floating-point reassociation.

#include <cstdint>
#include <vector>

#include "gecko/common.hpp"
#include "gecko/scan.hpp"
#include "gecko/tensor.hpp"

namespace gecko {

enum class NormVariant { tsn, tsdn, tsdn_literal };

inline const char* norm_variant_name(NormVariant v) {
    switch (v) {
        case NormVariant::tsn: return "tsn";
        case NormVariant::tsdn: return "tsdn";
        case NormVariant::tsdn_literal: return "tsdn_literal";
    }
    return "?";
}

struct NormConfig {
    size_t d = 0;
    size_t k = 1;  // groups; d % k == 0
    double beta1 = 0.999;
    double beta2 = 0.9999;
    double eps = 1e-5;
    NormVariant variant = NormVariant::tsdn;

    size_t group_size() const {
        GECKO_CHECK(k >= 1 && d % k == 0, "d=" << d << " not divisible by k=" << k);
        return d / k;
    }
};

struct NormState {
    std::vector<double> m, v;            // [k] running stats (tsdn) / running averages (tsn)
    std::vector<double> sum_mu, sum_var; // [k] tsn cumulative sums
    double pow_b1 = 1.0, pow_b2 = 1.0;   // beta^t running products
    uint64_t t = 0;

    void reset(size_t k) {
        m.assign(k, 0.0);
        v.assign(k, 0.0);
        sum_mu.assign(k, 0.0);
        sum_var.assign(k, 0.0);
        pow_b1 = pow_b2 = 1.0;
        t = 0;
    }

    static NormState fresh(size_t k) {
        NormState s;
        s.reset(k);
        return s;
    }

    size_t byte_size() const {
        return sizeof(double) * (m.size() + v.size() + sum_mu.size() + sum_var.size() + 2) +
               sizeof(uint64_t);
    }
};

// Per-group mean and population variance (divide by group size) of one
// timestep vector, accumulated in f64.
template <typename T>
void group_stats(const T* x, const NormConfig& cfg, double* mu, double* var) {
    const size_t dg = cfg.group_size();
    for (size_t g = 0; g < cfg.k; ++g) {
        const T* xs = x + g * dg;
        double mean = 0;
        for (size_t i = 0; i < dg; ++i) mean += static_cast<double>(xs[i]);
        mean /= static_cast<double>(dg);
        double acc = 0;
        for (size_t i = 0; i < dg; ++i) {
            const double c = static_cast<double>(xs[i]) - mean;
            acc += c * c;
        }
        mu[g] = mean;
        var[g] = acc / static_cast<double>(dg);
    }
}

namespace detail {

template <typename T>
inline void norm_apply(const T* x, const double* mprime, const double* vprime,
                       const T* gamma, const T* bias, const NormConfig& cfg, T* y) {
    const size_t dg = cfg.group_size();
    for (size_t g = 0; g < cfg.k; ++g) {
        const double inv = 1.0 / std::sqrt(vprime[g] + cfg.eps);
        for (size_t i = 0; i < dg; ++i) {
            const size_t f = g * dg + i;
            y[f] = static_cast<T>((static_cast<double>(x[f]) - mprime[g]) * inv *
                                      static_cast<double>(gamma[f]) +
                                  static_cast<double>(bias[f]));
        }
    }
}

}  // namespace detail

// One timestep. Advances the state; writes the normalized vector to y.
template <typename T>
void timestep_norm_step(const T* x, const T* gamma, const T* bias, const NormConfig& cfg,
                        NormState& state, T* y) {
    std::vector<double> mu(cfg.k), var(cfg.k), mprime(cfg.k), vprime(cfg.k);
    group_stats(x, cfg, mu.data(), var.data());
    state.t += 1;
    const double tt = static_cast<double>(state.t);
    if (cfg.variant == NormVariant::tsn) {
        for (size_t g = 0; g < cfg.k; ++g) {
            state.sum_mu[g] += mu[g];
            state.sum_var[g] += var[g];
            state.m[g] = state.sum_mu[g] / tt;
            state.v[g] = state.sum_var[g] / tt;
            mprime[g] = state.m[g];
            vprime[g] = state.v[g];
        }
    } else {
        state.pow_b1 *= cfg.beta1;
        state.pow_b2 *= cfg.beta2;
        const double c1 = 1.0 - state.pow_b1;
        const double c2 = 1.0 - state.pow_b2;
        for (size_t g = 0; g < cfg.k; ++g) {
            state.m[g] = cfg.beta1 * state.m[g] + (1.0 - cfg.beta1) * mu[g];
            state.v[g] = cfg.beta2 * state.v[g] + (1.0 - cfg.beta2) * var[g];
            mprime[g] = (cfg.variant == NormVariant::tsdn_literal ? mu[g] : state.m[g]) / c1;
            vprime[g] = state.v[g] / c2;
        }
    }
    detail::norm_apply(x, mprime.data(), vprime.data(), gamma, bias, cfg, y);
}

// Activation pack for the batch backward.
struct NormTrace {
    size_t n = 0, k = 0;
    uint64_t t0 = 0;
    std::vector<double> mu, var;          // [n, k]
    std::vector<double> mprime, vprime;   // [n, k]
    std::vector<double> c1, c2;           // [n] bias-correction denominators
};

// Whole-sequence forward. The m/v recurrences run through the affine scan;
// everything else is per-timestep. Advances `state` to after the sequence.
template <typename T>
Tensor<T> timestep_norm_batch(const Tensor<T>& x, const T* gamma, const T* bias,
                              const NormConfig& cfg, NormState& state,
                              NormTrace* trace = nullptr) {
    GECKO_CHECK(x.rank() == 2 && x.shape[1] == cfg.d,
                "norm input " << shape_str(x) << " does not match d=" << cfg.d);
    const size_t n = x.shape[0];
    Tensor<T> y(x.shape);
    const uint64_t t0 = state.t;
    std::vector<double> mu(n * cfg.k), var(n * cfg.k);
    for (size_t t = 0; t < n; ++t)
        group_stats(x.row_ptr(t), cfg, mu.data() + t * cfg.k, var.data() + t * cfg.k);

    std::vector<double> m_seq(n * cfg.k), v_seq(n * cfg.k);
    if (cfg.variant == NormVariant::tsn) {
        for (size_t g = 0; g < cfg.k; ++g) {
            double sm = state.sum_mu[g], sv = state.sum_var[g];
            for (size_t t = 0; t < n; ++t) {
                sm += mu[t * cfg.k + g];
                sv += var[t * cfg.k + g];
                const double tt = static_cast<double>(t0 + t + 1);
                m_seq[t * cfg.k + g] = sm / tt;
                v_seq[t * cfg.k + g] = sv / tt;
            }
            state.sum_mu[g] = sm;
            state.sum_var[g] = sv;
            state.m[g] = m_seq[(n - 1) * cfg.k + g];
            state.v[g] = v_seq[(n - 1) * cfg.k + g];
        }
    } else {
        // affine scan per group: m_t = b * m_{t-1} + (1-b) mu_t
        std::vector<AffineState<double>> elems(n);
        for (size_t g = 0; g < cfg.k; ++g) {
            for (int which = 0; which < 2; ++which) {
                const double b = which == 0 ? cfg.beta1 : cfg.beta2;
                const std::vector<double>& src = which == 0 ? mu : var;
                std::vector<double>& dst = which == 0 ? m_seq : v_seq;
                const double s0 = which == 0 ? state.m[g] : state.v[g];
                for (size_t t = 0; t < n; ++t)
                    elems[t] = {{b, 0.0}, {(1.0 - b) * src[t * cfg.k + g], 0.0}};
                std::vector<AffineState<double>> excl = elems;
                affine_exclusive_scan(excl);
                for (size_t t = 0; t < n; ++t) {
                    const AffineState<double> incl = affine_combine(elems[t], excl[t]);
                    dst[t * cfg.k + g] = affine_apply(incl, {s0, 0.0}).real();
                }
                (which == 0 ? state.m[g] : state.v[g]) = dst[(n - 1) * cfg.k + g];
            }
        }
    }

    std::vector<double> c1(n, 1.0), c2(n, 1.0);
    if (cfg.variant != NormVariant::tsn) {
        double p1 = state.pow_b1, p2 = state.pow_b2;
        for (size_t t = 0; t < n; ++t) {
            p1 *= cfg.beta1;
            p2 *= cfg.beta2;
            c1[t] = 1.0 - p1;
            c2[t] = 1.0 - p2;
        }
        state.pow_b1 = p1;
        state.pow_b2 = p2;
    }
    state.t = t0 + n;

    std::vector<double> mprime(n * cfg.k), vprime(n * cfg.k);
    for (size_t t = 0; t < n; ++t) {
        for (size_t g = 0; g < cfg.k; ++g) {
            const size_t idx = t * cfg.k + g;
            if (cfg.variant == NormVariant::tsn) {
                mprime[idx] = m_seq[idx];
                vprime[idx] = v_seq[idx];
            } else if (cfg.variant == NormVariant::tsdn_literal) {
                mprime[idx] = mu[idx] / c1[t];
                vprime[idx] = v_seq[idx] / c2[t];
            } else {
                mprime[idx] = m_seq[idx] / c1[t];
                vprime[idx] = v_seq[idx] / c2[t];
            }
        }
        detail::norm_apply(x.row_ptr(t), mprime.data() + t * cfg.k, vprime.data() + t * cfg.k,
                           gamma, bias, cfg, y.row_ptr(t));
    }

    if (trace) {
        trace->n = n;
        trace->k = cfg.k;
        trace->t0 = t0;
        trace->mu = std::move(mu);
        trace->var = std::move(var);
        trace->mprime = std::move(mprime);
        trace->vprime = std::move(vprime);
        trace->c1 = std::move(c1);
        trace->c2 = std::move(c2);
    }
    return y;
}

// Backward of the stats recurrence alone: given cotangents dm_t of the
// running mean sequence, returns dmu_t. Shared by the layer backward and by
// the constant-influence property (d m_t / d mu_t = 1 - b1 for TSDN, 1/t for
// TSN).
inline std::vector<double> stats_recurrence_backward(NormVariant variant, double beta, uint64_t t0,
                                                     const std::vector<double>& dm) {
    const size_t n = dm.size();
    std::vector<double> dmu(n, 0.0);
    double carry = 0.0;
    for (size_t t = n; t-- > 0;) {
        const double total = dm[t] + carry;
        if (variant == NormVariant::tsn) {
            const double tt = static_cast<double>(t0 + t + 1);
            dmu[t] = total / tt;
            carry = total * (tt - 1.0) / tt;
        } else {
            dmu[t] = total * (1.0 - beta);
            carry = total * beta;
        }
    }
    return dmu;
}

template <typename T>
struct NormGrads {
    Tensor<T> dx;      // [n, d]
    Tensor<T> dgamma;  // [d]
    Tensor<T> dbias;   // [d]
};

// Batch backward (BPTT over the stats recurrences). Assumes the sequence
// started from the state captured in the trace; gradients do not flow into a
// pre-existing carried state (training always starts from a fresh state).
template <typename T>
NormGrads<T> timestep_norm_backward(const Tensor<T>& x, const T* gamma, const NormConfig& cfg,
                                    const NormTrace& trace, const Tensor<T>& dy) {
    const size_t n = trace.n, k = cfg.k, dg = cfg.group_size();
    GECKO_CHECK(dy.same_shape(x), "norm cotangent shape mismatch");
    NormGrads<T> g;
    g.dx = Tensor<T>({n, cfg.d});
    g.dgamma = Tensor<T>({cfg.d});
    g.dbias = Tensor<T>({cfg.d});

    std::vector<double> dm_direct(n), dv_direct(n), dmu_direct(n);
    for (size_t grp = 0; grp < k; ++grp) {
        std::fill(dmu_direct.begin(), dmu_direct.end(), 0.0);
        for (size_t t = 0; t < n; ++t) {
            const size_t idx = t * k + grp;
            const double inv = 1.0 / std::sqrt(trace.vprime[idx] + cfg.eps);
            double dmp = 0, dinv = 0;
            for (size_t i = 0; i < dg; ++i) {
                const size_t f = grp * dg + i;
                const double dyv = static_cast<double>(dy(t, f));
                const double gam = static_cast<double>(gamma[f]);
                const double centered = static_cast<double>(x(t, f)) - trace.mprime[idx];
                g.dgamma.data[f] += static_cast<T>(dyv * centered * inv);
                g.dbias.data[f] += static_cast<T>(dyv);
                g.dx(t, f) += static_cast<T>(dyv * gam * inv);
                dmp -= dyv * gam * inv;
                dinv += dyv * gam * centered;
            }
            const double dvp = dinv * (-0.5) * inv * inv * inv;
            if (cfg.variant == NormVariant::tsn) {
                dm_direct[t] = dmp;
                dv_direct[t] = dvp;
            } else if (cfg.variant == NormVariant::tsdn_literal) {
                dmu_direct[t] = dmp / trace.c1[t];
                dm_direct[t] = 0.0;
                dv_direct[t] = dvp / trace.c2[t];
            } else {
                dm_direct[t] = dmp / trace.c1[t];
                dv_direct[t] = dvp / trace.c2[t];
            }
        }
        const NormVariant recur =
            cfg.variant == NormVariant::tsn ? NormVariant::tsn : NormVariant::tsdn;
        auto dmu = stats_recurrence_backward(recur, cfg.beta1, trace.t0, dm_direct);
        auto dvar = stats_recurrence_backward(recur, cfg.beta2, trace.t0, dv_direct);
        for (size_t t = 0; t < n; ++t) {
            const size_t idx = t * k + grp;
            const double dmu_t = dmu[t] + dmu_direct[t];
            const double dvar_t = dvar[t];
            for (size_t i = 0; i < dg; ++i) {
                const size_t f = grp * dg + i;
                const double centered = static_cast<double>(x(t, f)) - trace.mu[idx];
                g.dx(t, f) += static_cast<T>(dmu_t / static_cast<double>(dg) +
                                             dvar_t * 2.0 * centered / static_cast<double>(dg));
            }
        }
    }
    return g;
}

}  // namespace gecko
