#pragma once

// The Gecko block and toy causal LM.
//
// Block pipeline (pre-norm, Megalodon-style reconstruction):
//
//   xn   = TSDN(x)
//   x'   = CEMA(xn)                         boundary mask resets CEMA here
//   Z',Q,K,V = gated projections (Z from x', V from xn), RoPE on Q/K
//   O    = pattern(Q, K, V) + O_m           O_m = AWM retrieval (if enabled)
//   h1   = x + silu(xn Wg + bg) . (O Wo + bo)
//   out  = h1 + SwiGLU(TSDN(h1))
//
// Streaming carries per layer: CEMA hidden state, two TSDN states, the
// previous chunk's K/V (attention) and Km (memory), and the AWM memory.
// Batch and streaming run the same per-chunk attention/memory schedule, so
// they agree to floating-point noise of the CEMA/TSDN scan paths.

#include <complex>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gecko/attention.hpp"
#include "gecko/awm.hpp"
#include "gecko/cema.hpp"
#include "gecko/common.hpp"
#include "gecko/config.hpp"
#include "gecko/params.hpp"
#include "gecko/rng.hpp"
#include "gecko/tensor.hpp"
#include "gecko/tsdn.hpp"

namespace gecko {

using TokenSeq = std::vector<uint32_t>;

// ---------------------------------------------------------------------------
// streaming state
// ---------------------------------------------------------------------------

template <typename T>
struct LayerState {
    std::vector<std::complex<T>> cema_h;  // [d*h]
    NormState norm1, norm2;
    KvCache<T> kv;        // previous chunk K (roped), V -- attention window
    Tensor<T> km_prev;    // previous chunk memory keys [c, z]
    Tensor<T> v_prev;     // previous chunk values [c, v] for the memory fold
    bool has_prev = false;
    MemoryState<T> mem;

    size_t byte_size() const {
        return sizeof(std::complex<T>) * cema_h.size() + norm1.byte_size() + norm2.byte_size() +
               kv.byte_size() + sizeof(T) * (km_prev.size() + v_prev.size()) + 1 +
               mem.byte_size();
    }
};

template <typename T>
struct StreamState {
    std::vector<LayerState<T>> layers;
    NormState final_norm;
    uint64_t pos = 0;  // global token counter (RoPE positions)

    size_t byte_size() const {
        size_t b = final_norm.byte_size() + sizeof(uint64_t);
        for (const auto& l : layers) b += l.byte_size();
        return b;
    }
};

// ---------------------------------------------------------------------------
// traces (training activations)
// ---------------------------------------------------------------------------

template <typename T>
struct BlockTrace {
    Tensor<T> x_in;
    NormTrace norm1;
    Tensor<T> x_norm;
    CemaOut<T> cema;
    ProjTrace<T> proj;
    Projections<T> projs;
    Tensor<T> q_rope, k_rope;
    size_t pos0 = 0;
    AttnTrace<T> attn;
    Tensor<T> o_attn;
    Tensor<T> qm, km;
    AwmTrace<T> awm;
    Tensor<T> o_total;  // attention + memory readout
    Tensor<T> gate_pre, gate;
    Tensor<T> attn_proj;  // O Wo + bo
    Tensor<T> h1;
    NormTrace norm2;
    Tensor<T> h1_norm;
    Tensor<T> ffn_a_pre, ffn_a, ffn_b;
};

template <typename T>
struct LmTrace {
    TokenSeq tokens;
    Tensor<T> x0;
    std::vector<BlockTrace<T>> blocks;
    NormTrace final_norm;
    Tensor<T> h_last_in;   // input of the final norm
    Tensor<T> h_final;     // output of the final norm
    Tensor<T> logits;
};

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
struct GeckoModel {
    ModelConfig cfg;
    ParamStore<T> params;

    explicit GeckoModel(const ModelConfig& c) : cfg(c) {
        cfg.validate();
        build_params();
    }

    static std::string lname(size_t l, const char* suffix) {
        return "layers." + std::to_string(l) + "." + suffix;
    }

    void build_params() {
        const size_t d = cfg.dim, z = cfg.zdim, v = cfg.vdim, h = cfg.cema_h, f = cfg.ffn_hidden();
        auto normal = [&](const std::string& name, std::vector<size_t> shape, double scale) {
            params.add(name, shape);
            Rng rng(cfg.seed, name);
            auto& t = params[name];
            for (size_t i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(rng.normal(i) * scale);
        };
        auto constant = [&](const std::string& name, std::vector<size_t> shape, double val) {
            params.add(name, shape);
            auto& t = params[name];
            std::fill(t.data.begin(), t.data.end(), static_cast<T>(val));
        };
        normal("embed", {cfg.vocab, d}, 0.02);
        for (size_t l = 0; l < cfg.layers; ++l) {
            constant(lname(l, "norm1.gamma"), {d}, 1.0);
            constant(lname(l, "norm1.bias"), {d}, 0.0);
            // CEMA parameters drawn per the module defaults, one stream per layer
            auto cp = CemaParams<T>::init(d, h, cfg.seed * 1000003 + l);
            params.add(lname(l, "cema.beta"), {d, h});
            params[lname(l, "cema.beta")] = cp.beta;
            params.add(lname(l, "cema.alpha"), {d, h});
            params[lname(l, "cema.alpha")] = cp.alpha_raw;
            params.add(lname(l, "cema.delta"), {d, h});
            params[lname(l, "cema.delta")] = cp.delta_raw;
            params.add(lname(l, "cema.omega"), {d});
            params[lname(l, "cema.omega")] = cp.omega;
            params.add(lname(l, "cema.eta_re"), {d, h});
            params[lname(l, "cema.eta_re")] = cp.eta_re;
            params.add(lname(l, "cema.eta_im"), {d, h});
            params[lname(l, "cema.eta_im")] = cp.eta_im;

            normal(lname(l, "attn.w_z"), {d, z}, 1.0 / std::sqrt(double(d)));
            constant(lname(l, "attn.b_z"), {z}, 0.0);
            constant(lname(l, "attn.kappa_q"), {z}, 1.0);
            constant(lname(l, "attn.nu_q"), {z}, 0.0);
            constant(lname(l, "attn.kappa_k"), {z}, 1.0);
            constant(lname(l, "attn.nu_k"), {z}, 0.0);
            normal(lname(l, "attn.w_v"), {d, v}, 1.0 / std::sqrt(double(d)));
            constant(lname(l, "attn.b_v"), {v}, 0.0);
            if (cfg.awm) {
                constant(lname(l, "mem.eta_q"), {z}, 1.0);
                constant(lname(l, "mem.rho_q"), {z}, 0.0);
                constant(lname(l, "mem.eta_k"), {z}, 1.0);
                constant(lname(l, "mem.rho_k"), {z}, 0.0);
            }
            if (cfg.output_gate) {
                normal(lname(l, "gate.w"), {d, d}, 1.0 / std::sqrt(double(d)));
                constant(lname(l, "gate.b"), {d}, 0.0);
            }
            constant(lname(l, "out.w"), {v, d}, 0.0);  // identity block at init
            constant(lname(l, "out.b"), {d}, 0.0);
            constant(lname(l, "norm2.gamma"), {d}, 1.0);
            constant(lname(l, "norm2.bias"), {d}, 0.0);
            normal(lname(l, "ffn.w1"), {d, f}, 1.0 / std::sqrt(double(d)));
            normal(lname(l, "ffn.w2"), {d, f}, 1.0 / std::sqrt(double(d)));
            constant(lname(l, "ffn.w3"), {f, d}, 0.0);
        }
        constant("final_norm.gamma", {d}, 1.0);
        constant("final_norm.bias", {d}, 0.0);
        if (!cfg.tie_embeddings) normal("head.w", {d, cfg.vocab}, 0.02);
    }

    // closed-form parameter count; asserted against the store in tests
    size_t param_count_formula() const {
        const size_t d = cfg.dim, z = cfg.zdim, v = cfg.vdim, h = cfg.cema_h, f = cfg.ffn_hidden();
        size_t per_layer = 2 * d                      // norm1
                           + 5 * d * h + d            // cema
                           + d * z + z + 4 * z        // z-projection + q/k scalars
                           + d * v + v                // value projection
                           + (cfg.awm ? 4 * z : 0)    // memory projections
                           + (cfg.output_gate ? d * d + d : 0)  // gate
                           + v * d + d                // output projection
                           + 2 * d                    // norm2
                           + 3 * d * f;               // swiglu
        return cfg.vocab * d + cfg.layers * per_layer + 2 * d +
               (cfg.tie_embeddings ? 0 : d * cfg.vocab);
    }

    StreamState<T> fresh_state() const {
        StreamState<T> s;
        s.layers.resize(cfg.layers);
        for (auto& l : s.layers) {
            l.cema_h.assign(cfg.dim * cfg.cema_h, {});
            l.norm1 = NormState::fresh(cfg.norm_groups);
            l.norm2 = NormState::fresh(cfg.norm_groups);
            l.kv.k = Tensor<T>({cfg.chunk, cfg.zdim});
            l.kv.v = Tensor<T>({cfg.chunk, cfg.vdim});
            l.kv.filled = false;
            l.km_prev = Tensor<T>({cfg.chunk, cfg.zdim});
            l.v_prev = Tensor<T>({cfg.chunk, cfg.vdim});
            l.has_prev = false;
            l.mem = MemoryState<T>::fresh(cfg.zdim, cfg.vdim);
        }
        s.final_norm = NormState::fresh(cfg.norm_groups);
        return s;
    }

    CemaParams<T> cema_params(size_t l) const {
        CemaParams<T> p;
        p.d = cfg.dim;
        p.h = cfg.cema_h;
        p.beta = params.at(lname(l, "cema.beta"));
        p.alpha_raw = params.at(lname(l, "cema.alpha"));
        p.delta_raw = params.at(lname(l, "cema.delta"));
        p.omega = params.at(lname(l, "cema.omega"));
        p.eta_re = params.at(lname(l, "cema.eta_re"));
        p.eta_im = params.at(lname(l, "cema.eta_im"));
        return p;
    }

    ProjParams<T> proj_params(size_t l) const {
        ProjParams<T> p;
        p.w_z = params.at(lname(l, "attn.w_z"));
        p.b_z = params.at(lname(l, "attn.b_z"));
        p.kappa_q = params.at(lname(l, "attn.kappa_q"));
        p.nu_q = params.at(lname(l, "attn.nu_q"));
        p.kappa_k = params.at(lname(l, "attn.kappa_k"));
        p.nu_k = params.at(lname(l, "attn.nu_k"));
        p.w_v = params.at(lname(l, "attn.w_v"));
        p.b_v = params.at(lname(l, "attn.b_v"));
        return p;
    }

    MemProjParams<T> mem_params(size_t l) const {
        MemProjParams<T> p;
        p.eta_q = params.at(lname(l, "mem.eta_q"));
        p.rho_q = params.at(lname(l, "mem.rho_q"));
        p.eta_k = params.at(lname(l, "mem.eta_k"));
        p.rho_k = params.at(lname(l, "mem.rho_k"));
        return p;
    }

    // ------------------------------------------------------------------
    // normalization with optional document-boundary segmentation
    // ------------------------------------------------------------------

    Tensor<T> norm_with_resets(const Tensor<T>& x, const T* gamma, const T* bias,
                               NormState& state, const BoundaryMask& mask,
                               NormTrace* trace) const {
        const NormConfig nc = cfg.norm_config();
        const bool segmented = cfg.reset_tsdn && !mask.empty();
        if (!segmented) return timestep_norm_batch(x, gamma, bias, nc, state, trace);
        GECKO_CHECK(trace == nullptr, "tsdn resets are not supported in the training path");
        const size_t n = x.shape[0];
        Tensor<T> y({n, cfg.dim});
        size_t seg_start = 0;
        for (size_t t = 0; t <= n; ++t) {
            const bool cut = t == n || (t > seg_start && mask[t] == 0) ||
                             (t == seg_start && t < n && mask[t] == 0 && t > 0);
            if (t < n && !(t > seg_start && mask[t] == 0)) continue;
            (void)cut;
            const size_t seg_len = t - seg_start;
            if (seg_len > 0) {
                Tensor<T> xs({seg_len, cfg.dim});
                std::copy_n(x.row_ptr(seg_start), seg_len * cfg.dim, xs.data.begin());
                auto ys = timestep_norm_batch(xs, gamma, bias, nc, state, nullptr);
                std::copy_n(ys.data.begin(), seg_len * cfg.dim, y.row_ptr(seg_start));
            }
            if (t < n) state.reset(cfg.norm_groups);
            seg_start = t;
        }
        return y;
    }

    // ------------------------------------------------------------------
    // block forward
    // ------------------------------------------------------------------

    Tensor<T> block_forward(size_t l, const Tensor<T>& x, LayerState<T>& state, size_t pos0,
                            const BoundaryMask& mask, BlockTrace<T>* trace) const {
        const size_t n = x.shape[0], d = cfg.dim, v = cfg.vdim, c = cfg.chunk;
        if (trace) {
            trace->x_in = x;
            trace->pos0 = pos0;
            GECKO_CHECK(n % c == 0, "training forward requires whole chunks");
        }

        // pre-norm
        Tensor<T> x_norm = norm_with_resets(x, params.at(lname(l, "norm1.gamma")).data.data(),
                                            params.at(lname(l, "norm1.bias")).data.data(),
                                            state.norm1, mask, trace ? &trace->norm1 : nullptr);
        if (trace) trace->x_norm = x_norm;

        // CEMA feeds the shared Z projection
        auto cp = cema_params(l);
        CemaOut<T> cema = cema_scan(x_norm, cp, mask, state.cema_h, cfg.scan_chunk);
        state.cema_h = cema.h_final;

        // projections + RoPE
        auto pp = proj_params(l);
        Projections<T> projs = project(cema.y, x_norm, pp, trace ? &trace->proj : nullptr);
        Tensor<T> q = projs.q, k = projs.k;
        rope_inplace(q, pos0);
        rope_inplace(k, pos0);
        if (trace) {
            trace->cema = std::move(cema);
            trace->q_rope = q;
            trace->k_rope = k;
        }

        // boundary resets at chunk granularity must sit on chunk boundaries
        auto reset_here = [&](size_t t_local) {
            return !mask.empty() && t_local < mask.size() && mask[t_local] == 0;
        };
        if (!mask.empty() && (cfg.reset_kv || cfg.reset_awm)) {
            for (size_t t = 0; t < n; ++t)
                if (mask[t] == 0)
                    GECKO_CHECK(t % c == 0 && pos0 % c == 0,
                                "kv/awm resets must sit on chunk boundaries (position "
                                    << pos0 + t << ")");
        }

        Tensor<T> o_total({n, v});
        const bool use_awm = cfg.awm;
        const bool chunked_attn = cfg.pattern != AttnPattern::swa;
        const size_t S = ceil_div(n, c);
        if (trace) {
            trace->attn.c = chunked_attn ? c : cfg.swa_window;
            trace->attn.n_chunks = chunked_attn ? S : n;
            if (chunked_attn) {
                trace->attn.probs.assign(S, {});
                trace->attn.kcols.assign(S, 0);
            }
        }
        if (!chunked_attn) {
            o_total = attend_sliding_window(q, k, projs.v, cfg.swa_window, nullptr,
                                            trace ? &trace->attn : nullptr);
        } else {
            // one attend_chunked call per chunk so cache resets and streaming
            // hand-off follow the same schedule as the batch path
            const bool sliding = cfg.pattern == AttnPattern::sca;
            for (size_t s = 0; s < S; ++s) {
                const size_t q0 = s * c;
                const size_t rows = std::min(c, n - q0);
                if (cfg.reset_kv && reset_here(q0)) state.kv.filled = false;
                Tensor<T> qs({rows, cfg.zdim}), ks({rows, cfg.zdim}), vs({rows, v});
                std::copy_n(q.row_ptr(q0), rows * cfg.zdim, qs.data.begin());
                std::copy_n(k.row_ptr(q0), rows * cfg.zdim, ks.data.begin());
                std::copy_n(projs.v.row_ptr(q0), rows * v, vs.data.begin());
                AttnTrace<T> chunk_trace;
                KvCache<T> next;
                const bool full_chunk = rows == c;
                Tensor<T> os = attend_chunked(qs, ks, vs, c, sliding,
                                              sliding && state.kv.filled ? &state.kv : nullptr,
                                              sliding && full_chunk ? &next : nullptr, nullptr,
                                              trace ? &chunk_trace : nullptr);
                std::copy_n(os.data.begin(), rows * v, o_total.row_ptr(q0));
                if (trace) {
                    trace->attn.probs[s] = std::move(chunk_trace.probs[0]);
                    trace->attn.kcols[s] = chunk_trace.kcols[0];
                }
                if (sliding && full_chunk) state.kv = std::move(next);
            }
        }

        // adaptive working memory: retrieve for chunk s, then fold the chunk
        // that just left the attention window (chunk s-1)
        Tensor<T> qm, km;
        if (use_awm) {
            memory_projections(projs.z_prime, mem_params(l), qm, km);
            if (trace) {
                trace->awm.c = c;
                trace->awm.n_chunks = S;
                trace->awm.m_pre.assign(S, {});
                trace->awm.zhat_pre.assign(S, {});
                trace->awm.r_pre.assign(S, {});
            }
            for (size_t s = 0; s < S; ++s) {
                const size_t q0 = s * c;
                const size_t rows = std::min(c, n - q0);
                if (cfg.reset_awm && reset_here(q0)) {
                    state.mem = MemoryState<T>::fresh(cfg.zdim, cfg.vdim);
                    state.has_prev = false;
                }
                if (trace) {
                    trace->awm.m_pre[s] = state.mem.M;
                    trace->awm.zhat_pre[s] = state.mem.z_hat;
                    trace->awm.r_pre[s] = state.mem.r;
                }
                Tensor<T> qs({rows, cfg.zdim});
                std::copy_n(qm.row_ptr(q0), rows * cfg.zdim, qs.data.begin());
                Tensor<T> om = awm_retrieve(state.mem, qs);
                for (size_t i = 0; i < rows; ++i) {
                    T* orow = o_total.row_ptr(q0 + i);
                    const T* mrow = om.row_ptr(i);
                    for (size_t u = 0; u < v; ++u) orow[u] += mrow[u];
                }
                if (state.has_prev) awm_update(state.mem, state.km_prev, state.v_prev);
                if (rows == c) {
                    std::copy_n(km.row_ptr(q0), c * cfg.zdim, state.km_prev.data.begin());
                    std::copy_n(projs.v.row_ptr(q0), c * v, state.v_prev.data.begin());
                    state.has_prev = true;
                }
            }
        }
        if (trace) {
            trace->qm = std::move(qm);
            trace->km = std::move(km);
            trace->projs = std::move(projs);
            trace->o_total = o_total;
        }

        // output gate and projection, residual
        Tensor<T> attn_proj = matmul(o_total, params.at(lname(l, "out.w")));
        const Tensor<T>& out_b = params.at(lname(l, "out.b"));
        for (size_t t = 0; t < n; ++t)
            for (size_t j = 0; j < d; ++j) attn_proj(t, j) += out_b.data[j];
        Tensor<T> h1 = x;
        if (cfg.output_gate) {
            Tensor<T> gate_pre = matmul(x_norm, params.at(lname(l, "gate.w")));
            const Tensor<T>& gate_b = params.at(lname(l, "gate.b"));
            Tensor<T> gate({n, d});
            for (size_t t = 0; t < n; ++t)
                for (size_t j = 0; j < d; ++j) {
                    gate_pre(t, j) += gate_b.data[j];
                    gate(t, j) = silu(gate_pre(t, j));
                    h1(t, j) += gate(t, j) * attn_proj(t, j);
                }
            if (trace) {
                trace->gate_pre = std::move(gate_pre);
                trace->gate = std::move(gate);
            }
        } else {
            for (size_t i = 0; i < h1.size(); ++i) h1.data[i] += attn_proj.data[i];
        }
        if (trace) {
            trace->attn_proj = std::move(attn_proj);
            trace->h1 = h1;
        }

        // FFN sublayer
        Tensor<T> h1_norm = norm_with_resets(h1, params.at(lname(l, "norm2.gamma")).data.data(),
                                             params.at(lname(l, "norm2.bias")).data.data(),
                                             state.norm2, mask, trace ? &trace->norm2 : nullptr);
        const size_t f = cfg.ffn_hidden();
        Tensor<T> a_pre = matmul(h1_norm, params.at(lname(l, "ffn.w1")));
        Tensor<T> b = matmul(h1_norm, params.at(lname(l, "ffn.w2")));
        Tensor<T> a({n, f});
        for (size_t i = 0; i < a.size(); ++i) a.data[i] = silu(a_pre.data[i]);
        Tensor<T> ab({n, f});
        for (size_t i = 0; i < ab.size(); ++i) ab.data[i] = a.data[i] * b.data[i];
        Tensor<T> ffn = matmul(ab, params.at(lname(l, "ffn.w3")));
        Tensor<T> out = h1;
        for (size_t i = 0; i < out.size(); ++i) out.data[i] += ffn.data[i];
        if (trace) {
            trace->h1_norm = std::move(h1_norm);
            trace->ffn_a_pre = std::move(a_pre);
            trace->ffn_a = std::move(a);
            trace->ffn_b = std::move(b);
        }
        return out;
    }

    // ------------------------------------------------------------------
    // block backward: accumulates parameter gradients, returns dX
    // ------------------------------------------------------------------

    Tensor<T> block_backward(size_t l, const BlockTrace<T>& tr, const Tensor<T>& dout) {
        const size_t n = tr.x_in.shape[0], d = cfg.dim, v = cfg.vdim, c = cfg.chunk;
        const size_t f = cfg.ffn_hidden();
        const NormConfig nc = cfg.norm_config();

        // FFN path
        Tensor<T> ab({n, f});
        for (size_t i = 0; i < ab.size(); ++i) ab.data[i] = tr.ffn_a.data[i] * tr.ffn_b.data[i];
        Tensor<T> dab({n, f});
        matmul_nt_into(dout.data.data(), params.at(lname(l, "ffn.w3")).data.data(),
                       dab.data.data(), n, d, f);
        // careful: dab = dout * w3^T, w3 is [f, d] so this is dout [n,d] x w3 [f,d]^T -> [n,f]
        matmul_tn_accum(ab.data.data(), dout.data.data(),
                        params.grad_of(lname(l, "ffn.w3")).data.data(), n, f, d);
        Tensor<T> da_pre({n, f}), db({n, f});
        for (size_t i = 0; i < dab.size(); ++i) {
            da_pre.data[i] = dab.data[i] * tr.ffn_b.data[i] * silu_grad(tr.ffn_a_pre.data[i]);
            db.data[i] = dab.data[i] * tr.ffn_a.data[i];
        }
        matmul_tn_accum(tr.h1_norm.data.data(), da_pre.data.data(),
                        params.grad_of(lname(l, "ffn.w1")).data.data(), n, d, f);
        matmul_tn_accum(tr.h1_norm.data.data(), db.data.data(),
                        params.grad_of(lname(l, "ffn.w2")).data.data(), n, d, f);
        Tensor<T> dh1_norm({n, d});
        matmul_nt_into(da_pre.data.data(), params.at(lname(l, "ffn.w1")).data.data(),
                       dh1_norm.data.data(), n, f, d);
        {
            Tensor<T> tmp({n, d});
            matmul_nt_into(db.data.data(), params.at(lname(l, "ffn.w2")).data.data(),
                           tmp.data.data(), n, f, d);
            for (size_t i = 0; i < dh1_norm.size(); ++i) dh1_norm.data[i] += tmp.data[i];
        }
        auto gnorm2 = timestep_norm_backward(tr.h1, params.at(lname(l, "norm2.gamma")).data.data(),
                                             nc, tr.norm2, dh1_norm);
        accumulate(lname(l, "norm2.gamma"), gnorm2.dgamma);
        accumulate(lname(l, "norm2.bias"), gnorm2.dbias);
        Tensor<T> dh1 = dout;  // residual
        for (size_t i = 0; i < dh1.size(); ++i) dh1.data[i] += gnorm2.dx.data[i];

        // gate / output projection
        Tensor<T> dattn_proj({n, d});
        Tensor<T> dx_norm({n, d});
        if (cfg.output_gate) {
            Tensor<T> dgate_pre({n, d});
            for (size_t t = 0; t < n; ++t)
                for (size_t j = 0; j < d; ++j) {
                    const T dh = dh1(t, j);
                    dattn_proj(t, j) = dh * tr.gate(t, j);
                    dgate_pre(t, j) =
                        dh * tr.attn_proj(t, j) * silu_grad(tr.gate_pre(t, j));
                    params.grad_of(lname(l, "gate.b")).data[j] += dgate_pre(t, j);
                }
            matmul_tn_accum(tr.x_norm.data.data(), dgate_pre.data.data(),
                            params.grad_of(lname(l, "gate.w")).data.data(), n, d, d);
            matmul_nt_into(dgate_pre.data.data(), params.at(lname(l, "gate.w")).data.data(),
                           dx_norm.data.data(), n, d, d);
        } else {
            dattn_proj = dh1;
        }
        Tensor<T> do_total({n, v});
        matmul_nt_into(dattn_proj.data.data(), params.at(lname(l, "out.w")).data.data(),
                       do_total.data.data(), n, d, v);
        matmul_tn_accum(tr.o_total.data.data(), dattn_proj.data.data(),
                        params.grad_of(lname(l, "out.w")).data.data(), n, v, d);
        for (size_t t = 0; t < n; ++t)
            for (size_t j = 0; j < d; ++j)
                params.grad_of(lname(l, "out.b")).data[j] += dattn_proj(t, j);

        // attention + memory backward
        Tensor<T> dq({n, cfg.zdim}), dk({n, cfg.zdim}), dv({n, v});
        if (cfg.pattern == AttnPattern::swa) {
            attend_sliding_window_backward(tr.q_rope, tr.k_rope, tr.projs.v, cfg.swa_window,
                                           tr.attn, do_total, dq, dk, dv);
        } else {
            attend_chunked_backward(tr.q_rope, tr.k_rope, tr.projs.v, c, tr.attn, do_total, dq,
                                    dk, dv);
        }
        Tensor<T> dz_extra;
        if (cfg.awm) {
            auto ag = awm_chain_backward(tr.qm, tr.km, tr.projs.v, c, tr.awm, do_total);
            for (size_t i = 0; i < dv.size(); ++i) dv.data[i] += ag.dv.data[i];
            auto mg = memory_projections_backward(tr.projs.z_prime, mem_params(l), ag.dqm, ag.dkm);
            accumulate(lname(l, "mem.eta_q"), mg.deta_q);
            accumulate(lname(l, "mem.rho_q"), mg.drho_q);
            accumulate(lname(l, "mem.eta_k"), mg.deta_k);
            accumulate(lname(l, "mem.rho_k"), mg.drho_k);
            dz_extra = std::move(mg.dz_prime);
        }
        rope_inplace(dq, tr.pos0, /*inverse=*/true);
        rope_inplace(dk, tr.pos0, /*inverse=*/true);
        auto pp = proj_params(l);
        auto pg = project_backward(tr.cema.y, tr.x_norm, pp, tr.proj, tr.projs, dq, dk, dv,
                                   dz_extra);
        accumulate(lname(l, "attn.w_z"), pg.dw_z);
        accumulate(lname(l, "attn.b_z"), pg.db_z);
        accumulate(lname(l, "attn.kappa_q"), pg.dkappa_q);
        accumulate(lname(l, "attn.nu_q"), pg.dnu_q);
        accumulate(lname(l, "attn.kappa_k"), pg.dkappa_k);
        accumulate(lname(l, "attn.nu_k"), pg.dnu_k);
        accumulate(lname(l, "attn.w_v"), pg.dw_v);
        accumulate(lname(l, "attn.b_v"), pg.db_v);
        for (size_t i = 0; i < dx_norm.size(); ++i) dx_norm.data[i] += pg.dx.data[i];

        // CEMA backward (rematerialized)
        auto cp = cema_params(l);
        std::vector<std::complex<T>> h0(cfg.dim * cfg.cema_h);  // training starts fresh
        auto cg = cema_backward(tr.x_norm, cp, {}, h0, tr.cema, pg.dxp);
        accumulate(lname(l, "cema.beta"), cg.dbeta);
        accumulate(lname(l, "cema.alpha"), cg.dalpha_raw);
        accumulate(lname(l, "cema.delta"), cg.ddelta_raw);
        accumulate(lname(l, "cema.omega"), cg.domega);
        accumulate(lname(l, "cema.eta_re"), cg.deta_re);
        accumulate(lname(l, "cema.eta_im"), cg.deta_im);
        for (size_t i = 0; i < dx_norm.size(); ++i) dx_norm.data[i] += cg.dx.data[i];

        // pre-norm backward and residual
        auto gnorm1 = timestep_norm_backward(tr.x_in,
                                             params.at(lname(l, "norm1.gamma")).data.data(), nc,
                                             tr.norm1, dx_norm);
        accumulate(lname(l, "norm1.gamma"), gnorm1.dgamma);
        accumulate(lname(l, "norm1.bias"), gnorm1.dbias);
        Tensor<T> dx = dh1;
        for (size_t i = 0; i < dx.size(); ++i) dx.data[i] += gnorm1.dx.data[i];
        return dx;
    }

    void accumulate(const std::string& name, const Tensor<T>& g) {
        auto& dst = params.grad_of(name);
        GECKO_CHECK(dst.size() == g.size(), "gradient size mismatch for " << name);
        for (size_t i = 0; i < g.size(); ++i) dst.data[i] += g.data[i];
    }

    // ------------------------------------------------------------------
    // language model
    // ------------------------------------------------------------------

    Tensor<T> lm_forward(const TokenSeq& tokens, StreamState<T>& state,
                         const BoundaryMask& mask = {}, LmTrace<T>* trace = nullptr) const {
        const size_t n = tokens.size(), d = cfg.dim;
        GECKO_CHECK(n >= 1, "empty token sequence");
        const Tensor<T>& embed = params.at("embed");
        Tensor<T> x({n, d});
        for (size_t t = 0; t < n; ++t) {
            GECKO_CHECK(tokens[t] < cfg.vocab,
                        "token id " << tokens[t] << " exceeds vocab " << cfg.vocab);
            std::copy_n(embed.row_ptr(tokens[t]), d, x.row_ptr(t));
        }
        if (trace) {
            trace->tokens = tokens;
            trace->x0 = x;
            trace->blocks.resize(cfg.layers);
        }
        const size_t pos0 = state.pos;
        for (size_t l = 0; l < cfg.layers; ++l)
            x = block_forward(l, x, state.layers[l], pos0, mask,
                              trace ? &trace->blocks[l] : nullptr);
        if (trace) trace->h_last_in = x;
        Tensor<T> h = norm_with_resets(x, params.at("final_norm.gamma").data.data(),
                                       params.at("final_norm.bias").data.data(), state.final_norm,
                                       mask, trace ? &trace->final_norm : nullptr);
        Tensor<T> logits;
        if (cfg.tie_embeddings) {
            logits = Tensor<T>({n, cfg.vocab});
            matmul_nt_into(h.data.data(), embed.data.data(), logits.data.data(), n, d, cfg.vocab);
        } else {
            logits = matmul(h, params.at("head.w"));
        }
        if (trace) {
            trace->h_final = std::move(h);
            trace->logits = logits;
        }
        state.pos = pos0 + n;
        return logits;
    }

    // mean NLL (nats) of tokens[1..n-1] given the prefix; fresh state
    double lm_loss(const TokenSeq& tokens) const {
        auto state = fresh_state();
        auto logits = lm_forward(tokens, state);
        return cross_entropy_shifted(logits, tokens);
    }

    static double row_nll(const T* logits, size_t vocab, uint32_t target) {
        double mx = static_cast<double>(logits[0]);
        for (size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(logits[j]));
        double lse = 0;
        for (size_t j = 0; j < vocab; ++j) lse += std::exp(static_cast<double>(logits[j]) - mx);
        return std::log(lse) + mx - static_cast<double>(logits[target]);
    }

    double cross_entropy_shifted(const Tensor<T>& logits, const TokenSeq& tokens) const {
        const size_t n = tokens.size();
        GECKO_CHECK(n >= 2, "need at least two tokens to score");
        double total = 0;
        for (size_t t = 0; t + 1 < n; ++t) total += row_nll(logits.row_ptr(t), cfg.vocab, tokens[t + 1]);
        return total / static_cast<double>(n - 1);
    }

    // Full training backward for one sequence: loss = mean shifted NLL scaled
    // by `weight`. Accumulates parameter gradients; returns the loss.
    double lm_loss_and_backward(const TokenSeq& tokens, double weight = 1.0) {
        const size_t n = tokens.size(), d = cfg.dim;
        auto state = fresh_state();
        LmTrace<T> trace;
        auto logits = lm_forward(tokens, state, {}, &trace);
        const double loss = cross_entropy_shifted(logits, tokens);
        // dlogits = (softmax - onehot) * weight / (n-1) on scoring rows
        Tensor<T> dlogits({n, cfg.vocab});
        const double wr = weight / static_cast<double>(n - 1);
        std::vector<double> prob(cfg.vocab);
        for (size_t t = 0; t + 1 < n; ++t) {
            const T* row = logits.row_ptr(t);
            double mx = static_cast<double>(row[0]);
            for (size_t j = 1; j < cfg.vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double sum = 0;
            for (size_t j = 0; j < cfg.vocab; ++j) {
                prob[j] = std::exp(static_cast<double>(row[j]) - mx);
                sum += prob[j];
            }
            T* drow = dlogits.row_ptr(t);
            for (size_t j = 0; j < cfg.vocab; ++j)
                drow[j] = static_cast<T>((prob[j] / sum - (tokens[t + 1] == j ? 1.0 : 0.0)) * wr);
        }
        // head
        Tensor<T> dh({n, d});
        if (cfg.tie_embeddings) {
            matmul_into(dlogits.data.data(), params.at("embed").data.data(), dh.data.data(), n,
                        cfg.vocab, d);
            matmul_tn_accum(dlogits.data.data(), trace.h_final.data.data(),
                            params.grad_of("embed").data.data(), n, cfg.vocab, d);
        } else {
            matmul_nt_into(dlogits.data.data(), params.at("head.w").data.data(), dh.data.data(),
                           n, cfg.vocab, d);
            matmul_tn_accum(trace.h_final.data.data(), dlogits.data.data(),
                            params.grad_of("head.w").data.data(), n, d, cfg.vocab);
        }
        auto gfinal = timestep_norm_backward(trace.h_last_in,
                                             params.at("final_norm.gamma").data.data(),
                                             cfg.norm_config(), trace.final_norm, dh);
        accumulate("final_norm.gamma", gfinal.dgamma);
        accumulate("final_norm.bias", gfinal.dbias);
        Tensor<T> dx = std::move(gfinal.dx);
        for (size_t l = cfg.layers; l-- > 0;) dx = block_backward(l, trace.blocks[l], dx);
        // embedding scatter
        auto& dembed = params.grad_of("embed");
        for (size_t t = 0; t < n; ++t) {
            T* row = dembed.row_ptr(tokens[t]);
            const T* dxr = dx.row_ptr(t);
            for (size_t j = 0; j < d; ++j) row[j] += dxr[j];
        }
        return loss;
    }
};

// ---------------------------------------------------------------------------
// streaming scorer: per-token NLL with bounded state
// ---------------------------------------------------------------------------

template <typename T>
class StreamScorer {
public:
    explicit StreamScorer(const GeckoModel<T>& model)
        : model_(model), state_(model.fresh_state()) {}

    // Feeds the next chunk of tokens (whole chunks except a final partial
    // one). Returns one NLL per fed token; the very first token of the stream
    // has no prediction and reports NaN.
    std::vector<double> score_chunk(const TokenSeq& chunk, const BoundaryMask& mask = {}) {
        GECKO_CHECK(!finished_, "stream already consumed a partial chunk");
        if (chunk.size() % model_.cfg.chunk != 0) finished_ = true;
        auto logits = model_.lm_forward(chunk, state_, mask);
        std::vector<double> nll(chunk.size());
        for (size_t t = 0; t < chunk.size(); ++t) {
            if (t == 0) {
                nll[0] = has_last_ ? GeckoModel<T>::row_nll(last_logits_.data(),
                                                            model_.cfg.vocab, chunk[0])
                                   : std::numeric_limits<double>::quiet_NaN();
            } else {
                nll[t] = GeckoModel<T>::row_nll(logits.row_ptr(t - 1), model_.cfg.vocab, chunk[t]);
            }
        }
        last_logits_.assign(logits.row_ptr(chunk.size() - 1),
                            logits.row_ptr(chunk.size() - 1) + model_.cfg.vocab);
        has_last_ = true;
        return nll;
    }

    const StreamState<T>& state() const { return state_; }
    size_t state_bytes() const {
        return state_.byte_size() + sizeof(T) * last_logits_.capacity();
    }

private:
    const GeckoModel<T>& model_;
    StreamState<T> state_;
    std::vector<T> last_logits_;
    bool has_last_ = false;
    bool finished_ = false;
};

// ---------------------------------------------------------------------------
// streaming generation: the committed state advances whole chunks; the
// in-progress partial chunk is re-run from the chunk-start snapshot per token.
// ---------------------------------------------------------------------------

template <typename T>
class StreamGenerator {
public:
    StreamGenerator(const GeckoModel<T>& model, uint64_t sample_seed)
        : model_(model), state_(model.fresh_state()), rng_(sample_seed, "generate") {}

    // Feed prompt tokens (any count); then sample. Greedy when temperature=0.
    void feed(const TokenSeq& tokens) {
        for (uint32_t t : tokens) push(t);
    }

    uint32_t sample(double temperature) {
        GECKO_CHECK(has_logits_, "sample() before any token was fed");
        uint32_t tok;
        if (temperature <= 0) {
            tok = 0;
            for (size_t j = 1; j < model_.cfg.vocab; ++j)
                if (last_logits_[j] > last_logits_[tok]) tok = static_cast<uint32_t>(j);
        } else {
            std::vector<double> p(model_.cfg.vocab);
            double mx = -1e300;
            for (size_t j = 0; j < p.size(); ++j)
                mx = std::max(mx, static_cast<double>(last_logits_[j]) / temperature);
            double sum = 0;
            for (size_t j = 0; j < p.size(); ++j) {
                p[j] = std::exp(static_cast<double>(last_logits_[j]) / temperature - mx);
                sum += p[j];
            }
            double u = rng_.uniform() * sum;
            tok = static_cast<uint32_t>(p.size() - 1);
            for (size_t j = 0; j < p.size(); ++j) {
                u -= p[j];
                if (u <= 0) {
                    tok = static_cast<uint32_t>(j);
                    break;
                }
            }
        }
        push(tok);
        return tok;
    }

    size_t state_bytes() const { return state_.byte_size(); }

private:
    void push(uint32_t tok) {
        pending_.push_back(tok);
        // run the partial chunk on a copy of the committed state
        StreamState<T> probe = state_;
        auto logits = model_.lm_forward(pending_, probe, {});
        last_logits_.assign(logits.row_ptr(pending_.size() - 1),
                            logits.row_ptr(pending_.size() - 1) + model_.cfg.vocab);
        has_logits_ = true;
        if (pending_.size() == model_.cfg.chunk) {
            model_.lm_forward(pending_, state_, {});  // commit the full chunk
            pending_.clear();
        }
    }

    const GeckoModel<T>& model_;
    StreamState<T> state_;
    TokenSeq pending_;
    std::vector<T> last_logits_;
    bool has_logits_ = false;
    RngStream rng_;
};

}  // namespace gecko
