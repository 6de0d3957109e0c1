#include <doctest.h>

#include "gecko/awm.hpp"
#include "gecko/grad_check.hpp"
#include "testutil.hpp"

using namespace gecko;

namespace {

// naive f64 chunk recurrence with raw exponentials, no running-max scaling;
// the oracle for the scaled implementation (small keys only)
struct NaiveAwm {
    size_t z, v;
    std::vector<double> zacc;
    Tensor<double> M;
    NaiveAwm(size_t z_, size_t v_) : z(z_), v(v_), zacc(z_, 0.0), M({z_, v_}) {}

    static Tensor<double> psi_direct(const Tensor<double>& x) {
        Tensor<double> y(x.shape);
        for (size_t i = 0; i < x.shape[0]; ++i) {
            double sum = 0;
            for (size_t j = 0; j < x.shape[1]; ++j) sum += std::exp(x(i, j));
            for (size_t j = 0; j < x.shape[1]; ++j) y(i, j) = std::exp(x(i, j)) / sum;
        }
        return y;
    }

    void fold(const Tensor<double>& K, const Tensor<double>& V, bool delta) {
        const size_t c = K.shape[0];
        std::vector<double> w(z, 0.0);
        for (size_t j = 0; j < z; ++j)
            for (size_t i = 0; i < c; ++i) w[j] += std::exp(K(i, j));
        std::vector<double> zprev = zacc;
        for (size_t j = 0; j < z; ++j) zacc[j] += w[j];
        Tensor<double> C = V;
        if (delta) {
            auto pk = psi_direct(K);
            for (size_t i = 0; i < c; ++i)
                for (size_t u = 0; u < v; ++u) {
                    double acc = 0;
                    for (size_t j = 0; j < z; ++j) acc += pk(i, j) * M(j, u);
                    C(i, u) -= acc;
                }
        }
        Tensor<double> newM({z, v});
        for (size_t j = 0; j < z; ++j)
            for (size_t u = 0; u < v; ++u) {
                double t = 0;
                for (size_t i = 0; i < c; ++i) t += std::exp(K(i, j)) / w[j] * C(i, u);
                newM(j, u) = zprev[j] / zacc[j] * M(j, u) + w[j] / zacc[j] * t;
            }
        M = newM;
    }
};

}  // namespace

TEST_CASE("kernels: uniform keys, identical chunks, global sum telescopes to one") {
    const size_t c = 2, z = 3;
    auto state = MemoryState<double>::fresh(z, 2);
    Tensor<double> K({c, z});  // all zeros
    auto kern = awm_kernels(state, K);
    for (size_t j = 0; j < z; ++j) {
        CHECK(kern.phi(0, j) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(kern.phi(1, j) == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(kern.ratio_w[j] == doctest::Approx(1.0).epsilon(1e-15));  // z_0 = 0
    }
    // second identical chunk: z_2 = 2 w, ratio z_1/z_2 = 0.5
    auto kern2 = awm_kernels(state, K);
    for (size_t j = 0; j < z; ++j) {
        CHECK(kern2.ratio_prev[j] == doctest::Approx(0.5).epsilon(1e-14));
        CHECK(kern2.ratio_w[j] == doctest::Approx(0.5).epsilon(1e-14));
    }

    // random chunks: the rescaled running sum of phi_global reaches exactly 1
    auto st = MemoryState<double>::fresh(z, 2);
    std::vector<double> running(z, 0.0);
    for (int s = 0; s < 5; ++s) {
        auto Ks = testutil::random_tensor<double>({4, z}, 100 + s, "awk.k");
        auto kr = awm_kernels(st, Ks);
        for (size_t j = 0; j < z; ++j) {
            running[j] *= kr.ratio_prev[j];
            for (size_t i = 0; i < 4; ++i) running[j] += kr.phi_global(i, j);
        }
    }
    for (size_t j = 0; j < z; ++j) CHECK(std::fabs(running[j] - 1.0) < 1e-12);
}

TEST_CASE("psi is a feature-dimension softmax; psi(Q) tau stays one") {
    Tensor<double> q({1, 2});
    auto p = psi(q);
    CHECK(p(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(p(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

    auto Q = testutil::random_tensor<double>({7, 5}, 4, "psi.q", 3.0);
    auto P = psi(Q);
    for (size_t i = 0; i < 7; ++i) {
        double sum = 0;
        for (size_t j = 0; j < 5; ++j) sum += P(i, j);
        CHECK(std::fabs(sum - 1.0) < 1e-12);  // tau == 1: psi(Q) . 1 = 1
    }
}

TEST_CASE("awm_update: zero-memory first fold and the naive f64 oracle") {
    const size_t c = 4, z = 3, v = 2;
    auto K1 = testutil::random_tensor<double>({c, z}, 7, "awm.k1");
    auto V1 = testutil::random_tensor<double>({c, v}, 8, "awm.v1");

    // first update from M=0: M = phi_s(K)^T V (correction vanishes, z_1 = w_1)
    auto state = MemoryState<double>::fresh(z, v);
    auto check_state = MemoryState<double>::fresh(z, v);
    auto kern = awm_kernels(check_state, K1);
    awm_update(state, K1, V1);
    for (size_t j = 0; j < z; ++j)
        for (size_t u = 0; u < v; ++u) {
            double expect = 0;
            for (size_t i = 0; i < c; ++i) expect += kern.phi_global(i, j) * V1(i, u);
            CHECK(std::fabs(state.M(j, u) - expect) < 1e-13);
        }

    // zero values keep a zero memory
    auto zstate = MemoryState<double>::fresh(z, v);
    awm_update(zstate, K1, Tensor<double>({c, v}));
    CHECK(testutil::max_abs(zstate.M) == 0.0);

    // three chunks vs the naive recurrence
    auto st = MemoryState<double>::fresh(z, v);
    NaiveAwm naive(z, v);
    for (int s = 0; s < 3; ++s) {
        auto K = testutil::random_tensor<double>({c, z}, 20 + s, "awm.kk");
        auto V = testutil::random_tensor<double>({c, v}, 30 + s, "awm.vv");
        awm_update(st, K, V);
        naive.fold(K, V, /*delta=*/true);
        CHECK(testutil::max_abs_diff(st.M, naive.M) < 1e-10);
    }
}

TEST_CASE("nodelta equals the direct sum and is a convex combination") {
    const size_t c = 3, z = 4, v = 2, S = 5;
    std::vector<Tensor<double>> Ks, Vs;
    for (size_t s = 0; s < S; ++s) {
        Ks.push_back(testutil::random_tensor<double>({c, z}, 40 + s, "nd.k"));
        Vs.push_back(testutil::random_tensor<double>({c, v}, 50 + s, "nd.v"));
    }
    auto st = MemoryState<double>::fresh(z, v);
    for (size_t s = 0; s < S; ++s) awm_update_nodelta(st, Ks[s], Vs[s]);

    // Appendix-style direct sum: M_S = sum_t phi_S(K_t)^T V_t with raw exps
    std::vector<double> zfin(z, 0.0);
    for (size_t s = 0; s < S; ++s)
        for (size_t j = 0; j < z; ++j)
            for (size_t i = 0; i < c; ++i) zfin[j] += std::exp(Ks[s](i, j));
    Tensor<double> direct({z, v});
    for (size_t s = 0; s < S; ++s)
        for (size_t j = 0; j < z; ++j)
            for (size_t u = 0; u < v; ++u)
                for (size_t i = 0; i < c; ++i)
                    direct(j, u) += std::exp(Ks[s](i, j)) / zfin[j] * Vs[s](i, u);
    CHECK(testutil::max_abs_diff(st.M, direct) < 1e-12);

    // single chunk: equals phi_1^T V_1
    auto st1 = MemoryState<double>::fresh(z, v);
    awm_update_nodelta(st1, Ks[0], Vs[0]);
    auto chk = MemoryState<double>::fresh(z, v);
    auto kern = awm_kernels(chk, Ks[0]);
    for (size_t j = 0; j < z; ++j)
        for (size_t u = 0; u < v; ++u) {
            double e = 0;
            for (size_t i = 0; i < c; ++i) e += kern.phi_global(i, j) * Vs[0](i, u);
            CHECK(std::fabs(st1.M(j, u) - e) < 1e-14);
        }

    // convex combination: every memory entry within the range of its V column
    for (size_t u = 0; u < v; ++u) {
        double lo = 1e300, hi = -1e300;
        for (size_t s = 0; s < S; ++s)
            for (size_t i = 0; i < c; ++i) {
                lo = std::min(lo, Vs[s](i, u));
                hi = std::max(hi, Vs[s](i, u));
            }
        for (size_t j = 0; j < z; ++j) {
            CHECK(st.M(j, u) >= lo - 1e-12);
            CHECK(st.M(j, u) <= hi + 1e-12);
        }
    }

    // no forgetting: every chunk's values keep nonzero influence on M_S
    for (size_t t = 0; t < S; ++t) {
        auto st2 = MemoryState<double>::fresh(z, v);
        for (size_t s = 0; s < S; ++s) {
            Tensor<double> Vp = Vs[s];
            if (s == t) Vp(0, 0) += 1.0;
            awm_update_nodelta(st2, Ks[s], Vp);
        }
        CHECK(testutil::max_abs_diff(st2.M, st.M) > 1e-9);
    }
}

TEST_CASE("retrieve: zero memory, constant rows, unfused oracle") {
    const size_t c = 3, z = 4, v = 2;
    auto state = MemoryState<double>::fresh(z, v);
    auto Qm = testutil::random_tensor<double>({c, z}, 60, "ret.q");
    auto O0 = awm_retrieve(state, Qm);
    CHECK(testutil::max_abs(O0) == 0.0);

    // identical memory rows rho -> every output row is rho
    for (size_t j = 0; j < z; ++j) {
        state.M(j, 0) = 1.25;
        state.M(j, 1) = -0.5;
    }
    auto O = awm_retrieve(state, Qm);
    for (size_t i = 0; i < c; ++i) {
        CHECK(O(i, 0) == doctest::Approx(1.25).epsilon(1e-12));
        CHECK(O(i, 1) == doctest::Approx(-0.5).epsilon(1e-12));
    }

    // random memory vs unfused evaluation
    state.M = testutil::random_tensor<double>({z, v}, 61, "ret.m");
    auto O2 = awm_retrieve(state, Qm);
    auto pq = NaiveAwm::psi_direct(Qm);
    for (size_t i = 0; i < c; ++i)
        for (size_t u = 0; u < v; ++u) {
            double e = 0;
            for (size_t j = 0; j < z; ++j) e += pq(i, j) * state.M(j, u);
            CHECK(std::fabs(O2(i, u) - e) < 1e-12);
        }
}

TEST_CASE("memory projections: identity case and oracle") {
    const size_t n = 5, z = 4;
    MemProjParams<double> prm;
    prm.eta_q = Tensor<double>::full({z}, 1.0);
    prm.rho_q = Tensor<double>({z});
    prm.eta_k = testutil::random_tensor<double>({z}, 70, "mp.ek");
    prm.rho_k = testutil::random_tensor<double>({z}, 71, "mp.rk");
    auto zp = testutil::random_tensor<double>({n, z}, 72, "mp.z");
    Tensor<double> qm, km;
    memory_projections(zp, prm, qm, km);
    CHECK(testutil::max_abs_diff(qm, zp) == 0.0);
    CHECK(qm.shape == std::vector<size_t>{n, z});
    for (size_t t = 0; t < n; ++t)
        for (size_t j = 0; j < z; ++j)
            CHECK(std::fabs(km(t, j) - (prm.eta_k.data[j] * zp(t, j) + prm.rho_k.data[j])) <
                  1e-15);
}

TEST_CASE("key-shift invariance of the scaled kernels (nodelta chain)") {
    const size_t c = 4, z = 3, v = 2, S = 8;
    auto shift = testutil::random_tensor<double>({z}, 80, "shift.d", 10.0);
    for (auto& s : shift.data) s = std::clamp(s, -20.0, 20.0);

    auto st_a = MemoryState<double>::fresh(z, v);
    auto st_b = MemoryState<double>::fresh(z, v);
    Tensor<double> o_a, o_b;
    for (size_t s = 0; s < S; ++s) {
        auto K = testutil::random_tensor<double>({c, z}, 90 + s, "ks.k");
        auto V = testutil::random_tensor<double>({c, v}, 95 + s, "ks.v");
        Tensor<double> K2 = K;
        for (size_t i = 0; i < c; ++i)
            for (size_t j = 0; j < z; ++j) K2(i, j) += shift.data[j];
        // kernels and ratios are identical
        auto ka = st_a;
        auto kb = st_b;
        auto kern_a = awm_kernels(ka, K);
        auto kern_b = awm_kernels(kb, K2);
        CHECK(testutil::max_abs_diff(kern_a.phi, kern_b.phi) < 1e-12);
        CHECK(testutil::max_abs_diff(kern_a.phi_global, kern_b.phi_global) < 1e-12);
        CHECK(testutil::max_abs_diff(kern_a.ratio_prev, kern_b.ratio_prev) < 1e-12);
        CHECK(testutil::max_abs_diff(kern_a.ratio_w, kern_b.ratio_w) < 1e-12);
        awm_update_nodelta(st_a, K, V);
        awm_update_nodelta(st_b, K2, V);
        CHECK(testutil::max_abs_diff(st_a.M, st_b.M) < 1e-12);
    }
    // telescoping: prod of ratios equals z_1/z_S (decoded values)
    // (checked through a separate short run below)
    auto st = MemoryState<double>::fresh(z, v);
    std::vector<double> z1(z, 0.0), prod(z, 1.0);
    for (size_t s = 0; s < 4; ++s) {
        auto K = testutil::random_tensor<double>({c, z}, 200 + s, "tel.k");
        auto kern = awm_kernels(st, K);
        if (s == 0)
            for (size_t j = 0; j < z; ++j) z1[j] = st.z_hat[j] * std::exp(st.r[j]);
        else
            for (size_t j = 0; j < z; ++j) prod[j] *= kern.ratio_prev[j];
    }
    for (size_t j = 0; j < z; ++j) {
        const double zS = st.z_hat[j] * std::exp(st.r[j]);
        CHECK(std::fabs(prod[j] - z1[j] / zS) < 1e-12);
    }
}

TEST_CASE("chain forward: shifted indexing and re-batching identity") {
    const size_t c = 4, z = 3, v = 2, S = 5, n = S * c;
    auto qm = testutil::random_tensor<double>({n, z}, 300, "ch.q");
    auto km = testutil::random_tensor<double>({n, z}, 301, "ch.k");
    auto vv = testutil::random_tensor<double>({n, v}, 302, "ch.v");

    auto st = MemoryState<double>::fresh(z, v);
    auto om = awm_chain_forward(st, qm, km, vv, c);
    // chunks 0 and 1 retrieve from the zero memory
    for (size_t t = 0; t < 2 * c; ++t)
        for (size_t u = 0; u < v; ++u) CHECK(om(t, u) == 0.0);
    // chunk 2 retrieves exactly M_1 = fold(chunk 0)
    auto m1 = MemoryState<double>::fresh(z, v);
    Tensor<double> k0({c, z}), v0({c, v});
    std::copy_n(km.data.begin(), c * z, k0.data.begin());
    std::copy_n(vv.data.begin(), c * v, v0.data.begin());
    awm_update(m1, k0, v0);
    Tensor<double> q2({c, z});
    std::copy_n(qm.row_ptr(2 * c), c * z, q2.data.begin());
    auto o2 = awm_retrieve(m1, q2);
    for (size_t i = 0; i < c; ++i)
        for (size_t u = 0; u < v; ++u) CHECK(om(2 * c + i, u) == doctest::Approx(o2(i, u)));

    // feeding the same chunks one call at a time matches bitwise
    auto st2 = MemoryState<double>::fresh(z, v);
    Tensor<double> km_prev, v_prev;
    bool has_prev = false;
    for (size_t s = 0; s < S; ++s) {
        Tensor<double> qs({c, z}), ks({c, z}), vs({c, v});
        std::copy_n(qm.row_ptr(s * c), c * z, qs.data.begin());
        std::copy_n(km.row_ptr(s * c), c * z, ks.data.begin());
        std::copy_n(vv.row_ptr(s * c), c * v, vs.data.begin());
        auto os = awm_retrieve(st2, qs);
        if (has_prev) awm_update(st2, km_prev, v_prev);
        km_prev = ks;
        v_prev = vs;
        has_prev = true;
        for (size_t i = 0; i < c; ++i)
            for (size_t u = 0; u < v; ++u) CHECK(os(i, u) == om(s * c + i, u));
    }
    // state byte size is independent of processed length
    CHECK(st.byte_size() == MemoryState<double>::fresh(z, v).byte_size());
}

TEST_CASE("awm chain gradient check") {
    const size_t c = 3, z = 3, v = 2, S = 4, n = S * c;
    ParamStore<double> ps;
    ps.add("qm", {n, z});
    ps.add("km", {n, z});
    ps.add("v", {n, v});
    ps["qm"] = testutil::random_tensor<double>({n, z}, 400, "agc.q");
    ps["km"] = testutil::random_tensor<double>({n, z}, 401, "agc.k");
    ps["v"] = testutil::random_tensor<double>({n, v}, 402, "agc.v");
    auto w = testutil::random_tensor<double>({n, v}, 403, "agc.w");

    auto loss_fn = [&]() {
        auto st = MemoryState<double>::fresh(z, v);
        auto om = awm_chain_forward(st, ps["qm"], ps["km"], ps["v"], c);
        double loss = 0;
        for (size_t i = 0; i < om.size(); ++i) loss += om.data[i] * w.data[i];
        // also push gradient through the final memory itself
        for (size_t i = 0; i < st.M.size(); ++i) loss += 0.3 * st.M.data[i] * st.M.data[i];
        return loss;
    };
    {
        auto st = MemoryState<double>::fresh(z, v);
        AwmTrace<double> trace;
        awm_chain_forward(st, ps["qm"], ps["km"], ps["v"], c, &trace);
        // the final-memory loss term seeds dm_final = 0.6 M and exercises the
        // last fold, which the retrieval path alone never reads
        Tensor<double> dm_final({z, v});
        for (size_t i = 0; i < dm_final.size(); ++i) dm_final.data[i] = 0.6 * st.M.data[i];
        auto g = awm_chain_backward(ps["qm"], ps["km"], ps["v"], c, trace, w, &dm_final);
        ps.grad_of("qm") = g.dqm;
        ps.grad_of("km") = g.dkm;
        ps.grad_of("v") = g.dv;
    }
    auto report = grad_check(loss_fn, ps, 1e-5, 1e-4);
    INFO("worst ", report.worst.name, "[", report.worst.flat_index, "] analytic ",
         report.worst.analytic, " numeric ", report.worst.numeric);
    CHECK(report.pass);
}

TEST_CASE("deltanet baseline: first fold, tau accounting, token-level oracle") {
    const size_t c = 4, z = 3, v = 2;
    // keys shifted positive keep silu kernels and denominators well away from
    // the clamp
    auto mk = [&](std::vector<size_t> shape, uint64_t seed, const char* s) {
        auto t = testutil::random_tensor<double>(shape, seed, s, 0.4);
        for (auto& x : t.data) x += 0.8;
        return t;
    };
    auto Q = mk({2 * c, z}, 500, "dn.q");
    auto K = mk({2 * c, z}, 501, "dn.k");
    auto V = testutil::random_tensor<double>({2 * c, v}, 502, "dn.v");

    auto st = DeltaNetState<double>::fresh(z, v);
    auto O = deltanet_forward(st, Q, K, V, c);
    // first chunk output is zero (M_0 = 0), and M_1 = phi(K_1)^T V_1
    for (size_t i = 0; i < c; ++i)
        for (size_t u = 0; u < v; ++u) CHECK(O(i, u) == 0.0);
    // tau equals the running sum of silu over all tokens
    for (size_t j = 0; j < z; ++j) {
        double expect = 0;
        for (size_t i = 0; i < 2 * c; ++i) expect += silu(K(i, j));
        CHECK(std::fabs(st.tau[j] - expect) < 1e-12);
    }
    CHECK(st.clamp_events > 0);  // the s=1 outputs hit the tau=0 clamp

    // single-token chunks equal a token-level recurrence oracle
    auto st1 = DeltaNetState<double>::fresh(z, v);
    auto O1 = deltanet_forward(st1, Q, K, V, 1);
    Tensor<double> M({z, v});
    std::vector<double> tau(z, 0.0);
    for (size_t t = 0; t < 2 * c; ++t) {
        // output
        for (size_t u = 0; u < v; ++u) {
            double num = 0, den = 0;
            for (size_t j = 0; j < z; ++j) {
                num += silu(Q(t, j)) * M(j, u);
            }
            for (size_t j = 0; j < z; ++j) den += silu(Q(t, j)) * tau[j];
            den = std::max(den, 1e-8);
            CHECK(std::fabs(O1(t, u) - num / den) < 1e-10);
        }
        // update
        double den = 0;
        for (size_t j = 0; j < z; ++j) den += silu(K(t, j)) * tau[j];
        den = std::max(den, 1e-8);
        std::vector<double> corr(v);
        for (size_t u = 0; u < v; ++u) {
            double num = 0;
            for (size_t j = 0; j < z; ++j) num += silu(K(t, j)) * M(j, u);
            corr[u] = V(t, u) - num / den;
        }
        for (size_t j = 0; j < z; ++j) {
            for (size_t u = 0; u < v; ++u) M(j, u) += silu(K(t, j)) * corr[u];
            tau[j] += silu(K(t, j));
        }
    }

    // gradient check (away from the clamp: skip the first chunk's outputs)
    ParamStore<double> ps;
    ps.add("q", {2 * c, z});
    ps.add("k", {2 * c, z});
    ps.add("v", {2 * c, v});
    ps["q"] = Q;
    ps["k"] = K;
    ps["v"] = V;
    Tensor<double> w({2 * c, v});
    for (size_t i = c * v; i < w.size(); ++i) w.data[i] = 0.1 + 0.03 * static_cast<double>(i);
    auto loss_fn = [&]() {
        auto s = DeltaNetState<double>::fresh(z, v);
        auto out = deltanet_forward(s, ps["q"], ps["k"], ps["v"], c);
        double loss = 0;
        for (size_t i = 0; i < out.size(); ++i) loss += out.data[i] * w.data[i];
        return loss;
    };
    {
        auto s = DeltaNetState<double>::fresh(z, v);
        DeltaNetTrace<double> trace;
        deltanet_forward(s, ps["q"], ps["k"], ps["v"], c, &trace);
        auto g = deltanet_backward(ps["q"], ps["k"], ps["v"], c, trace, w);
        ps.grad_of("q") = g.dqm;
        ps.grad_of("k") = g.dkm;
        ps.grad_of("v") = g.dv;
    }
    auto report = grad_check(loss_fn, ps, 1e-5, 1e-4);
    INFO("worst ", report.worst.name, "[", report.worst.flat_index, "] analytic ",
         report.worst.analytic, " numeric ", report.worst.numeric);
    CHECK(report.pass);
}
