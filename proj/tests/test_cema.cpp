#include <doctest.h>

#include <complex>

#include "gecko/cema.hpp"
#include "gecko/grad_check.hpp"
#include "testutil.hpp"

using namespace gecko;
using cplx = std::complex<double>;

namespace {

std::vector<cplx> zero_state(const CemaParams<double>& p) {
    return std::vector<cplx>(p.d * p.h, cplx(0, 0));
}

}  // namespace

TEST_CASE("affine combine identity and hand algebra") {
    AffineState<double> s{{0.7, -0.2}, {1.5, 0.3}};
    AffineState<double> id{};
    auto r = affine_combine(s, id);
    CHECK(r.q == s.q);
    CHECK(r.p == s.p);

    AffineState<double> b{{0.5, 0}, {0, 0}};
    AffineState<double> a{{0.5, 0}, {1, 0}};
    auto c = affine_combine(b, a);
    CHECK(c.q.real() == doctest::Approx(0.25).epsilon(1e-15));
    CHECK(c.p.real() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("affine combine is associative") {
    RngStream rng(9, "affine.assoc");
    for (int i = 0; i < 200; ++i) {
        auto draw = [&]() {
            return AffineState<double>{{rng.normal(), rng.normal()}, {rng.normal(), rng.normal()}};
        };
        auto a = draw(), b = draw(), c = draw();
        auto left = affine_combine(affine_combine(c, b), a);
        auto right = affine_combine(c, affine_combine(b, a));
        CHECK(std::abs(left.q - right.q) < 1e-14);
        CHECK(std::abs(left.p - right.p) < 1e-14);
    }
}

TEST_CASE("cema sequential hand recurrence") {
    // d=h=1, beta=1, alpha=0.5, delta~1, theta=0, eta=1, x=(2,0) -> h=(1.0,0.5)
    CemaParams<double> p;
    p.d = p.h = 1;
    p.beta = Tensor<double>({1, 1}, {1.0});
    p.alpha_raw = Tensor<double>({1, 1}, {0.0});    // sigmoid -> 0.5
    p.delta_raw = Tensor<double>({1, 1}, {44.0});   // sigmoid -> 1 - 8e-20
    p.omega = Tensor<double>({1}, {0.0});
    p.eta_re = Tensor<double>({1, 1}, {1.0});
    p.eta_im = Tensor<double>({1, 1}, {0.0});

    Tensor<double> x({2, 1}, {2.0, 0.0});
    Tensor<double> y;
    std::vector<cplx> hN;
    cema_sequential(x, p, {}, zero_state(p), y, hN);
    CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(std::abs(hN[0] - cplx(0.5, 0)) < 1e-12);
}

TEST_CASE("cema zero input stays zero") {
    auto p = CemaParams<double>::init(3, 4, 7);
    Tensor<double> x({10, 3});
    Tensor<double> y;
    std::vector<cplx> hN;
    cema_sequential(x, p, {}, zero_state(p), y, hN);
    CHECK(testutil::max_abs(y) == 0.0);
    auto scan = cema_scan(x, p, {}, zero_state(p), 4);
    CHECK(testutil::max_abs(scan.y) == 0.0);
}

TEST_CASE("cema scan equals sequential recurrence") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        auto p = CemaParams<double>::init(4, 3, seed);
        for (size_t n : {1ul, 31ul, 32ul, 33ul, 257ul}) {
            auto x = testutil::random_tensor<double>({n, 4}, seed * 100 + n, "cema.x");
            std::vector<cplx> h0(p.d * p.h);
            Rng rh(seed, "cema.h0");
            for (size_t i = 0; i < h0.size(); ++i) h0[i] = cplx(rh.normal(2 * i), rh.normal(2 * i + 1));
            Tensor<double> y_seq;
            std::vector<cplx> h_seq;
            cema_sequential(x, p, {}, h0, y_seq, h_seq);
            for (size_t chunk : {1ul, 7ul, 32ul}) {
                auto scan = cema_scan(x, p, {}, h0, chunk);
                CHECK(testutil::max_abs_diff(scan.y, y_seq) < 1e-10);
                CHECK(testutil::max_abs_diff(scan.h_final, h_seq) < 1e-10);
                CHECK(scan.stored_state_count() == ceil_div(n, chunk));
            }
        }
    }
}

TEST_CASE("cema boundary mask resets the state") {
    auto p = CemaParams<double>::init(2, 2, 5);
    const size_t n = 40, t_reset = 17;
    auto x = testutil::random_tensor<double>({n, 2}, 3, "cema.mask.x");
    BoundaryMask mask(n, 1);
    mask[t_reset] = 0;

    auto base = cema_scan(x, p, mask, zero_state(p), 8);
    // wreck everything before the reset; outputs from the reset on must not move
    Tensor<double> x2 = x;
    for (size_t t = 0; t < t_reset; ++t)
        for (size_t j = 0; j < 2; ++j) x2(t, j) = 1e6 * (1.0 + static_cast<double>(t + j));
    auto wrecked = cema_scan(x2, p, mask, zero_state(p), 8);
    for (size_t t = t_reset; t < n; ++t)
        for (size_t j = 0; j < 2; ++j)
            CHECK(std::fabs(base.y(t, j) - wrecked.y(t, j)) < 1e-12);
}

TEST_CASE("cema streaming with carried state equals one shot") {
    auto p = CemaParams<double>::init(3, 2, 11);
    const size_t n1 = 37, n2 = 27;
    auto xa = testutil::random_tensor<double>({n1, 3}, 1, "cema.s1");
    auto xb = testutil::random_tensor<double>({n2, 3}, 2, "cema.s2");
    Tensor<double> xcat({n1 + n2, 3});
    std::copy(xa.data.begin(), xa.data.end(), xcat.data.begin());
    std::copy(xb.data.begin(), xb.data.end(), xcat.data.begin() + xa.size());

    auto full = cema_scan(xcat, p, {}, zero_state(p), 16);
    auto part1 = cema_scan(xa, p, {}, zero_state(p), 16);
    auto part2 = cema_scan(xb, p, {}, part1.h_final, 16);
    for (size_t t = 0; t < n1; ++t)
        for (size_t j = 0; j < 3; ++j) CHECK(std::fabs(full.y(t, j) - part1.y(t, j)) < 1e-12);
    for (size_t t = 0; t < n2; ++t)
        for (size_t j = 0; j < 3; ++j) CHECK(std::fabs(full.y(n1 + t, j) - part2.y(t, j)) < 1e-12);
    CHECK(testutil::max_abs_diff(full.h_final, part2.h_final) < 1e-12);
}

TEST_CASE("cema hidden state obeys the stability bound") {
    auto p = CemaParams<double>::init(2, 3, 21);
    const size_t n = 4096;
    const double B = 5.0;
    Tensor<double> x({n, 2});
    Rng rng(4, "cema.stab");
    for (size_t i = 0; i < x.size(); ++i) x.data[i] = rng.uniform(i, -B, B);

    const auto lanes = cema_lanes(p);
    std::vector<cplx> h = zero_state(p);
    for (size_t t = 0; t < n; ++t) {
        for (size_t j = 0; j < 2; ++j)
            for (size_t k = 0; k < 3; ++k) {
                const auto& L = lanes[j * 3 + k];
                auto& hs = h[j * 3 + k];
                hs = cplx(L.alpha * L.beta * x(t, j), 0) + L.q * hs;
                const double bound =
                    L.alpha * std::fabs(L.beta) * B / (1.0 - std::abs(L.q)) + 1e-9;
                CHECK(std::abs(hs) <= bound);
            }
    }
}

TEST_CASE("cema backward: zero cotangent, remat vs full storage") {
    auto p = CemaParams<double>::init(3, 2, 31);
    const size_t n = 256;
    auto x = testutil::random_tensor<double>({n, 3}, 8, "cema.bwd.x");
    auto h0 = zero_state(p);

    auto fwd = cema_scan(x, p, {}, h0, 32);
    Tensor<double> dy_zero({n, 3});
    auto gz = cema_backward(x, p, {}, h0, fwd, dy_zero);
    CHECK(testutil::max_abs(gz.dx) == 0.0);
    CHECK(testutil::max_abs(gz.dbeta) == 0.0);
    CHECK(testutil::max_abs(gz.domega) == 0.0);

    auto dy = testutil::random_tensor<double>({n, 3}, 9, "cema.bwd.dy");
    auto g_remat = cema_backward(x, p, {}, h0, fwd, dy);
    auto g_full = cema_backward_fullstore(x, p, {}, h0, dy);
    CHECK(testutil::max_abs_diff(g_remat.dx, g_full.dx) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.dbeta, g_full.dbeta) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.dalpha_raw, g_full.dalpha_raw) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.ddelta_raw, g_full.ddelta_raw) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.domega, g_full.domega) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.deta_re, g_full.deta_re) < 1e-10);
    CHECK(testutil::max_abs_diff(g_remat.deta_im, g_full.deta_im) < 1e-10);
    // full storage == chunk 1: count drops by exactly the chunk factor
    CHECK(fwd.stored_state_count() * 32 == n);
}

TEST_CASE("cema gradient check on sum(y^2) loss") {
    const size_t d = 2, h = 2, n = 12;
    auto p0 = CemaParams<double>::init(d, h, 77);
    auto x0 = testutil::random_tensor<double>({n, d}, 13, "cema.gc.x");

    ParamStore<double> ps;
    ps.add("beta", {d, h});
    ps.add("alpha_raw", {d, h});
    ps.add("delta_raw", {d, h});
    ps.add("omega", {d});
    ps.add("eta_re", {d, h});
    ps.add("eta_im", {d, h});
    ps.add("x", {n, d});
    ps.add("h0_re", {d, h});
    ps.add("h0_im", {d, h});
    ps["beta"] = p0.beta;
    ps["alpha_raw"] = p0.alpha_raw;
    ps["delta_raw"] = p0.delta_raw;
    ps["omega"] = p0.omega;
    ps["eta_re"] = p0.eta_re;
    ps["eta_im"] = p0.eta_im;
    ps["x"] = x0;
    ps["h0_re"] = testutil::random_tensor<double>({d, h}, 14, "cema.gc.h0re", 0.5);
    ps["h0_im"] = testutil::random_tensor<double>({d, h}, 15, "cema.gc.h0im", 0.5);

    auto assemble = [&](CemaParams<double>& p, Tensor<double>& x, std::vector<cplx>& h0) {
        p.d = d;
        p.h = h;
        p.beta = ps["beta"];
        p.alpha_raw = ps["alpha_raw"];
        p.delta_raw = ps["delta_raw"];
        p.omega = ps["omega"];
        p.eta_re = ps["eta_re"];
        p.eta_im = ps["eta_im"];
        x = ps["x"];
        h0.resize(d * h);
        for (size_t i = 0; i < d * h; ++i) h0[i] = cplx(ps["h0_re"].data[i], ps["h0_im"].data[i]);
    };

    auto loss_fn = [&]() {
        CemaParams<double> p;
        Tensor<double> x;
        std::vector<cplx> h0;
        assemble(p, x, h0);
        auto fwd = cema_scan(x, p, {}, h0, 5);
        double loss = 0;
        for (double v : fwd.y.data) loss += v * v;
        return loss;
    };

    // analytic gradients
    {
        CemaParams<double> p;
        Tensor<double> x;
        std::vector<cplx> h0;
        assemble(p, x, h0);
        auto fwd = cema_scan(x, p, {}, h0, 5);
        Tensor<double> dy({n, d});
        for (size_t i = 0; i < dy.size(); ++i) dy.data[i] = 2.0 * fwd.y.data[i];
        auto g = cema_backward(x, p, {}, h0, fwd, dy);
        ps.grad_of("beta") = g.dbeta;
        ps.grad_of("alpha_raw") = g.dalpha_raw;
        ps.grad_of("delta_raw") = g.ddelta_raw;
        ps.grad_of("omega") = g.domega;
        ps.grad_of("eta_re") = g.deta_re;
        ps.grad_of("eta_im") = g.deta_im;
        ps.grad_of("x") = g.dx;
        for (size_t i = 0; i < d * h; ++i) {
            ps.grad_of("h0_re").data[i] = g.dh0[i].real();
            ps.grad_of("h0_im").data[i] = g.dh0[i].imag();
        }
    }

    auto report = grad_check(loss_fn, ps, 1e-5, 1e-4);
    INFO("worst: ", report.worst.name, "[", report.worst.flat_index, "] analytic ",
         report.worst.analytic, " numeric ", report.worst.numeric);
    CHECK(report.pass);
}

TEST_CASE("cema scan is independent of worker count") {
    auto p = CemaParams<double>::init(5, 3, 41);
    auto x = testutil::random_tensor<double>({64, 5}, 6, "cema.par.x");
    auto h0 = zero_state(p);
    auto serial = cema_scan(x, p, {}, h0, 16);
    worker_count() = 4;
    auto parallel = cema_scan(x, p, {}, h0, 16);
    worker_count() = 1;
    for (size_t i = 0; i < serial.y.size(); ++i) CHECK(serial.y.data[i] == parallel.y.data[i]);
}
