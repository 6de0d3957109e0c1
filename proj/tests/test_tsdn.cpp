#include <doctest.h>

#include <cmath>

#include "gecko/grad_check.hpp"
#include "gecko/tsdn.hpp"
#include "testutil.hpp"

using namespace gecko;

namespace {

NormConfig make_cfg(size_t d, size_t k, NormVariant variant = NormVariant::tsdn) {
    NormConfig cfg;
    cfg.d = d;
    cfg.k = k;
    cfg.variant = variant;
    return cfg;
}

Tensor<double> ones(size_t d) { return Tensor<double>::full({d}, 1.0); }

// fold timestep_norm_step over a sequence: the oracle for the batch/scan path
Tensor<double> step_fold(const Tensor<double>& x, const Tensor<double>& gamma,
                         const Tensor<double>& bias, const NormConfig& cfg, NormState& state) {
    Tensor<double> y(x.shape);
    for (size_t t = 0; t < x.shape[0]; ++t)
        timestep_norm_step(x.row_ptr(t), gamma.data.data(), bias.data.data(), cfg, state,
                           y.row_ptr(t));
    return y;
}

}  // namespace

TEST_CASE("group stats hand cases and two-pass oracle") {
    auto cfg = make_cfg(2, 1);
    double x[2] = {1.0, 3.0};
    double mu, var;
    group_stats(x, cfg, &mu, &var);
    CHECK(mu == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-15));

    double xc[2] = {5.0, 5.0};
    group_stats(xc, cfg, &mu, &var);
    CHECK(var == 0.0);

    // random d=8, k=2 vs direct two-pass oracle
    auto cfg8 = make_cfg(8, 2);
    auto xr = testutil::random_tensor<double>({8}, 3, "gs.x", 2.0);
    double mu2[2], var2[2];
    group_stats(xr.data.data(), cfg8, mu2, var2);
    for (size_t g = 0; g < 2; ++g) {
        double mean = 0;
        for (size_t i = 0; i < 4; ++i) mean += xr.data[g * 4 + i];
        mean /= 4.0;
        double vv = 0;
        for (size_t i = 0; i < 4; ++i) vv += (xr.data[g * 4 + i] - mean) * (xr.data[g * 4 + i] - mean);
        vv /= 4.0;
        CHECK(std::fabs(mu2[g] - mean) < 1e-14);
        CHECK(std::fabs(var2[g] - vv) < 1e-14);
    }
}

TEST_CASE("tsn step: single-term average and constant stats") {
    auto cfg = make_cfg(4, 2, NormVariant::tsn);
    auto state = NormState::fresh(2);
    auto x = testutil::random_tensor<double>({4}, 1, "tsn.x");
    std::vector<double> y(4);
    timestep_norm_step(x.data.data(), ones(4).data.data(), Tensor<double>({4}).data.data(), cfg,
                       state, y.data());
    double mu[2], var[2];
    group_stats(x.data.data(), cfg, mu, var);
    CHECK(state.m[0] == doctest::Approx(mu[0]).epsilon(1e-15));
    CHECK(state.v[1] == doctest::Approx(var[1]).epsilon(1e-15));

    // identical stats every step keep m_t constant
    for (int t = 0; t < 20; ++t)
        timestep_norm_step(x.data.data(), ones(4).data.data(), Tensor<double>({4}).data.data(),
                           cfg, state, y.data());
    CHECK(state.m[0] == doctest::Approx(mu[0]).epsilon(1e-12));
}

TEST_CASE("tsn len-50 stream equals batch recomputation") {
    auto cfg = make_cfg(6, 3, NormVariant::tsn);
    auto x = testutil::random_tensor<double>({50, 6}, 2, "tsn.batch.x");
    auto gamma = testutil::random_tensor<double>({6}, 3, "tsn.g", 0.3);
    auto bias = testutil::random_tensor<double>({6}, 4, "tsn.b", 0.3);
    for (auto& v : gamma.data) v += 1.0;

    auto s1 = NormState::fresh(3);
    auto y_step = step_fold(x, gamma, bias, cfg, s1);
    auto s2 = NormState::fresh(3);
    auto y_batch = timestep_norm_batch(x, gamma.data.data(), bias.data.data(), cfg, s2);
    CHECK(testutil::max_abs_diff(y_step, y_batch) < 1e-12);
    CHECK(s1.t == s2.t);
}

TEST_CASE("tsdn bias correction cancels exactly at t=1") {
    auto cfg = make_cfg(2, 1);
    auto state = NormState::fresh(1);
    // group (1,5): mu = 3
    double x[2] = {1.0, 5.0};
    std::vector<double> y(2);
    timestep_norm_step(x, ones(2).data.data(), Tensor<double>({2}).data.data(), cfg, state,
                       y.data());
    CHECK(state.m[0] == doctest::Approx(0.003).epsilon(1e-12));
    // bias-corrected mean recovers mu exactly
    const double mprime = state.m[0] / (1.0 - state.pow_b1);
    CHECK(std::fabs(mprime - 3.0) < 1e-12);
}

TEST_CASE("tsdn constant input is a fixed point of the corrected stats") {
    auto cfg = make_cfg(2, 1);
    auto state = NormState::fresh(1);
    double x[2] = {1.0, 3.0};  // mu=2, var=1
    std::vector<double> y(2);
    Tensor<double> gamma({2}, {1.5, 1.5});
    Tensor<double> bias({2}, {0.25, 0.25});
    for (int t = 1; t <= 200; ++t) {
        timestep_norm_step(x, gamma.data.data(), bias.data.data(), cfg, state, y.data());
        const double mprime = state.m[0] / (1.0 - state.pow_b1);
        const double vprime = state.v[0] / (1.0 - state.pow_b2);
        CHECK(std::fabs(mprime - 2.0) < 1e-12);
        CHECK(std::fabs(vprime - 1.0) < 1e-12);
        const double expect = 1.0 / std::sqrt(1.0 + cfg.eps);
        CHECK(y[0] == doctest::Approx(-expect * 1.5 + 0.25).epsilon(1e-12));
        CHECK(y[1] == doctest::Approx(expect * 1.5 + 0.25).epsilon(1e-12));
    }
}

TEST_CASE("tsdn batch equals step fold") {
    auto gamma = testutil::random_tensor<double>({8}, 5, "tsdn.g", 0.2);
    for (auto& v : gamma.data) v += 1.0;
    auto bias = testutil::random_tensor<double>({8}, 6, "tsdn.b", 0.2);
    for (NormVariant variant : {NormVariant::tsdn, NormVariant::tsdn_literal}) {
        auto cfg = make_cfg(8, 2, variant);
        // n=1 equals a single step
        auto x1 = testutil::random_tensor<double>({1, 8}, 7, "tsdn.x1");
        auto sa = NormState::fresh(2);
        auto sb = NormState::fresh(2);
        auto ya = step_fold(x1, gamma, bias, cfg, sa);
        auto yb = timestep_norm_batch(x1, gamma.data.data(), bias.data.data(), cfg, sb);
        CHECK(testutil::max_abs_diff(ya, yb) < 1e-15);

        // n=257 vs step-fold oracle
        auto x = testutil::random_tensor<double>({257, 8}, 8, "tsdn.x257");
        auto s1 = NormState::fresh(2);
        auto s2 = NormState::fresh(2);
        auto y_step = step_fold(x, gamma, bias, cfg, s1);
        auto y_batch = timestep_norm_batch(x, gamma.data.data(), bias.data.data(), cfg, s2);
        CHECK(testutil::max_abs_diff(y_step, y_batch) < 1e-12);
        CHECK(std::fabs(s1.m[0] - s2.m[0]) < 1e-13);
        CHECK(std::fabs(s1.pow_b1 - s2.pow_b1) < 1e-15);
    }
}

TEST_CASE("tsdn beta1=0 degenerates to instantaneous normalization") {
    auto cfg = make_cfg(4, 1);
    cfg.beta1 = 0.0;
    auto state = NormState::fresh(1);
    auto x = testutil::random_tensor<double>({10, 4}, 9, "tsdn.b0");
    auto y = timestep_norm_batch(x, ones(4).data.data(), Tensor<double>({4}).data.data(), cfg,
                                 state);
    CHECK(state.t == 10);
    // m'_t = mu_t for every t, so each output row is centered by its own mean
    for (size_t t = 0; t < 10; ++t) {
        double mean_y = 0;
        for (size_t f = 0; f < 4; ++f) mean_y += y(t, f);
        CHECK(std::fabs(mean_y / 4.0) < 1e-12);
    }
}

TEST_CASE("tsdn streaming equals batch at arbitrary split points") {
    auto cfg = make_cfg(6, 2);
    auto x = testutil::random_tensor<double>({96, 6}, 10, "tsdn.split.x");
    auto gamma = ones(6);
    Tensor<double> bias({6});
    auto s_full = NormState::fresh(2);
    auto y_full = timestep_norm_batch(x, gamma.data.data(), bias.data.data(), cfg, s_full);

    for (size_t split : {1ul, 17ul, 48ul, 95ul}) {
        Tensor<double> xa({split, 6}), xb({96 - split, 6});
        std::copy_n(x.data.begin(), split * 6, xa.data.begin());
        std::copy(x.data.begin() + split * 6, x.data.end(), xb.data.begin());
        auto s = NormState::fresh(2);
        auto ya = timestep_norm_batch(xa, gamma.data.data(), bias.data.data(), cfg, s);
        auto yb = timestep_norm_batch(xb, gamma.data.data(), bias.data.data(), cfg, s);
        for (size_t t = 0; t < split; ++t)
            for (size_t f = 0; f < 6; ++f) CHECK(std::fabs(ya(t, f) - y_full(t, f)) < 1e-12);
        for (size_t t = 0; t < 96 - split; ++t)
            for (size_t f = 0; f < 6; ++f)
                CHECK(std::fabs(yb(t, f) - y_full(split + t, f)) < 1e-12);
    }
}

TEST_CASE("constant influence of current stats: tsdn vs tsn") {
    // d m_t / d mu_t via the backward rule with a unit cotangent on m_t
    for (size_t t_probe : {0ul, 4ul, 63ul}) {
        std::vector<double> dm(64, 0.0);
        dm[t_probe] = 1.0;
        auto d_tsdn = stats_recurrence_backward(NormVariant::tsdn, 0.999, 0, dm);
        CHECK(d_tsdn[t_probe] == doctest::Approx(1.0 - 0.999).epsilon(1e-12));
        auto d_tsn = stats_recurrence_backward(NormVariant::tsn, 0.0, 0, dm);
        CHECK(d_tsn[t_probe] == doctest::Approx(1.0 / static_cast<double>(t_probe + 1)).epsilon(1e-12));
    }
}

TEST_CASE("long stationary input is normalized to mean 0 variance 1") {
    auto cfg = make_cfg(8, 2);
    const size_t n = 10000;
    Tensor<double> x({n, 8});
    Rng rng(11, "tsdn.stationary");
    for (size_t i = 0; i < x.size(); ++i) x.data[i] = 3.0 + 2.0 * rng.normal(i);
    auto state = NormState::fresh(2);
    auto y = timestep_norm_batch(x, ones(8).data.data(), Tensor<double>({8}).data.data(), cfg,
                                 state);
    // group-wise statistics of the output, averaged over settled timesteps
    double mean = 0, var = 0;
    const size_t skip = 1000;  // let the running stats settle
    for (size_t t = skip; t < n; ++t) {
        double mu[2], vv[2];
        group_stats(y.row_ptr(t), cfg, mu, vv);
        mean += 0.5 * (mu[0] + mu[1]);
        var += 0.5 * (vv[0] + vv[1]);
    }
    const double cnt = static_cast<double>(n - skip);
    CHECK(std::fabs(mean / cnt) < 0.05);
    CHECK(std::fabs(var / cnt - 1.0) < 0.05);
}

TEST_CASE("timestep norm gradient check") {
    const size_t d = 6, k = 2, n = 7;
    for (NormVariant variant : {NormVariant::tsdn, NormVariant::tsn, NormVariant::tsdn_literal}) {
        CAPTURE(norm_variant_name(variant));
        auto cfg = make_cfg(d, k, variant);
        cfg.beta1 = 0.9;  // sharper decay so n=7 exercises the recurrence
        cfg.beta2 = 0.95;
        ParamStore<double> ps;
        ps.add("x", {n, d});
        ps.add("gamma", {d});
        ps.add("bias", {d});
        ps["x"] = testutil::random_tensor<double>({n, d}, 20 + (int)variant, "tsdn.gc.x");
        ps["gamma"] = testutil::random_tensor<double>({d}, 21, "tsdn.gc.g", 0.3);
        for (auto& v : ps["gamma"].data) v += 1.0;
        ps["bias"] = testutil::random_tensor<double>({d}, 22, "tsdn.gc.b", 0.3);

        auto loss_fn = [&]() {
            auto state = NormState::fresh(k);
            auto y = timestep_norm_batch(ps["x"], ps["gamma"].data.data(), ps["bias"].data.data(),
                                         cfg, state);
            double loss = 0;
            for (size_t i = 0; i < y.size(); ++i) loss += y.data[i] * y.data[i] * (0.1 + 0.01 * i);
            return loss;
        };
        {
            auto state = NormState::fresh(k);
            NormTrace trace;
            auto y = timestep_norm_batch(ps["x"], ps["gamma"].data.data(), ps["bias"].data.data(),
                                         cfg, state, &trace);
            Tensor<double> dy({n, d});
            for (size_t i = 0; i < y.size(); ++i) dy.data[i] = 2.0 * y.data[i] * (0.1 + 0.01 * i);
            auto g = timestep_norm_backward(ps["x"], ps["gamma"].data.data(), cfg, trace, dy);
            ps.grad_of("x") = g.dx;
            ps.grad_of("gamma") = g.dgamma;
            ps.grad_of("bias") = g.dbias;
        }
        auto report = grad_check(loss_fn, ps, 1e-5, 1e-4);
        INFO("variant ", norm_variant_name(variant), " worst ", report.worst.name, "[",
             report.worst.flat_index, "] analytic ", report.worst.analytic, " numeric ",
             report.worst.numeric);
        CHECK(report.pass);
    }
}
