#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pvm/autodiff.hpp"
#include "pvm/rng.hpp"

using namespace pvm;

TEST_CASE("d(x^2)/dx at x = 3 is 6") {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>({1}, {3.0}), true);
    Var y = g.mul(x, x);
    g.backward(g.sum_all(y));
    CHECK(g.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("gradients accumulate additively across fan-out") {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>({1}, {2.0}), true);
    Var y = g.add(g.mul(x, x), g.scale(x, 3.0));  // x^2 + 3x
    g.backward(y);
    CHECK(g.grad(x)[0] == doctest::Approx(7.0));  // 2x + 3
}

TEST_CASE("backward requires a scalar loss and runs once per tape") {
    Graph<double> g;
    Var x = g.leaf(Tensor<double>({2}, {1.0, 2.0}), true);
    CHECK_THROWS_AS(g.backward(x), PreconditionError);
    Var s = g.sum_all(x);
    g.backward(s);
    CHECK_THROWS_AS(g.backward(s), std::logic_error);
}

TEST_CASE("parameters not bound to a tape are reported") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({2}, {1.0, 2.0}));
    Graph<double> g;
    ParamBinding<double> bind(g, ps, true);
    CHECK_THROWS_AS(bind["nope"], std::out_of_range);
    CHECK(g.val(bind["w"]).data == std::vector<double>{1.0, 2.0});
}

TEST_CASE("matmul chain matches central differences") {
    CounterRng rng(41);
    ParamStore<double> ps;
    for (const char* name : {"a", "b", "c"}) {
        Tensor<double> t({3, 3});
        for (auto& v : t.data) v = rng.uniform(-1, 1);
        ps.add(name, std::move(t));
    }
    auto f = [](const ParamStore<double>& p) {
        Graph<double> g;
        ParamBinding<double> bind(g, p, true);
        Var y = g.matmul(g.matmul(bind["a"], bind["b"]), bind["c"]);
        Var loss = g.sum_all(g.mul(y, y));
        g.backward(loss);
        return std::make_pair(g.val(loss)[0], bind.grads());
    };
    const auto res = grad_check<double>(f, ps, 1e-6);
    CHECK(res.max_rel_err <= 1e-5);
}

TEST_CASE("selective scan parameters pass the finite-difference check (L=8, E=2, N=2)") {
    CounterRng rng(42);
    ParamStore<double> ps;
    const int L = 8, E = 2, N = 2;
    const auto add = [&](const char* name, Dims d) {
        Tensor<double> t(std::move(d));
        for (auto& v : t.data) v = rng.uniform(-1, 1);
        ps.add(name, std::move(t));
    };
    add("u", {L, E});
    add("a_log", {E, N});
    add("w_b", {N, E});
    add("w_c", {N, E});
    add("w_dt", {E, E});
    add("dt_bias", {E});
    add("d_skip", {E});
    for (const bool reverse : {false, true}) {
        auto f = [reverse](const ParamStore<double>& p) {
            Graph<double> g;
            ParamBinding<double> bind(g, p, true);
            Var y = g.selective_scan(bind["u"], bind["a_log"], bind["w_b"], bind["w_c"],
                                     bind["w_dt"], bind["dt_bias"], bind["d_skip"], reverse);
            Var loss = g.sum_all(g.mul(y, y));
            g.backward(loss);
            return std::make_pair(g.val(loss)[0], bind.grads());
        };
        const auto res = grad_check<double>(f, ps, 1e-6);
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("layer norm gradient check") {
    CounterRng rng(43);
    ParamStore<double> ps;
    Tensor<double> x({3, 5});
    for (auto& v : x.data) v = rng.uniform(-2, 2);
    Tensor<double> gamma({5}), beta({5});
    for (auto& v : gamma.data) v = rng.uniform(0.5, 1.5);
    for (auto& v : beta.data) v = rng.uniform(-0.5, 0.5);
    ps.add("x", x);
    ps.add("gamma", gamma);
    ps.add("beta", beta);
    auto f = [](const ParamStore<double>& p) {
        Graph<double> g;
        ParamBinding<double> bind(g, p, true);
        Var y = g.layer_norm(bind["x"], bind["gamma"], bind["beta"]);
        Tensor<double> w({3, 5});
        CounterRng wr(44);
        for (auto& v : w.data) v = wr.uniform(-1, 1);
        Var loss = g.sum_all(g.cmul(y, std::move(w)));
        g.backward(loss);
        return std::make_pair(g.val(loss)[0], bind.grads());
    };
    CHECK(grad_check<double>(f, ps, 1e-6).max_rel_err <= 1e-5);
}

TEST_CASE("linear layer gradient check is near machine precision") {
    CounterRng rng(45);
    ParamStore<double> ps;
    Tensor<double> w({4, 6}), b({4}), x({5, 6});
    for (auto& v : w.data) v = rng.uniform(-1, 1);
    for (auto& v : b.data) v = rng.uniform(-1, 1);
    for (auto& v : x.data) v = rng.uniform(-1, 1);
    ps.add("w", w);
    ps.add("b", b);
    auto f = [x](const ParamStore<double>& p) {
        Graph<double> g;
        ParamBinding<double> bind(g, p, true);
        Var y = g.add_rowvec(g.matmul_nt(g.constant(x), bind["w"]), bind["b"]);
        Tensor<double> wt({5, 4});
        CounterRng wr(46);
        for (auto& v : wt.data) v = wr.uniform(-1, 1);
        Var loss = g.sum_all(g.cmul(y, std::move(wt)));
        g.backward(loss);
        return std::make_pair(g.val(loss)[0], bind.grads());
    };
    CHECK(grad_check<double>(f, ps, 1e-6).max_rel_err <= 1e-7);
}

TEST_CASE("Adam: zero gradient leaves parameters unchanged") {
    ParamStore<float> ps;
    ps.add("w", Tensor<float>({3}, {1.0f, -2.0f, 0.5f}));
    GradMap<float> grads;
    grads.emplace("w", Tensor<float>({3}));
    AdamState<float> state;
    optimizer_step(ps, grads, state, AdamConfig<float>{});
    CHECK(ps.at("w").data == std::vector<float>{1.0f, -2.0f, 0.5f});
    CHECK(state.step == 1);
}

TEST_CASE("Adam: first step with unit gradient moves by about lr") {
    ParamStore<float> ps;
    ps.add("w", Tensor<float>({1}, {1.0f}));
    GradMap<float> grads;
    grads.emplace("w", Tensor<float>({1}, {1.0f}));
    AdamState<float> state;
    AdamConfig<float> cfg;
    cfg.lr = 0.1f;
    optimizer_step(ps, grads, state, cfg);
    // bias-corrected first step is lr * g / (|g| + eps) ~ lr
    CHECK(ps.at("w")[0] == doctest::Approx(0.9f).epsilon(1e-4));
}

TEST_CASE("Adam trajectories are bit-identical across reruns") {
    const auto run = [] {
        CounterRng rng(47);
        ParamStore<float> ps;
        Tensor<float> w({8});
        for (auto& v : w.data) v = static_cast<float>(rng.uniform(-1, 1));
        ps.add("w", std::move(w));
        AdamState<float> state;
        AdamConfig<float> cfg;
        for (int step = 0; step < 25; ++step) {
            GradMap<float> grads;
            Tensor<float> gt({8});
            for (int i = 0; i < 8; ++i) gt[i] = static_cast<float>(rng.uniform(-1, 1));
            grads.emplace("w", std::move(gt));
            optimizer_step(ps, grads, state, cfg);
        }
        return ps.at("w").data;
    };
    CHECK(run() == run());
}

TEST_CASE("optimizer rejects shape mismatches and missing gradients") {
    ParamStore<float> ps;
    ps.add("w", Tensor<float>({2}, {1.0f, 2.0f}));
    AdamState<float> state;
    GradMap<float> wrong;
    wrong.emplace("w", Tensor<float>({3}));
    CHECK_THROWS_AS(optimizer_step(ps, wrong, state, AdamConfig<float>{}), ShapeError);
    GradMap<float> missing;
    CHECK_THROWS_AS(optimizer_step(ps, missing, state, AdamConfig<float>{}), std::out_of_range);
}

TEST_CASE("grad_check reports non-finite losses") {
    ParamStore<double> ps;
    ps.add("w", Tensor<double>({1}, {1.0}));
    auto f = [](const ParamStore<double>& p) {
        GradMap<double> g;
        g.emplace("w", Tensor<double>({1}, {1.0}));
        return std::make_pair(std::numeric_limits<double>::quiet_NaN(), g);
    };
    CHECK_THROWS_AS(grad_check<double>(f, ps, 1e-6), NumericError);
}

TEST_CASE("masks are constants: no gradient reaches mask-derived routing") {
    // gradient of a mask_rows output w.r.t. masked-out rows is exactly zero
    Graph<double> g;
    Tensor<double> t({3, 2}, {1, 2, 3, 4, 5, 6});
    Var x = g.leaf(t, true);
    ValidityMask m({3}, {1, 0, 1});
    Var y = g.mask_rows(x, m);
    g.backward(g.sum_all(y));
    const Tensor<double> gx = g.grad(x);
    CHECK(gx.at2(0, 0) == 1.0);
    CHECK(gx.at2(1, 0) == 0.0);
    CHECK(gx.at2(1, 1) == 0.0);
    CHECK(gx.at2(2, 1) == 1.0);
}
