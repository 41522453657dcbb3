#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pvm/autodiff.hpp"
#include "pvm/datagen.hpp"

using namespace pvm;

TEST_CASE("gen_mask is a pure function of policy, seed and stream") {
    for (auto kind : {MaskPolicyKind::BrushGrid, MaskPolicyKind::Regime,
                      MaskPolicyKind::SparseSample}) {
        MaskPolicy p;
        p.kind = kind;
        p.seed = 99;
        auto a = gen_mask(p, 64, 64, 3);
        auto b = gen_mask(p, 64, 64, 3);
        CHECK(a.bits == b.bits);
        auto c = gen_mask(p, 64, 64, 4);
        CHECK(a.bits != c.bits);
    }
}

TEST_CASE("regime masks land exactly in their bands") {
    for (auto regime : {MaskRegime::Easy, MaskRegime::Hard, MaskRegime::Extreme}) {
        const auto [lo, hi] = regime_band(regime);
        for (uint64_t stream = 0; stream < 24; ++stream) {
            auto m = gen_mask(MaskPolicy::regime_policy(regime, 5), 64, 64, stream);
            const double f = invalid_fraction(m);
            CHECK(f >= lo);
            CHECK(f < hi);
            CHECK(m.any_valid());
        }
    }
    // larger easy case mirrors the documented 256x256 check
    auto big = gen_mask(MaskPolicy::regime_policy(MaskRegime::Easy, 6), 256, 256, 0);
    CHECK(invalid_fraction(big) >= 0.25);
    CHECK(invalid_fraction(big) < 0.50);
}

TEST_CASE("infeasible regime bands are rejected") {
    // a 1x2 mask cannot reach an invalid fraction in [0.75, 0.90)
    CHECK_THROWS_AS(gen_mask(MaskPolicy::regime_policy(MaskRegime::Extreme, 1), 1, 2),
                    PreconditionError);
}

TEST_CASE("sparse masks stay near their density and never go all-invalid") {
    MaskPolicy p = MaskPolicy::sparse(0.05, 7);
    double total = 0;
    for (uint64_t s = 0; s < 16; ++s) {
        auto m = gen_mask(p, 64, 64, s);
        CHECK(m.any_valid());
        total += static_cast<double>(m.count_valid());
    }
    // 3 sigma around 4096 * 0.05 = 204.8 per mask
    const double mean_count = total / 16.0;
    const double sigma = std::sqrt(4096 * 0.05 * 0.95);
    CHECK(mean_count > 204.8 - 3 * sigma);
    CHECK(mean_count < 204.8 + 3 * sigma);

    // zero density still yields a usable mask
    auto m0 = gen_mask(MaskPolicy::sparse(0.0, 8), 8, 8, 0);
    CHECK(m0.count_valid() == 1);
}

TEST_CASE("brush-grid masks keep one fully valid patch per cell and sit in the band") {
    MaskPolicy p = MaskPolicy::brush_grid(11, 96, 3, 2, 5, 4);
    for (uint64_t s = 0; s < 12; ++s) {
        auto m = gen_mask(p, 32, 32, s);  // crop clamps to 32: one cell
        const double f = invalid_fraction(m);
        CHECK(f >= p.band_lo);
        CHECK(f < p.band_hi);
        bool has_valid_patch = false;
        for (int i = 0; i + 4 <= 32 && !has_valid_patch; i += 4)
            for (int j = 0; j + 4 <= 32 && !has_valid_patch; j += 4) {
                bool all = true;
                for (int u = 0; u < 4 && all; ++u)
                    for (int v = 0; v < 4 && all; ++v) all = m.at2(i + u, j + v);
                has_valid_patch = all;
            }
        CHECK(has_valid_patch);
    }

    // multiple cells on a larger canvas
    auto big = gen_mask(p, 192, 96, 0);
    CHECK(big.any_valid());
    for (int ci = 0; ci < 2; ++ci) {
        bool has_valid_patch = false;
        for (int i = ci * 96; i + 4 <= (ci + 1) * 96 && !has_valid_patch; i += 4)
            for (int j = 0; j + 4 <= 96 && !has_valid_patch; j += 4) {
                bool all = true;
                for (int u = 0; u < 4 && all; ++u)
                    for (int v = 0; v < 4 && all; ++v) all = big.at2(i + u, j + v);
                has_valid_patch = all;
            }
        CHECK(has_valid_patch);
    }
}

TEST_CASE("depth fields are clipped to [1, 80] and masked to exact zeros") {
    DepthFieldSpec spec;
    spec.seed = 21;
    for (uint64_t i = 0; i < 6; ++i) {
        DepthSample s = gen_depth_field(spec, i);
        for (float v : s.gt.data) {
            CHECK(v >= 1.0f);
            CHECK(v <= 80.0f);
        }
        for (int64_t j = 0; j < s.sparse_in.mask.numel(); ++j) {
            if (s.sparse_in.mask[j])
                CHECK(s.sparse_in.values[j] == s.gt[j]);
            else
                CHECK(s.sparse_in.values[j] == 0.0f);
        }
        CHECK(s.sparse_in.mask.any_valid());
    }
}

TEST_CASE("depth fields differ across seeds at most pixels") {
    DepthFieldSpec a;
    a.seed = 1;
    DepthFieldSpec b;
    b.seed = 2;
    const DepthSample sa = gen_depth_field(a, 0);
    const DepthSample sb = gen_depth_field(b, 0);
    int64_t diff = 0;
    for (int64_t i = 0; i < sa.gt.numel(); ++i)
        if (sa.gt[i] != sb.gt[i]) ++diff;
    CHECK(diff > sa.gt.numel() / 2);

    // identical spec regenerates bit-identically
    const DepthSample sc = gen_depth_field(a, 0);
    CHECK(sc.gt.data == sa.gt.data);
    CHECK(sc.sparse_in.mask.bits == sa.sparse_in.mask.bits);
}

TEST_CASE("shapes dataset: balance, determinism, range") {
    ShapesSpec spec;
    spec.seed = 31;
    std::vector<int> counts(10, 0);
    for (uint64_t i = 0; i < 100; ++i) {
        ShapeSample s = gen_shape_sample(spec, i);
        ++counts[s.label];
        for (float v : s.image.data) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
    for (int c : counts) CHECK(c == 10);  // exact balance when count % classes == 0

    const ShapeSample a = gen_shape_sample(spec, 17);
    const ShapeSample b = gen_shape_sample(spec, 17);
    CHECK(a.image.data == b.image.data);
    CHECK(std::string(shape_class_name(a.label)).size() > 0);
}

TEST_CASE("a linear probe on raw pixels beats chance on clean shapes") {
    ShapesSpec spec;
    spec.seed = 41;
    const int train_n = 400, test_n = 100, classes = 10, dim = 32 * 32;

    ParamStore<float> ps;
    ps.add("w", Tensor<float>({classes, dim}));
    ps.add("b", Tensor<float>({classes}));
    AdamState<float> state;
    AdamConfig<float> cfg;
    cfg.lr = 0.05f;

    for (int epoch = 0; epoch < 4; ++epoch) {
        for (int i = 0; i < train_n; ++i) {
            ShapeSample s = gen_shape_sample(spec, static_cast<uint64_t>(i));
            Graph<float> g;
            ParamBinding<float> bind(g, ps, true);
            Var x = g.constant(Tensor<float>({1, dim}, s.image.data));
            Var logits = g.reshape(
                g.add_rowvec(g.matmul_nt(x, bind["w"]), bind["b"]), {classes});
            Var loss = g.cross_entropy(logits, s.label);
            g.backward(loss);
            optimizer_step(ps, bind.grads(), state, cfg);
        }
    }

    int hits = 0;
    for (int i = 0; i < test_n; ++i) {
        ShapeSample s = gen_shape_sample(spec, static_cast<uint64_t>(10000 + i));
        Graph<float> g;
        ParamBinding<float> bind(g, ps, false);
        Var x = g.constant(Tensor<float>({1, dim}, s.image.data));
        Var logits = g.reshape(g.add_rowvec(g.matmul_nt(x, bind["w"]), bind["b"]), {classes});
        const Tensor<float>& lv = g.val(logits);
        int arg = 0;
        for (int c = 1; c < classes; ++c)
            if (lv[c] > lv[arg]) arg = c;
        if (arg == s.label) ++hits;
    }
    CHECK(hits > 15);  // chance is 10/100
}
