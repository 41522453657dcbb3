#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "pvm/mask_rules.hpp"
#include "pvm/rng.hpp"

using namespace pvm;

namespace {
ValidityMask mask3x3_center_invalid() {
    ValidityMask m = ValidityMask::ones({3, 3});
    m.at2(1, 1) = 0;
    return m;
}
}  // namespace

TEST_CASE("receptive field: center-invalid 3x3, AllValid erodes everything") {
    // every 3x3 window (padding counts as invalid) touches the center hole
    // or the border, so all 9 outputs are invalid
    auto out = propagate_receptive_field(mask3x3_center_invalid(), KernelFootprint::square(3, 1, 1),
                                         ValidityRule::AllValid);
    CHECK(out.dims == Dims{3, 3});
    CHECK(out.count_valid() == 0);
}

TEST_CASE("receptive field: center-invalid 3x3, AnyValid keeps everything") {
    auto out = propagate_receptive_field(mask3x3_center_invalid(), KernelFootprint::square(3, 1, 1),
                                         ValidityRule::AnyValid);
    CHECK(out.all_valid());
}

TEST_CASE("receptive field: all-valid input with no padding stays valid under both rules") {
    const ValidityMask m = ValidityMask::ones({5, 6});
    for (auto rule : {ValidityRule::AllValid, ValidityRule::AnyValid}) {
        auto out = propagate_receptive_field(m, KernelFootprint::square(3, 1, 0), rule);
        CHECK(out.dims == Dims{3, 4});
        CHECK(out.all_valid());
    }
}

TEST_CASE("receptive field rejects footprints larger than the padded input") {
    CHECK_THROWS_AS(propagate_receptive_field(ValidityMask::ones({2, 2}),
                                              KernelFootprint::square(5, 1, 1),
                                              ValidityRule::AnyValid),
                    ShapeError);
}

TEST_CASE("1x1 kernel reduces to a strided crop of the input mask") {
    CounterRng rng(9);
    ValidityMask m({6, 7});
    for (auto& b : m.bits) b = rng.bernoulli(0.5) ? 1 : 0;
    for (auto rule : {ValidityRule::AllValid, ValidityRule::AnyValid}) {
        auto out = propagate_receptive_field(m, KernelFootprint(1, 1, 2, 0), rule);
        auto ref = oracle_receptive_field(m, KernelFootprint(1, 1, 2, 0), rule);
        CHECK(out.bits == ref.bits);
        for (int i = 0; i < out.dim(0); ++i)
            for (int j = 0; j < out.dim(1); ++j) CHECK(out.at2(i, j) == m.at2(2 * i, 2 * j));
    }
}

TEST_CASE("oracle equivalence on random masks and footprints") {
    CounterRng rng(1234);
    const int kernels[3] = {1, 3, 5};
    for (int trial = 0; trial < 300; ++trial) {
        const int h = rng.uniform_int(1, 16), w = rng.uniform_int(1, 16);
        KernelFootprint fp;
        for (;;) {
            const int k = kernels[rng.uniform_int(0, 2)];
            const int s = rng.uniform_int(1, 2);
            const int p = rng.uniform_int(0, 2);
            if (h + 2 * p >= k && w + 2 * p >= k) {
                fp = KernelFootprint(k, k, s, p);
                break;
            }
        }
        ValidityMask m({h, w});
        for (auto& b : m.bits) b = rng.bernoulli(rng.uniform(0.1, 0.9)) ? 1 : 0;
        for (auto rule : {ValidityRule::AllValid, ValidityRule::AnyValid}) {
            auto fast = propagate_receptive_field(m, fp, rule);
            auto slow = oracle_receptive_field(m, fp, rule);
            REQUIRE(fast.bits == slow.bits);
        }
    }
}

TEST_CASE("monotonicity: flipping a pixel valid never harms AnyValid or helps AllValid") {
    CounterRng rng(77);
    for (int trial = 0; trial < 50; ++trial) {
        ValidityMask m({8, 8});
        for (auto& b : m.bits) b = rng.uniform_int(0, 1);
        const KernelFootprint fp(3, 3, 1, 1);
        auto any0 = propagate_receptive_field(m, fp, ValidityRule::AnyValid);
        auto all0 = propagate_receptive_field(m, fp, ValidityRule::AllValid);
        ValidityMask m2 = m;
        const int idx = rng.uniform_int(0, 63);
        m2[idx] = 1;
        auto any1 = propagate_receptive_field(m2, fp, ValidityRule::AnyValid);
        auto all1 = propagate_receptive_field(m2, fp, ValidityRule::AllValid);
        for (int64_t i = 0; i < any0.numel(); ++i) {
            CHECK(any1[i] >= any0[i]);
            CHECK(all1[i] >= all0[i]);
        }
    }
}

TEST_CASE("duality: AllValid(m) equals NOT AnyValid(NOT m) for stride 1 and no padding") {
    CounterRng rng(78);
    for (int trial = 0; trial < 50; ++trial) {
        ValidityMask m({7, 9});
        for (auto& b : m.bits) b = rng.uniform_int(0, 1);
        const KernelFootprint fp(3, 3, 1, 0);
        auto all = propagate_receptive_field(m, fp, ValidityRule::AllValid);
        ValidityMask inv = m;
        for (auto& b : inv.bits) b = 1 - b;
        auto any_inv = propagate_receptive_field(inv, fp, ValidityRule::AnyValid);
        for (int64_t i = 0; i < all.numel(); ++i) CHECK(all[i] == 1 - any_inv[i]);
    }
}

TEST_CASE("dense rule on [1,1,0] and degenerate masks") {
    const ValidityMask m({3}, {1, 1, 0});
    CHECK_FALSE(propagate_dense(m, ValidityRule::AllValid));
    CHECK(propagate_dense(m, ValidityRule::AnyValid));

    CHECK_FALSE(propagate_dense(ValidityMask::zeros({4}), ValidityRule::AllValid));
    CHECK_FALSE(propagate_dense(ValidityMask::zeros({4}), ValidityRule::AnyValid));
    CHECK(propagate_dense(ValidityMask::ones({4}), ValidityRule::AllValid));
    CHECK(propagate_dense(ValidityMask::ones({4}), ValidityRule::AnyValid));
}

TEST_CASE("sequence rule: forward prefixes") {
    const ValidityMask m({3}, {1, 0, 1});
    auto all = propagate_sequence(m, ScanDirection::Forward, ValidityRule::AllValid);
    CHECK(all.bits == std::vector<uint8_t>{1, 0, 0});

    const ValidityMask m2({3}, {0, 0, 1});
    auto any = propagate_sequence(m2, ScanDirection::Forward, ValidityRule::AnyValid);
    CHECK(any.bits == std::vector<uint8_t>{0, 0, 1});
}

TEST_CASE("sequence rule: bidirectional history covers the whole sequence") {
    // one invalid token corrupts every bidirectional AllValid output
    const ValidityMask m({4}, {1, 1, 0, 1});
    auto out = propagate_sequence(m, ScanDirection::Bidirectional, ValidityRule::AllValid);
    CHECK(out.count_valid() == 0);

    auto any = propagate_sequence(m, ScanDirection::Bidirectional, ValidityRule::AnyValid);
    CHECK(any.all_valid());
}

TEST_CASE("sequence rules are idempotent") {
    CounterRng rng(79);
    for (int trial = 0; trial < 30; ++trial) {
        ValidityMask m({10});
        for (auto& b : m.bits) b = rng.uniform_int(0, 1);
        for (auto dir : {ScanDirection::Forward, ScanDirection::Backward,
                         ScanDirection::Bidirectional})
            for (auto rule : {ValidityRule::AllValid, ValidityRule::AnyValid}) {
                auto once = propagate_sequence(m, dir, rule);
                auto twice = propagate_sequence(once, dir, rule);
                CHECK(once.bits == twice.bits);
            }
    }
}

TEST_CASE("sequence rule rejects non-token input") {
    CHECK_THROWS_AS(propagate_sequence(ValidityMask::ones({2, 2}), ScanDirection::Forward,
                                       ValidityRule::AnyValid),
                    PreconditionError);
}

TEST_CASE("patchwise rule classifies patches") {
    ValidityMask m = ValidityMask::ones({4, 4});
    m.at2(0, 0) = 0;              // patch 0 partially invalid
    m.at2(2, 2) = m.at2(2, 3) = m.at2(3, 2) = m.at2(3, 3) = 0;  // patch 3 fully invalid
    auto any = patchwise_rule(m, 2, ValidityRule::AnyValid);
    CHECK(any.bits == std::vector<uint8_t>{1, 1, 1, 0});
    auto all = patchwise_rule(m, 2, ValidityRule::AllValid);
    CHECK(all.bits == std::vector<uint8_t>{0, 1, 1, 0});
}
