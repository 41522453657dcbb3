#include "pvm/verification.hpp"

#include <cstring>
#include <deque>
#include <sstream>

#include "pvm/models.hpp"
#include "pvm/rng.hpp"

namespace pvm {

namespace {

// ---- shared helpers ---------------------------------------------------------

ValidityMask random_mask(CounterRng& rng, int h, int w, double p_valid) {
    ValidityMask m({h, w});
    for (auto& b : m.bits) b = rng.bernoulli(p_valid) ? 1 : 0;
    return m;
}

template <typename T>
Tensor<T> random_tensor(CounterRng& rng, Dims dims, double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

/// Overwrites values at invalid positions (every channel) with fresh noise.
template <typename T>
void randomize_invalid(MaskedTensor<T>& x, CounterRng& rng) {
    const int64_t plane = x.mask.numel();
    const int channels = x.channels();
    for (int c = 0; c < channels; ++c)
        for (int64_t i = 0; i < plane; ++i)
            if (!x.mask[i]) x.values[c * plane + i] = static_cast<T>(rng.uniform(-5.0, 5.0));
}

template <typename T>
bool bits_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.dims == b.dims &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

bool bits_equal(const ValidityMask& a, const ValidityMask& b) {
    return a.dims == b.dims && a.bits == b.bits;
}

/// Chebyshev distance from each pixel to the nearest valid pixel
/// (multi-source BFS over the 8-neighborhood).
int max_chebyshev_to_valid(const ValidityMask& m) {
    const int h = m.dim(0), w = m.dim(1);
    std::vector<int> dist(static_cast<size_t>(h) * w, -1);
    std::deque<int> queue;
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            if (m.at2(i, j)) {
                dist[static_cast<size_t>(i) * w + j] = 0;
                queue.push_back(i * w + j);
            }
    int best = 0;
    while (!queue.empty()) {
        const int cur = queue.front();
        queue.pop_front();
        const int ci = cur / w, cj = cur % w;
        for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
                const int ni = ci + di, nj = cj + dj;
                if (ni < 0 || ni >= h || nj < 0 || nj >= w) continue;
                int& d = dist[static_cast<size_t>(ni) * w + nj];
                if (d < 0) {
                    d = dist[static_cast<size_t>(ci) * w + cj] + 1;
                    best = std::max(best, d);
                    queue.push_back(ni * w + nj);
                }
            }
    }
    return best;
}

SuiteResult make_result(const std::string& name, bool pass, const std::string& detail) {
    return SuiteResult{name, pass, detail};
}

// tiny model configs reused across suites
ClsConfig tiny_cls(Variant v) {
    ClsConfig c;
    c.image = 16;
    c.channels = 1;
    c.patch = 4;
    c.dim = 8;
    c.expansion = 2;
    c.state = 2;
    c.blocks = 1;
    c.classes = 4;
    c.variant = v;
    return c;
}

DepthConfig tiny_depth(Variant v) {
    DepthConfig c;
    c.image = 16;
    c.in_channels = 1;
    c.feat = 2;
    c.patch = 4;
    c.rpssb = 1;
    c.pvmm_per_block = 1;
    c.expansion = 2;
    c.state = 2;
    c.variant = v;
    return c;
}

template <typename T>
PvmParams<T> random_pvm_params(CounterRng& rng, int channels, int patch, int n) {
    const int d = channels * patch * patch;
    const int e = 2 * d;
    PvmParams<T> p;
    p.embed.patch = patch;
    p.embed.proj.weights = random_tensor<T>(rng, {d, d}, -0.4, 0.4);
    p.embed.proj.bias = random_tensor<T>(rng, {d}, -0.1, 0.1);
    p.mask_token = random_tensor<T>(rng, {d}, -0.5, 0.5);
    CounterRng block_rng(rng.next_u64());
    p.block = make_block_params<T>(d, e, n, block_rng);
    return p;
}

}  // namespace

// ---- suite: mask-oracle ------------------------------------------------------

SuiteResult suite_mask_oracle(int cases) {
    CounterRng rng(20240501);
    const int kernels[3] = {1, 3, 5};
    const int strides[2] = {1, 2};
    int ok = 0;
    for (int c = 0; c < cases; ++c) {
        const int h = rng.uniform_int(1, 32), w = rng.uniform_int(1, 32);
        KernelFootprint fp;
        for (;;) {
            const int k = kernels[rng.uniform_int(0, 2)];
            const int s = strides[rng.uniform_int(0, 1)];
            const int p = rng.uniform_int(0, 2);
            if (h + 2 * p >= k && w + 2 * p >= k) {
                fp = KernelFootprint(k, k, s, p);
                break;
            }
        }
        const ValidityRule rule = rng.bernoulli(0.5) ? ValidityRule::AllValid : ValidityRule::AnyValid;
        const ValidityMask m = random_mask(rng, h, w, rng.uniform(0.1, 0.9));
        if (bits_equal(propagate_receptive_field(m, fp, rule), oracle_receptive_field(m, fp, rule)))
            ++ok;
    }
    std::ostringstream detail;
    detail << ok << "/" << cases << " exact";
    return make_result("mask-oracle", ok == cases, detail.str());
}

// ---- suite: agnosticism -------------------------------------------------------

namespace {

struct AgnosticismCounts {
    int cases = 0;
    int identical = 0;
};

/// Runs one op twice with re-randomized placeholders and counts bit-equality.
template <typename MakeInput, typename RunOp>
AgnosticismCounts agnosticism_rounds(int iters, uint64_t seed, MakeInput&& make_input,
                                     RunOp&& run) {
    AgnosticismCounts counts;
    for (int i = 0; i < iters; ++i) {
        CounterRng rng(seed, static_cast<uint64_t>(i));
        auto input = make_input(rng);
        MaskedTensor<float> a = input;
        randomize_invalid(a, rng);
        MaskedTensor<float> b = input;
        randomize_invalid(b, rng);
        ++counts.cases;
        if (run(a, b)) ++counts.identical;
    }
    return counts;
}

MaskedTensor<float> random_masked_map(CounterRng& rng, int c, int h, int w, double p_valid) {
    MaskedTensor<float> x;
    x.values = random_tensor<float>(rng, {c, h, w});
    x.mask = random_mask(rng, h, w, p_valid);
    return x;
}

}  // namespace

SuiteResult suite_agnosticism(int iters) {
    std::ostringstream detail;
    bool pass = true;
    const auto report = [&](const std::string& op, const AgnosticismCounts& c, bool expect_pass) {
        const bool ok = expect_pass ? (c.identical == c.cases)
                                    : (c.cases - c.identical >= static_cast<int>(0.95 * c.cases));
        pass = pass && ok;
        detail << op << " " << (expect_pass ? c.identical : c.cases - c.identical) << "/"
               << c.cases << (expect_pass ? " identical" : " sensitive") << (ok ? "" : " [FAIL]")
               << "; ";
    };

    // pconv2d
    report("pconv2d",
           agnosticism_rounds(
               iters, 101,
               [](CounterRng& rng) {
                   return random_masked_map(rng, rng.uniform_int(1, 3), rng.uniform_int(5, 14),
                                            rng.uniform_int(5, 14), rng.uniform(0.2, 0.9));
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   CounterRng wrng(7, 7);
                   ConvParams<float> p;
                   const int k = 3;
                   p.footprint = KernelFootprint(k, k, 1, 1);
                   p.weights = random_tensor<float>(wrng, {2, a.values.dim(0), k, k});
                   p.bias = random_tensor<float>(wrng, {2});
                   const auto ya = pconv2d(a, p), yb = pconv2d(b, p);
                   return bits_equal(ya.values, yb.values) && bits_equal(ya.mask, yb.mask);
               }),
           true);

    // partial_linear
    report("partial_linear",
           agnosticism_rounds(
               iters, 102,
               [](CounterRng& rng) {
                   const int c = rng.uniform_int(1, 3), p = 2 * rng.uniform_int(1, 2);
                   return random_masked_map(rng, c, p, p, rng.uniform(0.2, 0.9));
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   CounterRng wrng(8, 8);
                   LinearParams<float> p;
                   const int in = a.values.dim(0) * a.values.dim(1) * a.values.dim(2);
                   p.weights = random_tensor<float>(wrng, {5, in});
                   p.bias = random_tensor<float>(wrng, {5});
                   const auto ya = partial_linear(a, p), yb = partial_linear(b, p);
                   return ya.second == yb.second && bits_equal(ya.first, yb.first);
               }),
           true);

    // partial_avg_pool2d
    report("partial_avg_pool2d",
           agnosticism_rounds(
               iters, 103,
               [](CounterRng& rng) {
                   return random_masked_map(rng, rng.uniform_int(1, 3), rng.uniform_int(4, 12),
                                            rng.uniform_int(4, 12), rng.uniform(0.2, 0.9));
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   const KernelFootprint fp(2, 2, 2, 0);
                   const auto ya = partial_avg_pool2d(a, fp), yb = partial_avg_pool2d(b, fp);
                   return bits_equal(ya.values, yb.values) && bits_equal(ya.mask, yb.mask);
               }),
           true);

    // partial_global_pool
    {
        AgnosticismCounts counts;
        for (int i = 0; i < iters; ++i) {
            CounterRng rng(104, static_cast<uint64_t>(i));
            const int L = rng.uniform_int(1, 12), D = rng.uniform_int(1, 8);
            TokenSequence<float> t;
            t.tokens = random_tensor<float>(rng, {L, D});
            t.token_mask = ValidityMask({L});
            for (auto& bit : t.token_mask.bits) bit = rng.bernoulli(0.6) ? 1 : 0;
            TokenSequence<float> u = t;
            for (int l = 0; l < L; ++l)
                if (!u.token_mask[l])
                    for (int j = 0; j < D; ++j)
                        u.tokens.at2(l, j) = static_cast<float>(rng.uniform(-5.0, 5.0));
            const auto ya = partial_global_pool(t), yb = partial_global_pool(u);
            ++counts.cases;
            if (ya.second == yb.second && bits_equal(ya.first, yb.first)) ++counts.identical;
        }
        report("partial_global_pool", counts, true);
    }

    // partial_patch_embed
    report("partial_patch_embed",
           agnosticism_rounds(
               iters, 105,
               [](CounterRng& rng) {
                   const int p = 4, g = rng.uniform_int(2, 4);
                   return random_masked_map(rng, rng.uniform_int(1, 2), p * g, p * g,
                                            rng.uniform(0.3, 0.9));
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   CounterRng wrng(9, 9);
                   PatchEmbedParams<float> p;
                   p.patch = 4;
                   const int in = a.values.dim(0) * 16;
                   p.proj.weights = random_tensor<float>(wrng, {6, in});
                   p.proj.bias = random_tensor<float>(wrng, {6});
                   const auto ya = partial_patch_embed(a, p), yb = partial_patch_embed(b, p);
                   return bits_equal(ya.tokens, yb.tokens) &&
                          bits_equal(ya.token_mask, yb.token_mask);
               }),
           true);

    // pvm_forward / pvm_residual
    for (const bool residual : {false, true}) {
        report(residual ? "pvm_residual" : "pvm_forward",
               agnosticism_rounds(
                   iters, residual ? 107 : 106,
                   [](CounterRng& rng) {
                       MaskedTensor<float> x = random_masked_map(rng, rng.uniform_int(1, 2), 8, 8,
                                                                 rng.uniform(0.3, 0.9));
                       if (!x.mask.any_valid()) x.mask.at2(3, 3) = 1;
                       return x;
                   },
                   [residual](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                       CounterRng wrng(10, 10);
                       PvmParams<float> p = random_pvm_params<float>(wrng, a.values.dim(0), 2, 2);
                       const auto ya = residual ? pvm_residual(a, p) : pvm_forward(a, p);
                       const auto yb = residual ? pvm_residual(b, p) : pvm_forward(b, p);
                       return bits_equal(ya.values, yb.values) && bits_equal(ya.mask, yb.mask);
                   }),
               true);
    }

    // cls_forward(pvm)
    {
        const ClsConfig cfg = tiny_cls(Variant::Pvm);
        ParamStore<float> params;
        register_cls_params(params, cfg, 2024);
        report("cls_forward(pvm)",
               agnosticism_rounds(
                   iters, 108,
                   [&](CounterRng& rng) {
                       MaskedTensor<float> x =
                           random_masked_map(rng, 1, cfg.image, cfg.image, rng.uniform(0.3, 0.8));
                       if (!x.mask.any_valid()) x.mask.at2(0, 0) = 1;
                       return x;
                   },
                   [&](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                       const auto ya = cls_forward(a, cfg, params), yb = cls_forward(b, cfg, params);
                       return bits_equal(ya.first, yb.first);
                   }),
               true);
    }

    // dc_forward(pvm)
    {
        const DepthConfig cfg = tiny_depth(Variant::Pvm);
        ParamStore<float> params;
        register_depth_params(params, cfg, 2025);
        report("dc_forward(pvm)",
               agnosticism_rounds(
                   iters, 109,
                   [&](CounterRng& rng) {
                       MaskedTensor<float> x =
                           random_masked_map(rng, 1, cfg.image, cfg.image, rng.uniform(0.1, 0.5));
                       if (!x.mask.any_valid()) x.mask.at2(0, 0) = 1;
                       return x;
                   },
                   [&](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                       const auto ya = dc_forward(a, cfg, params), yb = dc_forward(b, cfg, params);
                       return bits_equal(ya.pred, yb.pred);
                   }),
               true);
    }

    // std_conv2d_masked must be placeholder-sensitive
    report("std_conv2d_masked",
           agnosticism_rounds(
               iters, 110,
               [](CounterRng& rng) {
                   MaskedTensor<float> x = random_masked_map(rng, rng.uniform_int(1, 2),
                                                             rng.uniform_int(5, 12),
                                                             rng.uniform_int(5, 12),
                                                             rng.uniform(0.3, 0.8));
                   // keep at least one invalid pixel under some tap
                   bool any_invalid = false;
                   for (auto b : x.mask.bits) any_invalid = any_invalid || !b;
                   if (!any_invalid) x.mask.at2(1, 1) = 0;
                   return x;
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   CounterRng wrng(11, 11);
                   ConvParams<float> p;
                   p.footprint = KernelFootprint(3, 3, 1, 1);
                   p.weights = random_tensor<float>(wrng, {2, a.values.dim(0), 3, 3});
                   p.bias = random_tensor<float>(wrng, {2});
                   const auto ya = std_conv2d_masked(a, p), yb = std_conv2d_masked(b, p);
                   return bits_equal(ya.values, yb.values);
               }),
           false);

    // vm_forward must be placeholder-sensitive on partially invalid patches
    report("vm_forward",
           agnosticism_rounds(
               iters, 111,
               [](CounterRng& rng) {
                   MaskedTensor<float> x = random_masked_map(rng, 1, 8, 8, rng.uniform(0.3, 0.8));
                   // ensure a partially invalid patch at patch size 2
                   x.mask.at2(0, 0) = 1;
                   x.mask.at2(0, 1) = 0;
                   return x;
               },
               [](const MaskedTensor<float>& a, const MaskedTensor<float>& b) {
                   CounterRng wrng(12, 12);
                   PvmParams<float> p = random_pvm_params<float>(wrng, 1, 2, 2);
                   const auto ya = vm_forward(a, p), yb = vm_forward(b, p);
                   return bits_equal(ya.values, yb.values);
               }),
           false);

    return make_result("agnosticism", pass, detail.str());
}

// ---- suite: all-valid reductions ---------------------------------------------

SuiteResult suite_all_valid(int cases) {
    CounterRng rng(30303);
    double worst = 0.0;
    bool pass = true;
    std::ostringstream detail;

    const auto track = [&](double delta) {
        worst = std::max(worst, delta);
        if (!(delta <= 1e-6)) pass = false;
    };

    for (int c = 0; c < cases; ++c) {
        // pconv2d == conv2d; padding 0 keeps every window fully in bounds so
        // the renormalization factor is exactly 1 (with padding the border
        // windows are deliberately rescaled and the identity does not hold)
        {
            const int ch = rng.uniform_int(1, 3), h = rng.uniform_int(5, 10), w = rng.uniform_int(5, 10);
            MaskedTensor<float> x;
            x.values = random_tensor<float>(rng, {ch, h, w});
            x.mask = ValidityMask::ones({h, w});
            ConvParams<float> p;
            p.footprint = KernelFootprint(3, 3, 1, 0);
            p.weights = random_tensor<float>(rng, {2, ch, 3, 3}, -0.3, 0.3);
            p.bias = random_tensor<float>(rng, {2}, -0.3, 0.3);
            const auto y = pconv2d(x, p);
            const auto ref = kern::conv2d_forward(x.values, p.weights, p.bias, p.footprint);
            for (int64_t i = 0; i < ref.numel(); ++i)
                track(std::abs(static_cast<double>(y.values[i]) - static_cast<double>(ref[i])));
        }
        // partial_linear == linear
        {
            const int ch = rng.uniform_int(1, 2), pp = 4;
            MaskedTensor<float> patch;
            patch.values = random_tensor<float>(rng, {ch, pp, pp});
            patch.mask = ValidityMask::ones({pp, pp});
            LinearParams<float> lp;
            const int in = ch * pp * pp;
            lp.weights = random_tensor<float>(rng, {3, in});
            lp.bias = random_tensor<float>(rng, {3});
            const auto [tok, valid] = partial_linear(patch, lp);
            for (int o = 0; o < 3; ++o) {
                double ref = lp.bias[o];
                for (int i = 0; i < in; ++i) ref += static_cast<double>(lp.weights.at2(o, i)) *
                                                    static_cast<double>(patch.values[i]);
                track(std::abs(static_cast<double>(tok[o]) - ref));
            }
            if (!valid) pass = false;
        }
        // partial_avg_pool2d == avg pooling
        {
            const int ch = rng.uniform_int(1, 2), h = 8, w = 8;
            MaskedTensor<float> x;
            x.values = random_tensor<float>(rng, {ch, h, w});
            x.mask = ValidityMask::ones({h, w});
            const KernelFootprint fp(2, 2, 2, 0);
            const auto y = partial_avg_pool2d(x, fp);
            for (int cc = 0; cc < ch; ++cc)
                for (int oi = 0; oi < 4; ++oi)
                    for (int oj = 0; oj < 4; ++oj) {
                        double ref = 0;
                        for (int u = 0; u < 2; ++u)
                            for (int v = 0; v < 2; ++v)
                                ref += x.values.at3(cc, oi * 2 + u, oj * 2 + v);
                        track(std::abs(static_cast<double>(y.values.at3(cc, oi, oj)) - ref / 4.0));
                    }
        }
        // partial_global_pool == mean
        {
            const int L = rng.uniform_int(1, 10), D = rng.uniform_int(1, 6);
            TokenSequence<float> t;
            t.tokens = random_tensor<float>(rng, {L, D});
            t.token_mask = ValidityMask::ones({L});
            const auto [mean, valid] = partial_global_pool(t);
            for (int j = 0; j < D; ++j) {
                double ref = 0;
                for (int l = 0; l < L; ++l) ref += t.tokens.at2(l, j);
                track(std::abs(static_cast<double>(mean[j]) - ref / L));
            }
            if (!valid) pass = false;
        }
        // pvm_forward == vm_forward weight-for-weight on fully valid input
        {
            CounterRng wrng(rng.next_u64());
            PvmParams<float> p = random_pvm_params<float>(wrng, 1, 2, 2);
            MaskedTensor<float> x;
            x.values = random_tensor<float>(rng, {1, 6, 6});
            x.mask = ValidityMask::ones({6, 6});
            const auto ya = pvm_forward(x, p);
            const auto yb = vm_forward(x, p);
            for (int64_t i = 0; i < ya.values.numel(); ++i)
                track(std::abs(static_cast<double>(ya.values[i]) -
                               static_cast<double>(yb.values[i])));
        }
    }

    // cls variants agree weight-for-weight on fully valid inputs
    {
        const ClsConfig pcfg = tiny_cls(Variant::Pvm);
        const ClsConfig vcfg = tiny_cls(Variant::Vm);
        ParamStore<float> pparams;
        register_cls_params(pparams, pcfg, 77);
        ParamStore<float> vparams;
        register_cls_params(vparams, vcfg, 77);  // same per-name streams -> same shared weights
        MaskedTensor<float> x;
        x.values = random_tensor<float>(rng, {1, pcfg.image, pcfg.image}, 0.0, 1.0);
        x.mask = ValidityMask::ones({pcfg.image, pcfg.image});
        const auto yp = cls_forward(x, pcfg, pparams);
        const auto yv = cls_forward(x, vcfg, vparams);
        for (int64_t i = 0; i < yp.first.numel(); ++i)
            track(std::abs(static_cast<double>(yp.first[i]) - static_cast<double>(yv.first[i])));
    }

    std::ostringstream d;
    d << cases << " cases per op, max |delta| = " << worst;
    return make_result("all-valid", pass, d.str());
}

// ---- suite: gradient checks ----------------------------------------------------

namespace {

using CheckFn = std::function<Var(Graph<double>&, const ParamBinding<double>&, CounterRng&)>;

/// Checks d(weighted sum of op output)/d(inputs) against central differences.
double check_primitive(const ParamStore<double>& inputs, const CheckFn& build, uint64_t seed) {
    CounterRng weight_rng(seed, 999);
    auto f = [&](const ParamStore<double>& ps) {
        Graph<double> g;
        ParamBinding<double> bind(g, ps, true);
        CounterRng rng(seed, 1234);  // per-call op randomness must be identical
        Var out = build(g, bind, rng);
        Var loss;
        if (g.val(out).numel() == 1) {
            loss = out;
        } else {
            CounterRng wr = weight_rng;
            Tensor<double> wts(g.val(out).dims);
            for (auto& v : wts.data) v = wr.uniform(-1.0, 1.0);
            loss = g.sum_all(g.cmul(out, std::move(wts)));
        }
        g.backward(loss);
        return std::make_pair(g.val(loss)[0], bind.grads());
    };
    return grad_check<double>(f, inputs, 1e-6).max_rel_err;
}

}  // namespace

SuiteResult suite_grad_checks(int instantiations) {
    bool pass = true;
    std::ostringstream detail;
    double suite_worst = 0.0;

    const auto run = [&](const std::string& op, double tol,
                         const std::function<double(CounterRng&)>& one) {
        double worst = 0.0;
        CounterRng rng(init::name_stream(op));
        for (int i = 0; i < instantiations; ++i) worst = std::max(worst, one(rng));
        suite_worst = std::max(suite_worst, worst);
        const bool ok = worst <= tol;
        pass = pass && ok;
        detail << op << " " << worst << (ok ? "" : " [FAIL]") << "; ";
    };

    const auto simple_inputs = [](CounterRng& rng, std::initializer_list<std::pair<const char*, Dims>> specs) {
        ParamStore<double> ps;
        for (const auto& [name, dims] : specs) {
            Tensor<double> t(dims);
            for (auto& v : t.data) v = rng.uniform(-1.0, 1.0);
            ps.add(name, std::move(t));
        }
        return ps;
    };

    run("add", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {3, 4}}, {"b", {3, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.add(b["a"], b["b"]);
        }, rng.next_u64());
    });
    run("mul", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {3, 4}}, {"b", {3, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.mul(b["a"], b["b"]);
        }, rng.next_u64());
    });
    run("scale", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {5}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.scale(b["a"], 1.7);
        }, rng.next_u64());
    });
    run("cmul", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {2, 6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            Tensor<double> c({2, 6});
            for (auto& v : c.data) v = r.uniform(-2.0, 2.0);
            return g.cmul(b["a"], std::move(c));
        }, rng.next_u64());
    });
    run("mask_rows", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {5, 3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({5});
            for (auto& bit : m.bits) bit = r.bernoulli(0.6) ? 1 : 0;
            return g.mask_rows(b["a"], m);
        }, rng.next_u64());
    });
    run("mask_spatial", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {2, 3, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({3, 4});
            for (auto& bit : m.bits) bit = r.bernoulli(0.6) ? 1 : 0;
            return g.mask_spatial(b["a"], m);
        }, rng.next_u64());
    });
    run("matmul", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {3, 4}}, {"b", {4, 5}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.matmul(b["a"], b["b"]);
        }, rng.next_u64());
    });
    run("matmul_nt", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {3, 4}}, {"b", {5, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.matmul_nt(b["a"], b["b"]);
        }, rng.next_u64());
    });
    run("add_rowvec", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {4, 3}}, {"b", {3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.add_rowvec(b["x"], b["b"]);
        }, rng.next_u64());
    });
    run("add_chvec", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {3, 2, 4}}, {"b", {3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.add_chvec(b["x"], b["b"]);
        }, rng.next_u64());
    });
    run("reshape", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {2, 6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.reshape(b["a"], {3, 4});
        }, rng.next_u64());
    });
    run("gather", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {8}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            auto idx = std::make_shared<std::vector<int64_t>>();
            for (int i = 0; i < 10; ++i) idx->push_back(r.uniform_int(0, 7));
            return g.gather(b["a"], idx, {10});
        }, rng.next_u64());
    });
    run("substitute_rows", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"t", {5, 3}}, {"tau", {3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({5});
            for (auto& bit : m.bits) bit = r.bernoulli(0.5) ? 1 : 0;
            return g.substitute_rows(b["t"], m, b["tau"]);
        }, rng.next_u64());
    });
    run("sum_all", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {3, 3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.sum_all(b["a"]);
        }, rng.next_u64());
    });
    run("masked_mean_rows", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {6, 3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({6});
            for (auto& bit : m.bits) bit = r.bernoulli(0.5) ? 1 : 0;
            if (!m.any_valid()) m[0] = 1;
            return g.masked_mean_rows(b["a"], m);
        }, rng.next_u64());
    });
    run("mean_fill_patches", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {2, 4, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({4, 4});
            for (auto& bit : m.bits) bit = r.bernoulli(0.6) ? 1 : 0;
            return g.mean_fill_patches(b["x"], m, 2);
        }, rng.next_u64());
    });
    run("softplus", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {7}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.softplus(b["a"]);
        }, rng.next_u64());
    });
    run("exp", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {7}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.exp(b["a"]);
        }, rng.next_u64());
    });
    run("sigmoid", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {7}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.sigmoid(b["a"]);
        }, rng.next_u64());
    });
    run("silu", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {7}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.silu(b["a"]);
        }, rng.next_u64());
    });
    run("layer_norm", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {4, 6}}, {"gamma", {6}}, {"beta", {6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.layer_norm(b["x"], b["gamma"], b["beta"]);
        }, rng.next_u64());
    });
    run("conv2d", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {2, 5, 6}}, {"w", {3, 2, 3, 3}}, {"b", {3}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.conv2d(b["x"], b["w"], b["b"], KernelFootprint(3, 3, 2, 1));
        }, rng.next_u64());
    });
    run("maxpool2d", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {2, 6, 6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.maxpool2d(b["x"], KernelFootprint(2, 2, 2, 0));
        }, rng.next_u64());
    });
    run("slice_cols", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {4, 8}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.slice_cols(b["x"], 2, 4);
        }, rng.next_u64());
    });
    run("concat_ch", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"a", {2, 3, 4}}, {"b", {1, 3, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng&) {
            return g.concat_ch(b["a"], b["b"]);
        }, rng.next_u64());
    });
    run("avg_pool_masked", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"x", {2, 6, 6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            ValidityMask m({6, 6});
            for (auto& bit : m.bits) bit = r.bernoulli(0.6) ? 1 : 0;
            return g.avg_pool_masked(b["x"], m, KernelFootprint(3, 3, 1, 1));
        }, rng.next_u64());
    });
    run("charbonnier", 1e-4, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"pred", {1, 4, 4}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            Tensor<double> gt({1, 4, 4});
            for (auto& v : gt.data) v = r.uniform(-1.0, 1.0);
            ValidityMask m({4, 4});
            for (auto& bit : m.bits) bit = r.bernoulli(0.7) ? 1 : 0;
            if (!m.any_valid()) m[0] = 1;
            return g.charbonnier(b["pred"], std::move(gt), m, 1e-3);
        }, rng.next_u64());
    });
    run("cross_entropy", 1e-7, [&](CounterRng& rng) {
        auto ps = simple_inputs(rng, {{"logits", {6}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            return g.cross_entropy(b["logits"], r.uniform_int(0, 5));
        }, rng.next_u64());
    });
    run("selective_scan", 1e-4, [&](CounterRng& rng) {
        const int L = 8, E = 2, N = 2;
        auto ps = simple_inputs(rng, {{"u", {L, E}},
                                      {"a_log", {E, N}},
                                      {"w_b", {N, E}},
                                      {"w_c", {N, E}},
                                      {"w_dt", {E, E}},
                                      {"dt_bias", {E}},
                                      {"d_skip", {E}}});
        return check_primitive(ps, [](Graph<double>& g, const ParamBinding<double>& b, CounterRng& r) {
            return g.selective_scan(b["u"], b["a_log"], b["w_b"], b["w_c"], b["w_dt"],
                                    b["dt_bias"], b["d_skip"], r.bernoulli(0.5));
        }, rng.next_u64());
    });

    // end-to-end tiny classification model
    {
        const ClsConfig cfg = [&] {
            ClsConfig c = tiny_cls(Variant::Pvm);
            c.image = 8;
            c.patch = 4;
            c.classes = 3;
            return c;
        }();
        ParamStore<double> params;
        register_cls_params(params, cfg, 31);
        CounterRng rng(32);
        MaskedTensor<double> x;
        x.values = random_tensor<double>(rng, {1, cfg.image, cfg.image}, 0.0, 1.0);
        x.mask = random_mask(rng, cfg.image, cfg.image, 0.6);
        if (!x.mask.any_valid()) x.mask.at2(0, 0) = 1;
        zero_invalid(x);
        auto f = [&](const ParamStore<double>& ps) {
            Graph<double> g;
            ParamBinding<double> bind(g, ps, true);
            auto out = ops::tape_cls_forward(g, cfg, bind, g.constant(x.values), x.mask);
            Var loss = g.cross_entropy(out.logits, 1);
            g.backward(loss);
            return std::make_pair(g.val(loss)[0], bind.grads());
        };
        const auto res = grad_check<double>(f, params, 1e-6);
        suite_worst = std::max(suite_worst, res.max_rel_err);
        const bool ok = res.max_rel_err <= 1e-3;
        pass = pass && ok;
        detail << "cls-end-to-end " << res.max_rel_err << (ok ? "" : " [FAIL]") << "; ";
    }

    // exact-zero gradients at invalid input positions through partial paths
    {
        bool zeros_ok = true;
        CounterRng rng(987);
        for (int i = 0; i < instantiations; ++i) {
            MaskedTensor<double> x;
            x.values = random_tensor<double>(rng, {1, 8, 8});
            x.mask = random_mask(rng, 8, 8, 0.5);
            if (!x.mask.any_valid()) x.mask.at2(4, 4) = 1;
            CounterRng wrng(rng.next_u64());
            PvmParams<double> p = random_pvm_params<double>(wrng, 1, 2, 2);

            Graph<double> g;
            Var xv = g.leaf(x.values, true);
            ops::PvmVars v = bind_pvm_consts(g, p);
            Var y = ops::tape_pvm_residual(g, xv, x.mask, p.embed.patch, v);
            Tensor<double> wts(g.val(y).dims);
            for (auto& val : wts.data) val = rng.uniform(-1.0, 1.0);
            Var loss = g.sum_all(g.cmul(y, std::move(wts)));
            g.backward(loss);
            const Tensor<double> gx = g.grad(xv);
            for (int64_t j = 0; j < x.mask.numel(); ++j)
                if (!x.mask[j] && gx[j] != 0.0) zeros_ok = false;
        }
        pass = pass && zeros_ok;
        detail << "invalid-grad-zero " << (zeros_ok ? "exact" : "[FAIL]");
    }

    std::ostringstream d;
    d << "worst rel err " << suite_worst << " | " << detail.str();
    return make_result("grad", pass, d.str());
}

// ---- suite: fill termination ----------------------------------------------------

SuiteResult suite_fill(int cases) {
    CounterRng rng(40404);
    bool pass = true;
    int worst_iters = 0;
    for (int c = 0; c < cases && pass; ++c) {
        const int h = rng.uniform_int(4, 64), w = rng.uniform_int(4, 64);
        ValidityMask m = random_mask(rng, h, w, rng.uniform(0.02, 0.6));
        if (!m.any_valid()) m.at2(rng.uniform_int(0, h - 1), rng.uniform_int(0, w - 1)) = 1;
        MaskedTensor<float> x;
        x.values = random_tensor<float>(rng, {2, h, w});
        x.mask = m;
        zero_invalid(x);
        ConvParams<float> p;
        p.footprint = KernelFootprint(3, 3, 1, 1);
        p.weights = random_tensor<float>(rng, {2, 2, 3, 3});
        p.bias = random_tensor<float>(rng, {2});
        const int bound = max_chebyshev_to_valid(m);  // radius grows by 1 per pass
        const auto [filled, iters] = fill_until_valid(x, p, 256);
        worst_iters = std::max(worst_iters, iters);
        if (!filled.mask.all_valid() || iters > bound) pass = false;
    }

    // single valid pixel at the center of a 5x5 map needs exactly 2 passes
    {
        ValidityMask m({5, 5});
        m.at2(2, 2) = 1;
        MaskedTensor<float> x;
        x.values = Tensor<float>({1, 5, 5});
        x.values.at3(0, 2, 2) = 3.0f;
        x.mask = m;
        ConvParams<float> p;
        p.footprint = KernelFootprint(3, 3, 1, 1);
        p.weights = init::full<float>({1, 1, 3, 3}, 1.0f / 9.0f);
        p.bias = Tensor<float>({1});
        const auto [filled, iters] = fill_until_valid(x, p, 16);
        if (iters != 2 || !filled.mask.all_valid()) pass = false;
    }

    std::ostringstream d;
    d << cases << " random cases within the Chebyshev bound (max passes " << worst_iters
      << "); center-pixel case takes exactly 2";
    return make_result("fill", pass, d.str());
}

// ---- dispatch ---------------------------------------------------------------------

std::vector<std::string> suite_names() {
    return {"mask-oracle", "agnosticism", "all-valid", "grad", "fill"};
}

SuiteResult run_suite(const std::string& name) {
    if (name == "mask-oracle") return suite_mask_oracle();
    if (name == "agnosticism") return suite_agnosticism();
    if (name == "all-valid") return suite_all_valid();
    if (name == "grad") return suite_grad_checks();
    if (name == "fill") return suite_fill();
    throw std::out_of_range("unknown suite '" + name + "'");
}

std::vector<SuiteResult> run_all_suites() {
    std::vector<SuiteResult> out;
    for (const auto& name : suite_names()) out.push_back(run_suite(name));
    return out;
}

}  // namespace pvm
