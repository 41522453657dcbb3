#pragma once

#include <cstring>

#include "pvm/pvm_block.hpp"

namespace pvm {

enum class Variant { Pvm, Vm };

inline const char* variant_name(Variant v) { return v == Variant::Pvm ? "pvm" : "vm"; }

/// Shape-classification model: PConv patch stem, residual token-level PVM
/// blocks, partial global pooling, linear head.
struct ClsConfig {
    int image = 32;
    int channels = 1;
    int patch = 4;
    int dim = 64;        // token width D
    int expansion = 2;   // E = expansion * dim
    int state = 8;       // N
    int blocks = 2;
    int classes = 10;
    Variant variant = Variant::Pvm;
    TokenPadding padding = TokenPadding::Learned;
    bool substitute_before_norm = true;

    int e() const { return expansion * dim; }
    int tokens() const { return (image / patch) * (image / patch); }
    void validate() const {
        if (image % patch != 0) throw ShapeError("cls: image size must be divisible by patch");
        if (blocks < 1 || classes < 2 || dim < 1) throw ShapeError("cls: degenerate config");
    }
};

/// Depth-completion model: PConv shallow extractor, a stack of residual
/// partial state-space blocks (two PVM modules + PConv each) sharing the
/// input mask, shallow/deep concatenation, iterative filling, conv head.
struct DepthConfig {
    int image = 64;
    int in_channels = 1;  // 3 for color-coded geometry inputs
    int feat = 4;         // trunk feature channels
    int patch = 4;        // PVM module patch size; token width = feat*patch^2
    int rpssb = 6;
    int pvmm_per_block = 2;
    int expansion = 2;
    int state = 8;
    int fill_kernel = 3;
    int fill_max_iters = 128;
    float head_bias_init = 40.0f;  // output-scale mean; meters for depth data
    Variant variant = Variant::Pvm;
    TokenPadding padding = TokenPadding::Learned;
    bool substitute_before_norm = true;

    int dim() const { return feat * patch * patch; }
    int e() const { return expansion * dim(); }
    void validate() const {
        if (image % patch != 0) throw ShapeError("depth: image size must be divisible by patch");
        if (rpssb < 1 || pvmm_per_block < 1) throw ShapeError("depth: block counts must be >= 1");
        if (fill_kernel % 2 == 0) throw ShapeError("depth: filling kernel must be odd");
    }
};

// ---- parameter initialization --------------------------------------------

namespace init {

inline uint64_t name_stream(const std::string& name) {
    uint64_t h = 1469598103934665603ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

/// Per-name rng stream: initialization is independent of registration order.
inline CounterRng param_rng(uint64_t seed, const std::string& name) {
    return CounterRng(seed, name_stream(name));
}

template <typename T>
void add_xavier(ParamStore<T>& ps, uint64_t seed, const std::string& name, Dims dims, int fan_in,
                int fan_out, T gain = T(1)) {
    CounterRng rng = param_rng(seed, name);
    Tensor<T> t = xavier<T>(std::move(dims), fan_in, fan_out, rng);
    if (gain != T(1))
        for (auto& v : t.data) v *= gain;
    ps.add(name, std::move(t));
}

/// Near-averaging depthwise-identity kernel: each output channel starts as
/// the window mean of the matching input channel plus small noise. Under
/// the partial renormalization its iterated gain stays close to 1, which
/// keeps a weight-shared filling layer stable across passes.
template <typename T>
void add_averaging_conv(ParamStore<T>& ps, uint64_t seed, const std::string& name, int channels,
                        int k) {
    CounterRng rng = param_rng(seed, name);
    Tensor<T> w({channels, channels, k, k});
    const T mean = T(1) / T(k * k);
    for (int o = 0; o < channels; ++o)
        for (int c = 0; c < channels; ++c)
            for (int u = 0; u < k; ++u)
                for (int v = 0; v < k; ++v)
                    w.data[((static_cast<int64_t>(o) * channels + c) * k + u) * k + v] =
                        (o == c ? mean : T(0)) + static_cast<T>(rng.uniform(-0.02, 0.02)) * mean;
    ps.add(name, std::move(w));
}

template <typename T>
void add_zeros(ParamStore<T>& ps, const std::string& name, Dims dims) {
    ps.add(name, Tensor<T>(std::move(dims)));
}

template <typename T>
void add_block(ParamStore<T>& ps, uint64_t seed, const std::string& prefix, int d, int e, int n) {
    CounterRng rng = param_rng(seed, prefix);
    register_block(ps, prefix, make_block_params<T>(d, e, n, rng));
}

template <typename T>
void add_mask_token(ParamStore<T>& ps, uint64_t seed, const std::string& name, int d) {
    CounterRng rng = param_rng(seed, name);
    ps.add(name, gaussian<T>({d}, T(0.02), rng));
}

}  // namespace init

template <typename T>
void register_cls_params(ParamStore<T>& ps, const ClsConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int in = cfg.channels * cfg.patch * cfg.patch;
    init::add_xavier(ps, seed, "stem.w", {cfg.dim, cfg.channels, cfg.patch, cfg.patch}, in, cfg.dim);
    init::add_zeros<T>(ps, "stem.b", {cfg.dim});
    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string prefix = "blk" + std::to_string(i);
        init::add_block<T>(ps, seed, prefix + ".block", cfg.dim, cfg.e(), cfg.state);
        if (cfg.variant == Variant::Pvm)
            init::add_mask_token<T>(ps, seed, prefix + ".mask_token", cfg.dim);
    }
    init::add_xavier<T>(ps, seed, "head.w", {cfg.classes, cfg.dim}, cfg.dim, cfg.classes);
    init::add_zeros<T>(ps, "head.b", {cfg.classes});
}

template <typename T>
void register_depth_params(ParamStore<T>& ps, const DepthConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int F = cfg.feat, D = cfg.dim();
    init::add_xavier<T>(ps, seed, "sfe.w", {F, cfg.in_channels, 3, 3}, cfg.in_channels * 9, F * 9);
    init::add_zeros<T>(ps, "sfe.b", {F});
    for (int r = 0; r < cfg.rpssb; ++r) {
        const std::string rp = "dfe.r" + std::to_string(r);
        for (int m = 0; m < cfg.pvmm_per_block; ++m) {
            const std::string mp = rp + ".m" + std::to_string(m);
            init::add_xavier<T>(ps, seed, mp + ".embed.w", {D, D}, D, D);
            init::add_zeros<T>(ps, mp + ".embed.b", {D});
            init::add_block<T>(ps, seed, mp + ".block", D, cfg.e(), cfg.state);
            if (cfg.variant == Variant::Pvm)
                init::add_mask_token<T>(ps, seed, mp + ".mask_token", D);
        }
        // residual-branch convs start small so the trunk scale stays flat
        init::add_xavier<T>(ps, seed, rp + ".conv.w", {F, F, 3, 3}, F * 9, F * 9, T(0.1));
        init::add_zeros<T>(ps, rp + ".conv.b", {F});
    }
    if (cfg.variant == Variant::Pvm) {
        init::add_averaging_conv<T>(ps, seed, "fill.w", 2 * F, cfg.fill_kernel);
        init::add_zeros<T>(ps, "fill.b", {2 * F});
    }
    init::add_xavier<T>(ps, seed, "head1.w", {F, 2 * F, 3, 3}, 2 * F * 9, F * 9);
    init::add_zeros<T>(ps, "head1.b", {F});
    init::add_xavier<T>(ps, seed, "head2.w", {1, F, 3, 3}, F * 9, 9);
    ps.add("head2.b", init::full<T>({1}, static_cast<T>(cfg.head_bias_init)));
}

// ---- tape forwards ---------------------------------------------------------

namespace ops {

template <typename T>
PvmVars bind_token_block(const ParamBinding<T>& bind, const std::string& prefix, Variant variant,
                         TokenPadding padding, bool sub_before_norm) {
    PvmVars v;
    v.block = bind_block(bind, prefix + ".block");
    if (variant == Variant::Pvm && padding == TokenPadding::Learned)
        v.mask_token = bind[prefix + ".mask_token"];
    v.padding = padding;
    v.scan = BlockScan::Bidirectional;
    v.substitute_before_norm = sub_before_norm;
    return v;
}

template <typename T>
struct ClsTape {
    Var logits;
    bool logits_valid = false;  // honest bookkeeping through the dense rule
};

template <typename T>
ClsTape<T> tape_cls_forward(Graph<T>& g, const ClsConfig& cfg, const ParamBinding<T>& bind,
                            Var x, const ValidityMask& mask) {
    cfg.validate();
    const Tensor<T>& xv = g.val(x);
    if (xv.dims != Dims{cfg.channels, cfg.image, cfg.image})
        throw ShapeError("cls_forward: input " + dims_str(xv.dims) + " does not match config");
    const KernelFootprint stem_fp(cfg.patch, cfg.patch, cfg.patch, 0);
    const int gh = cfg.image / cfg.patch;
    const int L = cfg.tokens();

    Var tokens;
    ValidityMask token_mask({L});
    if (cfg.variant == Variant::Pvm) {
        if (!mask.any_valid())
            throw PreconditionError("cls_forward(pvm): input mask has no valid pixel");
        auto [y, m1] = tape_pconv2d(g, x, mask, bind["stem.w"], bind["stem.b"], stem_fp);
        tokens = g.gather(y, chw_to_tokens_index(cfg.dim, gh, gh), {L, cfg.dim});
        token_mask = ValidityMask({L}, m1.bits);
    } else {
        Var y = g.conv2d(x, bind["stem.w"], bind["stem.b"], stem_fp);
        tokens = g.gather(y, chw_to_tokens_index(cfg.dim, gh, gh), {L, cfg.dim});
        token_mask = patchwise_rule(mask, cfg.patch, ValidityRule::AllValid);
    }

    for (int i = 0; i < cfg.blocks; ++i) {
        const std::string prefix = "blk" + std::to_string(i);
        if (cfg.variant == Variant::Pvm) {
            PvmVars v = bind_token_block(bind, prefix, cfg.variant, cfg.padding,
                                         cfg.substitute_before_norm);
            Var upd = tape_pvm_token_core(g, tokens, token_mask, v);
            tokens = g.mask_rows(g.add(tokens, upd), token_mask);
        } else {
            BlockVars v = bind_block(bind, prefix + ".block");
            tokens = g.add(tokens, tape_vm_block(g, tokens, v, BlockScan::Bidirectional));
        }
    }

    Var pooled;
    if (cfg.variant == Variant::Pvm) {
        pooled = g.masked_mean_rows(tokens, token_mask);
    } else {
        pooled = g.masked_mean_rows(tokens, ValidityMask::ones({L}));
    }
    Var logits = g.reshape(
        g.add_rowvec(g.matmul_nt(g.reshape(pooled, {1, cfg.dim}), bind["head.w"]), bind["head.b"]),
        {cfg.classes});

    ClsTape<T> out;
    out.logits = logits;
    if (cfg.variant == Variant::Pvm) {
        out.logits_valid = token_mask.any_valid();  // global pool resolves validity
    } else {
        ValidityMask seq = propagate_sequence(token_mask, ScanDirection::Bidirectional,
                                              ValidityRule::AllValid);
        out.logits_valid = propagate_dense(seq, ValidityRule::AllValid);
    }
    return out;
}

template <typename T>
struct DepthTape {
    Var pred;             // 1xHxW dense map
    int fill_iters = 0;   // pvm only
    double reported_valid_fraction = 1.0;  // honest bookkeeping at the head input
};

template <typename T>
DepthTape<T> tape_dc_forward(Graph<T>& g, const DepthConfig& cfg, const ParamBinding<T>& bind,
                             Var x, const ValidityMask& mask) {
    cfg.validate();
    const Tensor<T>& xv = g.val(x);
    if (xv.dims != Dims{cfg.in_channels, cfg.image, cfg.image})
        throw ShapeError("dc_forward: input " + dims_str(xv.dims) + " does not match config");
    const KernelFootprint k3(3, 3, 1, 1);
    DepthTape<T> out;

    if (cfg.variant == Variant::Pvm) {
        if (!mask.any_valid())
            throw PreconditionError("dc_forward(pvm): input mask has no valid pixel");
        auto [shallow, m_f] = tape_pconv2d(g, x, mask, bind["sfe.w"], bind["sfe.b"], k3);
        Var deep = shallow;
        for (int r = 0; r < cfg.rpssb; ++r) {
            const std::string rp = "dfe.r" + std::to_string(r);
            Var t = deep;
            for (int m = 0; m < cfg.pvmm_per_block; ++m) {
                const std::string mp = rp + ".m" + std::to_string(m);
                PvmVars v = bind_token_block(bind, mp, cfg.variant, cfg.padding,
                                             cfg.substitute_before_norm);
                v.embed_w = bind[mp + ".embed.w"];
                v.embed_b = bind[mp + ".embed.b"];
                t = tape_pvm_residual(g, t, m_f, cfg.patch, v);
            }
            auto [c, m_c] = tape_pconv2d(g, t, m_f, bind[rp + ".conv.w"], bind[rp + ".conv.b"], k3);
            // residual merge: AND(m_f, dilated m_f) == m_f, the DFE mask is retained
            deep = g.mask_spatial(g.add(deep, c), m_f);
        }
        Var cat = g.concat_ch(shallow, deep);
        auto [filled, m_all, iters] = tape_fill_until_valid(g, cat, m_f, bind["fill.w"],
                                                            bind["fill.b"], cfg.fill_kernel,
                                                            cfg.fill_max_iters);
        out.fill_iters = iters;
        Var h1 = g.silu(g.conv2d(filled, bind["head1.w"], bind["head1.b"], k3));
        out.pred = g.conv2d(h1, bind["head2.w"], bind["head2.b"], k3);
        out.reported_valid_fraction = 1.0;
        return out;
    }

    // mask-unaware path; bookkeeping masks are tracked but never touch values
    Var shallow = g.conv2d(x, bind["sfe.w"], bind["sfe.b"], k3);
    ValidityMask m = propagate_receptive_field(mask, k3, ValidityRule::AllValid);
    Var deep = shallow;
    for (int r = 0; r < cfg.rpssb; ++r) {
        const std::string rp = "dfe.r" + std::to_string(r);
        Var t = deep;
        for (int mi = 0; mi < cfg.pvmm_per_block; ++mi) {
            const std::string mp = rp + ".m" + std::to_string(mi);
            PvmVars v = bind_token_block(bind, mp, cfg.variant, cfg.padding,
                                         cfg.substitute_before_norm);
            v.embed_w = bind[mp + ".embed.w"];
            v.embed_b = bind[mp + ".embed.b"];
            Var upd = tape_vm_spatial(g, t, cfg.patch, v);
            t = g.add(t, upd);
            ValidityMask tok = patchwise_rule(m, cfg.patch, ValidityRule::AllValid);
            ValidityMask seq = propagate_sequence(tok, ScanDirection::Bidirectional,
                                                  ValidityRule::AllValid);
            for (int i = 0; i < cfg.image; ++i)
                for (int j = 0; j < cfg.image; ++j)
                    m.at2(i, j) = m.at2(i, j) & seq[(i / cfg.patch) * (cfg.image / cfg.patch) +
                                                    j / cfg.patch];
        }
        deep = g.add(deep, g.conv2d(t, bind[rp + ".conv.w"], bind[rp + ".conv.b"], k3));
        m = propagate_receptive_field(m, k3, ValidityRule::AllValid);
    }
    Var cat = g.concat_ch(shallow, deep);
    Var h1 = g.silu(g.conv2d(cat, bind["head1.w"], bind["head1.b"], k3));
    out.pred = g.conv2d(h1, bind["head2.w"], bind["head2.b"], k3);
    out.reported_valid_fraction =
        static_cast<double>(m.count_valid()) / static_cast<double>(m.numel());
    return out;
}

}  // namespace ops

// ---- functional surface ----------------------------------------------------

template <typename T>
std::pair<Tensor<T>, bool> cls_forward(const MaskedTensor<T>& x, const ClsConfig& cfg,
                                       const ParamStore<T>& params) {
    Graph<T> g;
    ParamBinding<T> bind(g, params, false);
    auto out = ops::tape_cls_forward(g, cfg, bind, g.constant(x.values), x.mask);
    detail::check_finite_or_throw(g.val(out.logits), "cls_forward");
    return {g.val(out.logits), out.logits_valid};
}

template <typename T>
struct DepthForwardResult {
    Tensor<T> pred;  // 1xHxW
    int fill_iters = 0;
    double reported_valid_fraction = 1.0;
};

template <typename T>
DepthForwardResult<T> dc_forward(const MaskedTensor<T>& x, const DepthConfig& cfg,
                                 const ParamStore<T>& params) {
    Graph<T> g;
    ParamBinding<T> bind(g, params, false);
    auto out = ops::tape_dc_forward(g, cfg, bind, g.constant(x.values), x.mask);
    detail::check_finite_or_throw(g.val(out.pred), "dc_forward");
    DepthForwardResult<T> r;
    r.pred = g.val(out.pred);
    r.fill_iters = out.fill_iters;
    r.reported_valid_fraction = out.reported_valid_fraction;
    return r;
}

// ---- losses and task metrics ------------------------------------------------

/// Mean over valid ground-truth positions of sqrt(diff^2 + eps^2).
template <typename T>
T charbonnier_loss(const Tensor<T>& pred, const Tensor<T>& gt, const ValidityMask& m_gt,
                   T eps = T(1e-3)) {
    if (pred.dims != gt.dims)
        throw ShapeError("charbonnier_loss: pred " + dims_str(pred.dims) + " vs gt " +
                         dims_str(gt.dims));
    if (m_gt.numel() != pred.numel())
        throw ShapeError("charbonnier_loss: mask must cover every element");
    const int64_t nv = m_gt.count_valid();
    if (nv == 0) throw PreconditionError("charbonnier_loss: empty valid set");
    T s = T(0);
    for (int64_t i = 0; i < pred.numel(); ++i) {
        if (!m_gt[i]) continue;
        const T d = pred[i] - gt[i];
        s += std::sqrt(d * d + eps * eps);
    }
    return s / T(nv);
}

/// RMSE and MAE over valid positions.
template <typename T>
std::pair<double, double> rmse_mae_valid(const Tensor<T>& pred, const Tensor<T>& gt,
                                         const ValidityMask& m) {
    if (pred.dims != gt.dims)
        throw ShapeError("rmse_mae_valid: pred " + dims_str(pred.dims) + " vs gt " +
                         dims_str(gt.dims));
    if (m.numel() != pred.numel()) throw ShapeError("rmse_mae_valid: mask must cover every element");
    const int64_t nv = m.count_valid();
    if (nv == 0) throw PreconditionError("rmse_mae_valid: empty valid set");
    double se = 0.0, ae = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        if (!m[i]) continue;
        const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
        se += d * d;
        ae += std::abs(d);
    }
    return {std::sqrt(se / static_cast<double>(nv)), ae / static_cast<double>(nv)};
}

/// True when the label is among the k largest logits; ties resolve toward
/// the lower class index.
template <typename T>
bool topk_correct(const Tensor<T>& logits, int label, int k) {
    const int64_t classes = logits.numel();
    if (label < 0 || label >= classes)
        throw PreconditionError("topk: label " + std::to_string(label) + " out of range");
    if (k > classes) throw PreconditionError("topk: k exceeds class count");
    // rank of the label = number of classes strictly preferred over it
    int64_t rank = 0;
    for (int64_t c = 0; c < classes; ++c) {
        if (c == label) continue;
        if (logits[c] > logits[label] || (logits[c] == logits[label] && c < label)) ++rank;
    }
    return rank < k;
}

template <typename T>
double topk_accuracy(const std::vector<Tensor<T>>& logits, const std::vector<int>& labels, int k) {
    if (logits.size() != labels.size())
        throw ShapeError("topk_accuracy: logits/labels length mismatch");
    if (logits.empty()) throw PreconditionError("topk_accuracy: empty batch");
    int64_t hit = 0;
    for (size_t i = 0; i < logits.size(); ++i)
        if (topk_correct(logits[i], labels[i], k)) ++hit;
    return static_cast<double>(hit) / static_cast<double>(logits.size());
}

/// Log-sum-exp stabilized negative log-likelihood (scalar convenience).
template <typename T>
T cross_entropy(const Tensor<T>& logits, int label) {
    const int64_t classes = logits.numel();
    if (label < 0 || label >= classes)
        throw PreconditionError("cross_entropy: label out of range");
    T mx = logits[0];
    for (int64_t i = 1; i < classes; ++i) mx = std::max(mx, logits[i]);
    T lse = T(0);
    for (int64_t i = 0; i < classes; ++i) lse += std::exp(logits[i] - mx);
    return std::log(lse) + mx - logits[label];
}

}  // namespace pvm
