#pragma once

#include "pvm/partial_ops.hpp"
#include "pvm/ssm.hpp"
#include "pvm/tensor.hpp"
#include "pvm/tensor_ops.hpp"

namespace pvm {

/// How invalid tokens are represented before the scan.
enum class TokenPadding { Zero, Mean, Learned };

inline const char* token_padding_name(TokenPadding p) {
    switch (p) {
        case TokenPadding::Zero: return "zero";
        case TokenPadding::Mean: return "mean";
        default: return "learned";
    }
}

template <typename T>
struct PatchEmbedParams {
    int patch = 4;
    LinearParams<T> proj;  // D x (C*P*P)
};

/// Full parameter bundle for one PVM unit: partial patch projection,
/// learned mask token, and the gated scan block over token width D.
template <typename T>
struct PvmParams {
    PatchEmbedParams<T> embed;
    Tensor<T> mask_token;  // D
    BlockParams<T> block;
    TokenPadding padding = TokenPadding::Learned;
    BlockScan scan = BlockScan::Bidirectional;
    bool substitute_before_norm = true;
};

namespace ops {

inline std::shared_ptr<const std::vector<int64_t>> patchify_index(int c, int h, int w, int p) {
    if (h % p != 0 || w % p != 0)
        throw ShapeError("patch split: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by patch " + std::to_string(p));
    const int gw = w / p, gh = h / p;
    const int64_t L = static_cast<int64_t>(gh) * gw;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(L) * c * p * p);
    int64_t o = 0;
    for (int64_t l = 0; l < L; ++l) {
        const int pi = static_cast<int>(l) / gw, pj = static_cast<int>(l) % gw;
        for (int ch = 0; ch < c; ++ch)
            for (int u = 0; u < p; ++u)
                for (int v = 0; v < p; ++v)
                    (*idx)[o++] = (static_cast<int64_t>(ch) * h + pi * p + u) * w + pj * p + v;
    }
    return idx;
}

/// CxHxW feature map -> (H*W)xC token matrix (row-major raster order).
inline std::shared_ptr<const std::vector<int64_t>> chw_to_tokens_index(int c, int h, int w) {
    const int64_t L = static_cast<int64_t>(h) * w;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(L) * c);
    int64_t o = 0;
    for (int64_t l = 0; l < L; ++l)
        for (int ch = 0; ch < c; ++ch) (*idx)[o++] = ch * L + l;
    return idx;
}

inline std::shared_ptr<const std::vector<int64_t>> unpatchify_index(int c, int h, int w, int p) {
    const int gw = w / p;
    auto idx = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(c) * h * w);
    const int64_t token_width = static_cast<int64_t>(c) * p * p;
    int64_t o = 0;
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const int64_t l = static_cast<int64_t>(i / p) * gw + j / p;
                (*idx)[o++] = l * token_width + (static_cast<int64_t>(ch) * p + i % p) * p + j % p;
            }
    return idx;
}

/// Partial patch embedding: mean-fill invalid pixels per patch and channel,
/// split row-major into PxP patches, project, zero all-invalid tokens.
/// token_mask[l] = 1 iff patch l contains at least one valid pixel.
template <typename T>
std::pair<Var, ValidityMask> tape_partial_patch_embed(Graph<T>& g, Var x, const ValidityMask& m,
                                                      int patch, Var w, Var b) {
    const Tensor<T>& xv = g.val(x);
    if (xv.rank() != 3)
        throw ShapeError("partial_patch_embed expects CxHxW, got " + dims_str(xv.dims));
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    if (H % patch != 0 || W % patch != 0)
        throw ShapeError("partial_patch_embed: " + dims_str(xv.dims) +
                         " not divisible by patch " + std::to_string(patch));
    const int L = (H / patch) * (W / patch);
    ValidityMask token_mask = patchwise_rule(m, patch, ValidityRule::AnyValid);

    Var filled = g.mean_fill_patches(x, m, patch);
    Var patches = g.gather(filled, patchify_index(C, H, W, patch), {L, C * patch * patch});
    Var tokens = g.add_rowvec(g.matmul_nt(patches, w), b);
    tokens = g.mask_rows(tokens, token_mask);
    return {tokens, std::move(token_mask)};
}

/// Mask-unaware patch embedding: projects the stored values as-is.
template <typename T>
Var tape_std_patch_embed(Graph<T>& g, Var x, int patch, Var w, Var b) {
    const Tensor<T>& xv = g.val(x);
    const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
    const int L = (H / patch) * (W / patch);
    Var patches = g.gather(x, patchify_index(C, H, W, patch), {L, C * patch * patch});
    return g.add_rowvec(g.matmul_nt(patches, w), b);
}

/// Replaces invalid tokens by the configured padding representation. The
/// output carries no dependence on invalid-token payloads.
template <typename T>
Var tape_substitute_tokens(Graph<T>& g, Var tokens, const ValidityMask& token_mask,
                           TokenPadding padding, Var learned_token) {
    if (token_mask.all_valid()) return tokens;
    switch (padding) {
        case TokenPadding::Zero:
            return g.mask_rows(tokens, token_mask);
        case TokenPadding::Mean: {
            if (!token_mask.any_valid())
                throw PreconditionError("mean token padding requires at least one valid token");
            Var valid_only = g.mask_rows(tokens, token_mask);
            Var mean = g.masked_mean_rows(valid_only, token_mask);
            return g.substitute_rows(valid_only, token_mask, mean);
        }
        default:
            return g.substitute_rows(g.mask_rows(tokens, token_mask), token_mask, learned_token);
    }
}

struct PvmVars {
    Var embed_w, embed_b, mask_token;
    BlockVars block;
    TokenPadding padding = TokenPadding::Learned;
    BlockScan scan = BlockScan::Bidirectional;
    bool substitute_before_norm = true;
};

/// Token-level PVM core: substitution plus the gated block. The
/// substitution/normalization order follows the configuration flag.
template <typename T>
Var tape_pvm_token_core(Graph<T>& g, Var tokens, const ValidityMask& token_mask,
                        const PvmVars& v) {
    if (v.substitute_before_norm) {
        Var sub = tape_substitute_tokens(g, tokens, token_mask, v.padding, v.mask_token);
        return tape_vm_block(g, sub, v.block, v.scan);
    }
    Var xn = g.layer_norm(tokens, v.block.ln_gamma, v.block.ln_beta);
    Var sub = tape_substitute_tokens(g, xn, token_mask, v.padding, v.mask_token);
    const int e = g.val(v.block.w_in).dim(0) / 2;
    Var proj = g.add_rowvec(g.matmul_nt(sub, v.block.w_in), v.block.b_in);
    Var stream = g.slice_cols(proj, 0, e);
    Var gate = g.slice_cols(proj, e, e);
    Var s = tape_selective_scan(g, stream, v.block, false);
    if (v.scan == BlockScan::Bidirectional)
        s = g.add(s, tape_selective_scan(g, stream, v.block, true));
    Var gated = g.mul(s, g.silu(gate));
    return g.add_rowvec(g.matmul_nt(gated, v.block.w_out), v.block.b_out);
}

/// Non-residual PVM over a spatial map: partial patch embedding, token
/// substitution, gated scan, patch reconstruction. The result is dense and
/// fully valid; the token width must be C_out * P * P.
template <typename T>
Var tape_pvm_spatial(Graph<T>& g, Var x, const ValidityMask& m, int patch, const PvmVars& v) {
    const Tensor<T>& xv = g.val(x);
    const int H = xv.dim(1), W = xv.dim(2);
    if (!m.any_valid())
        throw PreconditionError("pvm_forward: input mask has no valid element");
    auto [tokens, token_mask] = tape_partial_patch_embed(g, x, m, patch, v.embed_w, v.embed_b);
    Var y = tape_pvm_token_core(g, tokens, token_mask, v);
    const int d = g.val(y).dim(1);
    if (d % (patch * patch) != 0)
        throw ShapeError("patch reconstruction needs token width divisible by P*P, got D=" +
                         std::to_string(d));
    const int c_out = d / (patch * patch);
    return g.gather(y, unpatchify_index(c_out, H, W, patch), {c_out, H, W});
}

/// Residual PVM role: x + PVM(x) at input-valid positions, exact zeros and
/// an unchanged mask elsewhere (m_in is retained).
template <typename T>
Var tape_pvm_residual(Graph<T>& g, Var x, const ValidityMask& m, int patch, const PvmVars& v) {
    Var update = tape_pvm_spatial(g, x, m, patch, v);
    return g.mask_spatial(g.add(x, update), m);
}

/// Mask-unaware VM over a spatial map; the value path consumes stored
/// values (placeholders included).
template <typename T>
Var tape_vm_spatial(Graph<T>& g, Var x, int patch, const PvmVars& v) {
    const Tensor<T>& xv = g.val(x);
    const int H = xv.dim(1), W = xv.dim(2);
    Var tokens = tape_std_patch_embed(g, x, patch, v.embed_w, v.embed_b);
    Var y = tape_vm_block(g, tokens, v.block, v.scan);
    const int d = g.val(y).dim(1);
    const int c_out = d / (patch * patch);
    return g.gather(y, unpatchify_index(c_out, H, W, patch), {c_out, H, W});
}

}  // namespace ops

// ---- functional surface ---------------------------------------------------

template <typename T>
ops::PvmVars bind_pvm_consts(Graph<T>& g, const PvmParams<T>& p) {
    ops::PvmVars v;
    v.embed_w = g.constant(p.embed.proj.weights);
    v.embed_b = g.constant(p.embed.proj.bias);
    v.mask_token = g.constant(p.mask_token);
    v.block = bind_block_consts(g, p.block);
    v.padding = p.padding;
    v.scan = p.scan;
    v.substitute_before_norm = p.substitute_before_norm;
    return v;
}

/// Splits the image into patches and projects each through the partial
/// linear layer. Partially valid patches yield valid tokens.
template <typename T>
TokenSequence<T> partial_patch_embed(const MaskedTensor<T>& x, const PatchEmbedParams<T>& p) {
    Graph<T> g;
    Var xv = g.constant(x.values);
    auto [tokens, token_mask] = ops::tape_partial_patch_embed(
        g, xv, x.mask, p.patch, g.constant(p.proj.weights), g.constant(p.proj.bias));
    detail::check_finite_or_throw(g.val(tokens), "partial_patch_embed");
    return TokenSequence<T>(g.val(tokens), std::move(token_mask));
}

/// Dense sequence with invalid tokens replaced by the learned mask token.
template <typename T>
Tensor<T> substitute_masked_tokens(const TokenSequence<T>& t, const Tensor<T>& learned_token) {
    if (learned_token.numel() != t.width())
        throw ShapeError("mask token width " + dims_str(learned_token.dims) +
                         " does not match tokens " + dims_str(t.tokens.dims));
    Graph<T> g;
    Var out = ops::tape_substitute_tokens(g, g.constant(t.tokens), t.token_mask,
                                          TokenPadding::Learned, g.constant(learned_token));
    return g.val(out);
}

/// Non-residual PVM forward; the output map is fully valid.
template <typename T>
MaskedTensor<T> pvm_forward(const MaskedTensor<T>& x, const PvmParams<T>& p) {
    Graph<T> g;
    Var y = ops::tape_pvm_spatial(g, g.constant(x.values), x.mask, p.embed.patch,
                                  bind_pvm_consts(g, p));
    detail::check_finite_or_throw(g.val(y), "pvm_forward");
    return MaskedTensor<T>(g.val(y),
                           ValidityMask::ones({x.values.dim(1), x.values.dim(2)}));
}

/// Residual PVM forward; m_in is retained and invalid positions stay zero.
template <typename T>
MaskedTensor<T> pvm_residual(const MaskedTensor<T>& x, const PvmParams<T>& p) {
    Graph<T> g;
    Var y = ops::tape_pvm_residual(g, g.constant(x.values), x.mask, p.embed.patch,
                                   bind_pvm_consts(g, p));
    detail::check_finite_or_throw(g.val(y), "pvm_residual");
    return MaskedTensor<T>(g.val(y), x.mask);
}

/// Mask-unaware VM path with honest bookkeeping: a token is invalid when
/// its patch holds any invalid pixel, and the scan history propagates
/// invalidity across the whole sequence.
template <typename T>
MaskedTensor<T> vm_forward(const MaskedTensor<T>& x, const PvmParams<T>& p) {
    Graph<T> g;
    Var y = ops::tape_vm_spatial(g, g.constant(x.values), p.embed.patch, bind_pvm_consts(g, p));
    detail::check_finite_or_throw(g.val(y), "vm_forward");

    const int patch = p.embed.patch;
    ValidityMask token_mask = patchwise_rule(x.mask, patch, ValidityRule::AllValid);
    ValidityMask seq_mask = propagate_sequence(
        token_mask,
        p.scan == BlockScan::Bidirectional ? ScanDirection::Bidirectional : ScanDirection::Forward,
        ValidityRule::AllValid);

    const int H = x.values.dim(1), W = x.values.dim(2);
    const int gw = W / patch;
    ValidityMask out_mask({H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            out_mask.at2(i, j) = seq_mask[(i / patch) * gw + j / patch];

    MaskedTensor<T> out;
    out.values = g.val(y);
    out.mask = std::move(out_mask);
    return out;
}

}  // namespace pvm
