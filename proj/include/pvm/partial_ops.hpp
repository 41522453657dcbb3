#pragma once

#include "pvm/autodiff.hpp"
#include "pvm/mask_rules.hpp"
#include "pvm/tensor.hpp"

namespace pvm {

template <typename T>
struct ConvParams {
    Tensor<T> weights;  // K x C x kh x kw
    Tensor<T> bias;     // K
    KernelFootprint footprint;
};

template <typename T>
struct LinearParams {
    Tensor<T> weights;  // out x in
    Tensor<T> bias;     // out
};

namespace ops {

/// Per-output renormalization map for a partial convolution:
/// window_size / valid_count at AnyValid-valid outputs, 0 elsewhere,
/// broadcast over K output channels.
template <typename T>
Tensor<T> pconv_scale_map(const ValidityMask& in_mask, const KernelFootprint& fp, int out_channels) {
    const int h = in_mask.dim(0), w = in_mask.dim(1);
    const int oh = fp.out_h(h), ow = fp.out_w(w);
    const T window = T(fp.kernel_h) * T(fp.kernel_w);
    Tensor<T> scale({out_channels, oh, ow});
    for (int oi = 0; oi < oh; ++oi) {
        for (int oj = 0; oj < ow; ++oj) {
            int valid = 0;
            for (int u = 0; u < fp.kernel_h; ++u)
                for (int v = 0; v < fp.kernel_w; ++v) {
                    const int i = oi * fp.stride - fp.padding + u;
                    const int j = oj * fp.stride - fp.padding + v;
                    if (i >= 0 && i < h && j >= 0 && j < w && in_mask.at2(i, j)) ++valid;
                }
            const T s = valid > 0 ? window / T(valid) : T(0);
            for (int c = 0; c < out_channels; ++c) scale.at3(c, oi, oj) = s;
        }
    }
    return scale;
}

/// Partial convolution on the tape: y = W (x . m) * (window/valid) + bias at
/// AnyValid outputs, exact zero elsewhere.
template <typename T>
std::pair<Var, ValidityMask> tape_pconv2d(Graph<T>& g, Var x, const ValidityMask& in_mask,
                                          Var w, Var bias, const KernelFootprint& fp) {
    const Tensor<T>& xv = g.val(x);
    const int out_channels = g.val(w).dim(0);
    fp.check_fits(xv.dim(1), xv.dim(2));
    ValidityMask out_mask = propagate_receptive_field(in_mask, fp, ValidityRule::AnyValid);

    Var xm = g.mask_spatial(x, in_mask);
    Var zero_bias = g.constant(Tensor<T>({out_channels}));
    Var raw = g.conv2d(xm, w, zero_bias, fp);
    Var scaled = g.cmul(raw, pconv_scale_map<T>(in_mask, fp, out_channels));
    Var biased = g.add_chvec(scaled, bias);
    Var y = g.mask_spatial(biased, out_mask);
    return {y, std::move(out_mask)};
}

/// Standard convolution with honest bookkeeping: the value path is
/// mask-unaware (it consumes the stored values, placeholders included);
/// only the output mask reflects which results remain trustworthy.
template <typename T>
std::pair<Var, ValidityMask> tape_std_conv2d(Graph<T>& g, Var x, const ValidityMask& in_mask,
                                             Var w, Var bias, const KernelFootprint& fp) {
    ValidityMask out_mask = propagate_receptive_field(in_mask, fp, ValidityRule::AllValid);
    Var y = g.conv2d(x, w, bias, fp);
    return {y, std::move(out_mask)};
}

/// Iterated partial convolution until the mask is all-ones. One shared
/// parameter set across passes; stride 1, same-size padding.
template <typename T>
std::tuple<Var, ValidityMask, int> tape_fill_until_valid(Graph<T>& g, Var x, ValidityMask mask,
                                                         Var w, Var bias, int kernel,
                                                         int max_iters) {
    if (kernel % 2 == 0) throw ShapeError("filling layer needs an odd kernel for same-size output");
    if (!mask.any_valid())
        throw PreconditionError("fill_until_valid: input mask has no valid element");
    const KernelFootprint fp(kernel, kernel, 1, (kernel - 1) / 2);
    int iters = 0;
    while (!mask.all_valid()) {
        if (iters >= max_iters) {
            const int64_t remaining = mask.numel() - mask.count_valid();
            throw NumericError("fill_until_valid: " + std::to_string(remaining) +
                               " positions still invalid after " + std::to_string(max_iters) +
                               " passes");
        }
        auto [y, m] = tape_pconv2d(g, x, mask, w, bias, fp);
        x = y;
        mask = std::move(m);
        ++iters;
    }
    return {x, std::move(mask), iters};
}

}  // namespace ops

// ---- functional surface ---------------------------------------------------

namespace detail {
template <typename T>
void check_finite_or_throw(const Tensor<T>& t, const char* who) {
    if (!t.all_finite()) throw NumericError(std::string(who) + " produced a non-finite value");
}
}  // namespace detail

/// Mask-aware convolution over a masked input.
template <typename T>
MaskedTensor<T> pconv2d(const MaskedTensor<T>& x, const ConvParams<T>& p) {
    if (x.values.rank() != 3)
        throw ShapeError("pconv2d expects CxHxW input, got " + dims_str(x.values.dims));
    Graph<T> g;
    Var xv = g.constant(x.values);
    Var w = g.constant(p.weights);
    Var b = g.constant(p.bias);
    auto [y, out_mask] = ops::tape_pconv2d(g, xv, x.mask, w, b, p.footprint);
    detail::check_finite_or_throw(g.val(y), "pconv2d");
    return MaskedTensor<T>(g.val(y), std::move(out_mask));
}

/// Mask-unaware convolution baseline with honest mask bookkeeping. Output
/// values at eroded (invalid) positions are reported as computed; the mask
/// says they must be discarded.
template <typename T>
MaskedTensor<T> std_conv2d_masked(const MaskedTensor<T>& x, const ConvParams<T>& p) {
    if (x.values.rank() != 3)
        throw ShapeError("std_conv2d_masked expects CxHxW input, got " + dims_str(x.values.dims));
    Graph<T> g;
    Var xv = g.constant(x.values);
    Var w = g.constant(p.weights);
    Var b = g.constant(p.bias);
    auto [y, out_mask] = ops::tape_std_conv2d(g, xv, x.mask, w, b, p.footprint);
    detail::check_finite_or_throw(g.val(y), "std_conv2d_masked");
    MaskedTensor<T> out;
    out.values = g.val(y);
    out.mask = std::move(out_mask);
    return out;
}

/// Patch projection with per-channel mean padding of invalid positions.
/// Returns the projected token and its validity bit; fully invalid patches
/// produce a zero token with bit 0.
template <typename T>
std::pair<Tensor<T>, bool> partial_linear(const MaskedTensor<T>& patch, const LinearParams<T>& p) {
    if (patch.values.rank() != 3)
        throw ShapeError("partial_linear expects CxPxP input, got " + dims_str(patch.values.dims));
    const int C = patch.values.dim(0), ph = patch.values.dim(1), pw = patch.values.dim(2);
    if (ph != pw) throw ShapeError("partial_linear expects square patches");
    const int out_dim = p.weights.dim(0);
    if (p.weights.dim(1) != C * ph * pw)
        throw ShapeError("partial_linear weight in-dim " + std::to_string(p.weights.dim(1)) +
                         " does not match patch " + dims_str(patch.values.dims));
    if (!patch.mask.any_valid()) return {Tensor<T>({out_dim}), false};

    Graph<T> g;
    Var xv = g.constant(patch.values);
    Var filled = g.mean_fill_patches(xv, patch.mask, ph);
    Var flat = g.reshape(filled, {1, C * ph * pw});
    Var tok = g.add_rowvec(g.matmul_nt(flat, g.constant(p.weights)), g.constant(p.bias));
    Tensor<T> out({out_dim});
    std::copy(g.val(tok).data.begin(), g.val(tok).data.end(), out.data.begin());
    detail::check_finite_or_throw(out, "partial_linear");
    return {std::move(out), true};
}

/// Mask-aware average pooling: mean over the valid window entries,
/// AnyValid mask update, zero at fully invalid windows.
template <typename T>
MaskedTensor<T> partial_avg_pool2d(const MaskedTensor<T>& x, const KernelFootprint& fp) {
    if (x.values.rank() != 3)
        throw ShapeError("partial_avg_pool2d expects CxHxW input, got " + dims_str(x.values.dims));
    Graph<T> g;
    Var y = g.avg_pool_masked(g.constant(x.values), x.mask, fp);
    detail::check_finite_or_throw(g.val(y), "partial_avg_pool2d");
    return MaskedTensor<T>(g.val(y),
                           propagate_receptive_field(x.mask, fp, ValidityRule::AnyValid));
}

/// Mean over valid tokens; the result is fully valid whenever at least one
/// token is valid (global receptive field).
template <typename T>
std::pair<Tensor<T>, bool> partial_global_pool(const TokenSequence<T>& t) {
    if (t.length() < 1) throw PreconditionError("partial_global_pool: empty sequence");
    if (!t.token_mask.any_valid()) return {Tensor<T>({t.width()}), false};
    Graph<T> g;
    Var mean = g.masked_mean_rows(g.constant(t.tokens), t.token_mask);
    detail::check_finite_or_throw(g.val(mean), "partial_global_pool");
    return {g.val(mean), true};
}

/// Applies a shared partial convolution until the mask becomes all-ones.
template <typename T>
std::pair<MaskedTensor<T>, int> fill_until_valid(const MaskedTensor<T>& x, const ConvParams<T>& p,
                                                 int max_iters) {
    if (x.values.rank() != 3)
        throw ShapeError("fill_until_valid expects CxHxW input, got " + dims_str(x.values.dims));
    if (p.footprint.kernel_h != p.footprint.kernel_w)
        throw ShapeError("fill_until_valid expects a square kernel");
    Graph<T> g;
    Var xv = g.constant(x.values);
    Var w = g.constant(p.weights);
    Var b = g.constant(p.bias);
    auto [y, mask, iters] =
        ops::tape_fill_until_valid(g, xv, x.mask, w, b, p.footprint.kernel_h, max_iters);
    detail::check_finite_or_throw(g.val(y), "fill_until_valid");
    return {MaskedTensor<T>(g.val(y), std::move(mask)), iters};
}

}  // namespace pvm
