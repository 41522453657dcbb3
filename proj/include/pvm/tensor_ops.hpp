#pragma once

#include "pvm/tensor.hpp"

namespace pvm {

enum class BinaryOp { Add, Multiply };

/// Pointwise add/multiply of two masked tensors with identical dims.
/// Output mask is the AND of the input masks; invalid outputs hold 0.
template <typename T>
MaskedTensor<T> elementwise_combine(const MaskedTensor<T>& a, const MaskedTensor<T>& b,
                                    BinaryOp op) {
    if (a.values.dims != b.values.dims || a.mask.dims != b.mask.dims)
        throw ShapeError("elementwise_combine shape mismatch: " + dims_str(a.values.dims) +
                         " vs " + dims_str(b.values.dims));
    MaskedTensor<T> out;
    out.mask = ValidityMask(a.mask.dims);
    for (int64_t i = 0; i < a.mask.numel(); ++i)
        out.mask[i] = a.mask[i] & b.mask[i];

    out.values = Tensor<T>(a.values.dims);
    const int64_t spatial = out.mask.numel();
    const int channels = a.channels();
    for (int c = 0; c < channels; ++c) {
        for (int64_t i = 0; i < spatial; ++i) {
            if (!out.mask[i]) continue;
            const int64_t k = c * spatial + i;
            out.values[k] = op == BinaryOp::Add ? a.values[k] + b.values[k]
                                                : a.values[k] * b.values[k];
        }
    }
    return out;
}

/// Concatenates parts along the channel axis (CxHxW layout). The shared
/// spatial mask becomes the AND over all part masks.
template <typename T>
MaskedTensor<T> concat_channels(const std::vector<MaskedTensor<T>>& parts) {
    if (parts.empty()) throw PreconditionError("concat_channels: empty part list");
    for (const auto& p : parts)
        if (p.values.rank() != 3)
            throw ShapeError("concat_channels expects CxHxW parts, got " +
                             dims_str(p.values.dims));
    const Dims spatial{parts[0].values.dim(1), parts[0].values.dim(2)};
    int total_c = 0;
    for (const auto& p : parts) {
        if (p.values.dim(1) != spatial[0] || p.values.dim(2) != spatial[1])
            throw ShapeError("concat_channels spatial mismatch: " + dims_str(parts[0].values.dims) +
                             " vs " + dims_str(p.values.dims));
        total_c += p.values.dim(0);
    }

    MaskedTensor<T> out;
    out.mask = ValidityMask::ones(spatial);
    for (const auto& p : parts)
        for (int64_t i = 0; i < out.mask.numel(); ++i)
            out.mask[i] = out.mask[i] & p.mask[i];

    out.values = Tensor<T>({total_c, spatial[0], spatial[1]});
    const int64_t plane = static_cast<int64_t>(spatial[0]) * spatial[1];
    int64_t offset = 0;
    for (const auto& p : parts) {
        for (int c = 0; c < p.values.dim(0); ++c)
            for (int64_t i = 0; i < plane; ++i)
                out.values[offset + c * plane + i] =
                    out.mask[i] ? p.values[c * plane + i] : T(0);
        offset += static_cast<int64_t>(p.values.dim(0)) * plane;
    }
    return out;
}

/// Row-major reshape of values and mask. `new_mask_dims` reshapes the
/// spatial/token axes only and must preserve the element count.
template <typename T>
MaskedTensor<T> reshape_masked(const MaskedTensor<T>& x, Dims new_value_dims,
                               Dims new_mask_dims) {
    if (dims_numel(new_value_dims) != x.values.numel())
        throw ShapeError("reshape_masked: value count mismatch, " + dims_str(x.values.dims) +
                         " -> " + dims_str(new_value_dims));
    if (dims_numel(new_mask_dims) != x.mask.numel())
        throw ShapeError("reshape_masked: mask count mismatch, " + dims_str(x.mask.dims) +
                         " -> " + dims_str(new_mask_dims));
    MaskedTensor<T> out;
    out.values = Tensor<T>(std::move(new_value_dims), x.values.data);
    out.mask = ValidityMask(std::move(new_mask_dims), x.mask.bits);
    if (!mask_matches(out.values, out.mask))
        throw ShapeError("reshape_masked: reshaped mask " + dims_str(out.mask.dims) +
                         " does not cover " + dims_str(out.values.dims));
    zero_invalid(out);
    return out;
}

}  // namespace pvm
