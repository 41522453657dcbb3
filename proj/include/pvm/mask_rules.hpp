#pragma once

#include "pvm/tensor.hpp"

namespace pvm {

/// Receptive-field description for convolution/pooling style operations.
/// Padding is symmetric and padded positions count as invalid.
struct KernelFootprint {
    int kernel_h = 1;
    int kernel_w = 1;
    int stride = 1;
    int padding = 0;

    KernelFootprint() = default;
    KernelFootprint(int kh, int kw, int s, int p)
        : kernel_h(kh), kernel_w(kw), stride(s), padding(p) {
        if (kh < 1 || kw < 1 || s < 1 || p < 0)
            throw ShapeError("invalid footprint: kernel " + std::to_string(kh) + "x" +
                             std::to_string(kw) + " stride " + std::to_string(s) +
                             " padding " + std::to_string(p));
    }
    static KernelFootprint square(int k, int s = 1, int p = 0) {
        return KernelFootprint(k, k, s, p);
    }

    int out_h(int in_h) const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
    int out_w(int in_w) const { return (in_w + 2 * padding - kernel_w) / stride + 1; }

    void check_fits(int in_h, int in_w) const {
        if (in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w)
            throw ShapeError("footprint " + std::to_string(kernel_h) + "x" +
                             std::to_string(kernel_w) + " larger than padded input " +
                             std::to_string(in_h) + "x" + std::to_string(in_w) +
                             " (padding " + std::to_string(padding) + ")");
    }
};

/// AllValid: output valid iff every in-footprint input is valid (erosion).
/// AnyValid: output valid iff at least one in-footprint input is valid (dilation).
enum class ValidityRule { AllValid, AnyValid };

inline const char* rule_name(ValidityRule r) {
    return r == ValidityRule::AllValid ? "AllValid" : "AnyValid";
}

/// Counts valid pixels per output window via a summed-area table.
/// Intentionally a different algorithm from oracle_receptive_field.
inline ValidityMask propagate_receptive_field(const ValidityMask& m, const KernelFootprint& fp,
                                              ValidityRule rule) {
    if (m.rank() != 2) throw ShapeError("receptive-field propagation expects an HxW mask");
    const int h = m.dim(0), w = m.dim(1);
    fp.check_fits(h, w);
    const int oh = fp.out_h(h), ow = fp.out_w(w);

    // sat[i][j] = number of valid pixels in m[0..i) x [0..j)
    std::vector<int64_t> sat(static_cast<size_t>(h + 1) * (w + 1), 0);
    const auto at = [&](int i, int j) -> int64_t& { return sat[static_cast<size_t>(i) * (w + 1) + j]; };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j)
            at(i + 1, j + 1) = at(i, j + 1) + at(i + 1, j) - at(i, j) + m.at2(i, j);

    const int64_t window = static_cast<int64_t>(fp.kernel_h) * fp.kernel_w;
    ValidityMask out({oh, ow});
    for (int oi = 0; oi < oh; ++oi) {
        for (int oj = 0; oj < ow; ++oj) {
            const int top = oi * fp.stride - fp.padding;
            const int left = oj * fp.stride - fp.padding;
            const int i0 = std::max(0, top), j0 = std::max(0, left);
            const int i1 = std::min(h, top + fp.kernel_h), j1 = std::min(w, left + fp.kernel_w);
            int64_t valid = 0;
            if (i0 < i1 && j0 < j1)
                valid = at(i1, j1) - at(i0, j1) - at(i1, j0) + at(i0, j0);
            out.at2(oi, oj) = rule == ValidityRule::AllValid ? (valid == window) : (valid > 0);
        }
    }
    return out;
}

/// Brute-force per-window enumeration; ground truth for
/// propagate_receptive_field.
inline ValidityMask oracle_receptive_field(const ValidityMask& m, const KernelFootprint& fp,
                                           ValidityRule rule) {
    if (m.rank() != 2) throw ShapeError("receptive-field propagation expects an HxW mask");
    const int h = m.dim(0), w = m.dim(1);
    fp.check_fits(h, w);
    const int oh = fp.out_h(h), ow = fp.out_w(w);

    ValidityMask out({oh, ow});
    for (int oi = 0; oi < oh; ++oi) {
        for (int oj = 0; oj < ow; ++oj) {
            bool all = true, any = false;
            for (int u = 0; u < fp.kernel_h; ++u) {
                for (int v = 0; v < fp.kernel_w; ++v) {
                    const int i = oi * fp.stride - fp.padding + u;
                    const int j = oj * fp.stride - fp.padding + v;
                    const bool valid = i >= 0 && i < h && j >= 0 && j < w && m.at2(i, j);
                    all = all && valid;
                    any = any || valid;
                }
            }
            out.at2(oi, oj) = rule == ValidityRule::AllValid ? all : any;
        }
    }
    return out;
}

/// Validity of a dense (fully-connected style) output fed by the whole mask.
inline bool propagate_dense(const ValidityMask& m, ValidityRule rule) {
    if (m.numel() == 0) throw PreconditionError("propagate_dense: empty mask");
    const int64_t valid = m.count_valid();
    return rule == ValidityRule::AllValid ? valid == m.numel() : valid > 0;
}

enum class ScanDirection { Forward, Backward, Bidirectional };

/// Sequence rule: the scan history is the receptive field. Bidirectional
/// history covers the entire sequence at every position.
inline ValidityMask propagate_sequence(const ValidityMask& m_token, ScanDirection dir,
                                       ValidityRule rule) {
    if (m_token.rank() != 1 || m_token.numel() == 0)
        throw PreconditionError("propagate_sequence: expected a non-empty token mask");
    const int64_t L = m_token.numel();
    ValidityMask out({static_cast<int>(L)});

    const auto combine = [&](uint8_t acc, uint8_t v) -> uint8_t {
        return rule == ValidityRule::AllValid ? (acc & v) : (acc | v);
    };
    const uint8_t init = rule == ValidityRule::AllValid ? 1 : 0;

    if (dir == ScanDirection::Bidirectional) {
        uint8_t whole = init;
        for (int64_t t = 0; t < L; ++t) whole = combine(whole, m_token[t]);
        std::fill(out.bits.begin(), out.bits.end(), whole);
        return out;
    }

    uint8_t acc = init;
    if (dir == ScanDirection::Forward) {
        for (int64_t t = 0; t < L; ++t) {
            acc = combine(acc, m_token[t]);
            out[t] = acc;
        }
    } else {
        for (int64_t t = L - 1; t >= 0; --t) {
            acc = combine(acc, m_token[t]);
            out[t] = acc;
        }
    }
    return out;
}

/// Tokenises an HxW mask into per-patch bits. AnyValid marks a patch valid
/// when it contains at least one valid pixel, AllValid when all are valid.
inline ValidityMask patchwise_rule(const ValidityMask& m, int patch, ValidityRule rule) {
    if (m.rank() != 2) throw ShapeError("patchwise_rule expects an HxW mask");
    const int h = m.dim(0), w = m.dim(1);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("mask " + dims_str(m.dims) + " not divisible by patch " +
                         std::to_string(patch));
    const int gh = h / patch, gw = w / patch;
    ValidityMask out({gh * gw});
    for (int pi = 0; pi < gh; ++pi) {
        for (int pj = 0; pj < gw; ++pj) {
            bool all = true, any = false;
            for (int u = 0; u < patch; ++u)
                for (int v = 0; v < patch; ++v) {
                    const bool valid = m.at2(pi * patch + u, pj * patch + v);
                    all = all && valid;
                    any = any || valid;
                }
            out[pi * gw + pj] = rule == ValidityRule::AllValid ? all : any;
        }
    }
    return out;
}

}  // namespace pvm
