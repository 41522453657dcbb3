#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pvm/rng.hpp"
#include "pvm/tensor.hpp"

namespace pvm {

enum class MaskPolicyKind { BrushGrid, Regime, SparseSample };
enum class MaskRegime { Easy, Hard, Extreme };

inline const char* regime_name(MaskRegime r) {
    switch (r) {
        case MaskRegime::Easy: return "easy";
        case MaskRegime::Hard: return "hard";
        default: return "extreme";
    }
}

/// Invalid-fraction band [lo, hi) of a stress regime.
inline std::pair<double, double> regime_band(MaskRegime r) {
    switch (r) {
        case MaskRegime::Easy: return {0.25, 0.50};
        case MaskRegime::Hard: return {0.50, 0.75};
        default: return {0.75, 0.90};
    }
}

/// Mask generation policy. Every generated mask keeps at least one valid
/// pixel; BrushGrid additionally keeps one fully valid patch per crop cell.
struct MaskPolicy {
    MaskPolicyKind kind = MaskPolicyKind::BrushGrid;
    uint64_t seed = 0;

    // BrushGrid
    int crop = 96;               // cell size; clamped to the image
    int strokes_per_cell = 3;    // initial strokes drawn per cell
    int width_min = 2;
    int width_max = 5;
    int min_valid_patch = 4;     // every cell keeps >= 1 fully valid patch this size
    double band_lo = 0.25;       // target invalid fraction band [lo, hi)
    double band_hi = 0.50;

    // Regime
    MaskRegime regime = MaskRegime::Easy;

    // SparseSample
    double density = 0.05;  // probability that a pixel is valid

    static MaskPolicy brush_grid(uint64_t seed, int crop = 96, int strokes = 3, int wmin = 2,
                                 int wmax = 5, int min_valid_patch = 4) {
        MaskPolicy p;
        p.kind = MaskPolicyKind::BrushGrid;
        p.seed = seed;
        p.crop = crop;
        p.strokes_per_cell = strokes;
        p.width_min = wmin;
        p.width_max = wmax;
        p.min_valid_patch = min_valid_patch;
        return p;
    }
    static MaskPolicy regime_policy(MaskRegime r, uint64_t seed) {
        MaskPolicy p;
        p.kind = MaskPolicyKind::Regime;
        p.regime = r;
        p.seed = seed;
        return p;
    }
    static MaskPolicy sparse(double density, uint64_t seed) {
        MaskPolicy p;
        p.kind = MaskPolicyKind::SparseSample;
        p.density = density;
        p.seed = seed;
        return p;
    }
};

/// Deterministic mask generation; `stream` separates samples.
ValidityMask gen_mask(const MaskPolicy& policy, int h, int w, uint64_t stream = 0);

inline double invalid_fraction(const ValidityMask& m) {
    return 1.0 - static_cast<double>(m.count_valid()) / static_cast<double>(m.numel());
}

// ---- synthetic datasets ----------------------------------------------------

/// Smooth positive depth surface (ramp plus bumps) in meters, range [1, 80].
struct DepthFieldSpec {
    int size = 64;
    double density = 0.05;  // sparse-input valid density
    int bumps = 6;
    uint64_t seed = 0;
};

struct DepthSample {
    Tensor<float> gt;               // 1 x size x size
    MaskedTensor<float> sparse_in;  // gt at valid positions, exact zeros elsewhere
};

DepthSample gen_depth_field(const DepthFieldSpec& spec, uint64_t index);

/// Ten shape templates rendered with position/scale jitter over a noisy
/// background: circle, square, triangle, cross, ring, bar-h, bar-v,
/// checker, diamond, dot-grid.
struct ShapesSpec {
    int size = 32;
    int channels = 1;
    int classes = 10;
    uint64_t seed = 0;
};

struct ShapeSample {
    Tensor<float> image;  // channels x size x size
    int label = 0;
};

ShapeSample gen_shape_sample(const ShapesSpec& spec, uint64_t index);

const char* shape_class_name(int label);

}  // namespace pvm
