#include "pvm/datagen.hpp"

#include <algorithm>
#include <cmath>

namespace pvm {

namespace {

// Marks a filled disc as invalid, recording newly flipped pixels in order.
void mark_disc(ValidityMask& m, double cx, double cy, double radius,
               std::vector<int64_t>& order) {
    const int h = m.dim(0), w = m.dim(1);
    const int r = static_cast<int>(std::ceil(radius));
    for (int i = std::max(0, static_cast<int>(cy) - r); i <= std::min(h - 1, static_cast<int>(cy) + r); ++i)
        for (int j = std::max(0, static_cast<int>(cx) - r); j <= std::min(w - 1, static_cast<int>(cx) + r); ++j) {
            const double dy = i - cy, dx = j - cx;
            if (dx * dx + dy * dy > radius * radius) continue;
            const int64_t idx = static_cast<int64_t>(i) * w + j;
            if (m[idx]) {
                m[idx] = 0;
                order.push_back(idx);
            }
        }
}

// Free-form polyline stroke confined to a rectangle.
void mark_stroke(ValidityMask& m, CounterRng& rng, int top, int left, int cell_h, int cell_w,
                 int width_min, int width_max, std::vector<int64_t>& order) {
    double y = top + rng.uniform() * cell_h;
    double x = left + rng.uniform() * cell_w;
    double angle = rng.uniform(0.0, 6.283185307179586);
    const double radius = rng.uniform(width_min * 0.5, width_max * 0.5 + 1e-9);
    const int segments = rng.uniform_int(2, 6);
    for (int s = 0; s < segments; ++s) {
        angle += rng.uniform(-1.0, 1.0);
        const double len = rng.uniform(0.15, 0.5) * std::min(cell_h, cell_w);
        const int steps = std::max(1, static_cast<int>(len));
        for (int t = 0; t < steps; ++t) {
            y += std::sin(angle);
            x += std::cos(angle);
            y = std::clamp(y, static_cast<double>(top), static_cast<double>(top + cell_h - 1));
            x = std::clamp(x, static_cast<double>(left), static_cast<double>(left + cell_w - 1));
            mark_disc(m, x, y, radius, order);
        }
    }
}

void mark_rect(ValidityMask& m, CounterRng& rng, std::vector<int64_t>& order) {
    const int h = m.dim(0), w = m.dim(1);
    const int rh = rng.uniform_int(1, std::max(1, h / 3));
    const int rw = rng.uniform_int(1, std::max(1, w / 3));
    const int top = rng.uniform_int(0, h - rh);
    const int left = rng.uniform_int(0, w - rw);
    for (int i = top; i < top + rh; ++i)
        for (int j = left; j < left + rw; ++j) {
            const int64_t idx = static_cast<int64_t>(i) * w + j;
            if (m[idx]) {
                m[idx] = 0;
                order.push_back(idx);
            }
        }
}

int64_t invalid_count(const ValidityMask& m) { return m.numel() - m.count_valid(); }

// Feasible invalid-count range for fraction band [lo, hi) keeping >= 1 valid.
std::pair<int64_t, int64_t> band_count_range(double lo, double hi, int64_t total) {
    const int64_t n_min = static_cast<int64_t>(std::ceil(lo * static_cast<double>(total) - 1e-9));
    int64_t n_max = static_cast<int64_t>(std::ceil(hi * static_cast<double>(total) - 1e-9)) - 1;
    n_max = std::min(n_max, total - 1);
    return {n_min, n_max};
}

ValidityMask gen_regime_mask(const MaskPolicy& policy, int h, int w, uint64_t stream) {
    const auto [lo, hi] = regime_band(policy.regime);
    const int64_t total = static_cast<int64_t>(h) * w;
    const auto [n_min, n_max] = band_count_range(lo, hi, total);
    if (n_min > n_max)
        throw PreconditionError("regime '" + std::string(regime_name(policy.regime)) +
                                "' band unreachable on a " + std::to_string(h) + "x" +
                                std::to_string(w) + " mask");
    CounterRng rng(policy.seed, stream * 3 + 1);
    const int64_t target = n_min + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n_max - n_min + 1));

    ValidityMask m = ValidityMask::ones({h, w});
    std::vector<int64_t> order;
    int guard = 0;
    while (invalid_count(m) < target) {
        if (++guard > 10000)
            throw PreconditionError("regime mask generation did not reach its band");
        if (rng.bernoulli(0.5))
            mark_rect(m, rng, order);
        else
            mark_stroke(m, rng, 0, 0, h, w, std::max(1, h / 32), std::max(2, h / 12), order);
    }
    // trim the tail of the marking order back to the exact target
    while (invalid_count(m) > target) {
        const int64_t idx = order.back();
        order.pop_back();
        if (!m[idx]) m[idx] = 1;
    }
    return m;
}

ValidityMask gen_brush_mask(const MaskPolicy& policy, int h, int w, uint64_t stream) {
    const int crop = std::max(policy.min_valid_patch, std::min({policy.crop, h, w}));
    const int cells_i = (h + crop - 1) / crop;
    const int cells_j = (w + crop - 1) / crop;
    const int64_t total = static_cast<int64_t>(h) * w;
    const auto [n_min, n_max] = band_count_range(policy.band_lo, policy.band_hi, total);
    if (n_min > n_max)
        throw PreconditionError("brush-grid band unreachable on a " + std::to_string(h) + "x" +
                                std::to_string(w) + " mask");
    CounterRng rng(policy.seed, stream * 3 + 2);
    const int64_t target = n_min + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(n_max - n_min + 1));

    ValidityMask m = ValidityMask::ones({h, w});
    std::vector<int64_t> order;

    const auto cell_bounds = [&](int ci, int cj, int& top, int& left, int& ch, int& cw) {
        top = ci * crop;
        left = cj * crop;
        ch = std::min(crop, h - top);
        cw = std::min(crop, w - left);
    };

    for (int ci = 0; ci < cells_i; ++ci)
        for (int cj = 0; cj < cells_j; ++cj) {
            int top, left, ch, cw;
            cell_bounds(ci, cj, top, left, ch, cw);
            for (int s = 0; s < policy.strokes_per_cell; ++s)
                mark_stroke(m, rng, top, left, ch, cw, policy.width_min, policy.width_max, order);
        }

    // top up with extra strokes (round-robin over cells) until the band target
    int guard = 0;
    int cell = 0;
    while (invalid_count(m) < target) {
        if (++guard > 20000)
            throw PreconditionError("brush-grid mask generation did not reach its band");
        const int ci = cell / cells_j, cj = cell % cells_j;
        cell = (cell + 1) % (cells_i * cells_j);
        int top, left, ch, cw;
        cell_bounds(ci, cj, top, left, ch, cw);
        mark_stroke(m, rng, top, left, ch, cw, policy.width_min, policy.width_max, order);
    }
    while (invalid_count(m) > target) {
        const int64_t idx = order.back();
        order.pop_back();
        if (!m[idx]) m[idx] = 1;
    }

    // locally feasible ratio: every cell keeps >= 1 fully valid patch
    const int P = policy.min_valid_patch;
    for (int ci = 0; ci < cells_i; ++ci)
        for (int cj = 0; cj < cells_j; ++cj) {
            int top, left, ch, cw;
            cell_bounds(ci, cj, top, left, ch, cw);
            if (ch < P || cw < P) continue;
            bool has_valid_patch = false;
            for (int i = top; i + P <= top + ch && !has_valid_patch; i += P)
                for (int j = left; j + P <= left + cw && !has_valid_patch; j += P) {
                    bool all = true;
                    for (int u = 0; u < P && all; ++u)
                        for (int v = 0; v < P && all; ++v) all = m.at2(i + u, j + v);
                    has_valid_patch = all;
                }
            if (!has_valid_patch) {
                const int pi = top + rng.uniform_int(0, ch / P - 1) * P;
                const int pj = left + rng.uniform_int(0, cw / P - 1) * P;
                for (int u = 0; u < P; ++u)
                    for (int v = 0; v < P; ++v) m.at2(pi + u, pj + v) = 1;
            }
        }
    return m;
}

ValidityMask gen_sparse_mask(const MaskPolicy& policy, int h, int w, uint64_t stream) {
    CounterRng rng(policy.seed, stream * 3 + 0);
    ValidityMask m({h, w});
    for (int attempt = 0; attempt < 16; ++attempt) {
        for (auto& b : m.bits) b = rng.bernoulli(policy.density) ? 1 : 0;
        if (m.any_valid()) return m;
    }
    m[static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(m.numel()))] = 1;
    return m;
}

}  // namespace

ValidityMask gen_mask(const MaskPolicy& policy, int h, int w, uint64_t stream) {
    if (h < 1 || w < 1) throw ShapeError("gen_mask: degenerate size");
    switch (policy.kind) {
        case MaskPolicyKind::Regime: return gen_regime_mask(policy, h, w, stream);
        case MaskPolicyKind::SparseSample: return gen_sparse_mask(policy, h, w, stream);
        default: return gen_brush_mask(policy, h, w, stream);
    }
}

DepthSample gen_depth_field(const DepthFieldSpec& spec, uint64_t index) {
    const int n = spec.size;
    CounterRng rng(spec.seed, index * 2 + 0);
    Tensor<float> gt({1, n, n});

    const double base = rng.uniform(10.0, 50.0);
    const double gx = rng.uniform(-20.0, 20.0) / n;
    const double gy = rng.uniform(-20.0, 20.0) / n;
    struct Bump {
        double cx, cy, sigma, amp;
    };
    std::vector<Bump> bumps(spec.bumps);
    for (auto& b : bumps) {
        b.cx = rng.uniform(0.0, n);
        b.cy = rng.uniform(0.0, n);
        b.sigma = rng.uniform(n / 16.0, n / 4.0);
        b.amp = rng.uniform(-25.0, 25.0);
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double v = base + gx * j + gy * i;
            for (const auto& b : bumps) {
                const double dx = j - b.cx, dy = i - b.cy;
                v += b.amp * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
            }
            gt.at3(0, i, j) = static_cast<float>(std::clamp(v, 1.0, 80.0));
        }

    MaskPolicy p = MaskPolicy::sparse(spec.density, spec.seed);
    ValidityMask m = gen_mask(p, n, n, index * 2 + 1);
    Tensor<float> sparse({1, n, n});
    for (int64_t i = 0; i < m.numel(); ++i) sparse[i] = m[i] ? gt[i] : 0.0f;

    DepthSample s;
    s.gt = std::move(gt);
    s.sparse_in = MaskedTensor<float>(std::move(sparse), std::move(m));
    return s;
}

namespace {
const char* kShapeNames[10] = {"circle", "square",  "triangle", "cross",   "ring",
                               "bar-h",  "bar-v",   "checker",  "diamond", "dot-grid"};

bool shape_hit(int label, double dx, double dy, double r) {
    const double ax = std::abs(dx), ay = std::abs(dy);
    const double d2 = dx * dx + dy * dy;
    switch (label) {
        case 0: return d2 <= r * r;                                   // circle
        case 1: return ax <= 0.8 * r && ay <= 0.8 * r;                // square
        case 2:                                                       // triangle (apex up)
            return dy >= -r && dy <= 0.7 * r && ax <= 0.62 * (dy + r);
        case 3: return (ax <= 0.28 * r && ay <= r) || (ay <= 0.28 * r && ax <= r);  // cross
        case 4: return d2 <= r * r && d2 >= 0.55 * 0.55 * r * r;      // ring
        case 5: return ay <= 0.32 * r && ax <= r;                      // bar-h
        case 6: return ax <= 0.32 * r && ay <= r;                      // bar-v
        case 7: {                                                      // checker
            if (ax > 0.9 * r || ay > 0.9 * r) return false;
            const double cellw = 0.6 * r;
            const int qi = static_cast<int>(std::floor((dx + 0.9 * r) / cellw));
            const int qj = static_cast<int>(std::floor((dy + 0.9 * r) / cellw));
            return (qi + qj) % 2 == 0;
        }
        case 8: return ax + ay <= r;                                   // diamond
        default: {                                                     // dot-grid
            if (ax > r || ay > r) return false;
            const double s = 0.66 * r;
            const double mx = std::fmod(dx + 3.0 * s, s) - 0.5 * s;
            const double my = std::fmod(dy + 3.0 * s, s) - 0.5 * s;
            return mx * mx + my * my <= 0.06 * r * r;
        }
    }
}
}  // namespace

const char* shape_class_name(int label) { return kShapeNames[label % 10]; }

ShapeSample gen_shape_sample(const ShapesSpec& spec, uint64_t index) {
    const int n = spec.size;
    const int label = static_cast<int>(index % static_cast<uint64_t>(spec.classes));
    CounterRng rng(spec.seed, index);

    const double cx = n / 2.0 + rng.uniform(-n / 8.0, n / 8.0);
    const double cy = n / 2.0 + rng.uniform(-n / 8.0, n / 8.0);
    const double r = rng.uniform(0.22 * n, 0.38 * n);
    // dark shapes on a bright noisy background: shape intensities overlap
    // the zero placeholder, so holes and content are not separable without
    // the validity mask
    const float fg = static_cast<float>(rng.uniform(0.0, 0.3));

    ShapeSample s;
    s.label = label;
    s.image = Tensor<float>({spec.channels, n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const bool hit = shape_hit(label, j - cx, i - cy, r);
            const float bg = static_cast<float>(rng.uniform(0.55, 1.0));
            const float v = hit ? fg + static_cast<float>(rng.uniform(0.0, 0.1)) : bg;
            for (int c = 0; c < spec.channels; ++c) {
                const float tint = spec.channels == 1 ? 0.0f : 0.03f * static_cast<float>(c);
                s.image.at3(c, i, j) = std::clamp(v + (hit ? tint : 0.0f), 0.0f, 1.0f);
            }
        }
    return s;
}

}  // namespace pvm
