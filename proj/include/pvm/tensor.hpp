#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pvm {

/// Thrown when tensor/mask shapes do not satisfy an operation's contract.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when an operation's precondition on the data itself is violated
/// (e.g. an all-invalid input where at least one valid element is required).
struct PreconditionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a numeric computation produced a non-finite value.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Dims = std::vector<int>;

inline std::string dims_str(const Dims& d) {
    if (d.empty()) return "scalar";
    std::string s;
    for (size_t i = 0; i < d.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(d[i]);
    }
    return s;
}

inline int64_t dims_numel(const Dims& d) {
    int64_t n = 1;
    for (int x : d) {
        if (x <= 0) throw ShapeError("dimension must be positive, got " + dims_str(d));
        n *= x;
    }
    return n;
}

/// Dense row-major tensor. T is float for training math, double for
/// gradient verification.
template <typename T>
struct Tensor {
    Dims dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Dims d) : dims(std::move(d)), data(static_cast<size_t>(dims_numel(dims)), T(0)) {}
    Tensor(Dims d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
        if (static_cast<int64_t>(data.size()) != dims_numel(dims))
            throw ShapeError("data length " + std::to_string(data.size()) +
                             " does not match dims " + dims_str(dims));
    }

    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    T& at2(int i, int j) { return data[static_cast<size_t>(i) * dims[1] + j]; }
    const T& at2(int i, int j) const { return data[static_cast<size_t>(i) * dims[1] + j]; }

    T& at3(int c, int i, int j) {
        return data[(static_cast<size_t>(c) * dims[1] + i) * dims[2] + j];
    }
    const T& at3(int c, int i, int j) const {
        return data[(static_cast<size_t>(c) * dims[1] + i) * dims[2] + j];
    }

    bool same_dims(const Tensor& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

/// Boolean validity mask over spatial (HxW) or token (L) positions.
/// The channel axis is never masked.
struct ValidityMask {
    Dims dims;
    std::vector<uint8_t> bits;

    ValidityMask() = default;
    explicit ValidityMask(Dims d) : dims(std::move(d)), bits(static_cast<size_t>(dims_numel(dims)), 0) {}
    ValidityMask(Dims d, std::vector<uint8_t> b) : dims(std::move(d)), bits(std::move(b)) {
        if (static_cast<int64_t>(bits.size()) != dims_numel(dims))
            throw ShapeError("mask bit count does not match dims " + dims_str(dims));
        for (uint8_t v : bits)
            if (v > 1) throw PreconditionError("mask elements must be exactly 0 or 1");
    }

    static ValidityMask ones(Dims d) {
        ValidityMask m(std::move(d));
        std::fill(m.bits.begin(), m.bits.end(), uint8_t(1));
        return m;
    }
    static ValidityMask zeros(Dims d) { return ValidityMask(std::move(d)); }

    int rank() const { return static_cast<int>(dims.size()); }
    int dim(int i) const { return dims[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(bits.size()); }

    uint8_t& operator[](int64_t i) { return bits[static_cast<size_t>(i)]; }
    const uint8_t& operator[](int64_t i) const { return bits[static_cast<size_t>(i)]; }

    uint8_t& at2(int i, int j) { return bits[static_cast<size_t>(i) * dims[1] + j]; }
    const uint8_t& at2(int i, int j) const { return bits[static_cast<size_t>(i) * dims[1] + j]; }

    int64_t count_valid() const {
        int64_t n = 0;
        for (uint8_t v : bits) n += v;
        return n;
    }
    bool all_valid() const { return count_valid() == numel(); }
    bool any_valid() const { return count_valid() > 0; }
};

/// Returns true when `mask` covers the spatial/token dims of `values`.
/// Accepted layouts: identical dims, or channel-first values (CxHxW with an
/// HxW mask).
template <typename T>
bool mask_matches(const Tensor<T>& values, const ValidityMask& mask) {
    if (values.dims == mask.dims) return true;
    if (values.rank() == mask.rank() + 1) {
        for (int i = 0; i < mask.rank(); ++i)
            if (values.dim(i + 1) != mask.dim(i)) return false;
        return true;
    }
    return false;
}

/// A dense tensor paired with its validity mask. Library operations keep
/// exact zeros at invalid positions.
template <typename T>
struct MaskedTensor {
    Tensor<T> values;
    ValidityMask mask;

    MaskedTensor() = default;
    MaskedTensor(Tensor<T> v, ValidityMask m) : values(std::move(v)), mask(std::move(m)) {
        if (!mask_matches(values, mask))
            throw ShapeError("mask dims " + dims_str(mask.dims) +
                             " do not cover value dims " + dims_str(values.dims));
    }

    /// Number of channels sharing one mask position (1 when dims coincide).
    int channels() const {
        return values.rank() == mask.rank() + 1 ? values.dim(0) : 1;
    }
};

/// Writes exact zeros wherever the mask is 0 (shared across channels).
template <typename T>
void zero_invalid(MaskedTensor<T>& x) {
    const int64_t spatial = x.mask.numel();
    const int c = x.channels();
    for (int ch = 0; ch < c; ++ch)
        for (int64_t i = 0; i < spatial; ++i)
            if (!x.mask[i]) x.values[ch * spatial + i] = T(0);
}

/// L tokens of dimension D plus a token-level validity mask of length L.
template <typename T>
struct TokenSequence {
    Tensor<T> tokens;      // L x D
    ValidityMask token_mask;  // L

    TokenSequence() = default;
    TokenSequence(Tensor<T> t, ValidityMask m) : tokens(std::move(t)), token_mask(std::move(m)) {
        if (tokens.rank() != 2)
            throw ShapeError("token tensor must be LxD, got " + dims_str(tokens.dims));
        if (token_mask.rank() != 1 || token_mask.dim(0) != tokens.dim(0))
            throw ShapeError("token mask length " + dims_str(token_mask.dims) +
                             " does not match token count " + std::to_string(tokens.dim(0)));
    }

    int length() const { return tokens.dim(0); }
    int width() const { return tokens.dim(1); }
};

using Tensor32 = Tensor<float>;
using Tensor64 = Tensor<double>;

}  // namespace pvm
