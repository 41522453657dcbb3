#pragma once

#include "pvm/mask_rules.hpp"
#include "pvm/tensor.hpp"

namespace pvm {
namespace kern {

/// C = A * B with A: m x k, B: k x n, all row-major. The i-k-j loop order
/// keeps the inner loop contiguous so it vectorizes without reassociation.
template <typename T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + static_cast<int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const T av = arow[l];
            if (av == T(0)) continue;
            const T* brow = b + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// C += A * B, same layout as matmul.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<int64_t>(i) * n;
        const T* arow = a + static_cast<int64_t>(i) * k;
        for (int l = 0; l < k; ++l) {
            const T av = arow[l];
            if (av == T(0)) continue;
            const T* brow = b + static_cast<int64_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul shape mismatch: " + dims_str(a.dims) + " * " + dims_str(b.dims));
    Tensor<T> c({a.dim(0), b.dim(1)});
    matmul(a.data.data(), b.data.data(), c.data.data(), a.dim(0), a.dim(1), b.dim(1));
    return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    if (a.rank() != 2) throw ShapeError("transpose expects a matrix, got " + dims_str(a.dims));
    Tensor<T> t({a.dim(1), a.dim(0)});
    for (int i = 0; i < a.dim(0); ++i)
        for (int j = 0; j < a.dim(1); ++j) t.at2(j, i) = a.at2(i, j);
    return t;
}

/// out[k, oi, oj] = bias[k] + sum_{c,u,v} w[k,c,u,v] * x[c, oi*s-p+u, oj*s-p+v]
/// with zero contribution outside the input bounds.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                         const KernelFootprint& fp) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError("conv2d expects CxHxW input and KxCxKhxKw weights, got " +
                         dims_str(x.dims) + " and " + dims_str(w.dims));
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int K = w.dim(0);
    if (w.dim(1) != C || w.dim(2) != fp.kernel_h || w.dim(3) != fp.kernel_w)
        throw ShapeError("conv2d weight dims " + dims_str(w.dims) + " inconsistent with input " +
                         dims_str(x.dims) + " and footprint");
    if (bias.numel() != K) throw ShapeError("conv2d bias length must equal out channels");
    fp.check_fits(H, W);
    const int OH = fp.out_h(H), OW = fp.out_w(W);

    Tensor<T> y({K, OH, OW});
    for (int k = 0; k < K; ++k) {
        for (int oi = 0; oi < OH; ++oi) {
            for (int oj = 0; oj < OW; ++oj) {
                T acc = bias[k];
                const int top = oi * fp.stride - fp.padding;
                const int left = oj * fp.stride - fp.padding;
                for (int c = 0; c < C; ++c) {
                    for (int u = 0; u < fp.kernel_h; ++u) {
                        const int i = top + u;
                        if (i < 0 || i >= H) continue;
                        for (int v = 0; v < fp.kernel_w; ++v) {
                            const int j = left + v;
                            if (j < 0 || j >= W) continue;
                            acc += w.data[((static_cast<int64_t>(k) * C + c) * fp.kernel_h + u) *
                                              fp.kernel_w + v] *
                                   x.data[(static_cast<int64_t>(c) * H + i) * W + j];
                        }
                    }
                }
                y.at3(k, oi, oj) = acc;
            }
        }
    }
    return y;
}

/// Accumulates input/weight/bias gradients for conv2d_forward.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const KernelFootprint& fp,
                     const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gbias) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const int K = w.dim(0), OH = gy.dim(1), OW = gy.dim(2);
    for (int k = 0; k < K; ++k) {
        for (int oi = 0; oi < OH; ++oi) {
            for (int oj = 0; oj < OW; ++oj) {
                const T g = gy.at3(k, oi, oj);
                if (g == T(0)) continue;
                if (gbias) (*gbias)[k] += g;
                const int top = oi * fp.stride - fp.padding;
                const int left = oj * fp.stride - fp.padding;
                for (int c = 0; c < C; ++c) {
                    for (int u = 0; u < fp.kernel_h; ++u) {
                        const int i = top + u;
                        if (i < 0 || i >= H) continue;
                        for (int v = 0; v < fp.kernel_w; ++v) {
                            const int j = left + v;
                            if (j < 0 || j >= W) continue;
                            const int64_t wi =
                                ((static_cast<int64_t>(k) * C + c) * fp.kernel_h + u) * fp.kernel_w + v;
                            const int64_t xi = (static_cast<int64_t>(c) * H + i) * W + j;
                            if (gw) (*gw)[wi] += g * x[xi];
                            if (gx) (*gx)[xi] += g * w[wi];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
T softplus(T x) {
    // log1p(exp(x)) with the large-x branch to avoid overflow
    return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
    return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

struct LayerNormCache {
    // per-row mean and inverse stddev
    std::vector<double> mean;
    std::vector<double> inv_std;
};

/// Row-wise layer normalization over the last axis of an LxD matrix.
template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps, LayerNormCache* cache) {
    if (x.rank() != 2) throw ShapeError("layer_norm expects LxD, got " + dims_str(x.dims));
    const int L = x.dim(0), D = x.dim(1);
    if (gamma.numel() != D || beta.numel() != D)
        throw ShapeError("layer_norm affine params must have length D");
    Tensor<T> y({L, D});
    if (cache) {
        cache->mean.assign(L, 0.0);
        cache->inv_std.assign(L, 0.0);
    }
    for (int i = 0; i < L; ++i) {
        T mu = T(0);
        for (int j = 0; j < D; ++j) mu += x.at2(i, j);
        mu /= T(D);
        T var = T(0);
        for (int j = 0; j < D; ++j) {
            const T d = x.at2(i, j) - mu;
            var += d * d;
        }
        var /= T(D);
        const T inv = T(1) / std::sqrt(var + eps);
        if (cache) {
            cache->mean[i] = static_cast<double>(mu);
            cache->inv_std[i] = static_cast<double>(inv);
        }
        for (int j = 0; j < D; ++j)
            y.at2(i, j) = (x.at2(i, j) - mu) * inv * gamma[j] + beta[j];
    }
    return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const LayerNormCache& cache,
                         const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
    const int L = x.dim(0), D = x.dim(1);
    for (int i = 0; i < L; ++i) {
        const T mu = static_cast<T>(cache.mean[i]);
        const T inv = static_cast<T>(cache.inv_std[i]);
        T sum_g = T(0), sum_gx = T(0);
        for (int j = 0; j < D; ++j) {
            const T xhat = (x.at2(i, j) - mu) * inv;
            const T g = gy.at2(i, j) * gamma[j];
            sum_g += g;
            sum_gx += g * xhat;
            if (ggamma) (*ggamma)[j] += gy.at2(i, j) * xhat;
            if (gbeta) (*gbeta)[j] += gy.at2(i, j);
        }
        if (gx) {
            for (int j = 0; j < D; ++j) {
                const T xhat = (x.at2(i, j) - mu) * inv;
                const T g = gy.at2(i, j) * gamma[j];
                (*gx).at2(i, j) += inv * (g - sum_g / T(D) - xhat * sum_gx / T(D));
            }
        }
    }
}

}  // namespace kern
}  // namespace pvm
