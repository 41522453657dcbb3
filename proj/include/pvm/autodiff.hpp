#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pvm/kernels.hpp"
#include "pvm/mask_rules.hpp"
#include "pvm/tensor.hpp"

namespace pvm {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in topological order during the
/// forward pass; backward() walks them once in reverse. Masks and other
/// mask-derived routing enter only as constants and never receive gradients.
template <typename T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated on first accumulation
        bool requires_grad = false;
        std::function<void(Graph&, const Tensor<T>&)> pull;
    };

    std::vector<Node> nodes;

    Var leaf(Tensor<T> v, bool requires_grad) {
        Node n;
        n.value = std::move(v);
        n.requires_grad = requires_grad;
        nodes.push_back(std::move(n));
        return Var{static_cast<int>(nodes.size()) - 1};
    }

    Var constant(Tensor<T> v) { return leaf(std::move(v), false); }

    const Tensor<T>& val(Var v) const { return nodes[v.id].value; }

    /// Gradient of the loss w.r.t. this node; zeros if nothing reached it.
    Tensor<T> grad(Var v) const {
        const Node& n = nodes[v.id];
        if (n.grad.numel() == 0) return Tensor<T>(n.value.dims);
        return n.grad;
    }

    void accum(int id, const Tensor<T>& g) {
        Node& n = nodes[id];
        if (!n.requires_grad) return;
        if (n.grad.numel() == 0) n.grad = Tensor<T>(n.value.dims);
        for (int64_t i = 0; i < g.numel(); ++i) n.grad[i] += g[i];
    }

    /// Reverse pass from a scalar loss node. One backward per tape.
    void backward(Var loss) {
        if (backward_done_) throw std::logic_error("backward already ran on this tape");
        if (val(loss).numel() != 1) throw PreconditionError("backward: loss must be a scalar node");
        backward_done_ = true;
        Node& ln = nodes[loss.id];
        if (!ln.requires_grad) return;  // loss detached from every parameter
        ln.grad = Tensor<T>(ln.value.dims);
        ln.grad[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes[id];
            if (n.pull && n.grad.numel() > 0) n.pull(*this, n.grad);
        }
    }

    // ---- primitives -----------------------------------------------------

    Var add(Var a, Var b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        if (av.dims != bv.dims)
            throw ShapeError("add shape mismatch: " + dims_str(av.dims) + " vs " + dims_str(bv.dims));
        Tensor<T> out = av;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, const Tensor<T>& gy) {
            g.accum(a.id, gy);
            g.accum(b.id, gy);
        });
    }

    Var sub(Var a, Var b) { return add(a, scale(b, T(-1))); }

    Var mul(Var a, Var b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        if (av.dims != bv.dims)
            throw ShapeError("mul shape mismatch: " + dims_str(av.dims) + " vs " + dims_str(bv.dims));
        Tensor<T> out = av;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
        return make(std::move(out), {a, b}, [a, b](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>&av = g.val(a), &bv = g.val(b);
            Tensor<T> ga(av.dims), gb(bv.dims);
            for (int64_t i = 0; i < gy.numel(); ++i) {
                ga[i] = gy[i] * bv[i];
                gb[i] = gy[i] * av[i];
            }
            g.accum(a.id, ga);
            g.accum(b.id, gb);
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v *= s;
        return make(std::move(out), {a}, [a, s](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga = gy;
            for (auto& v : ga.data) v *= s;
            g.accum(a.id, ga);
        });
    }

    /// Elementwise multiply by a constant tensor (scale maps, soft weights).
    Var cmul(Var a, Tensor<T> c) {
        const Tensor<T>& av = val(a);
        if (av.dims != c.dims)
            throw ShapeError("cmul shape mismatch: " + dims_str(av.dims) + " vs " + dims_str(c.dims));
        Tensor<T> out = av;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
        auto cp = std::make_shared<Tensor<T>>(std::move(c));
        return make(std::move(out), {a}, [a, cp](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga = gy;
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] *= (*cp)[i];
            g.accum(a.id, ga);
        });
    }

    /// Masked selection over the leading row axis: invalid rows become exact
    /// (+0) zeros. Select semantics rather than multiply, so placeholder
    /// signs cannot leak through signed zeros.
    Var mask_rows(Var a, const ValidityMask& rows) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 2 || rows.numel() != av.dim(0))
            throw ShapeError("mask_rows: mask length " + dims_str(rows.dims) +
                             " vs tokens " + dims_str(av.dims));
        const int L = av.dim(0), D = av.dim(1);
        Tensor<T> out({L, D});
        for (int l = 0; l < L; ++l)
            if (rows[l])
                for (int j = 0; j < D; ++j) out.at2(l, j) = av.at2(l, j);
        auto bits = std::make_shared<std::vector<uint8_t>>(rows.bits);
        return make(std::move(out), {a}, [a, bits, L, D](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga({L, D});
            for (int l = 0; l < L; ++l)
                if ((*bits)[l])
                    for (int j = 0; j < D; ++j) ga.at2(l, j) = gy.at2(l, j);
            g.accum(a.id, ga);
        });
    }

    /// Masked selection over spatial positions of a CxHxW map.
    Var mask_spatial(Var a, const ValidityMask& m) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 3 || m.rank() != 2 || av.dim(1) != m.dim(0) || av.dim(2) != m.dim(1))
            throw ShapeError("mask_spatial: mask " + dims_str(m.dims) + " vs map " +
                             dims_str(av.dims));
        const int C = av.dim(0);
        const int64_t plane = m.numel();
        Tensor<T> out(av.dims);
        for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < plane; ++i)
                if (m[i]) out[c * plane + i] = av[c * plane + i];
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        return make(std::move(out), {a}, [a, bits, C, plane](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga(gy.dims);
            for (int c = 0; c < C; ++c)
                for (int64_t i = 0; i < plane; ++i)
                    if ((*bits)[i]) ga[c * plane + i] = gy[c * plane + i];
            g.accum(a.id, ga);
        });
    }

    Var matmul(Var a, Var b) {
        Tensor<T> out = kern::matmul(val(a), val(b));
        return make(std::move(out), {a, b}, [a, b](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>&av = g.val(a), &bv = g.val(b);
            g.accum(a.id, kern::matmul(gy, kern::transpose(bv)));
            g.accum(b.id, kern::matmul(kern::transpose(av), gy));
        });
    }

    /// A (LxK) times B^T for B (NxK); the layout used by linear layers whose
    /// weights are stored out x in.
    Var matmul_nt(Var a, Var b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1))
            throw ShapeError("matmul_nt shape mismatch: " + dims_str(av.dims) + " * " +
                             dims_str(bv.dims) + "^T");
        Tensor<T> out = kern::matmul(av, kern::transpose(bv));
        return make(std::move(out), {a, b}, [a, b](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>&av = g.val(a), &bv = g.val(b);
            g.accum(a.id, kern::matmul(gy, bv));
            g.accum(b.id, kern::matmul(kern::transpose(gy), av));
        });
    }

    /// X (LxD) + row-broadcast bias (D).
    Var add_rowvec(Var x, Var bias) {
        const Tensor<T>&xv = val(x), &bv = val(bias);
        if (xv.rank() != 2 || bv.numel() != xv.dim(1))
            throw ShapeError("add_rowvec: " + dims_str(xv.dims) + " + " + dims_str(bv.dims));
        Tensor<T> out = xv;
        const int L = xv.dim(0), D = xv.dim(1);
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < D; ++j) out.at2(i, j) += bv[j];
        return make(std::move(out), {x, bias}, [x, bias, L, D](Graph& g, const Tensor<T>& gy) {
            g.accum(x.id, gy);
            Tensor<T> gb({D});
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < D; ++j) gb[j] += gy.at2(i, j);
            g.accum(bias.id, gb);
        });
    }

    /// CxHxW + channel-broadcast bias (C).
    Var add_chvec(Var x, Var bias) {
        const Tensor<T>&xv = val(x), &bv = val(bias);
        if (xv.rank() != 3 || bv.numel() != xv.dim(0))
            throw ShapeError("add_chvec: " + dims_str(xv.dims) + " + " + dims_str(bv.dims));
        const int C = xv.dim(0);
        const int64_t plane = static_cast<int64_t>(xv.dim(1)) * xv.dim(2);
        Tensor<T> out = xv;
        for (int c = 0; c < C; ++c)
            for (int64_t i = 0; i < plane; ++i) out[c * plane + i] += bv[c];
        return make(std::move(out), {x, bias}, [x, bias, C, plane](Graph& g, const Tensor<T>& gy) {
            g.accum(x.id, gy);
            Tensor<T> gb({C});
            for (int c = 0; c < C; ++c)
                for (int64_t i = 0; i < plane; ++i) gb[c] += gy[c * plane + i];
            g.accum(bias.id, gb);
        });
    }

    Var reshape(Var a, Dims dims) {
        const Tensor<T>& av = val(a);
        if (dims_numel(dims) != av.numel())
            throw ShapeError("reshape: " + dims_str(av.dims) + " -> " + dims_str(dims));
        Tensor<T> out(dims, av.data);
        Dims orig = av.dims;
        return make(std::move(out), {a}, [a, orig](Graph& g, const Tensor<T>& gy) {
            g.accum(a.id, Tensor<T>(orig, gy.data));
        });
    }

    /// out.data[i] = x.data[index[i]]; backward scatter-adds. Covers
    /// patchify/unpatchify and any fixed token permutation.
    Var gather(Var x, std::shared_ptr<const std::vector<int64_t>> index, Dims out_dims) {
        const Tensor<T>& xv = val(x);
        if (static_cast<int64_t>(index->size()) != dims_numel(out_dims))
            throw ShapeError("gather: index count does not match output dims");
        Tensor<T> out(out_dims);
        for (size_t i = 0; i < index->size(); ++i) out[i] = xv[(*index)[i]];
        Dims in_dims = xv.dims;
        return make(std::move(out), {x}, [x, index, in_dims](Graph& g, const Tensor<T>& gy) {
            Tensor<T> gx(in_dims);
            for (size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += gy[i];
            g.accum(x.id, gx);
        });
    }

    /// Token substitution: rows with mask 1 keep their token, rows with
    /// mask 0 take the replacement vector. Invalid-token payloads never
    /// reach the output.
    Var substitute_rows(Var tokens, const ValidityMask& m, Var replacement) {
        const Tensor<T>&tv = val(tokens), &rv = val(replacement);
        if (tv.rank() != 2 || m.numel() != tv.dim(0) || rv.numel() != tv.dim(1))
            throw ShapeError("substitute_rows: tokens " + dims_str(tv.dims) + ", mask " +
                             dims_str(m.dims) + ", replacement " + dims_str(rv.dims));
        const int L = tv.dim(0), D = tv.dim(1);
        Tensor<T> out({L, D});
        for (int l = 0; l < L; ++l)
            for (int j = 0; j < D; ++j) out.at2(l, j) = m[l] ? tv.at2(l, j) : rv[j];
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        return make(std::move(out), {tokens, replacement},
                    [tokens, replacement, bits, L, D](Graph& g, const Tensor<T>& gy) {
                        Tensor<T> gt({L, D}), gr({D});
                        for (int l = 0; l < L; ++l) {
                            if ((*bits)[l])
                                for (int j = 0; j < D; ++j) gt.at2(l, j) = gy.at2(l, j);
                            else
                                for (int j = 0; j < D; ++j) gr[j] += gy.at2(l, j);
                        }
                        g.accum(tokens.id, gt);
                        g.accum(replacement.id, gr);
                    });
    }

    Var sum_all(Var a) {
        const Tensor<T>& av = val(a);
        T s = T(0);
        for (T v : av.data) s += v;
        Tensor<T> out({1});
        out[0] = s;
        Dims dims = av.dims;
        return make(std::move(out), {a}, [a, dims](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga(dims);
            for (auto& v : ga.data) v = gy[0];
            g.accum(a.id, ga);
        });
    }

    Var mean_all(Var a) { return scale(sum_all(a), T(1) / T(val(a).numel())); }

    /// Mean over rows with mask 1 of an LxD matrix. Requires >= 1 valid row.
    Var masked_mean_rows(Var a, const ValidityMask& m) {
        const Tensor<T>& av = val(a);
        if (av.rank() != 2 || m.numel() != av.dim(0))
            throw ShapeError("masked_mean_rows: mask " + dims_str(m.dims) + " vs " +
                             dims_str(av.dims));
        const int64_t valid = m.count_valid();
        if (valid == 0) throw PreconditionError("masked_mean_rows: no valid rows");
        const int L = av.dim(0), D = av.dim(1);
        Tensor<T> out({D});
        for (int l = 0; l < L; ++l)
            if (m[l])
                for (int j = 0; j < D; ++j) out[j] += av.at2(l, j);
        for (auto& v : out.data) v /= T(valid);
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        return make(std::move(out), {a}, [a, bits, L, D, valid](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga({L, D});
            for (int l = 0; l < L; ++l)
                if ((*bits)[l])
                    for (int j = 0; j < D; ++j) ga.at2(l, j) = gy[j] / T(valid);
            g.accum(a.id, ga);
        });
    }

    /// Per patch and channel, fills invalid positions with the mean of the
    /// patch's valid values for that channel. All-invalid patches become
    /// zeros. Valid positions pass through untouched.
    Var mean_fill_patches(Var x, const ValidityMask& m, int patch) {
        const Tensor<T>& xv = val(x);
        if (xv.rank() != 3 || m.rank() != 2 || xv.dim(1) != m.dim(0) || xv.dim(2) != m.dim(1))
            throw ShapeError("mean_fill_patches: map " + dims_str(xv.dims) + " vs mask " +
                             dims_str(m.dims));
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        if (H % patch != 0 || W % patch != 0)
            throw ShapeError("mean_fill_patches: " + dims_str(xv.dims) + " not divisible by patch " +
                             std::to_string(patch));
        const int gh = H / patch, gw = W / patch;
        Tensor<T> out({C, H, W});
        for (int pi = 0; pi < gh; ++pi) {
            for (int pj = 0; pj < gw; ++pj) {
                int k = 0;
                for (int u = 0; u < patch; ++u)
                    for (int v = 0; v < patch; ++v)
                        k += m.at2(pi * patch + u, pj * patch + v);
                for (int c = 0; c < C; ++c) {
                    T mean = T(0);
                    if (k > 0) {
                        for (int u = 0; u < patch; ++u)
                            for (int v = 0; v < patch; ++v)
                                if (m.at2(pi * patch + u, pj * patch + v))
                                    mean += xv.at3(c, pi * patch + u, pj * patch + v);
                        mean /= T(k);
                    }
                    for (int u = 0; u < patch; ++u)
                        for (int v = 0; v < patch; ++v) {
                            const int i = pi * patch + u, j = pj * patch + v;
                            if (k > 0)
                                out.at3(c, i, j) = m.at2(i, j) ? xv.at3(c, i, j) : mean;
                        }
                }
            }
        }
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        return make(std::move(out), {x},
                    [x, bits, C, H, W, patch, gh, gw](Graph& g, const Tensor<T>& gy) {
                        ValidityMask m({H, W}, *bits);
                        Tensor<T> gx({C, H, W});
                        for (int pi = 0; pi < gh; ++pi) {
                            for (int pj = 0; pj < gw; ++pj) {
                                int k = 0;
                                for (int u = 0; u < patch; ++u)
                                    for (int v = 0; v < patch; ++v)
                                        k += m.at2(pi * patch + u, pj * patch + v);
                                if (k == 0) continue;
                                for (int c = 0; c < C; ++c) {
                                    T ginv = T(0);  // grad flowing into the patch mean
                                    for (int u = 0; u < patch; ++u)
                                        for (int v = 0; v < patch; ++v) {
                                            const int i = pi * patch + u, j = pj * patch + v;
                                            if (!m.at2(i, j)) ginv += gy.at3(c, i, j);
                                        }
                                    ginv /= T(k);
                                    for (int u = 0; u < patch; ++u)
                                        for (int v = 0; v < patch; ++v) {
                                            const int i = pi * patch + u, j = pj * patch + v;
                                            if (m.at2(i, j))
                                                gx.at3(c, i, j) = gy.at3(c, i, j) + ginv;
                                        }
                                }
                            }
                        }
                        g.accum(x.id, gx);
                    });
    }

    Var softplus(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = kern::softplus(v);
        return make(std::move(out), {a}, [a](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>& av = g.val(a);
            Tensor<T> ga(av.dims);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * kern::sigmoid(av[i]);
            g.accum(a.id, ga);
        });
    }

    Var exp(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = std::exp(v);
        auto saved = std::make_shared<Tensor<T>>(out);
        return make(std::move(out), {a}, [a, saved](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga(saved->dims);
            for (int64_t i = 0; i < ga.numel(); ++i) ga[i] = gy[i] * (*saved)[i];
            g.accum(a.id, ga);
        });
    }

    Var sigmoid(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = kern::sigmoid(v);
        auto saved = std::make_shared<Tensor<T>>(out);
        return make(std::move(out), {a}, [a, saved](Graph& g, const Tensor<T>& gy) {
            Tensor<T> ga(saved->dims);
            for (int64_t i = 0; i < ga.numel(); ++i) {
                const T s = (*saved)[i];
                ga[i] = gy[i] * s * (T(1) - s);
            }
            g.accum(a.id, ga);
        });
    }

    /// Sigmoid-weighted linear unit x * sigmoid(x).
    Var silu(Var a) {
        const Tensor<T>& av = val(a);
        Tensor<T> out(av.dims);
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = av[i] * kern::sigmoid(av[i]);
        return make(std::move(out), {a}, [a](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>& av = g.val(a);
            Tensor<T> ga(av.dims);
            for (int64_t i = 0; i < ga.numel(); ++i) {
                const T s = kern::sigmoid(av[i]);
                ga[i] = gy[i] * s * (T(1) + av[i] * (T(1) - s));
            }
            g.accum(a.id, ga);
        });
    }

    Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
        auto cache = std::make_shared<kern::LayerNormCache>();
        Tensor<T> out = kern::layer_norm_forward(val(x), val(gamma), val(beta), eps, cache.get());
        return make(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, cache](Graph& g, const Tensor<T>& gy) {
                        const Tensor<T>&xv = g.val(x), &gv = g.val(gamma);
                        Tensor<T> gx(xv.dims), gg(gv.dims), gb(gv.dims);
                        kern::layer_norm_backward(xv, gv, *cache, gy, &gx, &gg, &gb);
                        g.accum(x.id, gx);
                        g.accum(gamma.id, gg);
                        g.accum(beta.id, gb);
                    });
    }

    Var conv2d(Var x, Var w, Var bias, const KernelFootprint& fp) {
        Tensor<T> out = kern::conv2d_forward(val(x), val(w), val(bias), fp);
        return make(std::move(out), {x, w, bias},
                    [x, w, bias, fp](Graph& g, const Tensor<T>& gy) {
                        const Tensor<T>&xv = g.val(x), &wv = g.val(w);
                        Tensor<T> gx(xv.dims), gw(wv.dims), gb(g.val(bias).dims);
                        kern::conv2d_backward(xv, wv, fp, gy, &gx, &gw, &gb);
                        g.accum(x.id, gx);
                        g.accum(w.id, gw);
                        g.accum(bias.id, gb);
                    });
    }

    /// Max pooling over spatial windows; ties resolve to the first window
    /// position in scan order.
    Var maxpool2d(Var x, const KernelFootprint& fp) {
        const Tensor<T>& xv = val(x);
        if (xv.rank() != 3) throw ShapeError("maxpool2d expects CxHxW");
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        fp.check_fits(H, W);
        const int OH = fp.out_h(H), OW = fp.out_w(W);
        Tensor<T> out({C, OH, OW});
        auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(C) * OH * OW, -1);
        for (int c = 0; c < C; ++c)
            for (int oi = 0; oi < OH; ++oi)
                for (int oj = 0; oj < OW; ++oj) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t best_idx = -1;
                    for (int u = 0; u < fp.kernel_h; ++u)
                        for (int v = 0; v < fp.kernel_w; ++v) {
                            const int i = oi * fp.stride - fp.padding + u;
                            const int j = oj * fp.stride - fp.padding + v;
                            if (i < 0 || i >= H || j < 0 || j >= W) continue;
                            const int64_t idx = (static_cast<int64_t>(c) * H + i) * W + j;
                            if (xv[idx] > best) {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    out.at3(c, oi, oj) = best;
                    (*argmax)[(static_cast<int64_t>(c) * OH + oi) * OW + oj] = best_idx;
                }
        Dims in_dims = xv.dims;
        return make(std::move(out), {x}, [x, argmax, in_dims](Graph& g, const Tensor<T>& gy) {
            Tensor<T> gx(in_dims);
            for (int64_t i = 0; i < gy.numel(); ++i)
                if ((*argmax)[i] >= 0) gx[(*argmax)[i]] += gy[i];
            g.accum(x.id, gx);
        });
    }

    Var slice_cols(Var x, int j0, int n) {
        const Tensor<T>& xv = val(x);
        if (xv.rank() != 2 || j0 < 0 || j0 + n > xv.dim(1))
            throw ShapeError("slice_cols out of range on " + dims_str(xv.dims));
        const int L = xv.dim(0), M = xv.dim(1);
        Tensor<T> out({L, n});
        for (int i = 0; i < L; ++i)
            for (int j = 0; j < n; ++j) out.at2(i, j) = xv.at2(i, j0 + j);
        return make(std::move(out), {x}, [x, j0, n, L, M](Graph& g, const Tensor<T>& gy) {
            Tensor<T> gx({L, M});
            for (int i = 0; i < L; ++i)
                for (int j = 0; j < n; ++j) gx.at2(i, j0 + j) = gy.at2(i, j);
            g.accum(x.id, gx);
        });
    }

    Var concat_ch(Var a, Var b) {
        const Tensor<T>&av = val(a), &bv = val(b);
        if (av.rank() != 3 || bv.rank() != 3 || av.dim(1) != bv.dim(1) || av.dim(2) != bv.dim(2))
            throw ShapeError("concat_ch: " + dims_str(av.dims) + " vs " + dims_str(bv.dims));
        const int Ca = av.dim(0), Cb = bv.dim(0), H = av.dim(1), W = av.dim(2);
        Tensor<T> out({Ca + Cb, H, W});
        std::copy(av.data.begin(), av.data.end(), out.data.begin());
        std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + av.numel());
        return make(std::move(out), {a, b}, [a, b, Ca, Cb, H, W](Graph& g, const Tensor<T>& gy) {
            const int64_t na = static_cast<int64_t>(Ca) * H * W;
            Tensor<T> ga({Ca, H, W}), gb({Cb, H, W});
            std::copy(gy.data.begin(), gy.data.begin() + na, ga.data.begin());
            std::copy(gy.data.begin() + na, gy.data.end(), gb.data.begin());
            g.accum(a.id, ga);
            g.accum(b.id, gb);
        });
    }

    /// Mean over valid window entries; all-invalid windows give 0. The mask
    /// is constant routing, gradients flow only through valid entries.
    Var avg_pool_masked(Var x, const ValidityMask& m, const KernelFootprint& fp) {
        const Tensor<T>& xv = val(x);
        if (xv.rank() != 3 || m.rank() != 2 || xv.dim(1) != m.dim(0) || xv.dim(2) != m.dim(1))
            throw ShapeError("avg_pool_masked: map " + dims_str(xv.dims) + " vs mask " +
                             dims_str(m.dims));
        const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
        fp.check_fits(H, W);
        const int OH = fp.out_h(H), OW = fp.out_w(W);
        Tensor<T> out({C, OH, OW});
        for (int oi = 0; oi < OH; ++oi)
            for (int oj = 0; oj < OW; ++oj) {
                int k = 0;
                for (int u = 0; u < fp.kernel_h; ++u)
                    for (int v = 0; v < fp.kernel_w; ++v) {
                        const int i = oi * fp.stride - fp.padding + u;
                        const int j = oj * fp.stride - fp.padding + v;
                        if (i >= 0 && i < H && j >= 0 && j < W && m.at2(i, j)) ++k;
                    }
                if (k == 0) continue;
                for (int c = 0; c < C; ++c) {
                    T acc = T(0);
                    for (int u = 0; u < fp.kernel_h; ++u)
                        for (int v = 0; v < fp.kernel_w; ++v) {
                            const int i = oi * fp.stride - fp.padding + u;
                            const int j = oj * fp.stride - fp.padding + v;
                            if (i >= 0 && i < H && j >= 0 && j < W && m.at2(i, j))
                                acc += xv.at3(c, i, j);
                        }
                    out.at3(c, oi, oj) = acc / T(k);
                }
            }
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        Dims in_dims = xv.dims;
        return make(std::move(out), {x},
                    [x, bits, fp, in_dims, OH, OW](Graph& g, const Tensor<T>& gy) {
                        const int C = in_dims[0], H = in_dims[1], W = in_dims[2];
                        ValidityMask m({H, W}, *bits);
                        Tensor<T> gx(in_dims);
                        for (int oi = 0; oi < OH; ++oi)
                            for (int oj = 0; oj < OW; ++oj) {
                                int k = 0;
                                for (int u = 0; u < fp.kernel_h; ++u)
                                    for (int v = 0; v < fp.kernel_w; ++v) {
                                        const int i = oi * fp.stride - fp.padding + u;
                                        const int j = oj * fp.stride - fp.padding + v;
                                        if (i >= 0 && i < H && j >= 0 && j < W && m.at2(i, j)) ++k;
                                    }
                                if (k == 0) continue;
                                for (int c = 0; c < C; ++c) {
                                    const T gshare = gy.at3(c, oi, oj) / T(k);
                                    for (int u = 0; u < fp.kernel_h; ++u)
                                        for (int v = 0; v < fp.kernel_w; ++v) {
                                            const int i = oi * fp.stride - fp.padding + u;
                                            const int j = oj * fp.stride - fp.padding + v;
                                            if (i >= 0 && i < H && j >= 0 && j < W && m.at2(i, j))
                                                gx.at3(c, i, j) += gshare;
                                        }
                                }
                            }
                        g.accum(x.id, gx);
                    });
    }

    /// Charbonnier loss mean over valid ground-truth positions:
    /// (1/Nv) * sum sqrt((pred-gt)^2 + eps^2).
    Var charbonnier(Var pred, Tensor<T> gt, const ValidityMask& m, T eps) {
        const Tensor<T>& pv = val(pred);
        if (pv.dims != gt.dims)
            throw ShapeError("charbonnier: pred " + dims_str(pv.dims) + " vs gt " + dims_str(gt.dims));
        if (static_cast<int64_t>(m.numel()) != pv.numel())
            throw ShapeError("charbonnier: mask must cover every prediction element");
        const int64_t nv = m.count_valid();
        if (nv == 0) throw PreconditionError("charbonnier: empty valid set");
        T s = T(0);
        for (int64_t i = 0; i < pv.numel(); ++i) {
            if (!m[i]) continue;
            const T d = pv[i] - gt[i];
            s += std::sqrt(d * d + eps * eps);
        }
        Tensor<T> out({1});
        out[0] = s / T(nv);
        auto gtp = std::make_shared<Tensor<T>>(std::move(gt));
        auto bits = std::make_shared<std::vector<uint8_t>>(m.bits);
        return make(std::move(out), {pred},
                    [pred, gtp, bits, eps, nv](Graph& g, const Tensor<T>& gy) {
                        const Tensor<T>& pv = g.val(pred);
                        Tensor<T> gp(pv.dims);
                        for (int64_t i = 0; i < pv.numel(); ++i) {
                            if (!(*bits)[i]) continue;
                            const T d = pv[i] - (*gtp)[i];
                            gp[i] = gy[0] * d / (std::sqrt(d * d + eps * eps) * T(nv));
                        }
                        g.accum(pred.id, gp);
                    });
    }

    /// Log-sum-exp stabilized negative log-likelihood for one sample.
    Var cross_entropy(Var logits, int label) {
        const Tensor<T>& lv = val(logits);
        const int64_t C = lv.numel();
        if (label < 0 || label >= C)
            throw PreconditionError("cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(C) + " classes");
        T mx = lv[0];
        for (int64_t i = 1; i < C; ++i) mx = std::max(mx, lv[i]);
        T lse = T(0);
        for (int64_t i = 0; i < C; ++i) lse += std::exp(lv[i] - mx);
        lse = std::log(lse) + mx;
        Tensor<T> out({1});
        out[0] = lse - lv[label];
        return make(std::move(out), {logits}, [logits, label, lse](Graph& g, const Tensor<T>& gy) {
            const Tensor<T>& lv = g.val(logits);
            Tensor<T> gl(lv.dims);
            for (int64_t i = 0; i < lv.numel(); ++i) {
                gl[i] = gy[0] * std::exp(lv[i] - lse);
                if (i == label) gl[i] -= gy[0];
            }
            g.accum(logits.id, gl);
        });
    }

    /// Selective state-space scan over an LxE stream. Per channel e and
    /// state n:
    ///   delta_t = softplus(W_dt u_t + dt_bias)
    ///   h_t     = exp(delta_t * A) . h_{t-1} + (delta_t * B_t) u_t
    ///   y_t     = sum_n C_t[n] h_t[e,n] + D_skip[e] u_t[e]
    /// with A = -exp(A_log), B_t = W_B u_t, C_t = W_C u_t and h_0 = 0. The
    /// backward pass is a reverse-time recurrence over saved states.
    Var selective_scan(Var u, Var a_log, Var w_b, Var w_c, Var w_dt, Var dt_bias, Var d_skip,
                       bool reverse) {
        const Tensor<T>& uv = val(u);
        if (uv.rank() != 2) throw ShapeError("selective_scan: stream must be LxE");
        const int L = uv.dim(0), E = uv.dim(1);
        const Tensor<T>& alv = val(a_log);
        if (alv.rank() != 2 || alv.dim(0) != E)
            throw ShapeError("selective_scan: A_log must be ExN");
        const int N = alv.dim(1);
        if (val(w_b).dims != Dims{N, E} || val(w_c).dims != Dims{N, E})
            throw ShapeError("selective_scan: W_B/W_C must be NxE");
        if (val(w_dt).dims != Dims{E, E} || val(dt_bias).numel() != E || val(d_skip).numel() != E)
            throw ShapeError("selective_scan: delta projection must be ExE with E bias/skip");

        // batched token projections
        auto pre = std::make_shared<Tensor<T>>(kern::matmul(uv, kern::transpose(val(w_dt))));
        for (int t = 0; t < L; ++t)
            for (int e = 0; e < E; ++e) pre->at2(t, e) += val(dt_bias)[e];
        auto delta = std::make_shared<Tensor<T>>(Tensor<T>({L, E}));
        for (int64_t i = 0; i < pre->numel(); ++i) (*delta)[i] = kern::softplus((*pre)[i]);
        auto bm = std::make_shared<Tensor<T>>(kern::matmul(uv, kern::transpose(val(w_b))));
        auto cm = std::make_shared<Tensor<T>>(kern::matmul(uv, kern::transpose(val(w_c))));

        Tensor<T> a(alv.dims);
        for (int64_t i = 0; i < a.numel(); ++i) a[i] = -std::exp(alv[i]);

        auto h_all = std::make_shared<Tensor<T>>(Tensor<T>({L, E, N}));
        Tensor<T> y({L, E});
        std::vector<T> h(static_cast<size_t>(E) * N, T(0));
        const Tensor<T>& dskip = val(d_skip);
        for (int s = 0; s < L; ++s) {
            const int t = reverse ? L - 1 - s : s;
            const T* ut = uv.data.data() + static_cast<int64_t>(t) * E;
            const T* dl = delta->data.data() + static_cast<int64_t>(t) * E;
            const T* bt = bm->data.data() + static_cast<int64_t>(t) * N;
            const T* ct = cm->data.data() + static_cast<int64_t>(t) * N;
            T* hs = h_all->data.data() + static_cast<int64_t>(s) * E * N;
            for (int e = 0; e < E; ++e) {
                const T de = dl[e], ue = ut[e];
                const T* ae = a.data.data() + static_cast<int64_t>(e) * N;
                T* he = h.data() + static_cast<int64_t>(e) * N;
                T acc = T(0);
                for (int n = 0; n < N; ++n) {
                    const T abar = std::exp(de * ae[n]);
                    he[n] = abar * he[n] + de * bt[n] * ue;
                    acc += ct[n] * he[n];
                }
                y.at2(t, e) = acc + dskip[e] * ue;
                std::copy(he, he + N, hs + static_cast<int64_t>(e) * N);
            }
        }
        if (!y.all_finite())
            throw NumericError("selective_scan produced a non-finite value (L=" +
                               std::to_string(L) + ", E=" + std::to_string(E) + ")");

        auto a_saved = std::make_shared<Tensor<T>>(std::move(a));
        return make(std::move(y), {u, a_log, w_b, w_c, w_dt, dt_bias, d_skip},
                    [u, a_log, w_b, w_c, w_dt, dt_bias, d_skip, pre, delta, bm, cm, h_all, a_saved,
                     reverse, L, E, N](Graph& g, const Tensor<T>& gy) {
                        const Tensor<T>& uv = g.val(u);
                        const Tensor<T>& dskip = g.val(d_skip);
                        const Tensor<T>& a = *a_saved;
                        Tensor<T> gu({L, E}), g_alog({E, N}), g_dskip({E});
                        Tensor<T> g_delta({L, E}), g_bm({L, N}), g_cm({L, N});
                        std::vector<T> gh(static_cast<size_t>(E) * N, T(0));
                        for (int s = L - 1; s >= 0; --s) {
                            const int t = reverse ? L - 1 - s : s;
                            const T* ut = uv.data.data() + static_cast<int64_t>(t) * E;
                            const T* dl = delta->data.data() + static_cast<int64_t>(t) * E;
                            const T* bt = bm->data.data() + static_cast<int64_t>(t) * N;
                            const T* ct = cm->data.data() + static_cast<int64_t>(t) * N;
                            const T* hs = h_all->data.data() + static_cast<int64_t>(s) * E * N;
                            const T* hprev =
                                s > 0 ? h_all->data.data() + static_cast<int64_t>(s - 1) * E * N
                                      : nullptr;
                            T* gbt = g_bm.data.data() + static_cast<int64_t>(t) * N;
                            T* gct = g_cm.data.data() + static_cast<int64_t>(t) * N;
                            for (int e = 0; e < E; ++e) {
                                const T gye = gy.at2(t, e);
                                const T de = dl[e], ue = ut[e];
                                const T* ae = a.data.data() + static_cast<int64_t>(e) * N;
                                const T* he = hs + static_cast<int64_t>(e) * N;
                                const T* hpe =
                                    hprev ? hprev + static_cast<int64_t>(e) * N : nullptr;
                                T* ghe = gh.data() + static_cast<int64_t>(e) * N;
                                g_dskip[e] += gye * ue;
                                T gue = gye * dskip[e];
                                T gde = T(0);
                                for (int n = 0; n < N; ++n) {
                                    gct[n] += gye * he[n];
                                    T ghn = ghe[n] + gye * ct[n];
                                    const T abar = std::exp(de * ae[n]);
                                    const T hp = hpe ? hpe[n] : T(0);
                                    g_alog.at2(e, n) += ghn * de * abar * hp * ae[n];
                                    gde += ghn * (ae[n] * abar * hp + bt[n] * ue);
                                    gbt[n] += ghn * de * ue;
                                    gue += ghn * de * bt[n];
                                    ghe[n] = ghn * abar;
                                }
                                g_delta.at2(t, e) = gde;
                                gu.at2(t, e) += gue;
                            }
                        }
                        // delta = softplus(pre)
                        Tensor<T> g_pre({L, E});
                        for (int64_t i = 0; i < g_pre.numel(); ++i)
                            g_pre[i] = g_delta[i] * kern::sigmoid((*pre)[i]);
                        Tensor<T> g_dtb({E});
                        for (int t = 0; t < L; ++t)
                            for (int e = 0; e < E; ++e) g_dtb[e] += g_pre.at2(t, e);
                        g.accum(w_dt.id, kern::matmul(kern::transpose(g_pre), uv));
                        g.accum(w_b.id, kern::matmul(kern::transpose(g_bm), uv));
                        g.accum(w_c.id, kern::matmul(kern::transpose(g_cm), uv));
                        kern::matmul_acc(g_pre.data.data(), g.val(w_dt).data.data(),
                                         gu.data.data(), L, E, E);
                        kern::matmul_acc(g_bm.data.data(), g.val(w_b).data.data(), gu.data.data(),
                                         L, N, E);
                        kern::matmul_acc(g_cm.data.data(), g.val(w_c).data.data(), gu.data.data(),
                                         L, N, E);
                        g.accum(u.id, gu);
                        g.accum(a_log.id, g_alog);
                        g.accum(dt_bias.id, g_dtb);
                        g.accum(d_skip.id, g_dskip);
                    });
    }

private:
    Var make(Tensor<T> value, std::initializer_list<Var> parents,
             std::function<void(Graph&, const Tensor<T>&)> pull) {
        Node n;
        n.value = std::move(value);
        for (Var p : parents) n.requires_grad = n.requires_grad || nodes[p.id].requires_grad;
        if (n.requires_grad) n.pull = std::move(pull);
        nodes.push_back(std::move(n));
        return Var{static_cast<int>(nodes.size()) - 1};
    }

    bool backward_done_ = false;
};

// ---- parameter registry and optimizer -----------------------------------

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Named trainable tensors with a stable registration order.
template <typename T>
class ParamStore {
public:
    Tensor<T>& add(const std::string& name, Tensor<T> init) {
        if (vals_.count(name)) throw std::logic_error("parameter already registered: " + name);
        order_.push_back(name);
        return vals_.emplace(name, std::move(init)).first->second;
    }
    bool has(const std::string& name) const { return vals_.count(name) > 0; }
    Tensor<T>& at(const std::string& name) {
        auto it = vals_.find(name);
        if (it == vals_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = vals_.find(name);
        if (it == vals_.end()) throw std::out_of_range("unknown parameter: " + name);
        return it->second;
    }
    const std::vector<std::string>& names() const { return order_; }
    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& name : order_) n += vals_.at(name).numel();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor<T>> vals_;
};

/// Binds every parameter of a store as a tape leaf.
template <typename T>
class ParamBinding {
public:
    ParamBinding(Graph<T>& g, const ParamStore<T>& ps, bool requires_grad = true) : graph_(&g) {
        for (const auto& name : ps.names()) vars_.emplace(name, g.leaf(ps.at(name), requires_grad));
    }
    Var operator[](const std::string& name) const {
        auto it = vars_.find(name);
        if (it == vars_.end())
            throw std::out_of_range("parameter not bound to this tape: " + name);
        return it->second;
    }
    /// Gradients after backward, one entry per bound parameter.
    GradMap<T> grads() const {
        GradMap<T> out;
        for (const auto& [name, var] : vars_) out.emplace(name, graph_->grad(var));
        return out;
    }

private:
    Graph<T>* graph_;
    std::unordered_map<std::string, Var> vars_;
};

template <typename T>
struct AdamConfig {
    T lr = T(1e-3);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);
};

template <typename T>
struct AdamState {
    int64_t step = 0;
    std::unordered_map<std::string, Tensor<T>> m, v;
};

/// One Adam update. Deterministic given identical inputs.
template <typename T>
void optimizer_step(ParamStore<T>& params, const GradMap<T>& grads, AdamState<T>& state,
                    const AdamConfig<T>& hyper) {
    state.step += 1;
    const T bc1 = T(1) - std::pow(hyper.beta1, static_cast<T>(state.step));
    const T bc2 = T(1) - std::pow(hyper.beta2, static_cast<T>(state.step));
    for (const auto& name : params.names()) {
        auto git = grads.find(name);
        if (git == grads.end()) throw std::out_of_range("missing gradient for parameter " + name);
        Tensor<T>& p = params.at(name);
        const Tensor<T>& g = git->second;
        if (g.dims != p.dims)
            throw ShapeError("gradient shape " + dims_str(g.dims) + " does not match parameter " +
                             name + " " + dims_str(p.dims));
        auto& m = state.m.try_emplace(name, Tensor<T>(p.dims)).first->second;
        auto& v = state.v.try_emplace(name, Tensor<T>(p.dims)).first->second;
        for (int64_t i = 0; i < p.numel(); ++i) {
            m[i] = hyper.beta1 * m[i] + (T(1) - hyper.beta1) * g[i];
            v[i] = hyper.beta2 * v[i] + (T(1) - hyper.beta2) * g[i] * g[i];
            const T mhat = m[i] / bc1;
            const T vhat = v[i] / bc2;
            p[i] -= hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
        }
    }
}

// ---- finite-difference verification --------------------------------------

template <typename T>
struct GradCheckResult {
    T max_rel_err = T(0);
    std::string param;
    int64_t index = -1;
    T analytic = T(0);
    T numeric = T(0);
};

/// Central-difference check of a tape-producing loss function. Run with
/// T = double; the relative error is |ad - fd| / max(1, |ad|, |fd|).
template <typename T>
GradCheckResult<T> grad_check(
    const std::function<std::pair<T, GradMap<T>>(const ParamStore<T>&)>& f,
    const ParamStore<T>& params, T step = T(1e-6)) {
    auto [loss0, grads] = f(params);
    if (!std::isfinite(static_cast<double>(loss0)))
        throw NumericError("grad_check: non-finite loss");
    GradCheckResult<T> res;
    ParamStore<T> probe = params;
    for (const auto& name : params.names()) {
        Tensor<T>& p = probe.at(name);
        const Tensor<T>& g = grads.at(name);
        for (int64_t i = 0; i < p.numel(); ++i) {
            const T orig = p[i];
            p[i] = orig + step;
            const T lp = f(probe).first;
            p[i] = orig - step;
            const T lm = f(probe).first;
            p[i] = orig;
            if (!std::isfinite(static_cast<double>(lp)) || !std::isfinite(static_cast<double>(lm)))
                throw NumericError("grad_check: non-finite probe at " + name);
            const T numeric = (lp - lm) / (T(2) * step);
            const T analytic = g[i];
            const T denom = std::max(T(1), std::max(std::abs(analytic), std::abs(numeric)));
            const T rel = std::abs(analytic - numeric) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.param = name;
                res.index = i;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

}  // namespace pvm
