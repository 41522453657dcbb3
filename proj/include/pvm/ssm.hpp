#pragma once

#include "pvm/autodiff.hpp"
#include "pvm/rng.hpp"
#include "pvm/tensor.hpp"

namespace pvm {

/// Selective-scan parameters for a stream of width E with N states per
/// channel. A = -exp(A_log) keeps the discretized decay in (0, 1).
template <typename T>
struct SSMParams {
    Tensor<T> a_log;    // E x N
    Tensor<T> d_skip;   // E
    Tensor<T> w_b;      // N x E
    Tensor<T> w_c;      // N x E
    Tensor<T> w_dt;     // E x E
    Tensor<T> dt_bias;  // E
};

/// Gated block: pre-norm, D -> 2E projection into (stream, gate), selective
/// scan over the stream, silu-gated merge, E -> D output projection.
/// Residual wiring is the caller's responsibility.
template <typename T>
struct BlockParams {
    Tensor<T> ln_gamma;  // D
    Tensor<T> ln_beta;   // D
    Tensor<T> w_in;      // 2E x D
    Tensor<T> b_in;      // 2E
    SSMParams<T> ssm;    // width E
    Tensor<T> w_out;     // D x E
    Tensor<T> b_out;     // D
};

enum class BlockScan { Forward, Bidirectional };

namespace init {

template <typename T>
Tensor<T> uniform(Dims dims, T lo, T hi, CounterRng& rng) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

template <typename T>
Tensor<T> gaussian(Dims dims, T stddev, CounterRng& rng) {
    Tensor<T> t(std::move(dims));
    for (auto& v : t.data) v = static_cast<T>(rng.gaussian() * stddev);
    return t;
}

template <typename T>
Tensor<T> xavier(Dims dims, int fan_in, int fan_out, CounterRng& rng) {
    const T a = std::sqrt(T(6) / T(fan_in + fan_out));
    return uniform<T>(std::move(dims), -a, a, rng);
}

template <typename T>
Tensor<T> full(Dims dims, T value) {
    Tensor<T> t(std::move(dims));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
}

}  // namespace init

template <typename T>
SSMParams<T> make_ssm_params(int e, int n, CounterRng& rng) {
    SSMParams<T> p;
    p.a_log = Tensor<T>({e, n});
    for (int i = 0; i < e; ++i)
        for (int j = 0; j < n; ++j) p.a_log.at2(i, j) = std::log(T(1) + T(j));
    p.d_skip = init::full<T>({e}, T(1));
    const T s = std::sqrt(T(1) / T(e));
    p.w_b = init::uniform<T>({n, e}, -s, s, rng);
    p.w_c = init::uniform<T>({n, e}, -s, s, rng);
    p.w_dt = init::uniform<T>({e, e}, -s / 2, s / 2, rng);
    p.dt_bias = Tensor<T>({e});
    for (int i = 0; i < e; ++i) {
        // softplus(dt_bias) lands log-uniformly in [1e-3, 1e-1]
        const T dt = static_cast<T>(std::exp(rng.uniform(std::log(1e-3), std::log(1e-1))));
        p.dt_bias[i] = static_cast<T>(std::log(std::expm1(static_cast<double>(dt))));
    }
    return p;
}

template <typename T>
BlockParams<T> make_block_params(int d, int e, int n, CounterRng& rng) {
    BlockParams<T> p;
    p.ln_gamma = init::full<T>({d}, T(1));
    p.ln_beta = Tensor<T>({d});
    p.w_in = init::xavier<T>({2 * e, d}, d, 2 * e, rng);
    p.b_in = Tensor<T>({2 * e});
    p.ssm = make_ssm_params<T>(e, n, rng);
    p.w_out = init::xavier<T>({d, e}, e, d, rng);
    p.b_out = Tensor<T>({d});
    return p;
}

/// Registers all block parameters under `prefix.` in a store.
template <typename T>
void register_block(ParamStore<T>& ps, const std::string& prefix, const BlockParams<T>& p) {
    ps.add(prefix + ".ln_gamma", p.ln_gamma);
    ps.add(prefix + ".ln_beta", p.ln_beta);
    ps.add(prefix + ".w_in", p.w_in);
    ps.add(prefix + ".b_in", p.b_in);
    ps.add(prefix + ".ssm.a_log", p.ssm.a_log);
    ps.add(prefix + ".ssm.d_skip", p.ssm.d_skip);
    ps.add(prefix + ".ssm.w_b", p.ssm.w_b);
    ps.add(prefix + ".ssm.w_c", p.ssm.w_c);
    ps.add(prefix + ".ssm.w_dt", p.ssm.w_dt);
    ps.add(prefix + ".ssm.dt_bias", p.ssm.dt_bias);
    ps.add(prefix + ".w_out", p.w_out);
    ps.add(prefix + ".b_out", p.b_out);
}

template <typename T>
BlockParams<T> block_from_store(const ParamStore<T>& ps, const std::string& prefix) {
    BlockParams<T> p;
    p.ln_gamma = ps.at(prefix + ".ln_gamma");
    p.ln_beta = ps.at(prefix + ".ln_beta");
    p.w_in = ps.at(prefix + ".w_in");
    p.b_in = ps.at(prefix + ".b_in");
    p.ssm.a_log = ps.at(prefix + ".ssm.a_log");
    p.ssm.d_skip = ps.at(prefix + ".ssm.d_skip");
    p.ssm.w_b = ps.at(prefix + ".ssm.w_b");
    p.ssm.w_c = ps.at(prefix + ".ssm.w_c");
    p.ssm.w_dt = ps.at(prefix + ".ssm.w_dt");
    p.ssm.dt_bias = ps.at(prefix + ".ssm.dt_bias");
    p.w_out = ps.at(prefix + ".w_out");
    p.b_out = ps.at(prefix + ".b_out");
    return p;
}

/// Tape handles for one block's parameters.
struct BlockVars {
    Var ln_gamma, ln_beta, w_in, b_in, a_log, d_skip, w_b, w_c, w_dt, dt_bias, w_out, b_out;
};

template <typename T>
BlockVars bind_block(const ParamBinding<T>& bind, const std::string& prefix) {
    BlockVars v;
    v.ln_gamma = bind[prefix + ".ln_gamma"];
    v.ln_beta = bind[prefix + ".ln_beta"];
    v.w_in = bind[prefix + ".w_in"];
    v.b_in = bind[prefix + ".b_in"];
    v.a_log = bind[prefix + ".ssm.a_log"];
    v.d_skip = bind[prefix + ".ssm.d_skip"];
    v.w_b = bind[prefix + ".ssm.w_b"];
    v.w_c = bind[prefix + ".ssm.w_c"];
    v.w_dt = bind[prefix + ".ssm.w_dt"];
    v.dt_bias = bind[prefix + ".ssm.dt_bias"];
    v.w_out = bind[prefix + ".w_out"];
    v.b_out = bind[prefix + ".b_out"];
    return v;
}

template <typename T>
BlockVars bind_block_consts(Graph<T>& g, const BlockParams<T>& p) {
    BlockVars v;
    v.ln_gamma = g.constant(p.ln_gamma);
    v.ln_beta = g.constant(p.ln_beta);
    v.w_in = g.constant(p.w_in);
    v.b_in = g.constant(p.b_in);
    v.a_log = g.constant(p.ssm.a_log);
    v.d_skip = g.constant(p.ssm.d_skip);
    v.w_b = g.constant(p.ssm.w_b);
    v.w_c = g.constant(p.ssm.w_c);
    v.w_dt = g.constant(p.ssm.w_dt);
    v.dt_bias = g.constant(p.ssm.dt_bias);
    v.w_out = g.constant(p.w_out);
    v.b_out = g.constant(p.b_out);
    return v;
}

namespace ops {

template <typename T>
Var tape_selective_scan(Graph<T>& g, Var u, const BlockVars& v, bool reverse) {
    return g.selective_scan(u, v.a_log, v.w_b, v.w_c, v.w_dt, v.dt_bias, v.d_skip, reverse);
}

/// The gated block body. Bidirectional scanning sums the forward and
/// reversed-stream outputs before gating.
template <typename T>
Var tape_vm_block(Graph<T>& g, Var tokens, const BlockVars& v, BlockScan scan) {
    const Tensor<T>& tv = g.val(tokens);
    if (tv.rank() != 2) throw ShapeError("vm_block expects LxD tokens, got " + dims_str(tv.dims));
    const int twoe = g.val(v.w_in).dim(0);
    const int e = twoe / 2;
    Var xn = g.layer_norm(tokens, v.ln_gamma, v.ln_beta);
    Var proj = g.add_rowvec(g.matmul_nt(xn, v.w_in), v.b_in);
    Var stream = g.slice_cols(proj, 0, e);
    Var gate = g.slice_cols(proj, e, e);
    Var s = tape_selective_scan(g, stream, v, false);
    if (scan == BlockScan::Bidirectional)
        s = g.add(s, tape_selective_scan(g, stream, v, true));
    Var gated = g.mul(s, g.silu(gate));
    return g.add_rowvec(g.matmul_nt(gated, v.w_out), v.b_out);
}

}  // namespace ops

enum class ScanOrder { Forward, Backward };

/// Functional selective scan over an LxE stream.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& u, const SSMParams<T>& p, ScanOrder direction) {
    Graph<T> g;
    Var y = g.selective_scan(g.constant(u), g.constant(p.a_log), g.constant(p.w_b),
                             g.constant(p.w_c), g.constant(p.w_dt), g.constant(p.dt_bias),
                             g.constant(p.d_skip), direction == ScanOrder::Backward);
    return g.val(y);
}

/// Functional block forward (no residual; see the block's role in the
/// calling architecture).
template <typename T>
Tensor<T> vm_block(const Tensor<T>& tokens, const BlockParams<T>& p, BlockScan scan) {
    Graph<T> g;
    Var t = g.constant(tokens);
    Var y = ops::tape_vm_block(g, t, bind_block_consts(g, p), scan);
    if (!g.val(y).all_finite()) throw NumericError("vm_block produced a non-finite value");
    return g.val(y);
}

}  // namespace pvm
