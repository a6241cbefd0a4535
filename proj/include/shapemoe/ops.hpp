// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "shapemoe/tape.hpp"
#include "shapemoe/tensor.hpp"

namespace shapemoe {

// ---------------------------------------------------------------------------
// Raw kernels. All GEMMs accumulate into C; the caller zeroes C when needed.
// Loop orders keep the innermost stride-1 over B and C rows so the compiler
// can vectorize without reassociating a reduction.
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <typename S>
void gemm_nn(size_t m, size_t n, size_t k, const S* a, const S* b, S* c) {
    for (size_t i = 0; i < m; ++i) {
        S* ci = c + i * n;
        const S* ai = a + i * k;
        for (size_t l = 0; l < k; ++l) {
            S av = ai[l];
            const S* bl = b + l * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// C[m,n] += A^T * B where A is [k,m], B is [k,n]
template <typename S>
void gemm_tn(size_t m, size_t n, size_t k, const S* a, const S* b, S* c) {
    for (size_t l = 0; l < k; ++l) {
        const S* al = a + l * m;
        const S* bl = b + l * n;
        for (size_t i = 0; i < m; ++i) {
            S av = al[i];
            S* ci = c + i * n;
            for (size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

template <typename S>
void transpose_into(size_t rows, size_t cols, const S* src, S* dst) {
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// C[m,n] += A[m,k] * B^T where B is [n,k]. B is transposed into scratch first
// so the multiply runs in the vectorizable nn form.
template <typename S>
void gemm_nt(size_t m, size_t n, size_t k, const S* a, const S* b, S* c) {
    std::vector<S> bt(k * n);
    transpose_into(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c);
}

// im2col for 3x3 kernels, zero padding 1. col is [cin*9, ho*wo].
template <typename S>
void im2col_3x3(const S* x, size_t cin, size_t h, size_t w, size_t stride, S* col) {
    size_t ho = (h + 2 - 3) / stride + 1;
    size_t wo = (w + 2 - 3) / stride + 1;
    size_t p = ho * wo;
    for (size_t c = 0; c < cin; ++c) {
        const S* xc = x + c * h * w;
        for (size_t ky = 0; ky < 3; ++ky) {
            for (size_t kx = 0; kx < 3; ++kx) {
                S* row = col + ((c * 3 + ky) * 3 + kx) * p;
                for (size_t oy = 0; oy < ho; ++oy) {
                    ptrdiff_t iy = ptrdiff_t(oy * stride + ky) - 1;
                    S* out = row + oy * wo;
                    if (iy < 0 || iy >= ptrdiff_t(h)) {
                        for (size_t ox = 0; ox < wo; ++ox) out[ox] = S(0);
                        continue;
                    }
                    const S* xr = xc + size_t(iy) * w;
                    for (size_t ox = 0; ox < wo; ++ox) {
                        ptrdiff_t ix = ptrdiff_t(ox * stride + kx) - 1;
                        out[ox] = (ix < 0 || ix >= ptrdiff_t(w)) ? S(0) : xr[ix];
                    }
                }
            }
        }
    }
}

// Scatter-add inverse of im2col_3x3. dx must be pre-zeroed by the caller.
template <typename S>
void col2im_3x3(const S* col, size_t cin, size_t h, size_t w, size_t stride, S* dx) {
    size_t ho = (h + 2 - 3) / stride + 1;
    size_t wo = (w + 2 - 3) / stride + 1;
    size_t p = ho * wo;
    for (size_t c = 0; c < cin; ++c) {
        S* xc = dx + c * h * w;
        for (size_t ky = 0; ky < 3; ++ky) {
            for (size_t kx = 0; kx < 3; ++kx) {
                const S* row = col + ((c * 3 + ky) * 3 + kx) * p;
                for (size_t oy = 0; oy < ho; ++oy) {
                    ptrdiff_t iy = ptrdiff_t(oy * stride + ky) - 1;
                    if (iy < 0 || iy >= ptrdiff_t(h)) continue;
                    const S* in = row + oy * wo;
                    S* xr = xc + size_t(iy) * w;
                    for (size_t ox = 0; ox < wo; ++ox) {
                        ptrdiff_t ix = ptrdiff_t(ox * stride + kx) - 1;
                        if (ix >= 0 && ix < ptrdiff_t(w)) xr[ix] += in[ox];
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Scalar activations, overflow-safe forms.
// ---------------------------------------------------------------------------

template <typename S>
S stable_sigmoid(S x) {
    if (x >= S(0)) {
        S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
}

// ln(1+e^x) as max(x,0)+ln(1+e^-|x|); floored at the smallest positive value
// so the result stays strictly positive even where it underflows.
template <typename S>
S stable_softplus(S x) {
    S v = std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
    return std::max(v, std::numeric_limits<S>::denorm_min());
}

// Probabilities for a score vector that may contain -inf entries; those map
// to exactly zero. Throws if every entry is -inf or any entry is NaN.
template <typename S>
std::vector<S> softmax_1d(const std::vector<S>& scores) {
    S m = -std::numeric_limits<S>::infinity();
    for (S v : scores) {
        if (std::isnan(v)) throw NumericError("softmax input contains NaN");
        m = std::max(m, v);
    }
    if (scores.empty() || m == -std::numeric_limits<S>::infinity())
        throw DegenerateDistributionError("softmax over empty support");
    std::vector<S> out(scores.size());
    S z = S(0);
    for (size_t i = 0; i < scores.size(); ++i) {
        out[i] = (scores[i] == -std::numeric_limits<S>::infinity()) ? S(0)
                                                                    : std::exp(scores[i] - m);
        z += out[i];
    }
    for (S& v : out) v /= z;
    return out;
}

// ---------------------------------------------------------------------------
// Tape operations.
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    if (!a.value().same_shape(b.value())) throw DimensionError("add: shape mismatch");
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, bi = b.id] {
        const TensorT<S>& g = t->grad(oi);
        t->add_grad(ai, g);
        t->add_grad(bi, g);
    });
    return o;
}

template <typename S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
    if (!a.value().same_shape(b.value())) throw DimensionError("sub: shape mismatch");
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out[i] -= b.value()[i];
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, bi = b.id] {
        const TensorT<S>& g = t->grad(oi);
        t->add_grad(ai, g);
        TensorT<S>& db = t->grad_mut(bi);
        for (size_t i = 0; i < g.numel(); ++i) db[i] -= g[i];
    });
    return o;
}

template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    if (!a.value().same_shape(b.value())) throw DimensionError("mul: shape mismatch");
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, bi = b.id] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& av = t->value(ai);
        const TensorT<S>& bv = t->value(bi);
        TensorT<S>& da = t->grad_mut(ai);
        TensorT<S>& db = t->grad_mut(bi);
        for (size_t i = 0; i < g.numel(); ++i) {
            da[i] += g[i] * bv[i];
            db[i] += g[i] * av[i];
        }
    });
    return o;
}

template <typename S>
VarT<S> scale(VarT<S> a, S c) {
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (S& v : out.data) v *= c;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, c] {
        const TensorT<S>& g = t->grad(oi);
        TensorT<S>& da = t->grad_mut(ai);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += c * g[i];
    });
    return o;
}

template <typename S>
VarT<S> relu(VarT<S> a) {
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (S& v : out.data) v = std::max(v, S(0));
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& x = t->value(ai);
        TensorT<S>& da = t->grad_mut(ai);
        for (size_t i = 0; i < g.numel(); ++i)
            if (x[i] > S(0)) da[i] += g[i];
    });
    return o;
}

template <typename S>
VarT<S> sigmoid(VarT<S> a) {
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (S& v : out.data) v = stable_sigmoid(v);
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& y = t->value(oi);
        TensorT<S>& da = t->grad_mut(ai);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * y[i] * (S(1) - y[i]);
    });
    return o;
}

template <typename S>
VarT<S> softplus(VarT<S> a) {
    TapeT<S>* t = a.tape;
    TensorT<S> out = a.value();
    for (S& v : out.data) v = stable_softplus(v);
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& x = t->value(ai);
        TensorT<S>& da = t->grad_mut(ai);
        for (size_t i = 0; i < g.numel(); ++i) da[i] += g[i] * stable_sigmoid(x[i]);
    });
    return o;
}

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    const TensorT<S>& av = a.value();
    const TensorT<S>& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(av.shape) + " x " +
                             shape_str(bv.shape));
    size_t m = av.shape[0], k = av.shape[1], n = bv.shape[1];
    TapeT<S>* t = a.tape;
    TensorT<S> out({m, n});
    gemm_nn(m, n, k, av.data.data(), bv.data.data(), out.data.data());
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, bi = b.id, m, n, k] {
        const TensorT<S>& g = t->grad(oi);
        // dA += g * B^T, dB += A^T * g
        gemm_nt(m, k, n, g.data.data(), t->value(bi).data.data(),
                t->grad_mut(ai).data.data());
        gemm_tn(k, n, m, t->value(ai).data.data(), g.data.data(),
                t->grad_mut(bi).data.data());
    });
    return o;
}

// y = W x (+ b). W is [out, in], x and b are vectors.
template <typename S>
VarT<S> linear(VarT<S> w, VarT<S> x) {
    const TensorT<S>& wv = w.value();
    const TensorT<S>& xv = x.value();
    if (wv.rank() != 2 || xv.rank() != 1 || wv.shape[1] != xv.shape[0])
        throw DimensionError("linear: incompatible shapes " + shape_str(wv.shape) + " x " +
                             shape_str(xv.shape));
    size_t no = wv.shape[0], ni = wv.shape[1];
    TapeT<S>* t = w.tape;
    TensorT<S> out({no});
    for (size_t i = 0; i < no; ++i) {
        S acc = S(0);
        const S* wr = wv.data.data() + i * ni;
        for (size_t j = 0; j < ni; ++j) acc += wr[j] * xv[j];
        out[i] = acc;
    }
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, wi = w.id, xi = x.id, no, ni] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& wv2 = t->value(wi);
        const TensorT<S>& xv2 = t->value(xi);
        TensorT<S>& dw = t->grad_mut(wi);
        TensorT<S>& dx = t->grad_mut(xi);
        for (size_t i = 0; i < no; ++i) {
            S gi = g[i];
            S* dwr = dw.data.data() + i * ni;
            const S* wr = wv2.data.data() + i * ni;
            for (size_t j = 0; j < ni; ++j) {
                dwr[j] += gi * xv2[j];
                dx[j] += gi * wr[j];
            }
        }
    });
    return o;
}

template <typename S>
VarT<S> linear_bias(VarT<S> w, VarT<S> x, VarT<S> b) {
    VarT<S> y = linear(w, x);
    if (!y.value().same_shape(b.value())) throw DimensionError("linear_bias: bias shape");
    return add(y, b);
}

// 3x3 convolution with zero padding 1, stride 1 or 2, cross-correlation (no
// kernel flip). x is [cin,h,w], w is [cout,cin,3,3], b is [cout].
template <typename S>
VarT<S> conv2d(VarT<S> x, VarT<S> w, VarT<S> b, size_t stride) {
    const TensorT<S>& xv = x.value();
    const TensorT<S>& wv = w.value();
    const TensorT<S>& bv = b.value();
    if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
    if (xv.rank() != 3 || wv.rank() != 4 || wv.shape[2] != 3 || wv.shape[3] != 3)
        throw DimensionError("conv2d: expects [cin,h,w] input and [cout,cin,3,3] kernels");
    if (wv.shape[1] != xv.shape[0]) throw DimensionError("conv2d: channel mismatch");
    if (bv.rank() != 1 || bv.shape[0] != wv.shape[0])
        throw DimensionError("conv2d: bias shape");
    size_t cin = xv.shape[0], h = xv.shape[1], wd = xv.shape[2];
    size_t cout = wv.shape[0];
    size_t ho = (h + 2 - 3) / stride + 1;
    size_t wo = (wd + 2 - 3) / stride + 1;
    size_t p = ho * wo, ck = cin * 9;

    auto col = std::make_shared<TensorT<S>>(std::vector<size_t>{ck, p});
    im2col_3x3(xv.data.data(), cin, h, wd, stride, col->data.data());

    TensorT<S> out({cout, ho, wo});
    gemm_nn(cout, p, ck, wv.data.data(), col->data.data(), out.data.data());
    for (size_t c = 0; c < cout; ++c) {
        S* row = out.data.data() + c * p;
        for (size_t i = 0; i < p; ++i) row[i] += bv[c];
    }
    TapeT<S>* t = x.tape;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, xi = x.id, wi = w.id, bi = b.id, col, cin, h, wd,
                           stride, cout, p, ck] {
        const TensorT<S>& g = t->grad(oi);
        // db
        TensorT<S>& db = t->grad_mut(bi);
        for (size_t c = 0; c < cout; ++c) {
            S acc = S(0);
            const S* row = g.data.data() + c * p;
            for (size_t i = 0; i < p; ++i) acc += row[i];
            db[c] += acc;
        }
        // dW += g * col^T
        gemm_nt(cout, ck, p, g.data.data(), col->data.data(),
                t->grad_mut(wi).data.data());
        // dcol = W^T * g, then scatter back to dx
        TensorT<S> dcol({ck, p});
        gemm_tn(ck, p, cout, t->value(wi).data.data(), g.data.data(), dcol.data.data());
        TensorT<S> dx({cin, h, wd});
        col2im_3x3(dcol.data.data(), cin, h, wd, stride, dx.data.data());
        t->add_grad(xi, dx);
    });
    return o;
}

// [c,h,w] -> [c], mean over spatial positions.
template <typename S>
VarT<S> mean_pool_spatial(VarT<S> x) {
    const TensorT<S>& xv = x.value();
    if (xv.rank() != 3) throw DimensionError("mean_pool_spatial: expects [c,h,w]");
    size_t c = xv.shape[0], hw = xv.shape[1] * xv.shape[2];
    TensorT<S> out({c});
    for (size_t i = 0; i < c; ++i) {
        S acc = S(0);
        const S* row = xv.data.data() + i * hw;
        for (size_t j = 0; j < hw; ++j) acc += row[j];
        out[i] = acc / S(hw);
    }
    TapeT<S>* t = x.tape;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, xi = x.id, c, hw] {
        const TensorT<S>& g = t->grad(oi);
        TensorT<S>& dx = t->grad_mut(xi);
        for (size_t i = 0; i < c; ++i) {
            S gi = g[i] / S(hw);
            S* row = dx.data.data() + i * hw;
            for (size_t j = 0; j < hw; ++j) row[j] += gi;
        }
    });
    return o;
}

template <typename S>
VarT<S> concat_vec(VarT<S> a, VarT<S> b) {
    const TensorT<S>& av = a.value();
    const TensorT<S>& bv = b.value();
    if (av.rank() != 1 || bv.rank() != 1) throw DimensionError("concat_vec: expects vectors");
    size_t n = av.shape[0], m = bv.shape[0];
    TensorT<S> out({n + m});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + n);
    TapeT<S>* t = a.tape;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, ai = a.id, bi = b.id, n, m] {
        const TensorT<S>& g = t->grad(oi);
        TensorT<S>& da = t->grad_mut(ai);
        TensorT<S>& db = t->grad_mut(bi);
        for (size_t i = 0; i < n; ++i) da[i] += g[i];
        for (size_t i = 0; i < m; ++i) db[i] += g[n + i];
    });
    return o;
}

// Per-position inner product of a weight vector with the feature map plus a
// scalar bias: out[0,y,x] = <f[:,y,x], w> + b. f is [c,h,w], w is [c], b is
// [1]; the result keeps a leading unit channel so it feeds upsampling.
template <typename S>
VarT<S> proj_spatial(VarT<S> f, VarT<S> w, VarT<S> b) {
    const TensorT<S>& fv = f.value();
    const TensorT<S>& wv = w.value();
    if (fv.rank() != 3 || wv.rank() != 1 || fv.shape[0] != wv.shape[0])
        throw DimensionError("proj_spatial: feature/weight mismatch");
    if (b.value().numel() != 1) throw DimensionError("proj_spatial: bias must be scalar");
    size_t c = fv.shape[0], h = fv.shape[1], wd = fv.shape[2], p = h * wd;
    TensorT<S> out({1, h, wd});
    S bval = b.value()[0];
    for (size_t i = 0; i < p; ++i) out[i] = bval;
    for (size_t ch = 0; ch < c; ++ch) {
        S wc = wv[ch];
        const S* row = fv.data.data() + ch * p;
        for (size_t i = 0; i < p; ++i) out[i] += wc * row[i];
    }
    TapeT<S>* t = f.tape;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, fi = f.id, wi = w.id, bi = b.id, c, p] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& fv2 = t->value(fi);
        const TensorT<S>& wv2 = t->value(wi);
        TensorT<S>& df = t->grad_mut(fi);
        TensorT<S>& dw = t->grad_mut(wi);
        TensorT<S>& db = t->grad_mut(bi);
        S gsum = S(0);
        for (size_t i = 0; i < p; ++i) gsum += g[i];
        db[0] += gsum;
        for (size_t ch = 0; ch < c; ++ch) {
            S wc = wv2[ch];
            S acc = S(0);
            const S* frow = fv2.data.data() + ch * p;
            S* drow = df.data.data() + ch * p;
            for (size_t i = 0; i < p; ++i) {
                drow[i] += wc * g[i];
                acc += frow[i] * g[i];
            }
            dw[ch] += acc;
        }
    });
    return o;
}

namespace detail {
struct AxisTable {
    std::vector<size_t> i0, i1;
    std::vector<double> w1;
};
// Half-pixel-center source mapping with edge clamping; weights sum to 1.
inline AxisTable upsample_axis(size_t n_in, size_t factor) {
    AxisTable t;
    size_t n_out = n_in * factor;
    t.i0.resize(n_out);
    t.i1.resize(n_out);
    t.w1.resize(n_out);
    for (size_t o = 0; o < n_out; ++o) {
        double src = (double(o) + 0.5) / double(factor) - 0.5;
        double fl = std::floor(src);
        ptrdiff_t i0 = ptrdiff_t(fl);
        double w1 = src - fl;
        ptrdiff_t last = ptrdiff_t(n_in) - 1;
        t.i0[o] = size_t(std::clamp<ptrdiff_t>(i0, 0, last));
        t.i1[o] = size_t(std::clamp<ptrdiff_t>(i0 + 1, 0, last));
        t.w1[o] = w1;
    }
    return t;
}
}  // namespace detail

// [c,h,w] -> [c,h*factor,w*factor] by bilinear interpolation over pixel
// centers (constant planes stay constant).
template <typename S>
VarT<S> bilinear_upsample(VarT<S> x, size_t factor) {
    const TensorT<S>& xv = x.value();
    if (xv.rank() != 3) throw DimensionError("bilinear_upsample: expects [c,h,w]");
    if (factor < 1) throw DimensionError("bilinear_upsample: factor must be >= 1");
    size_t c = xv.shape[0], h = xv.shape[1], w = xv.shape[2];
    size_t oh = h * factor, ow = w * factor;
    auto ty = std::make_shared<detail::AxisTable>(detail::upsample_axis(h, factor));
    auto tx = std::make_shared<detail::AxisTable>(detail::upsample_axis(w, factor));
    TensorT<S> out({c, oh, ow});
    for (size_t ch = 0; ch < c; ++ch) {
        const S* in = xv.data.data() + ch * h * w;
        S* op = out.data.data() + ch * oh * ow;
        for (size_t oy = 0; oy < oh; ++oy) {
            size_t y0 = ty->i0[oy], y1 = ty->i1[oy];
            S wy1 = S(ty->w1[oy]), wy0 = S(1) - wy1;
            for (size_t ox = 0; ox < ow; ++ox) {
                size_t x0 = tx->i0[ox], x1 = tx->i1[ox];
                S wx1 = S(tx->w1[ox]), wx0 = S(1) - wx1;
                op[oy * ow + ox] = wy0 * (wx0 * in[y0 * w + x0] + wx1 * in[y0 * w + x1]) +
                                   wy1 * (wx0 * in[y1 * w + x0] + wx1 * in[y1 * w + x1]);
            }
        }
    }
    TapeT<S>* t = x.tape;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, xi = x.id, ty, tx, c, h, w, oh, ow] {
        const TensorT<S>& g = t->grad(oi);
        TensorT<S>& dx = t->grad_mut(xi);
        for (size_t ch = 0; ch < c; ++ch) {
            const S* gp = g.data.data() + ch * oh * ow;
            S* dp = dx.data.data() + ch * h * w;
            for (size_t oy = 0; oy < oh; ++oy) {
                size_t y0 = ty->i0[oy], y1 = ty->i1[oy];
                S wy1 = S(ty->w1[oy]), wy0 = S(1) - wy1;
                for (size_t ox = 0; ox < ow; ++ox) {
                    size_t x0 = tx->i0[ox], x1 = tx->i1[ox];
                    S wx1 = S(tx->w1[ox]), wx0 = S(1) - wx1;
                    S gv = gp[oy * ow + ox];
                    dp[y0 * w + x0] += wy0 * wx0 * gv;
                    dp[y0 * w + x1] += wy0 * wx1 * gv;
                    dp[y1 * w + x0] += wy1 * wx0 * gv;
                    dp[y1 * w + x1] += wy1 * wx1 * gv;
                }
            }
        }
    });
    return o;
}

template <typename S>
VarT<S> sum_all(VarT<S> x) {
    TapeT<S>* t = x.tape;
    S acc = S(0);
    for (S v : x.value().data) acc += v;
    VarT<S> o = t->alloc(TensorT<S>({1}, {acc}));
    t->set_backward(o.id, [t, oi = o.id, xi = x.id] {
        S g = t->grad(oi)[0];
        TensorT<S>& dx = t->grad_mut(xi);
        for (S& v : dx.data) v += g;
    });
    return o;
}

template <typename S>
VarT<S> mean_all(VarT<S> x) {
    size_t n = x.value().numel();
    return scale(sum_all(x), S(1) / S(n));
}

// Mean binary cross-entropy against a constant target, computed from logits
// in the overflow-safe form max(z,0) - z*y + log1p(e^-|z|).
template <typename S>
VarT<S> bce_with_logits_mean(VarT<S> logits, const TensorT<S>& target) {
    const TensorT<S>& zv = logits.value();
    if (!zv.same_shape(target)) throw DimensionError("bce_with_logits_mean: shape mismatch");
    size_t n = zv.numel();
    S acc = S(0);
    for (size_t i = 0; i < n; ++i) {
        S z = zv[i], y = target[i];
        acc += std::max(z, S(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
    }
    TapeT<S>* t = logits.tape;
    VarT<S> o = t->alloc(TensorT<S>({1}, {acc / S(n)}));
    t->set_backward(o.id, [t, oi = o.id, zi = logits.id, target, n] {
        S g = t->grad(oi)[0] / S(n);
        const TensorT<S>& zv2 = t->value(zi);
        TensorT<S>& dz = t->grad_mut(zi);
        for (size_t i = 0; i < n; ++i)
            dz[i] += g * (stable_sigmoid(zv2[i]) - target[i]);
    });
    return o;
}

// ---------------------------------------------------------------------------
// Top-k gate.
// ---------------------------------------------------------------------------

// Backward rule for the gate. The masked softmax has an identically zero
// Jacobian at k=1 (its one output is the constant 1), which would starve the
// router of any training signal. `dense` therefore backpropagates through the
// unmasked softmax probabilities restricted to the selected coordinates; it
// coincides with `exact` when k equals the expert count. `exact` is the true
// Jacobian of the masked softmax under a frozen selection, used by the
// finite-difference checks.
enum class GateBackward { dense, exact };

template <typename S>
struct GateResult {
    VarT<S> pi;                      // length K, exact zeros at unselected entries
    std::vector<uint32_t> selected;  // ascending expert indices, size k
};

// Lower index wins score ties, making the selection deterministic.
template <typename S>
std::vector<uint32_t> topk_indices(const std::vector<S>& scores, size_t k) {
    std::vector<uint32_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](uint32_t a, uint32_t b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename S>
GateResult<S> gate(VarT<S> scores, size_t k, GateBackward mode,
                   const std::vector<uint32_t>* forced_selection = nullptr) {
    const TensorT<S>& sv = scores.value();
    if (sv.rank() != 1) throw DimensionError("gate: scores must be a vector");
    size_t kk = sv.shape[0];
    if (k < 1 || k > kk) throw DimensionError("gate: k out of range");
    for (S v : sv.data)
        if (std::isnan(v)) throw NumericError("gate: NaN score");

    std::vector<uint32_t> sel =
        forced_selection ? *forced_selection : topk_indices(sv.data, k);
    if (sel.size() != k) throw DimensionError("gate: selection size mismatch");

    std::vector<S> masked(kk, -std::numeric_limits<S>::infinity());
    for (uint32_t j : sel) masked[j] = sv[j];
    std::vector<S> pi_vals = softmax_1d(masked);

    // Unmasked probabilities, needed by the dense backward rule.
    auto q = std::make_shared<std::vector<S>>(softmax_1d(sv.data));
    auto pi_sel = std::make_shared<std::vector<S>>(pi_vals);

    TapeT<S>* t = scores.tape;
    VarT<S> pi = t->alloc(TensorT<S>({kk}, std::move(pi_vals)));
    t->set_backward(pi.id, [t, pii = pi.id, si = scores.id, sel, mode, q, pi_sel] {
        const TensorT<S>& g = t->grad(pii);
        const std::vector<S>& p = (mode == GateBackward::dense) ? *q : *pi_sel;
        S dot = S(0);
        for (uint32_t j : sel) dot += g[j] * p[j];
        TensorT<S>& ds = t->grad_mut(si);
        for (uint32_t j : sel) ds[j] += p[j] * (g[j] - dot);
    });
    return GateResult<S>{pi, std::move(sel)};
}

// out = pi[j] * x; lets gate mass weight an expert's logits.
template <typename S>
VarT<S> scale_by_gate(VarT<S> x, VarT<S> pi, size_t j) {
    if (j >= pi.value().numel()) throw DimensionError("scale_by_gate: index out of range");
    TapeT<S>* t = x.tape;
    S w = pi.value()[j];
    TensorT<S> out = x.value();
    for (S& v : out.data) v *= w;
    VarT<S> o = t->alloc(std::move(out));
    t->set_backward(o.id, [t, oi = o.id, xi = x.id, pii = pi.id, j] {
        const TensorT<S>& g = t->grad(oi);
        const TensorT<S>& xv = t->value(xi);
        S w2 = t->value(pii)[j];
        TensorT<S>& dx = t->grad_mut(xi);
        S acc = S(0);
        for (size_t i = 0; i < g.numel(); ++i) {
            dx[i] += w2 * g[i];
            acc += g[i] * xv[i];
        }
        t->grad_mut(pii)[j] += acc;
    });
    return o;
}

// ---------------------------------------------------------------------------
// Squared coefficient of variation of per-expert importance, with its
// gradient. Population variance; the mean-square floor keeps the ratio finite
// for all-zero importance.
// ---------------------------------------------------------------------------

template <typename S>
struct Cv2Result {
    S loss;
    std::vector<S> d_importance;
};

template <typename S>
Cv2Result<S> cv2_loss(const std::vector<S>& importance) {
    size_t n = importance.size();
    if (n == 0) throw DimensionError("cv2_loss: empty importance vector");
    S eps = S(1e-10);
    S mean = S(0);
    for (S v : importance) mean += v;
    mean /= S(n);
    S var = S(0);
    for (S v : importance) var += (v - mean) * (v - mean);
    var /= S(n);
    S denom = mean * mean + eps;
    Cv2Result<S> r;
    r.loss = var / denom;
    r.d_importance.resize(n);
    for (size_t j = 0; j < n; ++j) {
        S dvar = S(2) * (importance[j] - mean) / S(n);
        S dmean = S(1) / S(n);
        r.d_importance[j] = dvar / denom - var * S(2) * mean * dmean / (denom * denom);
    }
    return r;
}

}  // namespace shapemoe
