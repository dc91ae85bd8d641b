// ops.hpp — differentiable tensor operations on the tape.
//
// Each op validates shapes, computes the forward value, and registers a
// backward closure that accumulates (+=) into its parents' gradients; a
// parent consumed by several ops therefore receives the correct gradient sum.
// Reductions that feed statistics (means, losses) accumulate in double
// regardless of T: it is cheap, improves float stability, and keeps the
// summation order fixed (bit-reproducible runs).
//
// Convolution is im2col + one GEMM over the whole batch: columns are laid out
// [Cin*kh*kw, B*Ho*Wo] so the batch rides along the GEMM N dimension, which
// keeps the SIMD kernels in their efficient regime even for late stages with
// tiny spatial extents. The weight gradient uses gemm_nt (row-by-row dots) so
// no transposition of the big column matrix is ever materialized.

#ifndef AIM_OPS_HPP
#define AIM_OPS_HPP

#include <cmath>
#include <cstring>
#include <utility>
#include <vector>

#include "aim/autodiff.hpp"
#include "aim/kernels.hpp"

namespace aim::ops {

template <typename T>
T sigmoid_scalar(T a) {
    if (a >= T(0)) {
        return T(1) / (T(1) + std::exp(-a));
    }
    const T e = std::exp(a);
    return e / (T(1) + e);
}

namespace detail {

template <typename T>
bool any_needs(Tape<T>& t, std::initializer_list<int> ids) {
    for (int id : ids) {
        if (id >= 0 && t.needs_grad(id)) return true;
    }
    return false;
}

// Re-slice a [Cout, B*HW] GEMM product into NCHW, adding the bias.
template <typename T>
void scatter_bias(const Tensor<T>& prod, const Tensor<T>& bias, int64_t B, int64_t Cout,
                  int64_t HW, Tensor<T>& y) {
    const int64_t NN = B * HW;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Cout; ++co) {
            const T* src = prod.data() + co * NN + b * HW;
            T* dst = y.data() + (b * Cout + co) * HW;
            const T bv = bias[co];
            for (int64_t i = 0; i < HW; ++i) dst[i] = src[i] + bv;
        }
    }
}

// NCHW gradient -> [Cout, B*HW] layout for the backward GEMMs.
template <typename T>
void gather_grad(const Tensor<T>& dy, int64_t B, int64_t Cout, int64_t HW, Tensor<T>& dout) {
    const int64_t NN = B * HW;
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t co = 0; co < Cout; ++co) {
            std::memcpy(dout.data() + co * NN + b * HW, dy.data() + (b * Cout + co) * HW,
                        size_t(HW) * sizeof(T));
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x [B,Cin,H,W] * w [Cout,Cin*kh*kw] + b [Cout] -> [B,Cout,Ho,Wo]
// ---------------------------------------------------------------------------
template <typename T>
Var<T> conv2d(Graph<T>& g, Var<T> x, Var<T> w, Var<T> b, int64_t kh, int64_t kw, int64_t stride,
              int64_t pad) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "conv2d input");
    const int64_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int64_t K = Cin * kh * kw;
    const Tensor<T>& wv = w.val();
    AIM_CHECK(wv.rank() == 2 && wv.dim(1) == K, DimError,
              "conv2d: weight " << shape_str(wv.shape()) << " does not match Cin*kh*kw=" << K);
    const int64_t Cout = wv.dim(0);
    check_shape(b.val(), {Cout}, "conv2d bias");
    AIM_CHECK(stride >= 1, ConfigError, "conv2d: stride must be >= 1, got " << stride);
    const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
    const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
    AIM_CHECK(Ho >= 1 && Wo >= 1, DimError,
              "conv2d: kernel " << kh << "x" << kw << " stride " << stride << " pad " << pad
                                << " does not fit input " << H << "x" << W);
    const int64_t HW = Ho * Wo, NN = B * HW;

    Tensor<T> col({K, NN});
    kern::im2col(xv.data(), B, Cin, H, W, kh, kw, stride, pad, Ho, Wo, col.data());
    Tensor<T> prod({Cout, NN});
    kern::gemm_nn(Cout, NN, K, wv.data(), K, col.data(), NN, prod.data(), NN, T(0));
    Tensor<T> y({B, Cout, Ho, Wo});
    detail::scatter_bias(prod, b.val(), B, Cout, HW, y);

    const bool ng = detail::any_needs(g.tape, {x.id, w.id, b.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id, wid = w.id, bid = b.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T> dout({Cout, NN});
            detail::gather_grad(dy, B, Cout, HW, dout);
            if (t.needs_grad(bid)) {
                Tensor<T>& db = t.grad(bid);
                for (int64_t co = 0; co < Cout; ++co) {
                    double s = 0;
                    const T* row = dout.data() + co * NN;
                    for (int64_t i = 0; i < NN; ++i) s += double(row[i]);
                    db[co] += T(s);
                }
            }
            const bool need_w = t.needs_grad(wid), need_x = t.needs_grad(xid);
            if (need_w || need_x) {
                if (need_w) {
                    Tensor<T> colb({K, NN});  // rebuilt, not kept from forward
                    kern::im2col(xv.data(), B, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                 colb.data());
                    kern::gemm_nt(Cout, K, NN, dout.data(), NN, colb.data(), NN,
                                  t.grad(wid).data(), K, T(1));
                }
                if (need_x) {
                    Tensor<T> wT({K, Cout});
                    kern::transpose(wv.data(), Cout, K, wT.data());
                    Tensor<T> dcol({K, NN});
                    kern::gemm_nn(K, NN, Cout, wT.data(), Cout, dout.data(), NN, dcol.data(), NN,
                                  T(0));
                    kern::col2im(dcol.data(), B, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                 t.grad(xid).data());
                }
            }
        });
    }
    return {&g.tape, out};
}

// ---------------------------------------------------------------------------
// linear: x [B,Cin] * w [Cout,Cin]^T + b -> [B,Cout]
// ---------------------------------------------------------------------------
template <typename T>
Var<T> linear(Graph<T>& g, Var<T> x, Var<T> w, Var<T> b) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 2, "linear input");
    const int64_t B = xv.dim(0), Cin = xv.dim(1);
    const Tensor<T>& wv = w.val();
    AIM_CHECK(wv.rank() == 2 && wv.dim(1) == Cin, DimError,
              "linear: weight " << shape_str(wv.shape()) << " vs input features " << Cin);
    const int64_t Cout = wv.dim(0);
    check_shape(b.val(), {Cout}, "linear bias");

    Tensor<T> y({B, Cout});
    kern::gemm_nt(B, Cout, Cin, xv.data(), Cin, wv.data(), Cin, y.data(), Cout, T(0));
    for (int64_t bb = 0; bb < B; ++bb) {
        T* row = y.data() + bb * Cout;
        for (int64_t co = 0; co < Cout; ++co) row[co] += b.val()[co];
    }

    const bool ng = detail::any_needs(g.tape, {x.id, w.id, b.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id, wid = w.id, bid = b.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            if (t.needs_grad(bid)) {
                Tensor<T>& db = t.grad(bid);
                for (int64_t co = 0; co < Cout; ++co) {
                    double s = 0;
                    for (int64_t bb = 0; bb < B; ++bb) s += double(dy[bb * Cout + co]);
                    db[co] += T(s);
                }
            }
            if (t.needs_grad(wid)) {
                Tensor<T> dyT({Cout, B});
                kern::transpose(dy.data(), B, Cout, dyT.data());
                kern::gemm_nn(Cout, Cin, B, dyT.data(), B, xv.data(), Cin, t.grad(wid).data(),
                              Cin, T(1));
            }
            if (t.needs_grad(xid)) {
                kern::gemm_nn(B, Cin, Cout, dy.data(), Cout, wv.data(), Cin, t.grad(xid).data(),
                              Cin, T(1));
            }
        });
    }
    return {&g.tape, out};
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------
template <typename T>
Var<T> relu(Graph<T>& g, Var<T> x) {
    const Tensor<T>& xv = x.val();
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t i = 0; i < dy.size(); ++i) dx[i] += xv[i] > T(0) ? dy[i] : T(0);
        });
    }
    return {&g.tape, out};
}

// GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))).
template <typename T>
Var<T> gelu(Graph<T>& g, Var<T> x) {
    constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    const Tensor<T>& xv = x.val();
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        y[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
    }
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t i = 0; i < dy.size(); ++i) {
                const T v = xv[i];
                const T u = std::tanh(kC * (v + kA * v * v * v));
                const T d = T(0.5) * (T(1) + u) +
                            T(0.5) * v * (T(1) - u * u) * kC * (T(1) + T(3) * kA * v * v);
                dx[i] += dy[i] * d;
            }
        });
    }
    return {&g.tape, out};
}

template <typename T>
Var<T> sigmoid(Graph<T>& g, Var<T> x) {
    const Tensor<T>& xv = x.val();
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) y[i] = sigmoid_scalar(xv[i]);
    Tensor<T> saved = y;  // shares the buffer; output values are what we need
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t i = 0; i < dy.size(); ++i) {
                dx[i] += dy[i] * saved[i] * (T(1) - saved[i]);
            }
        });
    }
    return {&g.tape, out};
}

// Scaled softsign x / (1 + |x|/s): output bounded in (-s, s). Unlike tanh or
// sigmoid squashing, the derivative 1/(1 + |x|/s)^2 decays polynomially, so
// gradients through a saturated bound never underflow to zero in float.
template <typename T>
Var<T> soft_bound(Graph<T>& g, Var<T> x, double bound) {
    AIM_CHECK(bound > 0.0, ArgError, "soft_bound: bound must be positive, got " << bound);
    const T s = T(bound);
    const Tensor<T>& xv = x.val();
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] / (T(1) + std::abs(xv[i]) / s);
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t i = 0; i < dy.size(); ++i) {
                const T u = T(1) + std::abs(xv[i]) / s;
                dx[i] += dy[i] / (u * u);
            }
        });
    }
    return {&g.tape, out};
}

template <typename T>
Var<T> add(Graph<T>& g, Var<T> a, Var<T> b) {
    const Tensor<T>& av = a.val();
    const Tensor<T>& bv = b.val();
    AIM_CHECK(av.shape() == bv.shape(), DimError,
              "add: shape mismatch " << shape_str(av.shape()) << " vs " << shape_str(bv.shape()));
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
    const bool ng = detail::any_needs(g.tape, {a.id, b.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int aid = a.id, bid = b.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            if (t.needs_grad(aid)) {
                Tensor<T>& da = t.grad(aid);
                for (int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
            }
            if (t.needs_grad(bid)) {
                Tensor<T>& db = t.grad(bid);
                for (int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
            }
        });
    }
    return {&g.tape, out};
}

// feat [B,C,H,W] * mask [B,1,H,W] broadcast over channels.
template <typename T>
Var<T> mul_mask(Graph<T>& g, Var<T> feat, Var<T> mask) {
    const Tensor<T>& fv = feat.val();
    const Tensor<T>& mv = mask.val();
    check_rank(fv, 4, "mul_mask features");
    const int64_t B = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
    check_shape(mv, {B, 1, H, W}, "mul_mask mask");
    const int64_t HW = H * W;
    Tensor<T> y(fv.shape());
    for (int64_t b = 0; b < B; ++b) {
        const T* m = mv.data() + b * HW;
        for (int64_t c = 0; c < C; ++c) {
            const T* f = fv.data() + (b * C + c) * HW;
            T* o = y.data() + (b * C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) o[i] = f[i] * m[i];
        }
    }
    const bool ng = detail::any_needs(g.tape, {feat.id, mask.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int fid = feat.id, mid = mask.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            if (t.needs_grad(fid)) {
                Tensor<T>& df = t.grad(fid);
                for (int64_t b = 0; b < B; ++b) {
                    const T* m = mv.data() + b * HW;
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (b * C + c) * HW;
                        for (int64_t i = 0; i < HW; ++i) df[off + i] += dy[off + i] * m[i];
                    }
                }
            }
            if (t.needs_grad(mid)) {
                Tensor<T>& dm = t.grad(mid);
                for (int64_t b = 0; b < B; ++b) {
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t off = (b * C + c) * HW;
                        T* d = dm.data() + b * HW;
                        for (int64_t i = 0; i < HW; ++i) d[i] += dy[off + i] * fv[off + i];
                    }
                }
            }
        });
    }
    return {&g.tape, out};
}

// Nearest-neighbour 2x upsampling: each source cell becomes a 2x2 block.
template <typename T>
Var<T> upsample_nearest2(Graph<T>& g, Var<T> x) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "upsample_nearest2");
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor<T> y({B, C, 2 * H, 2 * W});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        const T* src = xv.data() + bc * H * W;
        T* dst = y.data() + bc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h) {
            for (int64_t w = 0; w < W; ++w) {
                const T v = src[h * W + w];
                T* d = dst + (2 * h) * 2 * W + 2 * w;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
        }
    }
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T* d = dy.data() + bc * 4 * H * W;
                T* s = dx.data() + bc * H * W;
                for (int64_t h = 0; h < H; ++h) {
                    for (int64_t w = 0; w < W; ++w) {
                        const T* p = d + (2 * h) * 2 * W + 2 * w;
                        s[h * W + w] += p[0] + p[1] + p[2 * W] + p[2 * W + 1];
                    }
                }
            }
        });
    }
    return {&g.tape, out};
}

// Global average pool over all spatial positions (zeros included).
template <typename T>
Var<T> gap(Graph<T>& g, Var<T> x) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "gap");
    const int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    Tensor<T> y({B, C});
    for (int64_t bc = 0; bc < B * C; ++bc) {
        double s = 0;
        const T* src = xv.data() + bc * HW;
        for (int64_t i = 0; i < HW; ++i) s += double(src[i]);
        y[bc] = T(s / double(HW));
    }
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            const T scale = T(1) / T(HW);
            for (int64_t bc = 0; bc < B * C; ++bc) {
                const T d = dy[bc] * scale;
                T* p = dx.data() + bc * HW;
                for (int64_t i = 0; i < HW; ++i) p[i] += d;
            }
        });
    }
    return {&g.tape, out};
}

// [B,C,H,W] -> [B,2C,H,W]: the input concatenated with its own per-channel
// global average broadcast back over space (the mask estimator's context mix).
template <typename T>
Var<T> concat_gap(Graph<T>& g, Var<T> x) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "concat_gap");
    const int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int64_t HW = H * W;
    Tensor<T> y({B, 2 * C, H, W});
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const T* src = xv.data() + (b * C + c) * HW;
            T* ident = y.data() + (b * 2 * C + c) * HW;
            std::memcpy(ident, src, size_t(HW) * sizeof(T));
            double s = 0;
            for (int64_t i = 0; i < HW; ++i) s += double(src[i]);
            const T mean = T(s / double(HW));
            T* bcast = y.data() + (b * 2 * C + C + c) * HW;
            for (int64_t i = 0; i < HW; ++i) bcast[i] = mean;
        }
    }
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    const T* d1 = dy.data() + (b * 2 * C + c) * HW;
                    const T* d2 = dy.data() + (b * 2 * C + C + c) * HW;
                    double s = 0;
                    for (int64_t i = 0; i < HW; ++i) s += double(d2[i]);
                    const T mean_d = T(s / double(HW));
                    T* p = dx.data() + (b * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) p[i] += d1[i] + mean_d;
                }
            }
        });
    }
    return {&g.tape, out};
}

// Inverted dropout; identity in eval mode or at p == 0.
template <typename T>
Var<T> dropout(Graph<T>& g, Var<T> x, double p) {
    AIM_CHECK(p >= 0.0 && p < 1.0, ConfigError, "dropout: p must be in [0,1), got " << p);
    if (g.mode == Mode::kEval || p == 0.0) return x;
    AIM_CHECK(g.rng != nullptr, ConfigError, "dropout: training mode requires an RNG");
    const Tensor<T>& xv = x.val();
    Tensor<T> keep(xv.shape());
    const T scale = T(1.0 / (1.0 - p));
    for (int64_t i = 0; i < xv.size(); ++i) keep[i] = g.rng->uniform() >= p ? scale : T(0);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] * keep[i];
    const bool ng = g.tape.needs_grad(x.id);
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dx = t.grad(xid);
            for (int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * keep[i];
        });
    }
    return {&g.tape, out};
}

// Per-channel normalization over spatial positions: statistics over H*W for
// each (sample, channel); gamma/beta are per channel. Used in the backbone so
// the result is independent of batch composition.
template <typename T>
Var<T> norm_spatial(Graph<T>& g, Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "norm_spatial");
    const int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    check_shape(gamma.val(), {C}, "norm_spatial gamma");
    check_shape(beta.val(), {C}, "norm_spatial beta");
    Tensor<T> y(xv.shape());
    Tensor<T> mu({B * C}), inv({B * C});
    const Tensor<T>& gv = gamma.val();
    const Tensor<T>& bv = beta.val();
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t c = 0; c < C; ++c) {
            const int64_t bc = b * C + c;
            const T* src = xv.data() + bc * HW;
            double s = 0, sq = 0;
            for (int64_t i = 0; i < HW; ++i) {
                s += double(src[i]);
                sq += double(src[i]) * double(src[i]);
            }
            const double m = s / double(HW);
            const double var = sq / double(HW) - m * m;
            const double iv = 1.0 / std::sqrt(var > 0 ? var + eps : eps);
            mu[bc] = T(m);
            inv[bc] = T(iv);
            T* dst = y.data() + bc * HW;
            const T gc = gv[c], bb = bv[c];
            for (int64_t i = 0; i < HW; ++i) dst[i] = gc * (src[i] - T(m)) * T(iv) + bb;
        }
    }
    const bool ng = detail::any_needs(g.tape, {x.id, gamma.id, beta.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id, gid = gamma.id, bid = beta.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            const bool nx = t.needs_grad(xid), ngam = t.needs_grad(gid), nbet = t.needs_grad(bid);
            std::vector<double> dgam(size_t(C), 0.0), dbet(size_t(C), 0.0);
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t bc = b * C + c;
                    const T* src = xv.data() + bc * HW;
                    const T* d = dy.data() + bc * HW;
                    const T m = mu[bc], iv = inv[bc], gc = gv[c];
                    double sum_d = 0, sum_dx = 0, sum_dyr = 0, sum_dyxr = 0;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double xh = double(src[i] - m) * double(iv);
                        sum_dyr += double(d[i]);
                        sum_dyxr += double(d[i]) * xh;
                    }
                    if (ngam) dgam[size_t(c)] += sum_dyxr;
                    if (nbet) dbet[size_t(c)] += sum_dyr;
                    if (nx) {
                        sum_d = sum_dyr * double(gc) / double(HW);
                        sum_dx = sum_dyxr * double(gc) / double(HW);
                        T* dxp = t.grad(xid).data() + bc * HW;
                        for (int64_t i = 0; i < HW; ++i) {
                            const double xh = double(src[i] - m) * double(iv);
                            dxp[i] += T(double(iv) *
                                        (double(d[i]) * double(gc) - sum_d - xh * sum_dx));
                        }
                    }
                }
            }
            if (ngam) {
                Tensor<T>& dg = t.grad(gid);
                for (int64_t c = 0; c < C; ++c) dg[c] += T(dgam[size_t(c)]);
            }
            if (nbet) {
                Tensor<T>& db = t.grad(bid);
                for (int64_t c = 0; c < C; ++c) db[c] += T(dbet[size_t(c)]);
            }
        });
    }
    return {&g.tape, out};
}

// LayerNorm over the channel dimension at every spatial position; gamma/beta
// per channel. Used inside the top-down transform.
template <typename T>
Var<T> norm_channel(Graph<T>& g, Var<T> x, Var<T> gamma, Var<T> beta, double eps) {
    const Tensor<T>& xv = x.val();
    check_rank(xv, 4, "norm_channel");
    const int64_t B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
    check_shape(gamma.val(), {C}, "norm_channel gamma");
    check_shape(beta.val(), {C}, "norm_channel beta");
    Tensor<T> y(xv.shape());
    Tensor<T> mu({B * HW}), inv({B * HW});
    const Tensor<T>& gv = gamma.val();
    const Tensor<T>& bv = beta.val();
    for (int64_t b = 0; b < B; ++b) {
        const T* xb = xv.data() + b * C * HW;
        T* yb = y.data() + b * C * HW;
        for (int64_t i = 0; i < HW; ++i) {
            double s = 0, sq = 0;
            for (int64_t c = 0; c < C; ++c) {
                const double v = double(xb[c * HW + i]);
                s += v;
                sq += v * v;
            }
            const double m = s / double(C);
            const double var = sq / double(C) - m * m;
            const double iv = 1.0 / std::sqrt(var > 0 ? var + eps : eps);
            mu[b * HW + i] = T(m);
            inv[b * HW + i] = T(iv);
            for (int64_t c = 0; c < C; ++c) {
                yb[c * HW + i] = gv[c] * (xb[c * HW + i] - T(m)) * T(iv) + bv[c];
            }
        }
    }
    const bool ng = detail::any_needs(g.tape, {x.id, gamma.id, beta.id});
    const int out = g.tape.push(std::move(y), ng);
    if (ng) {
        const int xid = x.id, gid = gamma.id, bid = beta.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            const bool nx = t.needs_grad(xid), ngam = t.needs_grad(gid), nbet = t.needs_grad(bid);
            std::vector<double> dgam(size_t(C), 0.0), dbet(size_t(C), 0.0);
            for (int64_t b = 0; b < B; ++b) {
                const T* xb = xv.data() + b * C * HW;
                const T* db = dy.data() + b * C * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const T m = mu[b * HW + i], iv = inv[b * HW + i];
                    double sum_dyr = 0, sum_dyxr = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        const double xh = double(xb[c * HW + i] - m) * double(iv);
                        const double dd = double(db[c * HW + i]);
                        sum_dyr += dd * double(gv[c]);
                        sum_dyxr += dd * double(gv[c]) * xh;
                        if (ngam) dgam[size_t(c)] += dd * xh;
                        if (nbet) dbet[size_t(c)] += dd;
                    }
                    if (nx) {
                        const double m1 = sum_dyr / double(C);
                        const double m2 = sum_dyxr / double(C);
                        T* dxb = t.grad(xid).data() + b * C * HW;
                        for (int64_t c = 0; c < C; ++c) {
                            const double xh = double(xb[c * HW + i] - m) * double(iv);
                            dxb[c * HW + i] += T(double(iv) * (double(db[c * HW + i]) *
                                                                   double(gv[c]) -
                                                               m1 - xh * m2));
                        }
                    }
                }
            }
            if (ngam) {
                Tensor<T>& dg = t.grad(gid);
                for (int64_t c = 0; c < C; ++c) dg[c] += T(dgam[size_t(c)]);
            }
            if (nbet) {
                Tensor<T>& dbv = t.grad(bid);
                for (int64_t c = 0; c < C; ++c) dbv[c] += T(dbet[size_t(c)]);
            }
        });
    }
    return {&g.tape, out};
}

// ---------------------------------------------------------------------------
// Losses and scalar plumbing
// ---------------------------------------------------------------------------

// Label-smoothed cross entropy, batch mean. Targets are
// (1-s)*onehot + s/C uniform; s = 0 reduces to plain cross entropy.
template <typename T>
Var<T> ce_smoothed(Graph<T>& g, Var<T> logits, const std::vector<int64_t>& labels,
                   double smoothing) {
    const Tensor<T>& zv = logits.val();
    check_rank(zv, 2, "ce_smoothed logits");
    const int64_t B = zv.dim(0), C = zv.dim(1);
    AIM_CHECK(int64_t(labels.size()) == B, DimError,
              "ce_smoothed: " << labels.size() << " labels for batch " << B);
    AIM_CHECK(smoothing >= 0.0 && smoothing < 1.0, ConfigError,
              "ce_smoothed: smoothing must be in [0,1), got " << smoothing);
    for (int64_t y : labels) {
        AIM_CHECK(y >= 0 && y < C, DimError,
                  "ce_smoothed: label " << y << " out of range [0," << C << ")");
    }
    Tensor<T> soft({B, C});
    double total = 0;
    for (int64_t b = 0; b < B; ++b) {
        const T* z = zv.data() + b * C;
        double m = double(z[0]);
        for (int64_t c = 1; c < C; ++c) m = std::max(m, double(z[c]));
        double sum = 0, tz = 0;
        for (int64_t c = 0; c < C; ++c) {
            sum += std::exp(double(z[c]) - m);
            tz += (smoothing / double(C)) * double(z[c]);
        }
        tz += (1.0 - smoothing) * double(z[labels[size_t(b)]]);
        const double lse = m + std::log(sum);
        total += lse - tz;
        for (int64_t c = 0; c < C; ++c) soft.at(b, c) = T(std::exp(double(z[c]) - m) / sum);
    }
    Tensor<T> val({1});
    val[0] = T(total / double(B));
    const bool ng = g.tape.needs_grad(logits.id);
    const int out = g.tape.push(std::move(val), ng);
    if (ng) {
        const int zid = logits.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const T go = t.grad(out)[0];
            Tensor<T>& dz = t.grad(zid);
            const T invB = T(1.0 / double(B));
            const T u = T(smoothing / double(C));
            for (int64_t b = 0; b < B; ++b) {
                for (int64_t c = 0; c < C; ++c) {
                    T tgt = u;
                    if (int64_t(labels[size_t(b)]) == c) tgt += T(1.0 - smoothing);
                    dz[b * C + c] += go * (soft[b * C + c] - tgt) * invB;
                }
            }
        });
    }
    return {&g.tape, out};
}

// Active-area penalty: mean over the batch of (active_fraction - tau)^2,
// where active_fraction is the per-sample mean of the mask values.
template <typename T>
Var<T> active_area(Graph<T>& g, Var<T> mask, double tau) {
    const Tensor<T>& mv = mask.val();
    check_rank(mv, 4, "active_area mask");
    AIM_CHECK(mv.dim(1) == 1, DimError,
              "active_area: expected a single-channel mask, got " << shape_str(mv.shape()));
    const int64_t B = mv.dim(0), HW = mv.dim(2) * mv.dim(3);
    std::vector<double> r(static_cast<size_t>(B));
    double total = 0;
    for (int64_t b = 0; b < B; ++b) {
        double s = 0;
        const T* p = mv.data() + b * HW;
        for (int64_t i = 0; i < HW; ++i) s += double(p[i]);
        r[size_t(b)] = s / double(HW);
        const double d = r[size_t(b)] - tau;
        total += d * d;
    }
    Tensor<T> val({1});
    val[0] = T(total / double(B));
    const bool ng = g.tape.needs_grad(mask.id);
    const int out = g.tape.push(std::move(val), ng);
    if (ng) {
        const int mid = mask.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const T go = t.grad(out)[0];
            Tensor<T>& dm = t.grad(mid);
            for (int64_t b = 0; b < B; ++b) {
                const T d = go * T(2.0 * (r[size_t(b)] - tau) / (double(B) * double(HW)));
                T* p = dm.data() + b * HW;
                for (int64_t i = 0; i < HW; ++i) p[i] += d;
            }
        });
    }
    return {&g.tape, out};
}

// Weighted sum of scalar terms (loss aggregation).
template <typename T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<std::pair<double, Var<T>>>& terms) {
    AIM_CHECK(!terms.empty(), ConfigError, "weighted_sum: no terms");
    double total = 0;
    bool ng = false;
    for (const auto& [w, v] : terms) {
        AIM_CHECK(v.val().size() == 1, DimError, "weighted_sum: non-scalar term");
        total += w * double(v.val()[0]);
        ng = ng || g.tape.needs_grad(v.id);
    }
    Tensor<T> val({1});
    val[0] = T(total);
    const int out = g.tape.push(std::move(val), ng);
    if (ng) {
        std::vector<std::pair<double, int>> ids;
        ids.reserve(terms.size());
        for (const auto& [w, v] : terms) ids.emplace_back(w, v.id);
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const T go = t.grad(out)[0];
            for (const auto& [w, id] : ids) {
                if (t.needs_grad(id)) t.grad(id)[0] += go * T(w);
            }
        });
    }
    return {&g.tape, out};
}

// Sum of the selected class scores (attribution seed; no batch averaging).
template <typename T>
Var<T> class_score_sum(Graph<T>& g, Var<T> logits, const std::vector<int64_t>& labels) {
    const Tensor<T>& zv = logits.val();
    check_rank(zv, 2, "class_score_sum logits");
    const int64_t B = zv.dim(0), C = zv.dim(1);
    AIM_CHECK(int64_t(labels.size()) == B, DimError,
              "class_score_sum: " << labels.size() << " labels for batch " << B);
    double s = 0;
    for (int64_t b = 0; b < B; ++b) {
        const int64_t y = labels[size_t(b)];
        AIM_CHECK(y >= 0 && y < C, DimError, "class_score_sum: label out of range");
        s += double(zv[b * C + y]);
    }
    Tensor<T> val({1});
    val[0] = T(s);
    const bool ng = g.tape.needs_grad(logits.id);
    const int out = g.tape.push(std::move(val), ng);
    if (ng) {
        const int zid = logits.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const T go = t.grad(out)[0];
            Tensor<T>& dz = t.grad(zid);
            for (int64_t b = 0; b < B; ++b) dz[b * C + labels[size_t(b)]] += go;
        });
    }
    return {&g.tape, out};
}

// ---------------------------------------------------------------------------
// Binary Gumbel-softmax gate with a straight-through estimator.
//
// Train mode: per element, soft = sigmoid((logit + n) / temperature) with
// n ~ Logistic(0,1) (the distribution of the difference of the two Gumbel
// draws of a two-class Gumbel-softmax), hard = [soft > 0.5]. The forward
// value is the hard sample; the backward pass uses the soft path's exact
// derivative soft*(1-soft)/temperature. Marginal activation probability is
// sigmoid(logit) for every temperature.
//
// Eval mode: deterministic hard threshold [logit > eval_threshold]; the
// backward relaxation is the noise-free soft path around the threshold.
//
// `noise_override`/`noise_out` exist for tests that need to replay the exact
// noise through an explicit soft graph.
// ---------------------------------------------------------------------------
template <typename T>
Var<T> gumbel_gate(Graph<T>& g, Var<T> logits, double temperature, double eval_threshold,
                   const Tensor<T>* noise_override = nullptr, Tensor<T>* noise_out = nullptr) {
    AIM_CHECK(temperature > 0.0, ConfigError,
              "gumbel_gate: temperature must be positive, got " << temperature);
    const Tensor<T>& zv = logits.val();
    for (int64_t i = 0; i < zv.size(); ++i) {
        AIM_CHECK(std::isfinite(double(zv[i])), NumericError,
                  "gumbel_gate: non-finite logit at flat index " << i);
    }
    Tensor<T> soft(zv.shape());
    Tensor<T> hard(zv.shape());
    const T invT = T(1.0 / temperature);
    if (g.mode == Mode::kTrain) {
        Tensor<T> noise(zv.shape());
        if (noise_override != nullptr) {
            AIM_CHECK(noise_override->shape() == zv.shape(), DimError,
                      "gumbel_gate: noise shape mismatch");
            noise = noise_override->clone();
        } else {
            AIM_CHECK(g.rng != nullptr, ConfigError, "gumbel_gate: training mode requires an RNG");
            for (int64_t i = 0; i < noise.size(); ++i) noise[i] = T(g.rng->logistic());
        }
        if (noise_out != nullptr) *noise_out = noise.clone();
        for (int64_t i = 0; i < zv.size(); ++i) {
            soft[i] = sigmoid_scalar((zv[i] + noise[i]) * invT);
            hard[i] = soft[i] > T(0.5) ? T(1) : T(0);
        }
    } else {
        for (int64_t i = 0; i < zv.size(); ++i) {
            soft[i] = sigmoid_scalar((zv[i] - T(eval_threshold)) * invT);
            hard[i] = zv[i] > T(eval_threshold) ? T(1) : T(0);
        }
    }
    const bool ng = g.tape.needs_grad(logits.id);
    const int out = g.tape.push(std::move(hard), ng);
    if (ng) {
        const int zid = logits.id;
        g.tape.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& dy = t.grad(out);
            Tensor<T>& dz = t.grad(zid);
            for (int64_t i = 0; i < dy.size(); ++i) {
                dz[i] += dy[i] * soft[i] * (T(1) - soft[i]) * invT;
            }
        });
    }
    return {&g.tape, out};
}

}  // namespace aim::ops

#endif  // AIM_OPS_HPP
