#include "dualshot/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dualshot/simd/kernels.hpp"

namespace dualshot::ops {
namespace {

using simd::Trans;

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
    throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

std::array<std::size_t, 4> strides_of(const Shape& s) {
    return {static_cast<std::size_t>(s[1]) * s[2] * s[3], static_cast<std::size_t>(s[2]) * s[3],
            static_cast<std::size_t>(s[3]), 1};
}

// Strides that map an output index onto a (possibly broadcast) operand.
std::array<std::size_t, 4> bcast_strides(const Shape& in, const Shape& out) {
    auto st = strides_of(in);
    for (int i = 0; i < 4; ++i) {
        if (in[i] == 1 && out[i] != 1) st[i] = 0;
    }
    return st;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    Shape out{};
    for (int i = 0; i < 4; ++i) {
        if (a[i] == b[i] || b[i] == 1) {
            out[i] = a[i];
        } else if (a[i] == 1) {
            out[i] = b[i];
        } else {
            shape_fail(op, a, b);
        }
    }
    return out;
}

template <class F>
void for_each_bcast(const Shape& out, const std::array<std::size_t, 4>& sa, const std::array<std::size_t, 4>& sb,
                    F&& fn) {
    std::size_t io = 0;
    for (int n = 0; n < out[0]; ++n) {
        for (int c = 0; c < out[1]; ++c) {
            for (int y = 0; y < out[2]; ++y) {
                const std::size_t ba = n * sa[0] + c * sa[1] + y * sa[2];
                const std::size_t bb = n * sb[0] + c * sb[1] + y * sb[2];
                for (int x = 0; x < out[3]; ++x, ++io) fn(io, ba + x * sa[3], bb + x * sb[3]);
            }
        }
    }
}

template <class T>
void im2col(const T* x, int channels, int height, int width, int kh, int kw, const ConvGeom& g, int ho, int wo,
            T* col) {
    const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        const T* xc = x + static_cast<std::size_t>(c) * height * width;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) * plane_out;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * g.stride - g.pad_h + ki * g.dil_h;
                    T* d = dst + static_cast<std::size_t>(oy) * wo;
                    if (iy < 0 || iy >= height) {
                        std::fill(d, d + wo, T(0));
                        continue;
                    }
                    const T* srow = xc + static_cast<std::size_t>(iy) * width;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * g.stride - g.pad_w + kj * g.dil_w;
                        d[ox] = (ix >= 0 && ix < width) ? srow[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const T* col, int channels, int height, int width, int kh, int kw, const ConvGeom& g, int ho, int wo,
                T* x) {
    const std::size_t plane_out = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < channels; ++c) {
        T* xc = x + static_cast<std::size_t>(c) * height * width;
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const T* src = col + (static_cast<std::size_t>(c) * kh * kw + ki * kw + kj) * plane_out;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * g.stride - g.pad_h + ki * g.dil_h;
                    if (iy < 0 || iy >= height) continue;
                    T* drow = xc + static_cast<std::size_t>(iy) * width;
                    const T* s = src + static_cast<std::size_t>(oy) * wo;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * g.stride - g.pad_w + kj * g.dil_w;
                        if (ix >= 0 && ix < width) drow[ix] += s[ox];
                    }
                }
            }
        }
    }
}

inline double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }
inline double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------- convolution

template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeom& g) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    const Tensor<T>& W = weight.value();
    const int batch = X.n(), ci = X.c(), height = X.h(), width = X.w();
    const int co = W.n(), kh = W.h(), kw = W.w();
    const bool depthwise = g.groups != 1;
    if (depthwise) {
        if (g.groups != ci || co != ci || W.c() != 1) shape_fail("conv2d(depthwise)", X.shape, W.shape);
    } else if (W.c() != ci) {
        shape_fail("conv2d", X.shape, W.shape);
    }
    if (bias.valid() && bias.value().shape != Shape{1, co, 1, 1}) shape_fail("conv2d(bias)", W.shape, bias.value().shape);
    const int ho = conv_out(height, kh, g.stride, g.pad_h, g.dil_h);
    const int wo = conv_out(width, kw, g.stride, g.pad_w, g.dil_w);
    if (ho <= 0 || wo <= 0) shape_fail("conv2d(output)", X.shape, W.shape);

    const int kdim = ci * kh * kw;
    const int pout = ho * wo;
    const bool pointwise = !depthwise && kh == 1 && kw == 1 && g.stride == 1 && g.pad_h == 0 && g.pad_w == 0;

    Tensor<T> Y({batch, co, ho, wo});
    if (!depthwise) {
        std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * pout);
        for (int n = 0; n < batch; ++n) {
            const T* src = X.plane(n, 0);
            if (!pointwise) {
                im2col(src, ci, height, width, kh, kw, g, ho, wo, col.data());
                src = col.data();
            }
            simd::gemm<T>(Trans::No, Trans::No, co, pout, kdim, T(1), W.data.data(), kdim, src, pout, T(0),
                          Y.plane(n, 0), pout);
        }
    } else {
        for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < ci; ++c) {
                const T* xc = X.plane(n, c);
                T* yc = Y.plane(n, c);
                const T* wc = W.data.data() + static_cast<std::size_t>(c) * kh * kw;
                for (int ki = 0; ki < kh; ++ki) {
                    for (int kj = 0; kj < kw; ++kj) {
                        const T wv = wc[ki * kw + kj];
                        for (int oy = 0; oy < ho; ++oy) {
                            const int iy = oy * g.stride - g.pad_h + ki * g.dil_h;
                            if (iy < 0 || iy >= height) continue;
                            const T* xr = xc + static_cast<std::size_t>(iy) * width;
                            T* yr = yc + static_cast<std::size_t>(oy) * wo;
                            for (int ox = 0; ox < wo; ++ox) {
                                const int ix = ox * g.stride - g.pad_w + kj * g.dil_w;
                                if (ix >= 0 && ix < width) yr[ox] += wv * xr[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    if (bias.valid()) {
        const T* b = bias.value().data.data();
        for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < co; ++c) {
                T* yc = Y.plane(n, c);
                for (int i = 0; i < pout; ++i) yc[i] += b[c];
            }
        }
    }

    Var<T> out = tp.record(std::move(Y), {x, weight, bias});
    if (!out.needs_grad()) return out;
    const int xid = x.id(), wid = weight.id(), bid = bias.valid() ? bias.id() : -1, oid = out.id();
    tp.set_backward(out, [=](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        const Tensor<T>& Xv = t.value(xid);
        const Tensor<T>& Wv = t.value(wid);
        const bool need_x = t.needs_grad(xid), need_w = t.needs_grad(wid);
        if (bid >= 0 && t.needs_grad(bid)) {
            Tensor<T>& gb = t.grad(bid);
            for (int n = 0; n < batch; ++n) {
                for (int c = 0; c < co; ++c) {
                    const T* gc = gy.plane(n, c);
                    T s = 0;
                    for (int i = 0; i < pout; ++i) s += gc[i];
                    gb.data[static_cast<std::size_t>(c)] += s;
                }
            }
        }
        if (!depthwise) {
            std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kdim) * pout);
            std::vector<T> dcol(need_x && !pointwise ? static_cast<std::size_t>(kdim) * pout : 0);
            Tensor<T>* gx = need_x ? &t.grad(xid) : nullptr;
            Tensor<T>* gw = need_w ? &t.grad(wid) : nullptr;
            for (int n = 0; n < batch; ++n) {
                const T* gyn = gy.plane(n, 0);
                if (need_w) {
                    const T* src = Xv.plane(n, 0);
                    if (!pointwise) {
                        im2col(src, ci, height, width, kh, kw, g, ho, wo, col.data());
                        src = col.data();
                    }
                    simd::gemm<T>(Trans::No, Trans::Yes, co, kdim, pout, T(1), gyn, pout, src, pout, T(1),
                                  gw->data.data(), kdim);
                }
                if (need_x) {
                    if (pointwise) {
                        simd::gemm<T>(Trans::Yes, Trans::No, kdim, pout, co, T(1), Wv.data.data(), kdim, gyn, pout,
                                      T(1), gx->plane(n, 0), pout);
                    } else {
                        simd::gemm<T>(Trans::Yes, Trans::No, kdim, pout, co, T(1), Wv.data.data(), kdim, gyn, pout,
                                      T(0), dcol.data(), pout);
                        col2im_add(dcol.data(), ci, height, width, kh, kw, g, ho, wo, gx->plane(n, 0));
                    }
                }
            }
        } else {
            Tensor<T>* gx = need_x ? &t.grad(xid) : nullptr;
            Tensor<T>* gw = need_w ? &t.grad(wid) : nullptr;
            for (int n = 0; n < batch; ++n) {
                for (int c = 0; c < ci; ++c) {
                    const T* xc = Xv.plane(n, c);
                    const T* gc = gy.plane(n, c);
                    T* gxc = need_x ? gx->plane(n, c) : nullptr;
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            const std::size_t widx = static_cast<std::size_t>(c) * kh * kw + ki * kw + kj;
                            const T wv = Wv.data[widx];
                            T acc = 0;
                            for (int oy = 0; oy < ho; ++oy) {
                                const int iy = oy * g.stride - g.pad_h + ki * g.dil_h;
                                if (iy < 0 || iy >= height) continue;
                                const T* xr = xc + static_cast<std::size_t>(iy) * width;
                                const T* gr = gc + static_cast<std::size_t>(oy) * wo;
                                T* gxr = need_x ? gxc + static_cast<std::size_t>(iy) * width : nullptr;
                                for (int ox = 0; ox < wo; ++ox) {
                                    const int ix = ox * g.stride - g.pad_w + kj * g.dil_w;
                                    if (ix < 0 || ix >= width) continue;
                                    acc += gr[ox] * xr[ix];
                                    if (gxr != nullptr) gxr[ix] += gr[ox] * wv;
                                }
                            }
                            if (need_w) gw->data[widx] += acc;
                        }
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------- pointwise

namespace {
thread_local KinkProbe* g_probe = nullptr;
}  // namespace

KinkProbe::KinkProbe() : prev_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = prev_; }
KinkProbe* KinkProbe::active() { return g_probe; }

template <class T>
Var<T> relu(const Var<T>& x) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = X.data[i] > T(0) ? X.data[i] : T(0);
    if (auto* probe = KinkProbe::active()) {
        for (T v : X.data) probe->observe(v > T(0) ? 1 : 0);
    }
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            const Tensor<T>& y = t.value(oid);
            Tensor<T>& gx = t.grad(xid);
            for (std::size_t i = 0; i < gy.size(); ++i) {
                if (y.data[i] > T(0)) gx.data[i] += gy.data[i];
            }
        });
    }
    return out;
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = static_cast<T>(logistic(static_cast<double>(X.data[i])));
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            const Tensor<T>& y = t.value(oid);
            Tensor<T>& gx = t.grad(xid);
            for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += gy.data[i] * y.data[i] * (T(1) - y.data[i]);
        });
    }
    return out;
}

namespace {

enum class BinOp { Add, Sub, Mul };

template <class T>
Var<T> binary(const char* name, BinOp op, const Var<T>& a, const Var<T>& b) {
    Tape<T>& tp = a.tape();
    const Tensor<T>& A = a.value();
    const Tensor<T>& B = b.value();
    const Shape os = broadcast_shape(name, A.shape, B.shape);
    const auto sa = bcast_strides(A.shape, os);
    const auto sb = bcast_strides(B.shape, os);
    Tensor<T> Y(os);
    const bool same = A.shape == os && B.shape == os;
    if (same) {
        for (std::size_t i = 0; i < Y.size(); ++i) {
            const T u = A.data[i], v = B.data[i];
            Y.data[i] = op == BinOp::Add ? u + v : op == BinOp::Sub ? u - v : u * v;
        }
    } else {
        for_each_bcast(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) {
            const T u = A.data[ia], v = B.data[ib];
            Y.data[io] = op == BinOp::Add ? u + v : op == BinOp::Sub ? u - v : u * v;
        });
    }
    Var<T> out = tp.record(std::move(Y), {a, b});
    if (!out.needs_grad()) return out;
    const int aid = a.id(), bid = b.id(), oid = out.id();
    tp.set_backward(out, [=](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        const Tensor<T>& Av = t.value(aid);
        const Tensor<T>& Bv = t.value(bid);
        Tensor<T>* ga = t.needs_grad(aid) ? &t.grad(aid) : nullptr;
        Tensor<T>* gb = t.needs_grad(bid) ? &t.grad(bid) : nullptr;
        for_each_bcast(os, sa, sb, [&](std::size_t io, std::size_t ia, std::size_t ib) {
            const T g = gy.data[io];
            switch (op) {
                case BinOp::Add:
                    if (ga) ga->data[ia] += g;
                    if (gb) gb->data[ib] += g;
                    break;
                case BinOp::Sub:
                    if (ga) ga->data[ia] += g;
                    if (gb) gb->data[ib] -= g;
                    break;
                case BinOp::Mul:
                    if (ga) ga->data[ia] += g * Bv.data[ib];
                    if (gb) gb->data[ib] += g * Av.data[ia];
                    break;
            }
        });
    });
    return out;
}

}  // namespace

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary("add", BinOp::Add, a, b);
}
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary("sub", BinOp::Sub, a, b);
}
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary("mul", BinOp::Mul, a, b);
}

template <class T>
Var<T> affine(const Var<T>& x, T scale, T shift) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.size(); ++i) Y.data[i] = scale * X.data[i] + shift;
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            simd::axpy<T>(gy.size(), scale, gy.data.data(), t.grad(xid).data.data());
        });
    }
    return out;
}

// ---------------------------------------------------------------- layout

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: no inputs");
    Tape<T>& tp = xs.front().tape();
    Shape os = xs.front().shape();
    os[axis] = 0;
    for (const auto& v : xs) {
        const Shape& s = v.shape();
        for (int i = 0; i < 4; ++i) {
            if (i != axis && s[i] != os[i]) shape_fail("concat", os, s);
        }
        os[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(os[i]);
    for (int i = axis + 1; i < 4; ++i) inner *= static_cast<std::size_t>(os[i]);
    Tensor<T> Y(os);
    std::vector<int> ids, lens;
    std::size_t offset = 0;
    for (const auto& v : xs) {
        const Tensor<T>& X = v.value();
        const std::size_t block = static_cast<std::size_t>(X.shape[axis]) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(X.data.data() + o * block, block, Y.data.data() + o * os[axis] * inner + offset);
        }
        offset += block;
        ids.push_back(v.id());
        lens.push_back(X.shape[axis]);
    }
    Var<T> out = tp.record(std::move(Y), xs);
    if (!out.needs_grad()) return out;
    const int oid = out.id();
    const int total = os[axis];
    tp.set_backward(out, [=](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            const std::size_t block = static_cast<std::size_t>(lens[k]) * inner;
            if (t.needs_grad(ids[k])) {
                Tensor<T>& gx = t.grad(ids[k]);
                for (std::size_t o = 0; o < outer; ++o) {
                    const T* src = gy.data.data() + o * total * inner + off;
                    T* dst = gx.data.data() + o * block;
                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                }
            }
            off += block;
        }
    });
    return out;
}

template <class T>
Var<T> slice(const Var<T>& x, int axis, int start, int length) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    if (start < 0 || length <= 0 || start + length > X.shape[axis]) throw ShapeError("slice: range out of bounds");
    Shape os = X.shape;
    os[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(os[i]);
    for (int i = axis + 1; i < 4; ++i) inner *= static_cast<std::size_t>(os[i]);
    const std::size_t in_block = static_cast<std::size_t>(X.shape[axis]) * inner;
    const std::size_t out_block = static_cast<std::size_t>(length) * inner;
    const std::size_t off = static_cast<std::size_t>(start) * inner;
    Tensor<T> Y(os);
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(X.data.data() + o * in_block + off, out_block, Y.data.data() + o * out_block);
    }
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            Tensor<T>& gx = t.grad(xid);
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = gy.data.data() + o * out_block;
                T* dst = gx.data.data() + o * in_block + off;
                for (std::size_t i = 0; i < out_block; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    Tape<T>& tp = x.tape();
    if (numel(shape) != x.value().size()) shape_fail("reshape", x.shape(), shape);
    Tensor<T> Y;
    Y.shape = shape;
    Y.data = x.value().data;
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            Tensor<T>& gx = t.grad(xid);
            for (std::size_t i = 0; i < gy.size(); ++i) gx.data[i] += gy.data[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------- reductions

namespace {

template <class T>
Var<T> reduce(const Var<T>& x, unsigned axes, bool is_max) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    Shape os = X.shape;
    std::size_t count = 1;
    for (int i = 0; i < 4; ++i) {
        if (axes & (1u << i)) {
            count *= static_cast<std::size_t>(os[i]);
            os[i] = 1;
        }
    }
    const auto so = bcast_strides(os, X.shape);
    Tensor<T> Y(os, is_max ? -std::numeric_limits<T>::infinity() : T(0));
    std::vector<std::size_t> arg(is_max ? Y.size() : 0);
    for_each_bcast(X.shape, so, so, [&](std::size_t ix, std::size_t io, std::size_t) {
        const T v = X.data[ix];
        if (is_max) {
            if (v > Y.data[io]) {
                Y.data[io] = v;
                arg[io] = ix;
            }
        } else {
            Y.data[io] += v;
        }
    });
    if (auto* probe = is_max ? KinkProbe::active() : nullptr) {
        for (std::size_t a : arg) probe->observe(a);
    }
    if (!is_max) {
        const T inv = T(1) / static_cast<T>(count);
        for (auto& v : Y.data) v *= inv;
    }
    Var<T> out = tp.record(std::move(Y), {x});
    if (!out.needs_grad()) return out;
    const int xid = x.id(), oid = out.id();
    const Shape xs = X.shape;
    tp.set_backward(out, [=, arg = std::move(arg)](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        Tensor<T>& gx = t.grad(xid);
        if (is_max) {
            for (std::size_t io = 0; io < gy.size(); ++io) gx.data[arg[io]] += gy.data[io];
        } else {
            const T inv = T(1) / static_cast<T>(count);
            for_each_bcast(xs, so, so, [&](std::size_t ix, std::size_t io, std::size_t) { gx.data[ix] += gy.data[io] * inv; });
        }
    });
    return out;
}

}  // namespace

template <class T>
Var<T> mean_over(const Var<T>& x, unsigned axes) {
    return reduce(x, axes, false);
}
template <class T>
Var<T> max_over(const Var<T>& x, unsigned axes) {
    return reduce(x, axes, true);
}

template <class T>
Var<T> sum_all(const Var<T>& x) {
    Tape<T>& tp = x.tape();
    T s = 0;
    for (T v : x.value().data) s += v;
    Var<T> out = tp.record(Tensor<T>({1, 1, 1, 1}, s), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        tp.set_backward(out, [=](Tape<T>& t) {
            const T g = t.grad(oid).data[0];
            for (auto& v : t.grad(xid).data) v += g;
        });
    }
    return out;
}

template <class T>
Var<T> mean_all(const Var<T>& x) {
    return affine(sum_all(x), T(1) / static_cast<T>(x.value().size()), T(0));
}

// ---------------------------------------------------------------- normalization

template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    const int batch = X.n(), ch = X.c();
    const std::size_t hw = static_cast<std::size_t>(X.h()) * X.w();
    if (gamma.value().shape != Shape{1, ch, 1, 1} || beta.value().shape != Shape{1, ch, 1, 1}) {
        shape_fail("layer_norm_channels", X.shape, gamma.value().shape);
    }
    const T* gm = gamma.value().data.data();
    const T* bt = beta.value().data.data();
    Tensor<T> xhat(X.shape);
    std::vector<T> rstd(static_cast<std::size_t>(batch) * hw);
    Tensor<T> Y(X.shape);
    std::vector<T> mean(hw), var(hw);
    for (int n = 0; n < batch; ++n) {
        std::fill(mean.begin(), mean.end(), T(0));
        std::fill(var.begin(), var.end(), T(0));
        for (int c = 0; c < ch; ++c) {
            const T* xc = X.plane(n, c);
            for (std::size_t p = 0; p < hw; ++p) mean[p] += xc[p];
        }
        for (auto& m : mean) m /= static_cast<T>(ch);
        for (int c = 0; c < ch; ++c) {
            const T* xc = X.plane(n, c);
            for (std::size_t p = 0; p < hw; ++p) {
                const T d = xc[p] - mean[p];
                var[p] += d * d;
            }
        }
        T* rs = rstd.data() + static_cast<std::size_t>(n) * hw;
        for (std::size_t p = 0; p < hw; ++p) rs[p] = T(1) / std::sqrt(var[p] / static_cast<T>(ch) + eps);
        for (int c = 0; c < ch; ++c) {
            const T* xc = X.plane(n, c);
            T* hc = xhat.plane(n, c);
            T* yc = Y.plane(n, c);
            for (std::size_t p = 0; p < hw; ++p) {
                hc[p] = (xc[p] - mean[p]) * rs[p];
                yc[p] = gm[c] * hc[p] + bt[c];
            }
        }
    }
    Var<T> out = tp.record(std::move(Y), {x, gamma, beta});
    if (!out.needs_grad()) return out;
    const int xid = x.id(), gid = gamma.id(), bid = beta.id(), oid = out.id();
    tp.set_backward(out, [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        const T* gmv = t.value(gid).data.data();
        if (t.needs_grad(gid) || t.needs_grad(bid)) {
            Tensor<T>& gg = t.grad(gid);
            Tensor<T>& gb = t.grad(bid);
            for (int n = 0; n < batch; ++n) {
                for (int c = 0; c < ch; ++c) {
                    const T* g = gy.plane(n, c);
                    const T* h = xhat.plane(n, c);
                    T sg = 0, sb = 0;
                    for (std::size_t p = 0; p < hw; ++p) {
                        sg += g[p] * h[p];
                        sb += g[p];
                    }
                    gg.data[static_cast<std::size_t>(c)] += sg;
                    gb.data[static_cast<std::size_t>(c)] += sb;
                }
            }
        }
        if (!t.needs_grad(xid)) return;
        Tensor<T>& gx = t.grad(xid);
        std::vector<T> m1(hw), m2(hw);
        for (int n = 0; n < batch; ++n) {
            std::fill(m1.begin(), m1.end(), T(0));
            std::fill(m2.begin(), m2.end(), T(0));
            for (int c = 0; c < ch; ++c) {
                const T* g = gy.plane(n, c);
                const T* h = xhat.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) {
                    const T gh = g[p] * gmv[c];
                    m1[p] += gh;
                    m2[p] += gh * h[p];
                }
            }
            const T inv = T(1) / static_cast<T>(ch);
            const T* rs = rstd.data() + static_cast<std::size_t>(n) * hw;
            for (int c = 0; c < ch; ++c) {
                const T* g = gy.plane(n, c);
                const T* h = xhat.plane(n, c);
                T* gxc = gx.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) {
                    gxc[p] += rs[p] * (g[p] * gmv[c] - m1[p] * inv - h[p] * m2[p] * inv);
                }
            }
        }
    });
    return out;
}

template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Parameter<T>& running_mean,
                  Parameter<T>& running_var, bool training, T momentum, T eps) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    const int batch = X.n(), ch = X.c();
    const std::size_t hw = static_cast<std::size_t>(X.h()) * X.w();
    const std::size_t m = static_cast<std::size_t>(batch) * hw;
    const T* gm = gamma.value().data.data();
    const T* bt = beta.value().data.data();
    std::vector<T> mean(static_cast<std::size_t>(ch)), rstd(static_cast<std::size_t>(ch));
    for (int c = 0; c < ch; ++c) {
        T mu, var;
        if (training) {
            T s = 0, ss = 0;
            for (int n = 0; n < batch; ++n) {
                const T* xc = X.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) s += xc[p];
            }
            mu = s / static_cast<T>(m);
            for (int n = 0; n < batch; ++n) {
                const T* xc = X.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) ss += (xc[p] - mu) * (xc[p] - mu);
            }
            var = ss / static_cast<T>(m);
            T& rm = running_mean.value.data[static_cast<std::size_t>(c)];
            T& rv = running_var.value.data[static_cast<std::size_t>(c)];
            rm = (T(1) - momentum) * rm + momentum * mu;
            rv = (T(1) - momentum) * rv + momentum * (m > 1 ? ss / static_cast<T>(m - 1) : var);
        } else {
            mu = running_mean.value.data[static_cast<std::size_t>(c)];
            var = running_var.value.data[static_cast<std::size_t>(c)];
        }
        mean[static_cast<std::size_t>(c)] = mu;
        rstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
    }
    Tensor<T> Y(X.shape);
    for (int n = 0; n < batch; ++n) {
        for (int c = 0; c < ch; ++c) {
            const T* xc = X.plane(n, c);
            T* yc = Y.plane(n, c);
            const T mu = mean[static_cast<std::size_t>(c)], rs = rstd[static_cast<std::size_t>(c)];
            for (std::size_t p = 0; p < hw; ++p) yc[p] = gm[c] * (xc[p] - mu) * rs + bt[c];
        }
    }
    Var<T> out = tp.record(std::move(Y), {x, gamma, beta});
    if (!out.needs_grad()) return out;
    const int xid = x.id(), gid = gamma.id(), bid = beta.id(), oid = out.id();
    tp.set_backward(out, [=](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        const Tensor<T>& Xv = t.value(xid);
        const T* gmv = t.value(gid).data.data();
        for (int c = 0; c < ch; ++c) {
            const T mu = mean[static_cast<std::size_t>(c)], rs = rstd[static_cast<std::size_t>(c)];
            T sg = 0, sgh = 0;
            for (int n = 0; n < batch; ++n) {
                const T* g = gy.plane(n, c);
                const T* xc = Xv.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) {
                    sg += g[p];
                    sgh += g[p] * (xc[p] - mu) * rs;
                }
            }
            if (t.needs_grad(gid)) t.grad(gid).data[static_cast<std::size_t>(c)] += sgh;
            if (t.needs_grad(bid)) t.grad(bid).data[static_cast<std::size_t>(c)] += sg;
            if (!t.needs_grad(xid)) continue;
            Tensor<T>& gx = t.grad(xid);
            for (int n = 0; n < batch; ++n) {
                const T* g = gy.plane(n, c);
                const T* xc = Xv.plane(n, c);
                T* gxc = gx.plane(n, c);
                for (std::size_t p = 0; p < hw; ++p) {
                    if (training) {
                        const T h = (xc[p] - mu) * rs;
                        gxc[p] += gmv[c] * rs * (g[p] - sg / static_cast<T>(m) - h * sgh / static_cast<T>(m));
                    } else {
                        gxc[p] += gmv[c] * rs * g[p];
                    }
                }
            }
        }
    });
    return out;
}

template <class T>
Var<T> upsample_nearest2(const Var<T>& x) {
    Tape<T>& tp = x.tape();
    const Tensor<T>& X = x.value();
    const int h = X.h(), w = X.w();
    Tensor<T> Y({X.n(), X.c(), 2 * h, 2 * w});
    for (int n = 0; n < X.n(); ++n) {
        for (int c = 0; c < X.c(); ++c) {
            const T* xc = X.plane(n, c);
            T* yc = Y.plane(n, c);
            for (int y = 0; y < 2 * h; ++y) {
                const T* xr = xc + static_cast<std::size_t>(y / 2) * w;
                T* yr = yc + static_cast<std::size_t>(y) * 2 * w;
                for (int xx = 0; xx < 2 * w; ++xx) yr[xx] = xr[xx / 2];
            }
        }
    }
    Var<T> out = tp.record(std::move(Y), {x});
    if (out.needs_grad()) {
        const int xid = x.id(), oid = out.id();
        const int batch = X.n(), ch = X.c();
        tp.set_backward(out, [=](Tape<T>& t) {
            const Tensor<T>& gy = t.grad(oid);
            Tensor<T>& gx = t.grad(xid);
            for (int n = 0; n < batch; ++n) {
                for (int c = 0; c < ch; ++c) {
                    const T* gc = gy.plane(n, c);
                    T* xc = gx.plane(n, c);
                    for (int y = 0; y < 2 * h; ++y) {
                        const T* gr = gc + static_cast<std::size_t>(y) * 2 * w;
                        T* xr = xc + static_cast<std::size_t>(y / 2) * w;
                        for (int xx = 0; xx < 2 * w; ++xx) xr[xx / 2] += gr[xx];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------- attention

namespace {

// Computes the softmax row of query token i into `row` (length L).
template <class T>
void attention_row(const Tensor<T>& Q, const Tensor<T>& K, int n, int c0, int dh, std::size_t i, T scale, T* row,
                   std::size_t len) {
    std::fill(row, row + len, T(0));
    for (int c = c0; c < c0 + dh; ++c) simd::axpy<T>(len, scale * Q.plane(n, c)[i], K.plane(n, c), row);
    const T mx = simd::max_value<T>(row, len);
    const T s = simd::exp_shift_sum<T>(row, len, mx);
    const T inv = T(1) / s;
    for (std::size_t j = 0; j < len; ++j) row[j] *= inv;
}

}  // namespace

template <class T>
std::vector<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, int heads, int batch, int head) {
    const int dh = q.c() / heads;
    const std::size_t len = static_cast<std::size_t>(q.h()) * q.w();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<T> out(len * len);
    for (std::size_t i = 0; i < len; ++i) attention_row(q, k, batch, head * dh, dh, i, scale, out.data() + i * len, len);
    return out;
}

template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads) {
    Tape<T>& tp = q.tape();
    const Tensor<T>& Q = q.value();
    const Tensor<T>& K = k.value();
    const Tensor<T>& V = v.value();
    if (K.shape != Q.shape || V.shape != Q.shape) shape_fail("attention", Q.shape, K.shape);
    if (heads <= 0 || Q.c() % heads != 0) throw ShapeError("attention: channels not divisible by heads");
    const int batch = Q.n(), dm = Q.c(), dh = dm / heads;
    const std::size_t len = static_cast<std::size_t>(Q.h()) * Q.w();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    Tensor<T> O(Q.shape);
    std::vector<T> row(len);
    for (int n = 0; n < batch; ++n) {
        for (int hd = 0; hd < heads; ++hd) {
            const int c0 = hd * dh;
            for (std::size_t i = 0; i < len; ++i) {
                attention_row(Q, K, n, c0, dh, i, scale, row.data(), len);
                for (int c = c0; c < c0 + dh; ++c) O.plane(n, c)[i] = simd::dot<T>(row.data(), V.plane(n, c), len);
            }
        }
    }
    Var<T> out = tp.record(std::move(O), {q, k, v});
    if (!out.needs_grad()) return out;
    const int qid = q.id(), kid = k.id(), vid = v.id(), oid = out.id();
    tp.set_backward(out, [=](Tape<T>& t) {
        const Tensor<T>& gO = t.grad(oid);
        const Tensor<T>& Qv = t.value(qid);
        const Tensor<T>& Kv = t.value(kid);
        const Tensor<T>& Vv = t.value(vid);
        Tensor<T>* gq = t.needs_grad(qid) ? &t.grad(qid) : nullptr;
        Tensor<T>* gk = t.needs_grad(kid) ? &t.grad(kid) : nullptr;
        Tensor<T>* gv = t.needs_grad(vid) ? &t.grad(vid) : nullptr;
        std::vector<T> p(len), dp(len);
        for (int n = 0; n < batch; ++n) {
            for (int hd = 0; hd < heads; ++hd) {
                const int c0 = hd * dh;
                for (std::size_t i = 0; i < len; ++i) {
                    attention_row(Qv, Kv, n, c0, dh, i, scale, p.data(), len);
                    std::fill(dp.begin(), dp.end(), T(0));
                    for (int c = c0; c < c0 + dh; ++c) {
                        const T go = gO.plane(n, c)[i];
                        if (go == T(0)) continue;
                        simd::axpy<T>(len, go, Vv.plane(n, c), dp.data());
                        if (gv) simd::axpy<T>(len, go, p.data(), gv->plane(n, c));
                    }
                    const T rowdot = simd::dot<T>(p.data(), dp.data(), len);
                    for (std::size_t j = 0; j < len; ++j) dp[j] = p[j] * (dp[j] - rowdot);
                    for (int c = c0; c < c0 + dh; ++c) {
                        if (gq) gq->plane(n, c)[i] += scale * simd::dot<T>(dp.data(), Kv.plane(n, c), len);
                        if (gk) simd::axpy<T>(len, scale * Qv.plane(n, c)[i], dp.data(), gk->plane(n, c));
                    }
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------- sampling

namespace {

struct Bilinear {
    std::size_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
};

inline Bilinear bilinear_at(double u, double v, int h, int w) {
    u = std::clamp(u, 0.0, static_cast<double>(h - 1));
    v = std::clamp(v, 0.0, static_cast<double>(w - 1));
    int y0 = h > 1 ? std::min(static_cast<int>(std::floor(u)), h - 2) : 0;
    int x0 = w > 1 ? std::min(static_cast<int>(std::floor(v)), w - 2) : 0;
    const double fy = h > 1 ? u - y0 : 0.0;
    const double fx = w > 1 ? v - x0 : 0.0;
    const int y1 = h > 1 ? y0 + 1 : 0;
    const int x1 = w > 1 ? x0 + 1 : 0;
    return {static_cast<std::size_t>(y0) * w + x0,
            static_cast<std::size_t>(y0) * w + x1,
            static_cast<std::size_t>(y1) * w + x0,
            static_cast<std::size_t>(y1) * w + x1,
            (1 - fy) * (1 - fx),
            (1 - fy) * fx,
            fy * (1 - fx),
            fy * fx};
}

}  // namespace

template <class T>
Var<T> bilinear_sample(const Var<T>& field, const Tensor<T>& coords) {
    Tape<T>& tp = field.tape();
    const Tensor<T>& F = field.value();
    const int batch = F.n(), dim = F.c(), h = F.h(), w = F.w();
    if (coords.n() != batch || coords.c() != 2 || coords.h() != 1) shape_fail("bilinear_sample", F.shape, coords.shape);
    const int npts = coords.w();
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    std::vector<Bilinear> taps(static_cast<std::size_t>(batch) * npts);
    Tensor<T> Y({batch, dim, 1, npts});
    for (int n = 0; n < batch; ++n) {
        const T* us = coords.plane(n, 0);
        const T* vs = coords.plane(n, 1);
        for (int p = 0; p < npts; ++p) {
            taps[static_cast<std::size_t>(n) * npts + p] = bilinear_at(us[p], vs[p], h, w);
        }
        for (int d = 0; d < dim; ++d) {
            const T* fd = F.data.data() + (static_cast<std::size_t>(n) * dim + d) * hw;
            T* yd = Y.plane(n, d);
            for (int p = 0; p < npts; ++p) {
                const Bilinear& b = taps[static_cast<std::size_t>(n) * npts + p];
                yd[p] = static_cast<T>(b.w00 * fd[b.i00] + b.w01 * fd[b.i01] + b.w10 * fd[b.i10] + b.w11 * fd[b.i11]);
            }
        }
    }
    Var<T> out = tp.record(std::move(Y), {field});
    if (!out.needs_grad()) return out;
    const int fid = field.id(), oid = out.id();
    tp.set_backward(out, [=, taps = std::move(taps)](Tape<T>& t) {
        const Tensor<T>& gy = t.grad(oid);
        Tensor<T>& gf = t.grad(fid);
        for (int n = 0; n < batch; ++n) {
            for (int d = 0; d < dim; ++d) {
                T* fd = gf.data.data() + (static_cast<std::size_t>(n) * dim + d) * hw;
                const T* g = gy.plane(n, d);
                for (int p = 0; p < npts; ++p) {
                    const Bilinear& b = taps[static_cast<std::size_t>(n) * npts + p];
                    fd[b.i00] += static_cast<T>(b.w00 * g[p]);
                    fd[b.i01] += static_cast<T>(b.w01 * g[p]);
                    fd[b.i10] += static_cast<T>(b.w10 * g[p]);
                    fd[b.i11] += static_cast<T>(b.w11 * g[p]);
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------- losses

namespace {

// Records a scalar loss whose gradient w.r.t. `raw` was computed alongside the value.
template <class T>
Var<T> scalar_loss(const Var<T>& raw, double value, Tensor<T> dvalue) {
    Tape<T>& tp = raw.tape();
    Var<T> out = tp.record(Tensor<T>({1, 1, 1, 1}, static_cast<T>(value)), {raw});
    if (out.needs_grad()) {
        const int rid = raw.id(), oid = out.id();
        tp.set_backward(out, [=, dvalue = std::move(dvalue)](Tape<T>& t) {
            const T g = t.grad(oid).data[0];
            simd::axpy<T>(dvalue.size(), g, dvalue.data.data(), t.grad(rid).data.data());
        });
    }
    return out;
}

template <class T>
void check_point_targets(const char* op, const Tensor<T>& raw, int channels, const Tensor<T>& target,
                         const Tensor<T>& weight) {
    if (raw.c() != channels || raw.h() != 1) shape_fail(op, raw.shape, Shape{raw.n(), channels, 1, raw.w()});
    const Shape ts{raw.n(), 1, 1, raw.w()};
    if (target.shape != ts) shape_fail(op, target.shape, ts);
    if (weight.shape != ts) shape_fail(op, weight.shape, ts);
}

template <class T>
double weight_total(const Tensor<T>& weight) {
    double s = 0;
    for (T v : weight.data) s += v;
    return s;
}

}  // namespace

template <class T>
Var<T> mixture_nll(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight, T sigma_min) {
    const Tensor<T>& R = raw.value();
    check_point_targets("mixture_nll", R, 5, target, weight);
    const double wsum = weight_total(weight);
    Tensor<T> dr(R.shape);
    double total = 0;
    if (wsum > 0) {
        for (int n = 0; n < R.n(); ++n) {
            for (int p = 0; p < R.w(); ++p) {
                const double wt = weight.at(n, 0, 0, p);
                if (wt == 0) continue;
                const double d = target.at(n, 0, 0, p);
                const double r0 = R.at(n, 0, 0, p), mu1 = R.at(n, 1, 0, p), r2 = R.at(n, 2, 0, p);
                const double mu2 = R.at(n, 3, 0, p), r4 = R.at(n, 4, 0, p);
                const double s1 = softplus(r2) + sigma_min, s2 = softplus(r4) + sigma_min;
                const double w1 = logistic(r0);
                const double e1 = (mu1 - d) / s1, e2 = (mu2 - d) / s2;
                const double l1 = -softplus(-r0) - std::log(s1) - 0.5 * e1 * e1;
                const double l2 = -softplus(r0) - std::log(s2) - 0.5 * e2 * e2;
                const double mx = std::max(l1, l2);
                const double lse = mx + std::log(std::exp(l1 - mx) + std::exp(l2 - mx));
                const double g1 = std::exp(l1 - lse), g2 = std::exp(l2 - lse);
                const double scale = wt / wsum;
                total += scale * -lse;
                dr.at(n, 0, 0, p) = static_cast<T>(scale * (w1 - g1));
                dr.at(n, 1, 0, p) = static_cast<T>(scale * g1 * e1 / s1);
                dr.at(n, 2, 0, p) = static_cast<T>(scale * g1 * (1.0 - e1 * e1) / s1 * logistic(r2));
                dr.at(n, 3, 0, p) = static_cast<T>(scale * g2 * e2 / s2);
                dr.at(n, 4, 0, p) = static_cast<T>(scale * g2 * (1.0 - e2 * e2) / s2 * logistic(r4));
            }
        }
    }
    return scalar_loss(raw, total, std::move(dr));
}

template <class T>
Var<T> unimodal_nll(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight, T sigma_min) {
    const Tensor<T>& R = raw.value();
    check_point_targets("unimodal_nll", R, 2, target, weight);
    const double wsum = weight_total(weight);
    Tensor<T> dr(R.shape);
    double total = 0;
    if (wsum > 0) {
        for (int n = 0; n < R.n(); ++n) {
            for (int p = 0; p < R.w(); ++p) {
                const double wt = weight.at(n, 0, 0, p);
                if (wt == 0) continue;
                const double d = target.at(n, 0, 0, p);
                const double mu = R.at(n, 0, 0, p), r1 = R.at(n, 1, 0, p);
                const double s = softplus(r1) + sigma_min;
                const double e = (mu - d) / s;
                const double scale = wt / wsum;
                total += scale * (std::log(s) + 0.5 * e * e);
                dr.at(n, 0, 0, p) = static_cast<T>(scale * e / s);
                dr.at(n, 1, 0, p) = static_cast<T>(scale * (1.0 - e * e) / s * logistic(r1));
            }
        }
    }
    return scalar_loss(raw, total, std::move(dr));
}

template <class T>
Var<T> l1_loss(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight) {
    const Tensor<T>& R = raw.value();
    check_point_targets("l1_loss", R, 1, target, weight);
    const double wsum = weight_total(weight);
    Tensor<T> dr(R.shape);
    double total = 0;
    if (wsum > 0) {
        for (std::size_t i = 0; i < R.size(); ++i) {
            const double wt = weight.data[i];
            if (wt == 0) continue;
            const double e = static_cast<double>(R.data[i]) - target.data[i];
            total += wt / wsum * std::abs(e);
            dr.data[i] = static_cast<T>(wt / wsum * (e > 0 ? 1.0 : e < 0 ? -1.0 : 0.0));
        }
    }
    return scalar_loss(raw, total, std::move(dr));
}

template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target, T eps) {
    const Tensor<T>& Z = logits.value();
    if (target.shape != Z.shape) shape_fail("bce_with_logits", Z.shape, target.shape);
    const double inv = 1.0 / static_cast<double>(Z.size());
    Tensor<T> dz(Z.shape);
    double total = 0;
    for (std::size_t i = 0; i < Z.size(); ++i) {
        const double p = logistic(Z.data[i]);
        const double pc = std::clamp(p, static_cast<double>(eps), 1.0 - static_cast<double>(eps));
        const double tv = target.data[i];
        total -= inv * (tv * std::log(pc) + (1.0 - tv) * std::log(1.0 - pc));
        if (p == pc) dz.data[i] = static_cast<T>(inv * (p - tv));
    }
    return scalar_loss(logits, total, std::move(dz));
}

#define DUALSHOT_OPS_INSTANTIATE(T)                                                                                \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeom&);                        \
    template Var<T> relu<T>(const Var<T>&);                                                                         \
    template Var<T> sigmoid<T>(const Var<T>&);                                                                      \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                           \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                           \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                           \
    template Var<T> affine<T>(const Var<T>&, T, T);                                                                 \
    template Var<T> concat<T>(const std::vector<Var<T>>&, int);                                                     \
    template Var<T> slice<T>(const Var<T>&, int, int, int);                                                         \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                               \
    template Var<T> mean_over<T>(const Var<T>&, unsigned);                                                          \
    template Var<T> max_over<T>(const Var<T>&, unsigned);                                                           \
    template Var<T> sum_all<T>(const Var<T>&);                                                                      \
    template Var<T> mean_all<T>(const Var<T>&);                                                                     \
    template Var<T> layer_norm_channels<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                         \
    template Var<T> batch_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, Parameter<T>&, Parameter<T>&, bool,  \
                                  T, T);                                                                            \
    template Var<T> upsample_nearest2<T>(const Var<T>&);                                                            \
    template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, int);                                 \
    template std::vector<T> attention_weights<T>(const Tensor<T>&, const Tensor<T>&, int, int, int);                \
    template Var<T> bilinear_sample<T>(const Var<T>&, const Tensor<T>&);                                            \
    template Var<T> mixture_nll<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&, T);                           \
    template Var<T> unimodal_nll<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&, T);                          \
    template Var<T> l1_loss<T>(const Var<T>&, const Tensor<T>&, const Tensor<T>&);                                  \
    template Var<T> bce_with_logits<T>(const Var<T>&, const Tensor<T>&, T);

DUALSHOT_OPS_INSTANTIATE(float)
DUALSHOT_OPS_INSTANTIATE(double)

}  // namespace dualshot::ops
