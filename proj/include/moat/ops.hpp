#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moat/autograd.hpp"
#include "moat/tensor.hpp"

namespace moat {
namespace detail {

// C[m,n] += op(A) * op(B); A is [k,m] when ta else [m,k], B is [n,k] when tb
// else [k,n]. Parallel over rows of C, each row owned by one worker.
template <typename T>
void mm_acc(const T* A, const T* B, T* C, int64_t m, int64_t n, int64_t k, bool ta, bool tb) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* crow = C + i * n;
            if (!ta && !tb) {
                const T* arow = A + i * k;
                for (int64_t p = 0; p < k; ++p) {
                    T a = arow[p];
                    if (a == T(0)) continue;
                    const T* brow = B + p * n;
                    for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
                }
            } else if (!ta && tb) {
                const T* arow = A + i * k;
                for (int64_t j = 0; j < n; ++j) {
                    const T* brow = B + j * k;
                    T acc = 0;
                    for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                    crow[j] += acc;
                }
            } else if (ta && !tb) {
                for (int64_t p = 0; p < k; ++p) {
                    T a = A[p * m + i];
                    if (a == T(0)) continue;
                    const T* brow = B + p * n;
                    for (int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
                }
            } else {
                for (int64_t j = 0; j < n; ++j) {
                    T acc = 0;
                    for (int64_t p = 0; p < k; ++p) acc += A[p * m + i] * B[j * k + p];
                    crow[j] += acc;
                }
            }
        }
    });
}

struct ConvGeom {
    int64_t in_h, in_w, out_h, out_w, kh, kw, stride, pad_h, pad_w;
};

// SAME padding: output = ceil(input/stride); any odd padding surplus goes to
// the bottom/right edge.
inline ConvGeom conv_geom(int64_t in_h, int64_t in_w, int64_t kh, int64_t kw, int64_t stride) {
    ConvGeom g;
    g.in_h = in_h; g.in_w = in_w; g.kh = kh; g.kw = kw; g.stride = stride;
    g.out_h = (in_h + stride - 1) / stride;
    g.out_w = (in_w + stride - 1) / stride;
    int64_t pad_total_h = std::max<int64_t>(0, (g.out_h - 1) * stride + kh - in_h);
    int64_t pad_total_w = std::max<int64_t>(0, (g.out_w - 1) * stride + kw - in_w);
    g.pad_h = pad_total_h / 2;
    g.pad_w = pad_total_w / 2;
    return g;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul and batched matmul

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        throw DimError("matmul shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<T> out({m, n});
    detail::mm_acc(av.data(), bv.data(), out.data(), m, n, k, false, false);
    return make_node<T>("matmul", std::move(out), {a, b}, [a, b, m, k, n](Node<T>& self) {
        if (a.node()->requires_grad) {
            a.node()->ensure_grad();
            detail::mm_acc(self.grad.data(), b.val().data(), a.node()->grad.data(), m, k, n, false, true);
        }
        if (b.node()->requires_grad) {
            b.node()->ensure_grad();
            detail::mm_acc(a.val().data(), self.grad.data(), b.node()->grad.data(), k, n, m, true, false);
        }
    });
}

// out[b] = a[b] * rhs[b]; transpose_rhs treats rhs as [B,n,k] (used for QK^T).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_rhs = false) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0))
        throw DimError("bmm shape mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    int64_t B = av.dim(0), m = av.dim(1), k = av.dim(2);
    int64_t n = transpose_rhs ? bv.dim(1) : bv.dim(2);
    int64_t bk = transpose_rhs ? bv.dim(2) : bv.dim(1);
    if (bk != k)
        throw DimError("bmm inner extent mismatch: " + shape_str(av.shape()) + " x " + shape_str(bv.shape()));
    Tensor<T> out({B, m, n});
    for (int64_t i = 0; i < B; ++i)
        detail::mm_acc(av.data() + i * m * k, bv.data() + i * (transpose_rhs ? n * k : k * n),
                       out.data() + i * m * n, m, n, k, false, transpose_rhs);
    const char* tag = transpose_rhs ? "bmm_nt" : "bmm";
    return make_node<T>(tag, std::move(out), {a, b}, [a, b, B, m, k, n, transpose_rhs](Node<T>& self) {
        for (int64_t i = 0; i < B; ++i) {
            const T* dy = self.grad.data() + i * m * n;
            if (a.node()->requires_grad) {
                a.node()->ensure_grad();
                // dA = dY * B (nt: B as-is [n,k]; nn: B^T)
                if (transpose_rhs)
                    detail::mm_acc(dy, b.val().data() + i * n * k, a.node()->grad.data() + i * m * k, m, k, n, false, false);
                else
                    detail::mm_acc(dy, b.val().data() + i * k * n, a.node()->grad.data() + i * m * k, m, k, n, false, true);
            }
            if (b.node()->requires_grad) {
                b.node()->ensure_grad();
                if (transpose_rhs)  // dB[n,k] = dY^T * A
                    detail::mm_acc(dy, a.val().data() + i * m * k, b.node()->grad.data() + i * n * k, n, k, m, true, false);
                else                // dB[k,n] = A^T * dY
                    detail::mm_acc(a.val().data() + i * m * k, dy, b.node()->grad.data() + i * k * n, k, n, m, true, false);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// convolutions (NHWC, SAME padding, stride 1 or 2)

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, int stride) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 4)
        throw DimError("conv2d expects NHWC input and [kh,kw,cin,cout] kernel, got " +
                       shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
    if (stride != 1 && stride != 2)
        throw DimError("conv2d stride must be 1 or 2, got " + std::to_string(stride));
    if (xv.dim(3) != wv.dim(2))
        throw DimError("conv2d channel mismatch: input " + shape_str(xv.shape()) +
                       " vs kernel " + shape_str(wv.shape()));

    int64_t N = xv.dim(0), CI = xv.dim(3), CO = wv.dim(3);
    auto g = detail::conv_geom(xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(1), stride);

    if (g.kh == 1 && g.kw == 1 && stride == 1) {
        // 1x1 stride-1 convolution is a per-position matmul
        Var<T> x2 = reshape(x, {N * g.in_h * g.in_w, CI});
        Var<T> w2 = reshape(w, {CI, CO});
        return reshape(matmul(std::move(x2), std::move(w2)), {N, g.in_h, g.in_w, CO});
    }

    Tensor<T> out({N, g.out_h, g.out_w, CO});
    const T* xp = xv.data();
    const T* wp = wv.data();
    T* yp = out.data();
    parallel_for(N * g.out_h, [&](int64_t lo, int64_t hi) {
        for (int64_t noh = lo; noh < hi; ++noh) {
            int64_t n = noh / g.out_h, oh = noh % g.out_h;
            for (int64_t ow = 0; ow < g.out_w; ++ow) {
                T* acc = yp + ((n * g.out_h + oh) * g.out_w + ow) * CO;
                for (int64_t kh = 0; kh < g.kh; ++kh) {
                    int64_t ih = oh * stride - g.pad_h + kh;
                    if (ih < 0 || ih >= g.in_h) continue;
                    for (int64_t kw = 0; kw < g.kw; ++kw) {
                        int64_t iw = ow * stride - g.pad_w + kw;
                        if (iw < 0 || iw >= g.in_w) continue;
                        const T* xrow = xp + ((n * g.in_h + ih) * g.in_w + iw) * CI;
                        const T* wtap = wp + (kh * g.kw + kw) * CI * CO;
                        for (int64_t ci = 0; ci < CI; ++ci) {
                            T xvv = xrow[ci];
                            if (xvv == T(0)) continue;
                            const T* wrow = wtap + ci * CO;
                            for (int64_t co = 0; co < CO; ++co) acc[co] += xvv * wrow[co];
                        }
                    }
                }
            }
        }
    });

    return make_node<T>("conv2d", std::move(out), {x, w}, [x, w, g, N, CI, CO, stride](Node<T>& self) {
        const T* dy = self.grad.data();
        if (x.node()->requires_grad) {
            x.node()->ensure_grad();
            T* dx = x.node()->grad.data();
            const T* wp = w.val().data();
            parallel_for(N * g.in_h, [&](int64_t lo, int64_t hi) {
                for (int64_t nih = lo; nih < hi; ++nih) {
                    int64_t n = nih / g.in_h, ih = nih % g.in_h;
                    for (int64_t iw = 0; iw < g.in_w; ++iw) {
                        T* dxrow = dx + ((n * g.in_h + ih) * g.in_w + iw) * CI;
                        for (int64_t kh = 0; kh < g.kh; ++kh) {
                            int64_t t = ih + g.pad_h - kh;
                            if (t < 0 || t % stride) continue;
                            int64_t oh = t / stride;
                            if (oh >= g.out_h) continue;
                            for (int64_t kw = 0; kw < g.kw; ++kw) {
                                int64_t u = iw + g.pad_w - kw;
                                if (u < 0 || u % stride) continue;
                                int64_t ow = u / stride;
                                if (ow >= g.out_w) continue;
                                const T* dyrow = dy + ((n * g.out_h + oh) * g.out_w + ow) * CO;
                                const T* wtap = wp + (kh * g.kw + kw) * CI * CO;
                                for (int64_t ci = 0; ci < CI; ++ci) {
                                    const T* wrow = wtap + ci * CO;
                                    T acc = 0;
                                    for (int64_t co = 0; co < CO; ++co) acc += dyrow[co] * wrow[co];
                                    dxrow[ci] += acc;
                                }
                            }
                        }
                    }
                }
            });
        }
        if (w.node()->requires_grad) {
            w.node()->ensure_grad();
            T* dw = w.node()->grad.data();
            const T* xp = x.val().data();
            parallel_for(g.kh * g.kw, [&](int64_t lo, int64_t hi) {
                for (int64_t tap = lo; tap < hi; ++tap) {
                    int64_t kh = tap / g.kw, kw = tap % g.kw;
                    T* dwtap = dw + tap * CI * CO;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oh = 0; oh < g.out_h; ++oh) {
                            int64_t ih = oh * stride - g.pad_h + kh;
                            if (ih < 0 || ih >= g.in_h) continue;
                            for (int64_t ow = 0; ow < g.out_w; ++ow) {
                                int64_t iw = ow * stride - g.pad_w + kw;
                                if (iw < 0 || iw >= g.in_w) continue;
                                const T* xrow = xp + ((n * g.in_h + ih) * g.in_w + iw) * CI;
                                const T* dyrow = dy + ((n * g.out_h + oh) * g.out_w + ow) * CO;
                                for (int64_t ci = 0; ci < CI; ++ci) {
                                    T xvv = xrow[ci];
                                    if (xvv == T(0)) continue;
                                    T* dwrow = dwtap + ci * CO;
                                    for (int64_t co = 0; co < CO; ++co) dwrow[co] += xvv * dyrow[co];
                                }
                            }
                        }
                }
            });
        }
    });
}

template <typename T>
Var<T> depthwise_conv2d(Var<T> x, Var<T> w, int stride) {
    const auto& xv = x.val();
    const auto& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 3)
        throw DimError("depthwise_conv2d expects NHWC input and [kh,kw,c] kernel, got " +
                       shape_str(xv.shape()) + " and " + shape_str(wv.shape()));
    if (stride != 1 && stride != 2)
        throw DimError("depthwise_conv2d stride must be 1 or 2, got " + std::to_string(stride));
    if (xv.dim(3) != wv.dim(2))
        throw DimError("depthwise_conv2d channel mismatch: input " + shape_str(xv.shape()) +
                       " vs kernel " + shape_str(wv.shape()));

    int64_t N = xv.dim(0), C = xv.dim(3);
    auto g = detail::conv_geom(xv.dim(1), xv.dim(2), wv.dim(0), wv.dim(1), stride);
    Tensor<T> out({N, g.out_h, g.out_w, C});
    const T* xp = xv.data();
    const T* wp = wv.data();
    T* yp = out.data();
    parallel_for(N * g.out_h, [&](int64_t lo, int64_t hi) {
        for (int64_t noh = lo; noh < hi; ++noh) {
            int64_t n = noh / g.out_h, oh = noh % g.out_h;
            for (int64_t ow = 0; ow < g.out_w; ++ow) {
                T* acc = yp + ((n * g.out_h + oh) * g.out_w + ow) * C;
                for (int64_t kh = 0; kh < g.kh; ++kh) {
                    int64_t ih = oh * stride - g.pad_h + kh;
                    if (ih < 0 || ih >= g.in_h) continue;
                    for (int64_t kw = 0; kw < g.kw; ++kw) {
                        int64_t iw = ow * stride - g.pad_w + kw;
                        if (iw < 0 || iw >= g.in_w) continue;
                        const T* xrow = xp + ((n * g.in_h + ih) * g.in_w + iw) * C;
                        const T* wrow = wp + (kh * g.kw + kw) * C;
                        for (int64_t c = 0; c < C; ++c) acc[c] += xrow[c] * wrow[c];
                    }
                }
            }
        }
    });

    return make_node<T>("depthwise_conv2d", std::move(out), {x, w}, [x, w, g, N, C, stride](Node<T>& self) {
        const T* dy = self.grad.data();
        if (x.node()->requires_grad) {
            x.node()->ensure_grad();
            T* dx = x.node()->grad.data();
            const T* wp = w.val().data();
            parallel_for(N * g.in_h, [&](int64_t lo, int64_t hi) {
                for (int64_t nih = lo; nih < hi; ++nih) {
                    int64_t n = nih / g.in_h, ih = nih % g.in_h;
                    for (int64_t iw = 0; iw < g.in_w; ++iw) {
                        T* dxrow = dx + ((n * g.in_h + ih) * g.in_w + iw) * C;
                        for (int64_t kh = 0; kh < g.kh; ++kh) {
                            int64_t t = ih + g.pad_h - kh;
                            if (t < 0 || t % stride) continue;
                            int64_t oh = t / stride;
                            if (oh >= g.out_h) continue;
                            for (int64_t kw = 0; kw < g.kw; ++kw) {
                                int64_t u = iw + g.pad_w - kw;
                                if (u < 0 || u % stride) continue;
                                int64_t ow = u / stride;
                                if (ow >= g.out_w) continue;
                                const T* dyrow = dy + ((n * g.out_h + oh) * g.out_w + ow) * C;
                                const T* wrow = wp + (kh * g.kw + kw) * C;
                                for (int64_t c = 0; c < C; ++c) dxrow[c] += dyrow[c] * wrow[c];
                            }
                        }
                    }
                }
            });
        }
        if (w.node()->requires_grad) {
            w.node()->ensure_grad();
            T* dw = w.node()->grad.data();
            const T* xp = x.val().data();
            parallel_for(g.kh * g.kw, [&](int64_t lo, int64_t hi) {
                for (int64_t tap = lo; tap < hi; ++tap) {
                    int64_t kh = tap / g.kw, kw = tap % g.kw;
                    T* dwrow = dw + tap * C;
                    for (int64_t n = 0; n < N; ++n)
                        for (int64_t oh = 0; oh < g.out_h; ++oh) {
                            int64_t ih = oh * stride - g.pad_h + kh;
                            if (ih < 0 || ih >= g.in_h) continue;
                            for (int64_t ow = 0; ow < g.out_w; ++ow) {
                                int64_t iw = ow * stride - g.pad_w + kw;
                                if (iw < 0 || iw >= g.in_w) continue;
                                const T* xrow = xp + ((n * g.in_h + ih) * g.in_w + iw) * C;
                                const T* dyrow = dy + ((n * g.out_h + oh) * g.out_w + ow) * C;
                                for (int64_t c = 0; c < C; ++c) dwrow[c] += xrow[c] * dyrow[c];
                            }
                        }
                }
            });
        }
    });
}

// 2x2 average pool, stride 2, SAME padding; divisor counts in-bounds taps.
template <typename T>
Var<T> avg_pool2x2(Var<T> x) {
    const auto& xv = x.val();
    if (xv.rank() != 4) throw DimError("avg_pool2x2 expects NHWC, got " + shape_str(xv.shape()));
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    int64_t OH = (H + 1) / 2, OW = (W + 1) / 2;
    Tensor<T> out({N, OH, OW, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow) {
                int64_t h1 = std::min(H, oh * 2 + 2), w1 = std::min(W, ow * 2 + 2);
                int64_t cnt = (h1 - oh * 2) * (w1 - ow * 2);
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t ih = oh * 2; ih < h1; ++ih)
                        for (int64_t iw = ow * 2; iw < w1; ++iw) acc += xv.at(n, ih, iw, c);
                    out.at(n, oh, ow, c) = acc / static_cast<T>(cnt);
                }
            }
    return make_node<T>("avg_pool2x2", std::move(out), {x}, [x, N, H, W, C, OH, OW](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        auto& dx = x.node()->grad;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t ih = 0; ih < H; ++ih)
                for (int64_t iw = 0; iw < W; ++iw) {
                    int64_t oh = ih / 2, ow = iw / 2;
                    int64_t cnt = (std::min(H, oh * 2 + 2) - oh * 2) * (std::min(W, ow * 2 + 2) - ow * 2);
                    for (int64_t c = 0; c < C; ++c)
                        dx.at(n, ih, iw, c) += self.grad.at(n, oh, ow, c) / static_cast<T>(cnt);
                }
    });
}

// ---------------------------------------------------------------------------
// elementwise with per-channel broadcast ([C] against a last axis of size C)

enum class EwOp { Add, Sub, Mul };

template <typename T>
Var<T> elementwise(EwOp op, Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    bool same = av.shape() == bv.shape();
    bool bcast = bv.rank() == 1 && av.rank() >= 1 && av.dim(av.rank() - 1) == bv.dim(0) && !same;
    if (!same && !bcast)
        throw DimError("elementwise shapes not compatible: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    int64_t n = av.numel();
    int64_t c = bcast ? bv.dim(0) : 0;
    Tensor<T> out(av.shape());
    const T* pa = av.data();
    const T* pb = bv.data();
    T* po = out.data();
    for (int64_t i = 0; i < n; ++i) {
        T rb = bcast ? pb[i % c] : pb[i];
        switch (op) {
            case EwOp::Add: po[i] = pa[i] + rb; break;
            case EwOp::Sub: po[i] = pa[i] - rb; break;
            case EwOp::Mul: po[i] = pa[i] * rb; break;
        }
    }
    const char* tag = op == EwOp::Add ? "add" : (op == EwOp::Sub ? "sub" : "mul");
    return make_node<T>(tag, std::move(out), {a, b}, [op, a, b, n, c, bcast](Node<T>& self) {
        const T* dy = self.grad.data();
        if (a.node()->requires_grad) {
            a.node()->ensure_grad();
            T* da = a.node()->grad.data();
            const T* pb = b.val().data();
            for (int64_t i = 0; i < n; ++i) {
                T g = dy[i];
                if (op == EwOp::Mul) g *= bcast ? pb[i % c] : pb[i];
                da[i] += g;
            }
        }
        if (b.node()->requires_grad) {
            b.node()->ensure_grad();
            T* db = b.node()->grad.data();
            const T* pa = a.val().data();
            for (int64_t i = 0; i < n; ++i) {
                T g = dy[i];
                if (op == EwOp::Sub) g = -g;
                else if (op == EwOp::Mul) g *= pa[i];
                db[bcast ? i % c : i] += g;
            }
        }
    });
}

template <typename T> Var<T> add(Var<T> a, Var<T> b) { return elementwise(EwOp::Add, std::move(a), std::move(b)); }
template <typename T> Var<T> sub(Var<T> a, Var<T> b) { return elementwise(EwOp::Sub, std::move(a), std::move(b)); }
template <typename T> Var<T> mul(Var<T> a, Var<T> b) { return elementwise(EwOp::Mul, std::move(a), std::move(b)); }

template <typename T>
Var<T> scalar_mul(Var<T> x, T s) {
    Tensor<T> out(x.val().shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x.val()[i] * s;
    return make_node<T>("scalar_mul", std::move(out), {x}, [x, s](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) x.node()->grad[i] += self.grad[i] * s;
    });
}

// Per-sample channel gate: y[n,h,w,c] = x[n,h,w,c] * s[n,c].
template <typename T>
Var<T> channel_scale(Var<T> x, Var<T> s) {
    const auto& xv = x.val();
    const auto& sv = s.val();
    if (xv.rank() != 4 || sv.rank() != 2 || xv.dim(0) != sv.dim(0) || xv.dim(3) != sv.dim(1))
        throw DimError("channel_scale shape mismatch: " + shape_str(xv.shape()) + " vs " + shape_str(sv.shape()));
    int64_t N = xv.dim(0), HW = xv.dim(1) * xv.dim(2), C = xv.dim(3);
    Tensor<T> out(xv.shape());
    for (int64_t n = 0; n < N; ++n)
        for (int64_t p = 0; p < HW; ++p)
            for (int64_t c = 0; c < C; ++c)
                out[(n * HW + p) * C + c] = xv[(n * HW + p) * C + c] * sv[n * C + c];
    return make_node<T>("channel_scale", std::move(out), {x, s}, [x, s, N, HW, C](Node<T>& self) {
        const T* dy = self.grad.data();
        if (x.node()->requires_grad) {
            x.node()->ensure_grad();
            T* dx = x.node()->grad.data();
            const T* sv = s.val().data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t p = 0; p < HW; ++p)
                    for (int64_t c = 0; c < C; ++c)
                        dx[(n * HW + p) * C + c] += dy[(n * HW + p) * C + c] * sv[n * C + c];
        }
        if (s.node()->requires_grad) {
            s.node()->ensure_grad();
            T* ds = s.node()->grad.data();
            const T* xv = x.val().data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t c = 0; c < C; ++c) {
                    T acc = 0;
                    for (int64_t p = 0; p < HW; ++p) acc += dy[(n * HW + p) * C + c] * xv[(n * HW + p) * C + c];
                    ds[n * C + c] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// reductions

enum class Reduce { Sum, Mean, Max };

template <typename T>
Var<T> reduce(Reduce op, Var<T> x, std::vector<int> axes) {
    const auto& xv = x.val();
    int rank = xv.rank();
    std::sort(axes.begin(), axes.end());
    axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
    for (int ax : axes)
        if (ax < 0 || ax >= rank)
            throw DimError("reduce: invalid axis " + std::to_string(ax) + " for shape " + shape_str(xv.shape()));

    std::vector<bool> reduced(static_cast<size_t>(rank), false);
    for (int ax : axes) reduced[static_cast<size_t>(ax)] = true;
    Shape out_shape;
    int64_t fiber = 1;
    for (int i = 0; i < rank; ++i) {
        if (reduced[static_cast<size_t>(i)]) fiber *= xv.dim(i);
        else out_shape.push_back(xv.dim(i));
    }
    if (out_shape.empty()) out_shape = {1};

    // strides of x, split into kept and reduced iteration
    std::vector<int64_t> stride(static_cast<size_t>(rank), 1);
    for (int i = rank - 2; i >= 0; --i) stride[static_cast<size_t>(i)] = stride[static_cast<size_t>(i) + 1] * xv.dim(i + 1);
    std::vector<int64_t> kept_dims, kept_strides, red_dims, red_strides;
    for (int i = 0; i < rank; ++i) {
        if (reduced[static_cast<size_t>(i)]) { red_dims.push_back(xv.dim(i)); red_strides.push_back(stride[static_cast<size_t>(i)]); }
        else { kept_dims.push_back(xv.dim(i)); kept_strides.push_back(stride[static_cast<size_t>(i)]); }
    }
    int64_t out_n = shape_numel(out_shape);

    auto base_offset = [kept_dims, kept_strides](int64_t out_idx) {
        int64_t off = 0;
        for (int i = static_cast<int>(kept_dims.size()) - 1; i >= 0; --i) {
            off += (out_idx % kept_dims[static_cast<size_t>(i)]) * kept_strides[static_cast<size_t>(i)];
            out_idx /= kept_dims[static_cast<size_t>(i)];
        }
        return off;
    };
    auto fiber_offset = [red_dims, red_strides](int64_t j) {
        int64_t off = 0;
        for (int i = static_cast<int>(red_dims.size()) - 1; i >= 0; --i) {
            off += (j % red_dims[static_cast<size_t>(i)]) * red_strides[static_cast<size_t>(i)];
            j /= red_dims[static_cast<size_t>(i)];
        }
        return off;
    };

    Tensor<T> out(out_shape);
    const T* xp = xv.data();
    parallel_for(out_n, [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o) {
            int64_t base = base_offset(o);
            if (op == Reduce::Max) {
                T best = xp[base + fiber_offset(0)];
                for (int64_t j = 1; j < fiber; ++j) best = std::max(best, xp[base + fiber_offset(j)]);
                out[o] = best;
            } else {
                T acc = 0;
                for (int64_t j = 0; j < fiber; ++j) acc += xp[base + fiber_offset(j)];
                out[o] = op == Reduce::Mean ? acc / static_cast<T>(fiber) : acc;
            }
        }
    });

    const char* tag = op == Reduce::Sum ? "reduce_sum" : (op == Reduce::Mean ? "reduce_mean" : "reduce_max");
    return make_node<T>(tag, std::move(out), {x},
                        [op, x, base_offset, fiber_offset, fiber, out_n](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        T* dx = x.node()->grad.data();
        const T* xp = x.val().data();
        for (int64_t o = 0; o < out_n; ++o) {
            int64_t base = base_offset(o);
            T g = self.grad[o];
            if (op == Reduce::Max) {
                // gradient routed to the first maximal element in layout order
                int64_t arg = 0;
                T best = xp[base + fiber_offset(0)];
                for (int64_t j = 1; j < fiber; ++j) {
                    T v = xp[base + fiber_offset(j)];
                    if (v > best) { best = v; arg = j; }
                }
                dx[base + fiber_offset(arg)] += g;
            } else {
                T gv = op == Reduce::Mean ? g / static_cast<T>(fiber) : g;
                for (int64_t j = 0; j < fiber; ++j) dx[base + fiber_offset(j)] += gv;
            }
        }
    });
}

template <typename T> Var<T> reduce_sum(Var<T> x, std::vector<int> axes) { return reduce(Reduce::Sum, std::move(x), std::move(axes)); }
template <typename T> Var<T> reduce_mean(Var<T> x, std::vector<int> axes) { return reduce(Reduce::Mean, std::move(x), std::move(axes)); }
template <typename T> Var<T> reduce_max(Var<T> x, std::vector<int> axes) { return reduce(Reduce::Max, std::move(x), std::move(axes)); }

template <typename T>
Var<T> sum_all(Var<T> x) {
    std::vector<int> axes(static_cast<size_t>(x.val().rank()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_sum(std::move(x), std::move(axes));
}

// ---------------------------------------------------------------------------
// softmax family (along one axis, max-subtracted)

namespace detail {
template <typename T>
struct AxisIter {
    int64_t outer, axis_n, axis_stride, inner;
    explicit AxisIter(const Tensor<T>& t, int axis) {
        outer = 1; inner = 1;
        for (int i = 0; i < axis; ++i) outer *= t.dim(i);
        axis_n = t.dim(axis);
        for (int i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
        axis_stride = inner;
    }
    int64_t fibers() const { return outer * inner; }
    int64_t base(int64_t f) const { return (f / inner) * axis_n * inner + (f % inner); }
};
}  // namespace detail

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
    const auto& xv = x.val();
    if (axis < 0 || axis >= xv.rank())
        throw DimError("softmax: invalid axis " + std::to_string(axis) + " for shape " + shape_str(xv.shape()));
    detail::AxisIter<T> it(xv, axis);
    Tensor<T> out(xv.shape());
    const T* xp = xv.data();
    T* yp = out.data();
    parallel_for(it.fibers(), [&](int64_t lo, int64_t hi) {
        for (int64_t f = lo; f < hi; ++f) {
            int64_t b = it.base(f);
            T mx = xp[b];
            for (int64_t j = 1; j < it.axis_n; ++j) mx = std::max(mx, xp[b + j * it.axis_stride]);
            T sum = 0;
            for (int64_t j = 0; j < it.axis_n; ++j) {
                T e = std::exp(xp[b + j * it.axis_stride] - mx);
                yp[b + j * it.axis_stride] = e;
                sum += e;
            }
            for (int64_t j = 0; j < it.axis_n; ++j) yp[b + j * it.axis_stride] /= sum;
        }
    });
    Var<T> result = make_node<T>("softmax", std::move(out), {x}, [x, it](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        T* dx = x.node()->grad.data();
        const T* y = self.value.data();
        const T* dy = self.grad.data();
        for (int64_t f = 0; f < it.fibers(); ++f) {
            int64_t b = it.base(f);
            T dot = 0;
            for (int64_t j = 0; j < it.axis_n; ++j) dot += dy[b + j * it.axis_stride] * y[b + j * it.axis_stride];
            for (int64_t j = 0; j < it.axis_n; ++j) {
                int64_t i = b + j * it.axis_stride;
                dx[i] += y[i] * (dy[i] - dot);
            }
        }
    });
    return result;
}

template <typename T>
Var<T> log_softmax(Var<T> x, int axis) {
    const auto& xv = x.val();
    if (axis < 0 || axis >= xv.rank())
        throw DimError("log_softmax: invalid axis " + std::to_string(axis) + " for shape " + shape_str(xv.shape()));
    detail::AxisIter<T> it(xv, axis);
    Tensor<T> out(xv.shape());
    const T* xp = xv.data();
    T* yp = out.data();
    for (int64_t f = 0; f < it.fibers(); ++f) {
        int64_t b = it.base(f);
        T mx = xp[b];
        for (int64_t j = 1; j < it.axis_n; ++j) mx = std::max(mx, xp[b + j * it.axis_stride]);
        T sum = 0;
        for (int64_t j = 0; j < it.axis_n; ++j) sum += std::exp(xp[b + j * it.axis_stride] - mx);
        T lse = mx + std::log(sum);
        for (int64_t j = 0; j < it.axis_n; ++j) yp[b + j * it.axis_stride] = xp[b + j * it.axis_stride] - lse;
    }
    return make_node<T>("log_softmax", std::move(out), {x}, [x, it](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        T* dx = x.node()->grad.data();
        const T* y = self.value.data();
        const T* dy = self.grad.data();
        for (int64_t f = 0; f < it.fibers(); ++f) {
            int64_t b = it.base(f);
            T gsum = 0;
            for (int64_t j = 0; j < it.axis_n; ++j) gsum += dy[b + j * it.axis_stride];
            for (int64_t j = 0; j < it.axis_n; ++j) {
                int64_t i = b + j * it.axis_stride;
                dx[i] += dy[i] - std::exp(y[i]) * gsum;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// pointwise activations

namespace detail {
template <typename T, typename F, typename DF>
Var<T> pointwise(const char* tag, Var<T> x, F f, DF df) {
    Tensor<T> out(x.val().shape());
    const T* xp = x.val().data();
    T* yp = out.data();
    int64_t n = out.numel();
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) yp[i] = f(xp[i]);
    });
    return make_node<T>(tag, std::move(out), {x}, [x, df](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        T* dx = x.node()->grad.data();
        const T* xp = x.val().data();
        const T* yp = self.value.data();
        for (int64_t i = 0; i < self.grad.numel(); ++i) dx[i] += self.grad[i] * df(xp[i], yp[i]);
    });
}
}  // namespace detail

// Exact GeLU: x * Phi(x) with the Gaussian CDF via erf (not the tanh approximation).
template <typename T>
Var<T> gelu(Var<T> x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    return detail::pointwise<T>(
        "gelu", std::move(x),
        [](T v) {
            double d = static_cast<double>(v);
            return static_cast<T>(d * 0.5 * (1.0 + std::erf(d * inv_sqrt2)));
        },
        [](T v, T) {
            double d = static_cast<double>(v);
            double phi = 0.5 * (1.0 + std::erf(d * inv_sqrt2));
            double pdf = inv_sqrt2pi * std::exp(-0.5 * d * d);
            return static_cast<T>(phi + d * pdf);
        });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::pointwise<T>(
        "sigmoid", std::move(x),
        [](T v) {
            if (v >= 0) return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
            double e = std::exp(static_cast<double>(v));
            return static_cast<T>(e / (1.0 + e));
        },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> hard_swish(Var<T> x) {
    return detail::pointwise<T>(
        "hard_swish", std::move(x),
        [](T v) {
            T r = std::clamp<T>(v + T(3), T(0), T(6));
            return v * r / T(6);
        },
        [](T v, T) {
            if (v <= T(-3)) return T(0);
            if (v >= T(3)) return T(1);
            return (T(2) * v + T(3)) / T(6);
        });
}

template <typename T>
Var<T> rsqrt(Var<T> x) {
    return detail::pointwise<T>(
        "rsqrt", std::move(x),
        [](T v) { return static_cast<T>(1.0 / std::sqrt(static_cast<double>(v))); },
        [](T, T y) { return static_cast<T>(-0.5) * y * y * y; });
}

// ---------------------------------------------------------------------------
// data movement

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    Shape old = x.val().shape();
    Tensor<T> out = x.val().reshaped(std::move(shape));
    return make_node<T>("reshape", std::move(out), {x}, [x, old](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) x.node()->grad[i] += self.grad[i];
    });
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<int> perm) {
    const auto& xv = x.val();
    int rank = xv.rank();
    if (static_cast<int>(perm.size()) != rank)
        throw DimError("permute: order size " + std::to_string(perm.size()) + " vs rank " + std::to_string(rank));
    Shape out_shape(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) out_shape[static_cast<size_t>(i)] = xv.dim(perm[static_cast<size_t>(i)]);

    std::vector<int64_t> in_stride(static_cast<size_t>(rank), 1);
    for (int i = rank - 2; i >= 0; --i) in_stride[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(i) + 1] * xv.dim(i + 1);
    std::vector<int64_t> gather(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) gather[static_cast<size_t>(i)] = in_stride[static_cast<size_t>(perm[static_cast<size_t>(i)])];

    auto src_index = [out_shape, gather, rank](int64_t o) {
        int64_t src = 0;
        for (int i = rank - 1; i >= 0; --i) {
            src += (o % out_shape[static_cast<size_t>(i)]) * gather[static_cast<size_t>(i)];
            o /= out_shape[static_cast<size_t>(i)];
        }
        return src;
    };

    Tensor<T> out(out_shape);
    const T* xp = xv.data();
    T* yp = out.data();
    parallel_for(out.numel(), [&](int64_t lo, int64_t hi) {
        for (int64_t o = lo; o < hi; ++o) yp[o] = xp[src_index(o)];
    });
    return make_node<T>("permute", std::move(out), {x}, [x, src_index](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        T* dx = x.node()->grad.data();
        for (int64_t o = 0; o < self.grad.numel(); ++o) dx[src_index(o)] += self.grad[o];
    });
}

// [N,H,W,C] -> [N*(H/win)*(W/win), win, win, C]; exact inverse is window_merge.
template <typename T>
Var<T> window_partition(Var<T> x, int win) {
    const auto& xv = x.val();
    if (xv.rank() != 4) throw DimError("window_partition expects NHWC, got " + shape_str(xv.shape()));
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    if (win <= 0 || H % win || W % win)
        throw DimError("window_partition: extents " + shape_str(xv.shape()) + " not divisible by window " +
                       std::to_string(win) + "; pad the input to a multiple upstream");
    int64_t GH = H / win, GW = W / win;
    Tensor<T> out({N * GH * GW, win, win, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t gh = 0; gh < GH; ++gh)
            for (int64_t gw = 0; gw < GW; ++gw)
                for (int64_t i = 0; i < win; ++i)
                    for (int64_t j = 0; j < win; ++j)
                        for (int64_t c = 0; c < C; ++c)
                            out.at((n * GH + gh) * GW + gw, i, j, c) = xv.at(n, gh * win + i, gw * win + j, c);
    return make_node<T>("window_partition", std::move(out), {x}, [x, N, GH, GW, win, C](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        auto& dx = x.node()->grad;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t gh = 0; gh < GH; ++gh)
                for (int64_t gw = 0; gw < GW; ++gw)
                    for (int64_t i = 0; i < win; ++i)
                        for (int64_t j = 0; j < win; ++j)
                            for (int64_t c = 0; c < C; ++c)
                                dx.at(n, gh * win + i, gw * win + j, c) +=
                                    self.grad.at((n * GH + gh) * GW + gw, i, j, c);
    });
}

template <typename T>
Var<T> window_merge(Var<T> x, int win, int64_t H, int64_t W) {
    const auto& xv = x.val();
    if (xv.rank() != 4 || xv.dim(1) != win || xv.dim(2) != win)
        throw DimError("window_merge expects [n_windows,win,win,C], got " + shape_str(xv.shape()));
    if (H % win || W % win) throw DimError("window_merge: target extents not divisible by window");
    int64_t GH = H / win, GW = W / win, C = xv.dim(3);
    if (xv.dim(0) % (GH * GW))
        throw DimError("window_merge: window count " + std::to_string(xv.dim(0)) +
                       " not a multiple of grid " + std::to_string(GH * GW));
    int64_t N = xv.dim(0) / (GH * GW);
    Tensor<T> out({N, H, W, C});
    for (int64_t n = 0; n < N; ++n)
        for (int64_t gh = 0; gh < GH; ++gh)
            for (int64_t gw = 0; gw < GW; ++gw)
                for (int64_t i = 0; i < win; ++i)
                    for (int64_t j = 0; j < win; ++j)
                        for (int64_t c = 0; c < C; ++c)
                            out.at(n, gh * win + i, gw * win + j, c) = xv.at((n * GH + gh) * GW + gw, i, j, c);
    return make_node<T>("window_merge", std::move(out), {x}, [x, N, GH, GW, win, C](Node<T>& self) {
        if (!x.node()->requires_grad) return;
        x.node()->ensure_grad();
        auto& dx = x.node()->grad;
        for (int64_t n = 0; n < N; ++n)
            for (int64_t gh = 0; gh < GH; ++gh)
                for (int64_t gw = 0; gw < GW; ++gw)
                    for (int64_t i = 0; i < win; ++i)
                        for (int64_t j = 0; j < win; ++j)
                            for (int64_t c = 0; c < C; ++c)
                                dx.at((n * GH + gh) * GW + gw, i, j, c) +=
                                    self.grad.at(n, gh * win + i, gw * win + j, c);
    });
}

// Adds the learned relative-position table onto attention logits.
// logits: [B*heads, S, S] with S == H*W; table: [heads, 2H-1, 2W-1].
// Logit (i,j) picks table[head, row_i - row_j + H-1, col_i - col_j + W-1].
template <typename T>
Var<T> rel_bias_add(Var<T> logits, Var<T> table, int64_t H, int64_t W) {
    const auto& lv = logits.val();
    const auto& tv = table.val();
    if (lv.rank() != 3 || tv.rank() != 3)
        throw DimError("rel_bias_add expects [B*h,S,S] logits and [h,2H-1,2W-1] table");
    int64_t S = H * W;
    int64_t heads = tv.dim(0);
    if (lv.dim(1) != S || lv.dim(2) != S || tv.dim(1) != 2 * H - 1 || tv.dim(2) != 2 * W - 1 ||
        lv.dim(0) % heads)
        throw DimError("rel_bias_add shape mismatch: logits " + shape_str(lv.shape()) + " table " +
                       shape_str(tv.shape()) + " for H=" + std::to_string(H) + " W=" + std::to_string(W));
    int64_t G = lv.dim(0);
    int64_t TW = 2 * W - 1;
    Tensor<T> out(lv.shape());
    const T* lp = lv.data();
    const T* tp = tv.data();
    T* yp = out.data();
    parallel_for(G, [&](int64_t lo, int64_t hi) {
        for (int64_t g = lo; g < hi; ++g) {
            int64_t head = g % heads;
            const T* tab = tp + head * (2 * H - 1) * TW;
            for (int64_t i = 0; i < S; ++i)
                for (int64_t j = 0; j < S; ++j) {
                    int64_t dr = i / W - j / W + H - 1;
                    int64_t dc = i % W - j % W + W - 1;
                    yp[(g * S + i) * S + j] = lp[(g * S + i) * S + j] + tab[dr * TW + dc];
                }
        }
    });
    return make_node<T>("rel_bias_add", std::move(out), {logits, table},
                        [logits, table, G, S, H, W, heads, TW](Node<T>& self) {
        const T* dy = self.grad.data();
        if (logits.node()->requires_grad) {
            logits.node()->ensure_grad();
            T* dl = logits.node()->grad.data();
            for (int64_t i = 0; i < self.grad.numel(); ++i) dl[i] += dy[i];
        }
        if (table.node()->requires_grad) {
            table.node()->ensure_grad();
            T* dt = table.node()->grad.data();
            parallel_for(heads, [&](int64_t lo, int64_t hi) {
                for (int64_t head = lo; head < hi; ++head) {
                    T* tab = dt + head * (2 * H - 1) * TW;
                    for (int64_t g = head; g < G; g += heads)
                        for (int64_t i = 0; i < S; ++i)
                            for (int64_t j = 0; j < S; ++j) {
                                int64_t dr = i / W - j / W + H - 1;
                                int64_t dc = i % W - j % W + W - 1;
                                tab[dr * TW + dc] += dy[(g * S + i) * S + j];
                            }
                }
            });
        }
    });
}

// Channel-axis layer normalization (per spatial position) with affine.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    const auto& xv = x.val();
    int64_t C = xv.dim(xv.rank() - 1);
    if (gamma.val().numel() != C || beta.val().numel() != C)
        throw DimError("layer_norm channel mismatch: input " + shape_str(xv.shape()) + " vs gamma " +
                       shape_str(gamma.val().shape()));
    int64_t rows = xv.numel() / C;
    Tensor<T> out(xv.shape());
    const T* xp = xv.data();
    const T* gp = gamma.val().data();
    const T* bp = beta.val().data();
    T* yp = out.data();
    parallel_for(rows, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const T* row = xp + r * C;
            T mean = 0;
            for (int64_t c = 0; c < C; ++c) mean += row[c];
            mean /= static_cast<T>(C);
            T var = 0;
            for (int64_t c = 0; c < C; ++c) { T d = row[c] - mean; var += d * d; }
            var /= static_cast<T>(C);
            T rstd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var + eps)));
            for (int64_t c = 0; c < C; ++c)
                yp[r * C + c] = gp[c] * (row[c] - mean) * rstd + bp[c];
        }
    });
    return make_node<T>("layer_norm", std::move(out), {x, gamma, beta},
                        [x, gamma, beta, rows, C, eps](Node<T>& self) {
        const T* xp = x.val().data();
        const T* gp = gamma.val().data();
        const T* dy = self.grad.data();
        Tensor<T> dgamma({C}), dbeta({C});
        bool need_x = x.node()->requires_grad;
        bool need_g = gamma.node()->requires_grad;
        bool need_b = beta.node()->requires_grad;
        if (need_x) x.node()->ensure_grad();
        T* dx = need_x ? x.node()->grad.data() : nullptr;
        for (int64_t r = 0; r < rows; ++r) {
            const T* row = xp + r * C;
            T mean = 0;
            for (int64_t c = 0; c < C; ++c) mean += row[c];
            mean /= static_cast<T>(C);
            T var = 0;
            for (int64_t c = 0; c < C; ++c) { T d = row[c] - mean; var += d * d; }
            var /= static_cast<T>(C);
            T rstd = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var + eps)));
            T m1 = 0, m2 = 0;  // mean(dy*g), mean(dy*g*xhat)
            for (int64_t c = 0; c < C; ++c) {
                T xhat = (row[c] - mean) * rstd;
                T dg = dy[r * C + c] * gp[c];
                m1 += dg;
                m2 += dg * xhat;
                if (need_g) dgamma[c] += dy[r * C + c] * xhat;
                if (need_b) dbeta[c] += dy[r * C + c];
            }
            m1 /= static_cast<T>(C);
            m2 /= static_cast<T>(C);
            if (need_x)
                for (int64_t c = 0; c < C; ++c) {
                    T xhat = (row[c] - mean) * rstd;
                    dx[r * C + c] += rstd * (dy[r * C + c] * gp[c] - m1 - xhat * m2);
                }
        }
        if (need_g) {
            gamma.node()->ensure_grad();
            for (int64_t c = 0; c < C; ++c) gamma.node()->grad[c] += dgamma[c];
        }
        if (need_b) {
            beta.node()->ensure_grad();
            for (int64_t c = 0; c < C; ++c) beta.node()->grad[c] += dbeta[c];
        }
    });
}

}  // namespace moat
