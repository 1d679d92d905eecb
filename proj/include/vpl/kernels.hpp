#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace vpl::kern {

// ---------------------------------------------------------------------------
// GEMM: C[M,N] (+)= A[M,K] * B[K,N], row-major.
//
// Convolutions lower onto this via im2col, so the microkernel below is where
// nearly all training time goes. The AVX-512 path keeps a 6x16 block of C in
// registers and streams B; the portable path is a 4-row saxpy loop.
// ---------------------------------------------------------------------------

#if defined(__AVX512F__)

namespace detail {

inline void gemm_block_avx512(int M, int N, int K, const double* A, const double* B,
                              double* C, int ldc) {
    int m = 0;
    for (; m + 6 <= M; m += 6) {
        int n = 0;
        for (; n + 16 <= N; n += 16) {
            __m512d c[6][2];
            for (int r = 0; r < 6; ++r) {
                c[r][0] = _mm512_loadu_pd(C + (m + r) * ldc + n);
                c[r][1] = _mm512_loadu_pd(C + (m + r) * ldc + n + 8);
            }
            for (int k = 0; k < K; ++k) {
                const __m512d b0 = _mm512_loadu_pd(B + k * N + n);
                const __m512d b1 = _mm512_loadu_pd(B + k * N + n + 8);
                for (int r = 0; r < 6; ++r) {
                    const __m512d a = _mm512_set1_pd(A[(m + r) * K + k]);
                    c[r][0] = _mm512_fmadd_pd(a, b0, c[r][0]);
                    c[r][1] = _mm512_fmadd_pd(a, b1, c[r][1]);
                }
            }
            for (int r = 0; r < 6; ++r) {
                _mm512_storeu_pd(C + (m + r) * ldc + n, c[r][0]);
                _mm512_storeu_pd(C + (m + r) * ldc + n + 8, c[r][1]);
            }
        }
        if (n < N) {
            const int rem = N - n;
            const __mmask8 lo = static_cast<__mmask8>((1u << std::min(rem, 8)) - 1u);
            const __mmask8 hi = rem > 8 ? static_cast<__mmask8>((1u << (rem - 8)) - 1u)
                                        : static_cast<__mmask8>(0);
            __m512d c[6][2];
            for (int r = 0; r < 6; ++r) {
                c[r][0] = _mm512_maskz_loadu_pd(lo, C + (m + r) * ldc + n);
                c[r][1] = hi ? _mm512_maskz_loadu_pd(hi, C + (m + r) * ldc + n + 8)
                             : _mm512_setzero_pd();
            }
            for (int k = 0; k < K; ++k) {
                const __m512d b0 = _mm512_maskz_loadu_pd(lo, B + k * N + n);
                const __m512d b1 = hi ? _mm512_maskz_loadu_pd(hi, B + k * N + n + 8)
                                      : _mm512_setzero_pd();
                for (int r = 0; r < 6; ++r) {
                    const __m512d a = _mm512_set1_pd(A[(m + r) * K + k]);
                    c[r][0] = _mm512_fmadd_pd(a, b0, c[r][0]);
                    c[r][1] = _mm512_fmadd_pd(a, b1, c[r][1]);
                }
            }
            for (int r = 0; r < 6; ++r) {
                _mm512_mask_storeu_pd(C + (m + r) * ldc + n, lo, c[r][0]);
                if (hi) _mm512_mask_storeu_pd(C + (m + r) * ldc + n + 8, hi, c[r][1]);
            }
        }
    }
    for (; m < M; ++m) {
        // The tail columns stay on masked FMA so every C[m][n] sees the exact
        // same rounding regardless of which row path computed it.
        for (int k = 0; k < K; ++k) {
            const __m512d a = _mm512_set1_pd(A[m * K + k]);
            int n = 0;
            for (; n + 8 <= N; n += 8) {
                __m512d cc = _mm512_loadu_pd(C + m * ldc + n);
                cc = _mm512_fmadd_pd(a, _mm512_loadu_pd(B + k * N + n), cc);
                _mm512_storeu_pd(C + m * ldc + n, cc);
            }
            if (n < N) {
                const __mmask8 t = static_cast<__mmask8>((1u << (N - n)) - 1u);
                __m512d cc = _mm512_maskz_loadu_pd(t, C + m * ldc + n);
                cc = _mm512_fmadd_pd(a, _mm512_maskz_loadu_pd(t, B + k * N + n), cc);
                _mm512_mask_storeu_pd(C + m * ldc + n, t, cc);
            }
        }
    }
}

}  // namespace detail

inline void gemm(int M, int N, int K, const double* A, const double* B, double* C,
                 bool accumulate) {
    if (!accumulate) {
        for (int m = 0; m < M; ++m) std::memset(C + static_cast<size_t>(m) * N, 0, sizeof(double) * N);
    }
    detail::gemm_block_avx512(M, N, K, A, B, C, N);
}

#else

inline void gemm(int M, int N, int K, const double* A, const double* B, double* C,
                 bool accumulate) {
    if (!accumulate) {
        for (int m = 0; m < M; ++m) std::memset(C + static_cast<size_t>(m) * N, 0, sizeof(double) * N);
    }
    int m = 0;
    for (; m + 4 <= M; m += 4) {
        for (int k = 0; k < K; ++k) {
            const double a0 = A[(m + 0) * K + k], a1 = A[(m + 1) * K + k];
            const double a2 = A[(m + 2) * K + k], a3 = A[(m + 3) * K + k];
            const double* b = B + static_cast<size_t>(k) * N;
            double* c0 = C + static_cast<size_t>(m + 0) * N;
            double* c1 = C + static_cast<size_t>(m + 1) * N;
            double* c2 = C + static_cast<size_t>(m + 2) * N;
            double* c3 = C + static_cast<size_t>(m + 3) * N;
            for (int n = 0; n < N; ++n) {
                const double bn = b[n];
                c0[n] += a0 * bn;
                c1[n] += a1 * bn;
                c2[n] += a2 * bn;
                c3[n] += a3 * bn;
            }
        }
    }
    for (; m < M; ++m) {
        for (int k = 0; k < K; ++k) {
            const double a = A[m * K + k];
            const double* b = B + static_cast<size_t>(k) * N;
            double* c = C + static_cast<size_t>(m) * N;
            for (int n = 0; n < N; ++n) c[n] += a * b[n];
        }
    }
}

#endif

// Explicit transpose into a scratch buffer. Used by conv backward where the
// contraction runs over the "wrong" index; a copy is cheaper than a strided
// inner loop at these sizes.
inline void transpose(int rows, int cols, const double* src, double* dst) {
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) dst[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
}

// ---------------------------------------------------------------------------
// conv2d, same padding, stride 1 or 2. Input (N,C,H,W), weight (O,C,kh,kw).
// All N samples share one im2col buffer so the GEMM runs at full width.
// ---------------------------------------------------------------------------

struct Conv2dDims {
    int batch, in_ch, in_h, in_w;
    int out_ch, kh, kw, stride;
    int out_h, out_w;
    int pad_top, pad_left;

    Conv2dDims(int n, int c, int h, int w, int o, int kh_, int kw_, int s)
        : batch(n), in_ch(c), in_h(h), in_w(w), out_ch(o), kh(kh_), kw(kw_), stride(s) {
        out_h = (h + s - 1) / s;
        out_w = (w + s - 1) / s;
        pad_top = ((out_h - 1) * s + kh_ - h) / 2;
        pad_left = ((out_w - 1) * s + kw_ - w) / 2;
    }
    int cols() const { return batch * out_h * out_w; }
    int patch() const { return in_ch * kh * kw; }
};

inline void im2col(const Conv2dDims& d, const double* x, double* col) {
    const int ohw = d.out_h * d.out_w;
    const int ncols = d.cols();
    for (int c = 0; c < d.in_ch; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * ncols;
                for (int n = 0; n < d.batch; ++n) {
                    const double* xc = x + (static_cast<size_t>(n) * d.in_ch + c) * d.in_h * d.in_w;
                    double* out = row + static_cast<size_t>(n) * ohw;
                    for (int oh = 0; oh < d.out_h; ++oh) {
                        const int ih = oh * d.stride - d.pad_top + ki;
                        if (ih < 0 || ih >= d.in_h) {
                            std::memset(out + static_cast<size_t>(oh) * d.out_w, 0, sizeof(double) * d.out_w);
                            continue;
                        }
                        const double* xrow = xc + static_cast<size_t>(ih) * d.in_w;
                        double* orow = out + static_cast<size_t>(oh) * d.out_w;
                        for (int ow = 0; ow < d.out_w; ++ow) {
                            const int iw = ow * d.stride - d.pad_left + kj;
                            orow[ow] = (iw < 0 || iw >= d.in_w) ? 0.0 : xrow[iw];
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const Conv2dDims& d, const double* col, double* x) {
    const int ohw = d.out_h * d.out_w;
    const int ncols = d.cols();
    for (int c = 0; c < d.in_ch; ++c) {
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const double* row = col + (static_cast<size_t>(c) * d.kh * d.kw + ki * d.kw + kj) * ncols;
                for (int n = 0; n < d.batch; ++n) {
                    double* xc = x + (static_cast<size_t>(n) * d.in_ch + c) * d.in_h * d.in_w;
                    const double* in = row + static_cast<size_t>(n) * ohw;
                    for (int oh = 0; oh < d.out_h; ++oh) {
                        const int ih = oh * d.stride - d.pad_top + ki;
                        if (ih < 0 || ih >= d.in_h) continue;
                        double* xrow = xc + static_cast<size_t>(ih) * d.in_w;
                        const double* irow = in + static_cast<size_t>(oh) * d.out_w;
                        for (int ow = 0; ow < d.out_w; ++ow) {
                            const int iw = ow * d.stride - d.pad_left + kj;
                            if (iw >= 0 && iw < d.in_w) xrow[iw] += irow[ow];
                        }
                    }
                }
            }
        }
    }
}

// y (N,O,out_h,out_w) but laid out as (O, N*out_h*out_w) during the GEMM;
// callers get the standard layout via the scatter below.
inline void conv2d_forward(const Conv2dDims& d, const double* x, const double* w,
                           const double* bias, double* y, std::vector<double>& col_scratch) {
    col_scratch.resize(static_cast<size_t>(d.patch()) * d.cols());
    im2col(d, x, col_scratch.data());
    std::vector<double> yt(static_cast<size_t>(d.out_ch) * d.cols());
    gemm(d.out_ch, d.cols(), d.patch(), w, col_scratch.data(), yt.data(), false);
    const int ohw = d.out_h * d.out_w;
    for (int n = 0; n < d.batch; ++n)
        for (int o = 0; o < d.out_ch; ++o) {
            const double* src = yt.data() + (static_cast<size_t>(o) * d.batch + n) * ohw;
            double* dst = y + (static_cast<size_t>(n) * d.out_ch + o) * ohw;
            const double b = bias ? bias[o] : 0.0;
            for (int i = 0; i < ohw; ++i) dst[i] = src[i] + b;
        }
}

// Gradients: dW += dY * col^T, dX += W^T * dY (then col2im), db += rowsum(dY).
inline void conv2d_backward(const Conv2dDims& d, const double* x, const double* w,
                            const double* dy, double* dx, double* dw, double* db,
                            std::vector<double>& col_scratch) {
    const int ohw = d.out_h * d.out_w;
    const int ncols = d.cols();
    // regroup dY to (O, ncols)
    std::vector<double> dyt(static_cast<size_t>(d.out_ch) * ncols);
    for (int n = 0; n < d.batch; ++n)
        for (int o = 0; o < d.out_ch; ++o)
            std::memcpy(dyt.data() + (static_cast<size_t>(o) * d.batch + n) * ohw,
                        dy + (static_cast<size_t>(n) * d.out_ch + o) * ohw, sizeof(double) * ohw);
    if (db) {
        for (int o = 0; o < d.out_ch; ++o) {
            double s = 0.0;
            const double* row = dyt.data() + static_cast<size_t>(o) * ncols;
            for (int i = 0; i < ncols; ++i) s += row[i];
            db[o] += s;
        }
    }
    if (dw) {
        col_scratch.resize(static_cast<size_t>(d.patch()) * ncols);
        im2col(d, x, col_scratch.data());
        std::vector<double> colT(static_cast<size_t>(ncols) * d.patch());
        transpose(d.patch(), ncols, col_scratch.data(), colT.data());
        gemm(d.out_ch, d.patch(), ncols, dyt.data(), colT.data(), dw, true);
    }
    if (dx) {
        std::vector<double> wT(static_cast<size_t>(d.patch()) * d.out_ch);
        transpose(d.out_ch, d.patch(), w, wT.data());
        std::vector<double> dcol(static_cast<size_t>(d.patch()) * ncols);
        gemm(d.patch(), ncols, d.out_ch, wT.data(), dyt.data(), dcol.data(), false);
        col2im_add(d, dcol.data(), dx);
    }
}

// ---------------------------------------------------------------------------
// conv1d over a single sequence (C,L), same padding, stride 1 or 2.
// ---------------------------------------------------------------------------

struct Conv1dDims {
    int in_ch, len, out_ch, k, stride;
    int out_len, pad;
    Conv1dDims(int c, int l, int o, int k_, int s)
        : in_ch(c), len(l), out_ch(o), k(k_), stride(s) {
        out_len = (l + s - 1) / s;
        pad = ((out_len - 1) * s + k_ - l) / 2;
    }
};

inline void conv1d_forward(const Conv1dDims& d, const double* x, const double* w,
                           const double* bias, double* y) {
    for (int o = 0; o < d.out_ch; ++o) {
        for (int t = 0; t < d.out_len; ++t) {
            double s = bias ? bias[o] : 0.0;
            const int base = t * d.stride - d.pad;
            for (int c = 0; c < d.in_ch; ++c) {
                const double* xc = x + static_cast<size_t>(c) * d.len;
                const double* wc = w + (static_cast<size_t>(o) * d.in_ch + c) * d.k;
                for (int j = 0; j < d.k; ++j) {
                    const int idx = base + j;
                    if (idx >= 0 && idx < d.len) s += wc[j] * xc[idx];
                }
            }
            y[static_cast<size_t>(o) * d.out_len + t] = s;
        }
    }
}

inline void conv1d_backward(const Conv1dDims& d, const double* x, const double* w,
                            const double* dy, double* dx, double* dw, double* db) {
    for (int o = 0; o < d.out_ch; ++o) {
        for (int t = 0; t < d.out_len; ++t) {
            const double g = dy[static_cast<size_t>(o) * d.out_len + t];
            if (db) db[o] += g;
            const int base = t * d.stride - d.pad;
            for (int c = 0; c < d.in_ch; ++c) {
                for (int j = 0; j < d.k; ++j) {
                    const int idx = base + j;
                    if (idx < 0 || idx >= d.len) continue;
                    if (dw) dw[(static_cast<size_t>(o) * d.in_ch + c) * d.k + j] += g * x[static_cast<size_t>(c) * d.len + idx];
                    if (dx) dx[static_cast<size_t>(c) * d.len + idx] += g * w[(static_cast<size_t>(o) * d.in_ch + c) * d.k + j];
                }
            }
        }
    }
}

// Transposed conv1d, stride 2, output length exactly 2*L. Weight (C,O,k).
struct ConvT1dDims {
    int in_ch, len, out_ch, k, stride;
    int out_len, pad;
    ConvT1dDims(int c, int l, int o, int k_, int s)
        : in_ch(c), len(l), out_ch(o), k(k_), stride(s) {
        out_len = l * s;
        pad = (k_ - s) / 2;  // k=4, s=2 -> pad 1
    }
};

inline void convt1d_forward(const ConvT1dDims& d, const double* x, const double* w,
                            const double* bias, double* y) {
    for (int o = 0; o < d.out_ch; ++o) {
        double* yo = y + static_cast<size_t>(o) * d.out_len;
        for (int t = 0; t < d.out_len; ++t) yo[t] = bias ? bias[o] : 0.0;
    }
    for (int c = 0; c < d.in_ch; ++c) {
        const double* xc = x + static_cast<size_t>(c) * d.len;
        for (int o = 0; o < d.out_ch; ++o) {
            const double* wc = w + (static_cast<size_t>(c) * d.out_ch + o) * d.k;
            double* yo = y + static_cast<size_t>(o) * d.out_len;
            for (int t = 0; t < d.len; ++t) {
                const double xv = xc[t];
                const int base = t * d.stride - d.pad;
                for (int j = 0; j < d.k; ++j) {
                    const int idx = base + j;
                    if (idx >= 0 && idx < d.out_len) yo[idx] += xv * wc[j];
                }
            }
        }
    }
}

inline void convt1d_backward(const ConvT1dDims& d, const double* x, const double* w,
                             const double* dy, double* dx, double* dw, double* db) {
    if (db) {
        for (int o = 0; o < d.out_ch; ++o) {
            double s = 0.0;
            const double* g = dy + static_cast<size_t>(o) * d.out_len;
            for (int t = 0; t < d.out_len; ++t) s += g[t];
            db[o] += s;
        }
    }
    for (int c = 0; c < d.in_ch; ++c) {
        const double* xc = x + static_cast<size_t>(c) * d.len;
        for (int o = 0; o < d.out_ch; ++o) {
            const double* wc = w + (static_cast<size_t>(c) * d.out_ch + o) * d.k;
            const double* g = dy + static_cast<size_t>(o) * d.out_len;
            for (int t = 0; t < d.len; ++t) {
                const int base = t * d.stride - d.pad;
                double acc = 0.0;
                for (int j = 0; j < d.k; ++j) {
                    const int idx = base + j;
                    if (idx < 0 || idx >= d.out_len) continue;
                    acc += g[idx] * wc[j];
                    if (dw) dw[(static_cast<size_t>(c) * d.out_ch + o) * d.k + j] += g[idx] * xc[t];
                }
                if (dx) dx[static_cast<size_t>(c) * d.len + t] += acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise conv along the frame axis of (T,C,H,W). Kernel (C,k), same pad.
// ---------------------------------------------------------------------------

inline void temporal_dwconv_forward(int T, int C, int S, int k, const double* x,
                                    const double* w, double* y) {
    const int pad = (k - 1) / 2;
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            const double* wc = w + static_cast<size_t>(c) * k;
            double* yo = y + (static_cast<size_t>(t) * C + c) * S;
            for (int s = 0; s < S; ++s) yo[s] = 0.0;
            for (int j = 0; j < k; ++j) {
                const int tt = t - pad + j;
                if (tt < 0 || tt >= T) continue;
                const double* xi = x + (static_cast<size_t>(tt) * C + c) * S;
                const double wj = wc[j];
                for (int s = 0; s < S; ++s) yo[s] += wj * xi[s];
            }
        }
    }
}

inline void temporal_dwconv_backward(int T, int C, int S, int k, const double* x,
                                     const double* w, const double* dy, double* dx,
                                     double* dw) {
    const int pad = (k - 1) / 2;
    for (int t = 0; t < T; ++t) {
        for (int c = 0; c < C; ++c) {
            const double* g = dy + (static_cast<size_t>(t) * C + c) * S;
            const double* wc = w + static_cast<size_t>(c) * k;
            for (int j = 0; j < k; ++j) {
                const int tt = t - pad + j;
                if (tt < 0 || tt >= T) continue;
                if (dx) {
                    double* dxi = dx + (static_cast<size_t>(tt) * C + c) * S;
                    const double wj = wc[j];
                    for (int s = 0; s < S; ++s) dxi[s] += wj * g[s];
                }
                if (dw) {
                    const double* xi = x + (static_cast<size_t>(tt) * C + c) * S;
                    double acc = 0.0;
                    for (int s = 0; s < S; ++s) acc += xi[s] * g[s];
                    dw[static_cast<size_t>(c) * k + j] += acc;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// GroupNorm over (N, C, S): per sample, per group of C/g channels.
// Zero-variance groups normalize to zero (the affine term still applies).
// ---------------------------------------------------------------------------

inline void group_norm_forward(int N, int C, int S, int groups, double eps,
                               const double* x, const double* gamma, const double* beta,
                               double* y, double* mean_out, double* rstd_out) {
    const int cpg = C / groups;
    const int gsz = cpg * S;
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const double* xg = x + (static_cast<size_t>(n) * C + static_cast<size_t>(g) * cpg) * S;
            double m = 0.0;
            for (int i = 0; i < gsz; ++i) m += xg[i];
            m /= gsz;
            double v = 0.0;
            for (int i = 0; i < gsz; ++i) {
                const double dxi = xg[i] - m;
                v += dxi * dxi;
            }
            v /= gsz;
            const double rstd = 1.0 / std::sqrt(v + eps);
            mean_out[static_cast<size_t>(n) * groups + g] = m;
            rstd_out[static_cast<size_t>(n) * groups + g] = rstd;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const double ga = gamma ? gamma[c] : 1.0;
                const double be = beta ? beta[c] : 0.0;
                const double* xr = x + (static_cast<size_t>(n) * C + c) * S;
                double* yr = y + (static_cast<size_t>(n) * C + c) * S;
                for (int s = 0; s < S; ++s) yr[s] = (xr[s] - m) * rstd * ga + be;
            }
        }
    }
}

inline void group_norm_backward(int N, int C, int S, int groups, const double* x,
                                const double* gamma, const double* dy, const double* mean,
                                const double* rstd, double* dx, double* dgamma,
                                double* dbeta) {
    const int cpg = C / groups;
    const int gsz = cpg * S;
    for (int n = 0; n < N; ++n) {
        for (int g = 0; g < groups; ++g) {
            const double m = mean[static_cast<size_t>(n) * groups + g];
            const double rs = rstd[static_cast<size_t>(n) * groups + g];
            // accumulate sums over the group
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (int cc = 0; cc < cpg; ++cc) {
                const int c = g * cpg + cc;
                const double ga = gamma ? gamma[c] : 1.0;
                const double* xr = x + (static_cast<size_t>(n) * C + c) * S;
                const double* gr = dy + (static_cast<size_t>(n) * C + c) * S;
                for (int s = 0; s < S; ++s) {
                    const double xhat = (xr[s] - m) * rs;
                    const double dxhat = gr[s] * ga;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    if (dgamma) dgamma[c] += gr[s] * xhat;
                    if (dbeta) dbeta[c] += gr[s];
                }
            }
            if (dx) {
                for (int cc = 0; cc < cpg; ++cc) {
                    const int c = g * cpg + cc;
                    const double ga = gamma ? gamma[c] : 1.0;
                    const double* xr = x + (static_cast<size_t>(n) * C + c) * S;
                    const double* gr = dy + (static_cast<size_t>(n) * C + c) * S;
                    double* dxr = dx + (static_cast<size_t>(n) * C + c) * S;
                    for (int s = 0; s < S; ++s) {
                        const double xhat = (xr[s] - m) * rs;
                        const double dxhat = gr[s] * ga;
                        dxr[s] += rs * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / gsz);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reductions.
// ---------------------------------------------------------------------------

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline void silu_forward(size_t n, const double* x, double* y) {
    for (size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

inline void silu_backward(size_t n, const double* x, const double* dy, double* dx) {
    for (size_t i = 0; i < n; ++i) {
        const double s = sigmoid(x[i]);
        dx[i] += dy[i] * (s * (1.0 + x[i] * (1.0 - s)));
    }
}

inline void softmax_rows(int rows, int cols, const double* x, double* y) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<size_t>(r) * cols;
        double* yr = y + static_cast<size_t>(r) * cols;
        double mx = xr[0];
        for (int c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
        double z = 0.0;
        for (int c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            z += yr[c];
        }
        const double inv = 1.0 / z;
        for (int c = 0; c < cols; ++c) yr[c] *= inv;
    }
}

inline void softmax_rows_backward(int rows, int cols, const double* y, const double* dy,
                                  double* dx) {
    for (int r = 0; r < rows; ++r) {
        const double* yr = y + static_cast<size_t>(r) * cols;
        const double* gr = dy + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += yr[c] * gr[c];
        double* dr = dx + static_cast<size_t>(r) * cols;
        for (int c = 0; c < cols; ++c) dr[c] += yr[c] * (gr[c] - dot);
    }
}

inline bool all_finite(size_t n, const double* x) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(x[i])) return false;
    return true;
}

}  // namespace vpl::kern
