#pragma once

#include <vector>

#include "vpl/rng.hpp"
#include "vpl/tensor.hpp"

namespace vpl::test {

inline Tensor rand_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.gauss() * scale;
    return t;
}

// Plain triple-loop matmul used as the oracle for the blocked GEMM.
inline std::vector<double> naive_gemm(int M, int N, int K, const std::vector<double>& A,
                                      const std::vector<double>& B) {
    std::vector<double> C(static_cast<size_t>(M) * N, 0.0);
    for (int m = 0; m < M; ++m)
        for (int k = 0; k < K; ++k)
            for (int n = 0; n < N; ++n)
                C[static_cast<size_t>(m) * N + n] +=
                    A[static_cast<size_t>(m) * K + k] * B[static_cast<size_t>(k) * N + n];
    return C;
}

// Direct same-padded convolution, no im2col, used as the conv2d oracle.
inline std::vector<double> naive_conv2d(int N, int C, int H, int W, int O, int kh, int kw,
                                        int stride, const std::vector<double>& x,
                                        const std::vector<double>& w,
                                        const std::vector<double>& b) {
    const int oh = (H + stride - 1) / stride;
    const int ow = (W + stride - 1) / stride;
    const int pt = ((oh - 1) * stride + kh - H) / 2;
    const int pl = ((ow - 1) * stride + kw - W) / 2;
    std::vector<double> y(static_cast<size_t>(N) * O * oh * ow, 0.0);
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double s = b.empty() ? 0.0 : b[static_cast<size_t>(o)];
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const int ih = i * stride - pt + ki;
                                const int iw = j * stride - pl + kj;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                s += x[((static_cast<size_t>(n) * C + c) * H + ih) * W + iw] *
                                     w[((static_cast<size_t>(o) * C + c) * kh + ki) * kw + kj];
                            }
                    y[((static_cast<size_t>(n) * O + o) * oh + i) * ow + j] = s;
                }
    return y;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

}  // namespace vpl::test
