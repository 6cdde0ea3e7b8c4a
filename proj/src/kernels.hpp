#pragma once

// Row primitives shared by the training forward pass and the KV-cache decoder.
// Every output element is computed by the same instruction sequence no matter
// how many rows are processed together, so batched and incremental decoding
// agree bit-for-bit with the full forward pass.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <type_traits>
#include <vector>

#include <Eigen/Core>

#if defined(__AVX512F__) || defined(__FMA__)
#include <immintrin.h>
#endif

namespace cca::kernels {

typedef float v8f __attribute__((vector_size(32)));
typedef double v4d __attribute__((vector_size(32)));

template <class Real>
struct Simd;
template <>
struct Simd<float> {
    using V = v8f;
    static constexpr int lanes = 8;
};
template <>
struct Simd<double> {
    using V = v4d;
    static constexpr int lanes = 4;
};

template <class Real, int R, int C>
inline void dot_tile(const Real* const* w, const Real* const* x, int k, Real* out) {
    using V = typename Simd<Real>::V;
    constexpr int L = Simd<Real>::lanes;
    V acc[R][C];
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            acc[r][c] = V{};
        }
    }
    int kk = 0;
    for (; kk + L <= k; kk += L) {
        V wv[R];
        V xv[C];
        for (int r = 0; r < R; ++r) {
            std::memcpy(&wv[r], w[r] + kk, sizeof(V));
        }
        for (int c = 0; c < C; ++c) {
            std::memcpy(&xv[c], x[c] + kk, sizeof(V));
        }
        for (int r = 0; r < R; ++r) {
            for (int c = 0; c < C; ++c) {
                acc[r][c] += wv[r] * xv[c];
            }
        }
    }
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            Real s = acc[r][c][0];
            for (int i = 1; i < L; ++i) {
                s += acc[r][c][i];
            }
            for (int i = kk; i < k; ++i) {
                s += w[r][i] * x[c][i];
            }
            out[c * R + r] = s;
        }
    }
}

#if defined(__AVX512F__)
#define CCA_FLOAT_SIMD 1
template <int R, int C>
inline void dot_tile_f32(const float* const* w, const float* const* x, int k, float* out) {
    __m512 acc[R][C];
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            acc[r][c] = _mm512_setzero_ps();
        }
    }
    int kk = 0;
    for (; kk + 16 <= k; kk += 16) {
        __m512 xv[C];
        for (int c = 0; c < C; ++c) {
            xv[c] = _mm512_loadu_ps(x[c] + kk);
        }
        for (int r = 0; r < R; ++r) {
            const __m512 wv = _mm512_loadu_ps(w[r] + kk);
            for (int c = 0; c < C; ++c) {
                acc[r][c] = _mm512_fmadd_ps(wv, xv[c], acc[r][c]);
            }
        }
    }
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            float s = _mm512_reduce_add_ps(acc[r][c]);
            for (int i = kk; i < k; ++i) {
                s += w[r][i] * x[c][i];
            }
            out[c * R + r] = s;
        }
    }
}
#elif defined(__FMA__)
#define CCA_FLOAT_SIMD 1
template <int R, int C>
inline void dot_tile_f32(const float* const* w, const float* const* x, int k, float* out) {
    __m256 acc[R][C];
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            acc[r][c] = _mm256_setzero_ps();
        }
    }
    int kk = 0;
    for (; kk + 8 <= k; kk += 8) {
        __m256 xv[C];
        for (int c = 0; c < C; ++c) {
            xv[c] = _mm256_loadu_ps(x[c] + kk);
        }
        for (int r = 0; r < R; ++r) {
            const __m256 wv = _mm256_loadu_ps(w[r] + kk);
            for (int c = 0; c < C; ++c) {
                acc[r][c] = _mm256_fmadd_ps(wv, xv[c], acc[r][c]);
            }
        }
    }
    for (int r = 0; r < R; ++r) {
        for (int c = 0; c < C; ++c) {
            alignas(32) float lanes[8];
            _mm256_store_ps(lanes, acc[r][c]);
            float s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
            for (int i = kk; i < k; ++i) {
                s += w[r][i] * x[c][i];
            }
            out[c * R + r] = s;
        }
    }
}
#endif

template <class Real, int C>
inline void linear_cols(const Real* const* x, int in, const Real* W, int out, Real* const* y) {
    constexpr int R = 4;
    Real tmp[R * C];
    for (int o0 = 0; o0 < out; o0 += R) {
        const int ro = std::min(R, out - o0);
        const Real* w[R];
        for (int r = 0; r < R; ++r) {
            w[r] = W + static_cast<std::size_t>(o0 + std::min(r, ro - 1)) * static_cast<std::size_t>(in);
        }
#ifdef CCA_FLOAT_SIMD
        if constexpr (std::is_same_v<Real, float>) {
            dot_tile_f32<R, C>(w, x, in, tmp);
        } else {
            dot_tile<Real, R, C>(w, x, in, tmp);
        }
#else
        dot_tile<Real, R, C>(w, x, in, tmp);
#endif
        for (int c = 0; c < C; ++c) {
            for (int r = 0; r < ro; ++r) {
                y[c][o0 + r] = tmp[c * R + r];
            }
        }
    }
}

/// Y[t] = W * X[t] for rows t, with W stored out x in (row-major).
template <class Real>
inline void linear_nt(const Real* X, int rows, int in, const Real* W, int out, Real* Y) {
    int t0 = 0;
    for (; t0 + 4 <= rows; t0 += 4) {
        const Real* x[4];
        Real* y[4];
        for (int c = 0; c < 4; ++c) {
            x[c] = X + static_cast<std::size_t>(t0 + c) * static_cast<std::size_t>(in);
            y[c] = Y + static_cast<std::size_t>(t0 + c) * static_cast<std::size_t>(out);
        }
        linear_cols<Real, 4>(x, in, W, out, y);
    }
    const int rem = rows - t0;
    const Real* x[3];
    Real* y[3];
    for (int c = 0; c < rem; ++c) {
        x[c] = X + static_cast<std::size_t>(t0 + c) * static_cast<std::size_t>(in);
        y[c] = Y + static_cast<std::size_t>(t0 + c) * static_cast<std::size_t>(out);
    }
    switch (rem) {
        case 1: linear_cols<Real, 1>(x, in, W, out, y); break;
        case 2: linear_cols<Real, 2>(x, in, W, out, y); break;
        case 3: linear_cols<Real, 3>(x, in, W, out, y); break;
        default: break;
    }
}

template <class Real>
inline Real dot(const Real* a, const Real* b, int n) {
    Real s = 0;
    for (int i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

/// y = x * rsqrt(mean(x^2) + eps) * g; returns the inverse rms.
template <class Real>
inline Real rmsnorm_row(const Real* x, const Real* g, int d, Real eps, Real* y) {
    Real ss = 0;
    for (int i = 0; i < d; ++i) {
        ss += x[i] * x[i];
    }
    const Real inv = Real(1) / std::sqrt(ss / static_cast<Real>(d) + eps);
    for (int i = 0; i < d; ++i) {
        y[i] = x[i] * inv * g[i];
    }
    return inv;
}

/// Rotates pairs (i, i + d/2) of one head vector in place.
template <class Real>
inline void rope_row(Real* v, const Real* cos_t, const Real* sin_t, int d_head) {
    const int half = d_head / 2;
    for (int i = 0; i < half; ++i) {
        const Real a = v[i];
        const Real b = v[i + half];
        v[i] = a * cos_t[i] - b * sin_t[i];
        v[i + half] = a * sin_t[i] + b * cos_t[i];
    }
}

template <class Real>
inline void rope_row_backward(Real* dv, const Real* cos_t, const Real* sin_t, int d_head) {
    const int half = d_head / 2;
    for (int i = 0; i < half; ++i) {
        const Real da = dv[i];
        const Real db = dv[i + half];
        dv[i] = da * cos_t[i] + db * sin_t[i];
        dv[i + half] = -da * sin_t[i] + db * cos_t[i];
    }
}

/// Causal attention for one query row over keys [0, n_keys).
template <class Real>
inline void attend_row(const Real* q, const Real* keys, int key_stride, const Real* values, int value_stride,
                       int n_keys, int d_head, Real scale, Real* probs, Real* out) {
    Real mx = -std::numeric_limits<Real>::infinity();
    for (int j = 0; j < n_keys; ++j) {
        probs[j] = dot(q, keys + static_cast<std::size_t>(j) * key_stride, d_head) * scale;
        mx = std::max(mx, probs[j]);
    }
    Real sum = 0;
    for (int j = 0; j < n_keys; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        sum += probs[j];
    }
    const Real inv = Real(1) / sum;
    for (int j = 0; j < n_keys; ++j) {
        probs[j] *= inv;
    }
    std::fill(out, out + d_head, Real(0));
    for (int j = 0; j < n_keys; ++j) {
        const Real* vj = values + static_cast<std::size_t>(j) * value_stride;
        const Real p = probs[j];
        for (int i = 0; i < d_head; ++i) {
            out[i] += p * vj[i];
        }
    }
}

template <class Real>
inline Real silu(Real x) {
    return x / (Real(1) + std::exp(-x));
}

/// Cos/sin tables for positions [0, n_pos), d_head / 2 frequencies each.
template <class Real>
struct RopeTable {
    int half = 0;
    std::vector<Real> cos_v;
    std::vector<Real> sin_v;

    RopeTable(int n_pos, int d_head, double base) : half(d_head / 2) {
        cos_v.resize(static_cast<std::size_t>(n_pos) * half);
        sin_v.resize(static_cast<std::size_t>(n_pos) * half);
        for (int p = 0; p < n_pos; ++p) {
            for (int i = 0; i < half; ++i) {
                const double inv_freq = std::pow(base, -2.0 * i / d_head);
                const double ang = p * inv_freq;
                cos_v[static_cast<std::size_t>(p) * half + i] = static_cast<Real>(std::cos(ang));
                sin_v[static_cast<std::size_t>(p) * half + i] = static_cast<Real>(std::sin(ang));
            }
        }
    }
    const Real* cos_at(int p) const { return cos_v.data() + static_cast<std::size_t>(p) * half; }
    const Real* sin_at(int p) const { return sin_v.data() + static_cast<std::size_t>(p) * half; }
};

template <class Real>
using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Real>
using MapMat = Eigen::Map<RowMat<Real>>;
template <class Real>
using ConstMapMat = Eigen::Map<const RowMat<Real>>;

/// dX (rows x in) += dY (rows x out) * W (out x in)
template <class Real>
inline void accum_dx(const Real* dY, int rows, int out, const Real* W, int in, Real* dX) {
    MapMat<Real>(dX, rows, in).noalias() += ConstMapMat<Real>(dY, rows, out) * ConstMapMat<Real>(W, out, in);
}

/// dW[r0:r0+n] (n x in) += dY[:, r0:r0+n]^T * X, with dY stride `out`.
template <class Real>
inline void accum_dw_rows(const Real* dY, int rows, int out, const Real* X, int in, Real* dW, int r0, int n) {
    using Stride = Eigen::OuterStride<>;
    Eigen::Map<const RowMat<Real>, 0, Stride> dy(dY + r0, rows, n, Stride(out));
    MapMat<Real>(dW + static_cast<std::size_t>(r0) * in, n, in).noalias() +=
        dy.transpose() * ConstMapMat<Real>(X, rows, in);
}

}  // namespace cca::kernels
