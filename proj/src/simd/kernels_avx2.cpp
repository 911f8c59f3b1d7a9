// AVX2/FMA variants.  This translation unit is the only one compiled with
// -mavx2 -mfma; nothing here may be called unless avx2_available() is true.

#include "dualshot/simd/kernels.hpp"

#include <immintrin.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

namespace dualshot::simd::avx2 {
namespace {

template <class T>
struct V;

template <>
struct V<float> {
    using reg = __m256;
    static constexpr int lanes = 8;
    static reg zero() { return _mm256_setzero_ps(); }
    static reg set1(float v) { return _mm256_set1_ps(v); }
    static reg load(const float* p) { return _mm256_loadu_ps(p); }
    static void store(float* p, reg v) { _mm256_storeu_ps(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_ps(a, b, c); }
    static reg mul(reg a, reg b) { return _mm256_mul_ps(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_ps(a, b); }
    static float hsum(reg v) {
        __m128 lo = _mm256_castps256_ps128(v);
        __m128 hi = _mm256_extractf128_ps(v, 1);
        lo = _mm_add_ps(lo, hi);
        __m128 sh = _mm_movehdup_ps(lo);
        __m128 s = _mm_add_ps(lo, sh);
        sh = _mm_movehl_ps(sh, s);
        s = _mm_add_ss(s, sh);
        return _mm_cvtss_f32(s);
    }
    static float hmax(reg v) {
        alignas(32) float buf[8];
        _mm256_store_ps(buf, v);
        return *std::max_element(buf, buf + 8);
    }
};

template <>
struct V<double> {
    using reg = __m256d;
    static constexpr int lanes = 4;
    static reg zero() { return _mm256_setzero_pd(); }
    static reg set1(double v) { return _mm256_set1_pd(v); }
    static reg load(const double* p) { return _mm256_loadu_pd(p); }
    static void store(double* p, reg v) { _mm256_storeu_pd(p, v); }
    static reg fmadd(reg a, reg b, reg c) { return _mm256_fmadd_pd(a, b, c); }
    static reg mul(reg a, reg b) { return _mm256_mul_pd(a, b); }
    static reg max(reg a, reg b) { return _mm256_max_pd(a, b); }
    static double hsum(reg v) {
        __m128d lo = _mm256_castpd256_pd128(v);
        __m128d hi = _mm256_extractf128_pd(v, 1);
        lo = _mm_add_pd(lo, hi);
        __m128d h = _mm_unpackhi_pd(lo, lo);
        return _mm_cvtsd_f64(_mm_add_sd(lo, h));
    }
    static double hmax(reg v) {
        alignas(32) double buf[4];
        _mm256_store_pd(buf, v);
        return *std::max_element(buf, buf + 4);
    }
};

// Packed GEMM: MR x (2 * lanes) register tile, A and B repacked per block.
constexpr int kMR = 6;
constexpr int kKC = 256;
constexpr int kMC = 96;
constexpr int kNC = 1024;

template <class T>
inline T elem(const T* m, int ld, Trans t, int r, int c) {
    return t == Trans::No ? m[static_cast<std::ptrdiff_t>(r) * ld + c] : m[static_cast<std::ptrdiff_t>(c) * ld + r];
}

// Packs rows [i0, i0+mc) x cols [p0, p0+kc) of op(A) into MR-row panels.
template <class T>
void pack_a(const T* a, int lda, Trans ta, int i0, int mc, int p0, int kc, T* dst) {
    for (int ir = 0; ir < mc; ir += kMR) {
        const int rows = std::min(kMR, mc - ir);
        for (int p = 0; p < kc; ++p) {
            int r = 0;
            for (; r < rows; ++r) dst[r] = elem(a, lda, ta, i0 + ir + r, p0 + p);
            for (; r < kMR; ++r) dst[r] = T(0);
            dst += kMR;
        }
    }
}

template <class T>
void pack_b(const T* b, int ldb, Trans tb, int p0, int kc, int j0, int nc, T* dst) {
    constexpr int nr = 2 * V<T>::lanes;
    for (int jr = 0; jr < nc; jr += nr) {
        const int cols = std::min(nr, nc - jr);
        for (int p = 0; p < kc; ++p) {
            if (tb == Trans::No && cols == nr) {
                std::memcpy(dst, b + static_cast<std::ptrdiff_t>(p0 + p) * ldb + j0 + jr, sizeof(T) * nr);
            } else {
                int c = 0;
                for (; c < cols; ++c) dst[c] = elem(b, ldb, tb, p0 + p, j0 + jr + c);
                for (; c < nr; ++c) dst[c] = T(0);
            }
            dst += nr;
        }
    }
}

template <class T>
void micro_kernel(int kc, T alpha, const T* ap, const T* bp, T* c, int ldc, int rows, int cols) {
    using v = V<T>;
    constexpr int L = v::lanes;
    typename v::reg acc[kMR][2];
    for (int r = 0; r < kMR; ++r) acc[r][0] = acc[r][1] = v::zero();
    for (int p = 0; p < kc; ++p) {
        const auto b0 = v::load(bp);
        const auto b1 = v::load(bp + L);
        for (int r = 0; r < kMR; ++r) {
            const auto ar = v::set1(ap[r]);
            acc[r][0] = v::fmadd(ar, b0, acc[r][0]);
            acc[r][1] = v::fmadd(ar, b1, acc[r][1]);
        }
        ap += kMR;
        bp += 2 * L;
    }
    const auto va = v::set1(alpha);
    if (rows == kMR && cols == 2 * L) {
        for (int r = 0; r < kMR; ++r) {
            T* cr = c + static_cast<std::ptrdiff_t>(r) * ldc;
            v::store(cr, v::fmadd(va, acc[r][0], v::load(cr)));
            v::store(cr + L, v::fmadd(va, acc[r][1], v::load(cr + L)));
        }
        return;
    }
    alignas(32) T tile[kMR][2 * L];
    for (int r = 0; r < kMR; ++r) {
        v::store(&tile[r][0], acc[r][0]);
        v::store(&tile[r][L], acc[r][1]);
    }
    for (int r = 0; r < rows; ++r) {
        T* cr = c + static_cast<std::ptrdiff_t>(r) * ldc;
        for (int j = 0; j < cols; ++j) cr[j] += alpha * tile[r][j];
    }
}

template <class T>
void gemm_impl(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
               T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (beta == T(0)) {
            std::fill(crow, crow + n, T(0));
        } else if (beta != T(1)) {
            for (int j = 0; j < n; ++j) crow[j] *= beta;
        }
    }
    if (k == 0 || alpha == T(0)) return;

    constexpr int nr = 2 * V<T>::lanes;
    thread_local std::vector<T> abuf;
    thread_local std::vector<T> bbuf;
    abuf.resize(static_cast<std::size_t>(kMC) * kKC);
    bbuf.resize(static_cast<std::size_t>(kNC + nr) * kKC);

    for (int j0 = 0; j0 < n; j0 += kNC) {
        const int nc = std::min(kNC, n - j0);
        for (int p0 = 0; p0 < k; p0 += kKC) {
            const int kc = std::min(kKC, k - p0);
            pack_b(b, ldb, tb, p0, kc, j0, nc, bbuf.data());
            for (int i0 = 0; i0 < m; i0 += kMC) {
                const int mc = std::min(kMC, m - i0);
                pack_a(a, lda, ta, i0, mc, p0, kc, abuf.data());
                for (int jr = 0; jr < nc; jr += nr) {
                    const T* bp = bbuf.data() + static_cast<std::ptrdiff_t>(jr / nr) * kc * nr;
                    for (int ir = 0; ir < mc; ir += kMR) {
                        const T* ap = abuf.data() + static_cast<std::ptrdiff_t>(ir / kMR) * kc * kMR;
                        T* cp = c + static_cast<std::ptrdiff_t>(i0 + ir) * ldc + j0 + jr;
                        micro_kernel(kc, alpha, ap, bp, cp, ldc, std::min(kMR, mc - ir), std::min(nr, nc - jr));
                    }
                }
            }
        }
    }
}

// exp via range reduction to [-ln2/2, ln2/2] and a degree-6 polynomial.
inline __m256 exp_ps(__m256 x) {
    const __m256 hi = _mm256_set1_ps(88.3762626647949f);
    const __m256 lo = _mm256_set1_ps(-87.3365478515625f);
    x = _mm256_min_ps(_mm256_max_ps(x, lo), hi);
    const __m256 log2e = _mm256_set1_ps(1.44269504088896341f);
    __m256 fx = _mm256_round_ps(_mm256_mul_ps(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(0.693359375f), x);
    x = _mm256_fnmadd_ps(fx, _mm256_set1_ps(-2.12194440e-4f), x);
    __m256 y = _mm256_set1_ps(1.9875691500e-4f);
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.3981999507e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(8.3334519073e-3f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(4.1665795894e-2f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(1.6666665459e-1f));
    y = _mm256_fmadd_ps(y, x, _mm256_set1_ps(5.0000001201e-1f));
    const __m256 x2 = _mm256_mul_ps(x, x);
    y = _mm256_fmadd_ps(y, x2, _mm256_add_ps(x, _mm256_set1_ps(1.0f)));
    __m256i e = _mm256_cvtps_epi32(fx);
    e = _mm256_slli_epi32(_mm256_add_epi32(e, _mm256_set1_epi32(127)), 23);
    return _mm256_mul_ps(y, _mm256_castsi256_ps(e));
}

}  // namespace

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc) {
    gemm_impl<T>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
    using v = V<T>;
    constexpr std::size_t L = v::lanes;
    auto s0 = v::zero();
    auto s1 = v::zero();
    std::size_t i = 0;
    for (; i + 2 * L <= n; i += 2 * L) {
        s0 = v::fmadd(v::load(x + i), v::load(y + i), s0);
        s1 = v::fmadd(v::load(x + i + L), v::load(y + i + L), s1);
    }
    for (; i + L <= n; i += L) s0 = v::fmadd(v::load(x + i), v::load(y + i), s0);
    T s = v::hsum(s0) + v::hsum(s1);
    for (; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <class T>
void axpy(std::size_t n, T a, const T* x, T* y) {
    using v = V<T>;
    constexpr std::size_t L = v::lanes;
    const auto va = v::set1(a);
    std::size_t i = 0;
    for (; i + L <= n; i += L) v::store(y + i, v::fmadd(va, v::load(x + i), v::load(y + i)));
    for (; i < n; ++i) y[i] += a * x[i];
}

template <>
float exp_shift_sum<float>(float* x, std::size_t n, float shift) {
    const __m256 vs = _mm256_set1_ps(shift);
    __m256 acc = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        const __m256 e = exp_ps(_mm256_sub_ps(_mm256_loadu_ps(x + i), vs));
        _mm256_storeu_ps(x + i, e);
        acc = _mm256_add_ps(acc, e);
    }
    float s = V<float>::hsum(acc);
    for (; i < n; ++i) {
        x[i] = std::exp(x[i] - shift);
        s += x[i];
    }
    return s;
}

// Double precision only backs the gradient checks; libm accuracy is preferred there.
template <>
double exp_shift_sum<double>(double* x, std::size_t n, double shift) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - shift);
        s += x[i];
    }
    return s;
}

template <class T>
T max_value(const T* x, std::size_t n) {
    using v = V<T>;
    constexpr std::size_t L = v::lanes;
    T m = -std::numeric_limits<T>::infinity();
    std::size_t i = 0;
    if (n >= L) {
        auto acc = v::load(x);
        for (i = L; i + L <= n; i += L) acc = v::max(acc, v::load(x + i));
        m = v::hmax(acc);
    }
    for (; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

#define DUALSHOT_AVX2_INSTANTIATE(T)                                                                     \
    template void gemm<T>(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, T*, int);       \
    template T dot<T>(const T*, const T*, std::size_t);                                                    \
    template void axpy<T>(std::size_t, T, const T*, T*);                                                   \
    template T max_value<T>(const T*, std::size_t);

DUALSHOT_AVX2_INSTANTIATE(float)
DUALSHOT_AVX2_INSTANTIATE(double)

}  // namespace dualshot::simd::avx2
