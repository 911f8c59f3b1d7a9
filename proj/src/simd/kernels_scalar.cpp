#include "dualshot/simd/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dualshot::simd::scalar {

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc) {
    for (int i = 0; i < m; ++i) {
        T* crow = c + static_cast<std::ptrdiff_t>(i) * ldc;
        if (beta == T(0)) {
            std::fill(crow, crow + n, T(0));
        } else if (beta != T(1)) {
            for (int j = 0; j < n; ++j) crow[j] *= beta;
        }
        for (int p = 0; p < k; ++p) {
            const T aip = ta == Trans::No ? a[static_cast<std::ptrdiff_t>(i) * lda + p]
                                          : a[static_cast<std::ptrdiff_t>(p) * lda + i];
            const T s = alpha * aip;
            if (s == T(0)) continue;
            if (tb == Trans::No) {
                const T* brow = b + static_cast<std::ptrdiff_t>(p) * ldb;
                for (int j = 0; j < n; ++j) crow[j] += s * brow[j];
            } else {
                for (int j = 0; j < n; ++j) crow[j] += s * b[static_cast<std::ptrdiff_t>(j) * ldb + p];
            }
        }
    }
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
}

template <class T>
void axpy(std::size_t n, T a, const T* x, T* y) {
    for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <class T>
T exp_shift_sum(T* x, std::size_t n, T shift) {
    T s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::exp(x[i] - shift);
        s += x[i];
    }
    return s;
}

template <class T>
T max_value(const T* x, std::size_t n) {
    T m = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, x[i]);
    return m;
}

#define DUALSHOT_SCALAR_INSTANTIATE(T)                                                                     \
    template void gemm<T>(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, T*, int);         \
    template T dot<T>(const T*, const T*, std::size_t);                                                      \
    template void axpy<T>(std::size_t, T, const T*, T*);                                                     \
    template T exp_shift_sum<T>(T*, std::size_t, T);                                                         \
    template T max_value<T>(const T*, std::size_t);

DUALSHOT_SCALAR_INSTANTIATE(float)
DUALSHOT_SCALAR_INSTANTIATE(double)

}  // namespace dualshot::simd::scalar
