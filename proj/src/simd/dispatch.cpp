#include "dualshot/simd/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

namespace dualshot::simd {
namespace {

bool detect_avx2() {
#if defined(__x86_64__) || defined(__i386__)
    __builtin_cpu_init();
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

Backend initial_backend() {
    const char* env = std::getenv("DUALSHOT_SIMD");
    if (env != nullptr && std::strcmp(env, "scalar") == 0) return Backend::Scalar;
    return detect_avx2() ? Backend::Avx2 : Backend::Scalar;
}

std::atomic<Backend>& current() {
    static std::atomic<Backend> b{initial_backend()};
    return b;
}

}  // namespace

bool avx2_available() {
    static const bool ok = detect_avx2();
    return ok;
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
    if (b == Backend::Avx2 && !avx2_available()) b = Backend::Scalar;
    current().store(b, std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) { return b == Backend::Avx2 ? "avx2" : "scalar"; }

template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc) {
    if (active_backend() == Backend::Avx2) {
        avx2::gemm<T>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    } else {
        scalar::gemm<T>(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    }
}

template <class T>
T dot(const T* x, const T* y, std::size_t n) {
    return active_backend() == Backend::Avx2 ? avx2::dot<T>(x, y, n) : scalar::dot<T>(x, y, n);
}

template <class T>
void axpy(std::size_t n, T a, const T* x, T* y) {
    if (active_backend() == Backend::Avx2) {
        avx2::axpy<T>(n, a, x, y);
    } else {
        scalar::axpy<T>(n, a, x, y);
    }
}

template <class T>
T exp_shift_sum(T* x, std::size_t n, T shift) {
    return active_backend() == Backend::Avx2 ? avx2::exp_shift_sum<T>(x, n, shift)
                                             : scalar::exp_shift_sum<T>(x, n, shift);
}

template <class T>
T max_value(const T* x, std::size_t n) {
    return active_backend() == Backend::Avx2 ? avx2::max_value<T>(x, n) : scalar::max_value<T>(x, n);
}

#define DUALSHOT_DISPATCH_INSTANTIATE(T)                                                                 \
    template void gemm<T>(Trans, Trans, int, int, int, T, const T*, int, const T*, int, T, T*, int);       \
    template T dot<T>(const T*, const T*, std::size_t);                                                    \
    template void axpy<T>(std::size_t, T, const T*, T*);                                                   \
    template T exp_shift_sum<T>(T*, std::size_t, T);                                                       \
    template T max_value<T>(const T*, std::size_t);

DUALSHOT_DISPATCH_INSTANTIATE(float)
DUALSHOT_DISPATCH_INSTANTIATE(double)

}  // namespace dualshot::simd
