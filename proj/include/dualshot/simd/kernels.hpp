#pragma once
// Data-parallel inner loops used by the tensor ops.
//
// Every kernel has a portable scalar reference implementation and an
// AVX2/FMA variant compiled in a separate translation unit.  The variant is
// picked once at startup from CPUID; DUALSHOT_SIMD=scalar forces the
// reference path.  The equivalence tests in tests/unit/test_simd.cpp pin the
// two paths against each other.

#include <cstddef>
#include <string_view>

namespace dualshot::simd {

enum class Backend { Scalar, Avx2 };

bool avx2_available();
Backend active_backend();
// Overrides the CPUID choice; Avx2 silently degrades when unavailable.
void set_backend(Backend b);
std::string_view backend_name(Backend b);

enum class Trans { No, Yes };

// C = alpha * op(A) * op(B) + beta * C, row-major.  op(A) is M x K, op(B) is
// K x N.  beta == 0 overwrites C without reading it.
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc);

template <class T>
T dot(const T* x, const T* y, std::size_t n);

// y += a * x
template <class T>
void axpy(std::size_t n, T a, const T* x, T* y);

// x = exp(x - shift), returns the sum of the results.
template <class T>
T exp_shift_sum(T* x, std::size_t n, T shift);

template <class T>
T max_value(const T* x, std::size_t n);

// Backend-specific entry points; the dispatching versions above forward here.
namespace scalar {
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc);
template <class T>
T dot(const T* x, const T* y, std::size_t n);
template <class T>
void axpy(std::size_t n, T a, const T* x, T* y);
template <class T>
T exp_shift_sum(T* x, std::size_t n, T shift);
template <class T>
T max_value(const T* x, std::size_t n);
}  // namespace scalar

namespace avx2 {
template <class T>
void gemm(Trans ta, Trans tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb, T beta,
          T* c, int ldc);
template <class T>
T dot(const T* x, const T* y, std::size_t n);
template <class T>
void axpy(std::size_t n, T a, const T* x, T* y);
template <class T>
T exp_shift_sum(T* x, std::size_t n, T shift);
template <class T>
T max_value(const T* x, std::size_t n);
}  // namespace avx2

}  // namespace dualshot::simd
