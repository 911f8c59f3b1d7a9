#include <cmath>
#include <vector>

#include "doctest.h"
#include "dualshot/rng.hpp"
#include "dualshot/simd/kernels.hpp"

using namespace dualshot;
using simd::Trans;

namespace {

template <class T>
std::vector<T> randvec(std::size_t n, Rng& rng, double lo = -1, double hi = 1) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return v;
}

// Naive triple loop in long double.
template <class T>
std::vector<T> gemm_oracle(Trans ta, Trans tb, int m, int n, int k, T alpha, const std::vector<T>& a, int lda,
                           const std::vector<T>& b, int ldb, T beta, std::vector<T> c, int ldc) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            long double s = 0;
            for (int p = 0; p < k; ++p) {
                const T av = ta == Trans::No ? a[static_cast<std::size_t>(i) * lda + p] : a[static_cast<std::size_t>(p) * lda + i];
                const T bv = tb == Trans::No ? b[static_cast<std::size_t>(p) * ldb + j] : b[static_cast<std::size_t>(j) * ldb + p];
                s += static_cast<long double>(av) * bv;
            }
            T& cv = c[static_cast<std::size_t>(i) * ldc + j];
            cv = static_cast<T>(alpha * s + (beta == T(0) ? 0.0L : static_cast<long double>(beta) * cv));
        }
    }
    return c;
}

template <class T>
void check_gemm_case(Trans ta, Trans tb, int m, int n, int k, T alpha, T beta, Rng& rng, double tol) {
    const int lda = (ta == Trans::No ? k : m) + 3;
    const int ldb = (tb == Trans::No ? n : k) + 1;
    const int ldc = n + 2;
    const auto a = randvec<T>(static_cast<std::size_t>(ta == Trans::No ? m : k) * lda, rng);
    const auto b = randvec<T>(static_cast<std::size_t>(tb == Trans::No ? k : n) * ldb, rng);
    const auto c0 = randvec<T>(static_cast<std::size_t>(m) * ldc, rng);
    const auto ref = gemm_oracle(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c0, ldc);
    auto cs = c0, cv = c0;
    simd::scalar::gemm(ta, tb, m, n, k, alpha, a.data(), lda, b.data(), ldb, beta, cs.data(), ldc);
    if (simd::avx2_available()) {
        simd::avx2::gemm(ta, tb, m, n, k, alpha, a.data(), lda, b.data(), ldb, beta, cv.data(), ldc);
    } else {
        cv = cs;
    }
    double worst_s = 0, worst_v = 0;
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * ldc + j;
            const double scale = 1.0 + std::abs(static_cast<double>(ref[idx]));
            worst_s = std::max(worst_s, std::abs(static_cast<double>(cs[idx]) - ref[idx]) / scale);
            worst_v = std::max(worst_v, std::abs(static_cast<double>(cv[idx]) - ref[idx]) / scale);
        }
        // Padding columns beyond n must be untouched.
        for (int j = n; j < ldc; ++j) {
            const std::size_t idx = static_cast<std::size_t>(i) * ldc + j;
            REQUIRE(cs[idx] == c0[idx]);
            REQUIRE(cv[idx] == c0[idx]);
        }
    }
    INFO("m=" << m << " n=" << n << " k=" << k << " ta=" << int(ta) << " tb=" << int(tb));
    CHECK(worst_s <= tol * std::sqrt(static_cast<double>(k) + 1));
    CHECK(worst_v <= tol * std::sqrt(static_cast<double>(k) + 1));
}

}  // namespace

TEST_CASE_TEMPLATE("gemm: scalar and AVX2 paths match a long-double oracle", T, float, double) {
    Rng rng(11);
    const double tol = std::is_same_v<T, float> ? 2e-6 : 1e-14;
    const int sizes[][3] = {{1, 1, 1}, {1, 17, 5}, {6, 16, 8}, {7, 9, 3}, {13, 33, 70}, {97, 5, 257},
                            {5, 1030, 3}, {64, 64, 64}, {100, 130, 300}};
    for (auto ta : {Trans::No, Trans::Yes}) {
        for (auto tb : {Trans::No, Trans::Yes}) {
            for (const auto& s : sizes) {
                check_gemm_case<T>(ta, tb, s[0], s[1], s[2], T(1), T(0), rng, tol);
                check_gemm_case<T>(ta, tb, s[0], s[1], s[2], T(0.7), T(-1.3), rng, tol);
            }
        }
    }
}

TEST_CASE_TEMPLATE("gemm: beta == 0 ignores NaN garbage in C", T, float, double) {
    const int m = 9, n = 21, k = 4;
    Rng rng(2);
    const auto a = randvec<T>(static_cast<std::size_t>(m * k), rng);
    const auto b = randvec<T>(static_cast<std::size_t>(k * n), rng);
    for (auto be : {simd::Backend::Scalar, simd::Backend::Avx2}) {
        std::vector<T> c(static_cast<std::size_t>(m * n), std::numeric_limits<T>::quiet_NaN());
        simd::set_backend(be);
        simd::gemm(Trans::No, Trans::No, m, n, k, T(1), a.data(), k, b.data(), n, T(0), c.data(), n);
        for (T v : c) CHECK(std::isfinite(v));
    }
    simd::set_backend(simd::avx2_available() ? simd::Backend::Avx2 : simd::Backend::Scalar);
}

TEST_CASE_TEMPLATE("vector kernels: scalar and AVX2 agree", T, float, double) {
    if (!simd::avx2_available()) return;
    Rng rng(5);
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-13;
    for (std::size_t n : {0u, 1u, 3u, 7u, 8u, 9u, 31u, 100u, 1001u}) {
        const auto x = randvec<T>(n, rng, -3, 3);
        const auto y = randvec<T>(n, rng, -3, 3);
        const double ds = simd::scalar::dot(x.data(), y.data(), n);
        const double dv = simd::avx2::dot(x.data(), y.data(), n);
        CHECK(std::abs(ds - dv) <= tol * (1 + std::abs(ds)) * std::sqrt(n + 1.0));

        auto ys = y, yv = y;
        simd::scalar::axpy(n, T(0.37), x.data(), ys.data());
        simd::avx2::axpy(n, T(0.37), x.data(), yv.data());
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(static_cast<double>(ys[i]) - yv[i]) <= tol * 10);

        if (n > 0) {
            CHECK(simd::scalar::max_value(x.data(), n) == simd::avx2::max_value(x.data(), n));
            auto es = x, ev = x;
            const T shift = simd::scalar::max_value(x.data(), n);
            const double ss = simd::scalar::exp_shift_sum(es.data(), n, shift);
            const double sv = simd::avx2::exp_shift_sum(ev.data(), n, shift);
            CHECK(std::abs(ss - sv) <= tol * 10 * (1 + ss));
            for (std::size_t i = 0; i < n; ++i) {
                CHECK(std::abs(static_cast<double>(es[i]) - ev[i]) <= tol * 10 * (1 + std::abs(es[i])));
                CHECK(std::abs(static_cast<double>(es[i]) - std::exp(static_cast<double>(x[i]) - shift)) <=
                      tol * 10 * (1 + std::abs(es[i])));
            }
        }
    }
}

TEST_CASE("float exp kernel stays accurate over the softmax input range") {
    if (!simd::avx2_available()) return;
    std::vector<float> x;
    for (double v = -87.0; v <= 0.0; v += 0.013) x.push_back(static_cast<float>(v));
    auto e = x;
    simd::avx2::exp_shift_sum(e.data(), e.size(), 0.0f);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double ref = std::exp(static_cast<double>(x[i]));
        CHECK(std::abs(e[i] - ref) <= 4e-7 * ref + 1e-37);
    }
}

TEST_CASE("backend selection") {
    const auto initial = simd::active_backend();
    simd::set_backend(simd::Backend::Scalar);
    CHECK(simd::active_backend() == simd::Backend::Scalar);
    simd::set_backend(simd::Backend::Avx2);
    CHECK(simd::active_backend() == (simd::avx2_available() ? simd::Backend::Avx2 : simd::Backend::Scalar));
    CHECK(simd::backend_name(simd::Backend::Scalar) == "scalar");
    simd::set_backend(initial);
}
