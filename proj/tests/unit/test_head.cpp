#include <cmath>

#include "doctest.h"
#include "dualshot/head.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace dualshot;
using testing::density_ld;
using testing::random_tensor;

namespace {

void zero_params(ParamStore<double>& ps) {
    for (auto& [name, p] : ps.items()) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

}  // namespace

TEST_CASE("head names, output counts and widths") {
    for (auto k : {HeadKind::Adaptive, HeadKind::Unimodal, HeadKind::Regression}) CHECK(parse_head(head_name(k)) == k);
    CHECK_THROWS_AS(parse_head("laplace"), std::invalid_argument);
    CHECK(head_widths(HeadKind::Adaptive, 96) == std::vector<int>{96, 96, 96, 5});
    CHECK(head_widths(HeadKind::Unimodal, 96) == std::vector<int>{96, 96, 2});
    CHECK(head_widths(HeadKind::Regression, 96) == std::vector<int>{96, 96, 1});
}

TEST_CASE("mixture density worked examples") {
    CHECK(mixture_density({0.5, 0, 1, 0, 1}, 0.0) == 1.0);
    const MixtureParams p{0.6, 10, 1, 20, 1};
    CHECK(mixture_density(p, 10.0) == doctest::Approx(0.6 + 0.4 * std::exp(-50.0)).epsilon(1e-15));
    CHECK(mixture_density(p, 1e6) == 0.0);
    CHECK(mixture_density(p, -1e6) == 0.0);
}

TEST_CASE("adaptive selection worked examples") {
    CHECK(adaptive_select({0.6, 10, 1, 20, 1}, 1.1) == 10.0);
    CHECK(adaptive_select({0.52, 10, 1, 20, 1}, 1.1) == 15.0);
    CHECK(adaptive_select({0.3, 7.5, 2, 7.5, 0.5}, 1.1) == 7.5);
    // Second mode dominant.
    CHECK(adaptive_select({0.2, 10, 1, 20, 1}, 1.1) == 20.0);
    // Vanishing second density: guarded division.
    CHECK(adaptive_select({1.0, 3, 1, 4000, 1e-3}, 1.1) == 3.0);
}

TEST_CASE("mixture_from_raw squashing") {
    const auto z = mixture_from_raw({0, 0, 0, 0, 0});
    CHECK(z.w1 == 0.5);
    CHECK(z.mu1 == 0.0);
    CHECK(z.sigma1 == doctest::Approx(std::log(2.0) + kSigmaMin).epsilon(1e-15));
    CHECK(z.sigma1 == doctest::Approx(0.6941).epsilon(1e-4));
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        std::array<double, 5> r;
        for (auto& v : r) v = rng.uniform(-40, 40);
        const auto p = mixture_from_raw(r);
        CHECK(p.w1 > 0.0);
        CHECK(p.w1 < 1.0);
        CHECK(p.sigma1 >= kSigmaMin);
        CHECK(p.sigma2 >= kSigmaMin);
        CHECK(mixture_density(p, rng.uniform(-50, 50)) >= 0.0);
    }
    CHECK(softplus(800.0) == 800.0);
    CHECK(softplus(-800.0) == 0.0);
    CHECK(logistic(-800.0) == 0.0);
}

TEST_CASE("density matches an extended-precision oracle and is positive near the modes") {
    Rng rng(2);
    for (int i = 0; i < 1000; ++i) {
        MixtureParams p{rng.uniform(0.01, 0.99), rng.uniform(0, 40), rng.uniform(0.05, 5), rng.uniform(0, 40),
                        rng.uniform(0.05, 5)};
        const double d = rng.uniform(-5, 45);
        CHECK(std::abs(mixture_density(p, d) - static_cast<double>(density_ld(p, d))) < 1e-12);
        CHECK(mixture_density(p, p.mu1) > 0.0);
    }
}

TEST_CASE("selection is always one of the modes or their mean") {
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        MixtureParams p{rng.uniform(0.01, 0.99), rng.uniform(0, 40), rng.uniform(0.05, 5), rng.uniform(0, 40),
                        rng.uniform(0.05, 5)};
        const double s = adaptive_select(p, rng.uniform(1.0, 2.0));
        CHECK((s == p.mu1 || s == p.mu2 || s == 0.5 * (p.mu1 + p.mu2)));
    }
}

TEST_CASE("selection agrees with an extended-precision density comparison") {
    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
        MixtureParams p{rng.uniform(0.01, 0.99), rng.uniform(0, 40), rng.uniform(0.05, 5), rng.uniform(0, 40),
                        rng.uniform(0.05, 5)};
        const double thr = rng.uniform(1.0, 1.5);
        CHECK(adaptive_select(p, thr) == testing::select_oracle(p, thr));
    }
}

TEST_CASE("monotone dominance with equal spreads and well-separated modes") {
    Rng rng(4);
    for (int i = 0; i < 1000; ++i) {
        const double s = rng.uniform(0.01, 3);
        const double mu1 = rng.uniform(0, 40);
        const double gap = s * rng.uniform(10.01, 30) * (rng.uniform() < 0.5 ? -1 : 1);
        const MixtureParams p{rng.uniform(0.5, 1.0 - 1e-9), mu1, s, mu1 + gap, s};
        CHECK(mixture_density(p, p.mu1) >= mixture_density(p, p.mu2));
        const double sel = adaptive_select(p, 1.1);
        CHECK((sel == p.mu1 || sel == 0.5 * (p.mu1 + p.mu2)));
    }
}

TEST_CASE("unimodal decoding agrees with the adaptive head when one mode has all the weight") {
    Rng rng(5);
    ParamStore<double> ps;
    DisparityHead<double> uni(ps, "u", 4, 8, HeadKind::Unimodal, rng);
    for (int i = 0; i < 100; ++i) {
        const double mu = rng.uniform(0, 40), sigma = rng.uniform(0.1, 3);
        const MixtureParams p{1.0 - 1e-9, mu, sigma, mu + rng.uniform(5, 20), sigma};
        const double raw[2] = {mu, 0.3};
        CHECK(uni.decode(raw, 1.1) == adaptive_select(p, 1.1));
    }
}

TEST_CASE("bilinear feature sampling") {
    Rng rng(6);
    const auto field = random_tensor({2, 5, 4, 6}, rng);
    for (int u = 0; u < 4; ++u)
        for (int v = 0; v < 6; ++v) {
            const auto s = sample_feature(field, 1, u, v);
            for (int c = 0; c < 5; ++c) CHECK(s[static_cast<std::size_t>(c)] == field.at(1, c, u, v));
        }
    const auto mid = sample_feature(field, 0, 2, 3.5);
    for (int c = 0; c < 5; ++c)
        CHECK(mid[static_cast<std::size_t>(c)] == doctest::Approx(0.5 * (field.at(0, c, 2, 3) + field.at(0, c, 2, 4))).epsilon(1e-15));
    for (int i = 0; i < 200; ++i) {
        const double u = rng.uniform(0, 3), v = rng.uniform(0, 5);
        const int u0 = std::min(2, static_cast<int>(u)), v0 = std::min(4, static_cast<int>(v));
        const double a = u - u0, b = v - v0;
        const auto s = sample_feature(field, 0, u, v);
        const auto s2 = sample_feature(field, 0, u + 1e-7 * (u < 2.9 ? 1 : -1), v);
        for (int c = 0; c < 5; ++c) {
            const double q00 = field.at(0, c, u0, v0), q01 = field.at(0, c, u0, v0 + 1);
            const double q10 = field.at(0, c, u0 + 1, v0), q11 = field.at(0, c, u0 + 1, v0 + 1);
            const double ref = (1 - a) * (1 - b) * q00 + (1 - a) * b * q01 + a * (1 - b) * q10 + a * b * q11;
            const double got = s[static_cast<std::size_t>(c)];
            CHECK(got == doctest::Approx(ref).epsilon(1e-13));
            CHECK(got >= std::min({q00, q01, q10, q11}) - 1e-15);
            CHECK(got <= std::max({q00, q01, q10, q11}) + 1e-15);
            CHECK(std::abs(got - s2[static_cast<std::size_t>(c)]) < 1e-6);
        }
    }
    CHECK_THROWS_AS(sample_feature(field, 0, -0.1, 1), std::out_of_range);
    CHECK_THROWS_AS(sample_feature(field, 0, 1, 5.01), std::out_of_range);
}

TEST_CASE("align-corners coordinate mapping") {
    CHECK(field_coord(0, 128, 32) == 0.0);
    CHECK(field_coord(127, 128, 32) == 31.0);
    CHECK(field_coord(64, 129, 33) == 16.0);
}

TEST_CASE("projection and zero-weight heads") {
    Rng rng(7);
    ParamStore<double> ps;
    DisparityHead<double> head(ps, "h", 16, 96, HeadKind::Adaptive, rng);
    Tape<double> t(false);
    const auto fcm = random_tensor({1, 16, 32, 32}, rng);
    CHECK(head.project(t.constant(fcm)).shape() == Shape{1, 96, 32, 32});
    zero_params(ps);
    const auto& f0 = head.project(t.constant(fcm)).value();
    CHECK(std::all_of(f0.data.begin(), f0.data.end(), [](double v) { return v == 0.0; }));
    const auto raw = head.raw(t.constant(random_tensor({1, 96, 1, 3}, rng))).value();
    for (int j = 0; j < 3; ++j) {
        const auto p = mixture_from_raw({raw.at(0, 0, 0, j), raw.at(0, 1, 0, j), raw.at(0, 2, 0, j), raw.at(0, 3, 0, j),
                                         raw.at(0, 4, 0, j)});
        CHECK(p.w1 == 0.5);
        CHECK(p.mu1 == 0.0);
        CHECK(p.sigma2 == doctest::Approx(0.6941).epsilon(1e-4));
    }

    ParamStore<double> pr;
    DisparityHead<double> reg(pr, "r", 16, 8, HeadKind::Regression, rng);
    zero_params(pr);
    const auto d = reg.dense_infer(random_tensor({1, 8, 4, 4}, rng), 16, 16, 1.1);
    CHECK(std::all_of(d.data.begin(), d.data.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("mode-mean initialization lands in the final biases") {
    Rng rng(8);
    ParamStore<double> ps;
    DisparityHead<double> a(ps, "a", 4, 8, HeadKind::Adaptive, rng, {3.0, 12.0});
    DisparityHead<double> u(ps, "u", 4, 8, HeadKind::Unimodal, rng, {3.0, 12.0});
    CHECK(a.mlp.layers.back().bias->value.data[1] == 3.0);
    CHECK(a.mlp.layers.back().bias->value.data[3] == 12.0);
    CHECK(u.mlp.layers.back().bias->value.data[0] == 7.5);
}

TEST_CASE("dense inference matches a pointwise sample-and-decode loop") {
    Rng rng(9);
    for (auto kind : {HeadKind::Adaptive, HeadKind::Unimodal, HeadKind::Regression}) {
        ParamStore<double> ps;
        DisparityHead<double> head(ps, "h", 4, 12, kind, rng, {5.0, 15.0});
        testing::randomize(ps, rng, 0.8);
        const auto field = random_tensor({2, 12, 5, 7}, rng, -2, 2);
        const int oh = 17, ow = 26;
        const auto dense = head.dense_infer(field, oh, ow, 1.1);
        REQUIRE(dense.shape == Shape{2, 1, oh, ow});
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < oh; ++y)
                for (int x = 0; x < ow; ++x) {
                    const auto f = sample_feature(field, b, field_coord(y, oh, 5), field_coord(x, ow, 7));
                    Tensor<double> pt({1, 12, 1, 1});
                    for (int c = 0; c < 12; ++c) pt.data[static_cast<std::size_t>(c)] = f[static_cast<std::size_t>(c)];
                    Tape<double> t(false);
                    const auto r = head.raw(t.constant(pt)).value();
                    INFO(head_name(kind) << " " << b << " " << y << " " << x);
                    CHECK(dense.at(b, 0, y, x) == doctest::Approx(head.decode(r.data.data(), 1.1)).epsilon(1e-12));
                }
    }
}

TEST_CASE("dense inference: shape, constant field and bounds") {
    Rng rng(10);
    ParamStore<double> ps;
    DisparityHead<double> head(ps, "h", 4, 8, HeadKind::Adaptive, rng, {5.0, 15.0});
    Tensor<double> field({1, 8, 32, 32});
    for (int c = 0; c < 8; ++c)
        for (int i = 0; i < 32 * 32; ++i) field.data[field.index(0, c, 0, 0) + static_cast<std::size_t>(i)] = 0.1 * c;
    const auto d = head.dense_infer(field, 128, 128, 1.1);
    CHECK(d.shape == Shape{1, 1, 128, 128});
    for (double v : d.data) CHECK(v == d.data[0]);
    CHECK_THROWS_AS(head.dense_infer(field, 16, 128, 1.1), std::invalid_argument);
}
