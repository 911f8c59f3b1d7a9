#include <cmath>

#include "doctest.h"
#include "dualshot/ops.hpp"
#include "dualshot/simd/kernels.hpp"
#include "gradcheck.hpp"

using namespace dualshot;
using testing::check_input;
using testing::project;
using testing::random_tensor;

namespace {

// Direct 7-loop convolution.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b,
                           const ops::ConvGeom& g) {
    const int n = x.n(), ci = x.c(), h = x.h(), wd = x.w();
    const int co = w.n(), kh = w.h(), kw = w.w();
    const int oh = ops::conv_out(h, kh, g.stride, g.pad_h, g.dil_h), ow = ops::conv_out(wd, kw, g.stride, g.pad_w, g.dil_w);
    const int cig = ci / g.groups, cog = co / g.groups;
    Tensor<double> y({n, co, oh, ow});
    for (int b0 = 0; b0 < n; ++b0)
        for (int o = 0; o < co; ++o)
            for (int yy = 0; yy < oh; ++yy)
                for (int xx = 0; xx < ow; ++xx) {
                    double s = b ? b->at(0, o, 0, 0) : 0.0;
                    const int grp = o / cog;
                    for (int c = 0; c < cig; ++c)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                const int iy = yy * g.stride - g.pad_h + i * g.dil_h;
                                const int ix = xx * g.stride - g.pad_w + j * g.dil_w;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                                s += w.at(o, c, i, j) * x.at(b0, grp * cig + c, iy, ix);
                            }
                    y.at(b0, o, yy, xx) = s;
                }
    return y;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

struct ConvCase {
    Shape x, w;
    ops::ConvGeom g;
};

std::vector<ConvCase> conv_cases() {
    std::vector<ConvCase> cs;
    ops::ConvGeom g;
    cs.push_back({{2, 3, 7, 6}, {4, 3, 3, 3}, g});
    g.pad_h = g.pad_w = 1;
    cs.push_back({{1, 2, 5, 5}, {3, 2, 3, 3}, g});
    g.stride = 2;
    cs.push_back({{2, 1, 8, 9}, {2, 1, 3, 3}, g});
    g = {};
    g.pad_h = g.pad_w = 2;
    g.dil_h = g.dil_w = 2;
    cs.push_back({{1, 2, 6, 7}, {2, 2, 3, 3}, g});
    g = {};
    cs.push_back({{2, 5, 4, 3}, {6, 5, 1, 1}, g});
    g.pad_h = g.pad_w = 1;
    g.groups = 4;
    cs.push_back({{2, 4, 5, 6}, {4, 1, 3, 3}, g});
    g = {};
    g.pad_h = 1;
    g.groups = 3;
    cs.push_back({{1, 3, 7, 1}, {3, 1, 3, 1}, g});
    g = {};
    g.pad_h = g.pad_w = 6;
    g.dil_h = g.dil_w = 6;
    cs.push_back({{1, 2, 4, 4}, {2, 2, 3, 3}, g});
    return cs;
}

}  // namespace

TEST_CASE("conv2d matches a direct convolution for every geometry") {
    Rng rng(1);
    for (const auto& c : conv_cases()) {
        const auto x = random_tensor(c.x, rng);
        const auto w = random_tensor(c.w, rng);
        const auto b = random_tensor({1, c.w[0], 1, 1}, rng);
        Tape<double> tape(false);
        auto y = ops::conv2d(tape.constant(x), tape.constant(w), tape.constant(b), c.g);
        CHECK(max_abs_diff(y.value(), conv_oracle(x, w, &b, c.g)) < 1e-12);
        auto y0 = ops::conv2d(tape.constant(x), tape.constant(w), Var<double>(), c.g);
        CHECK(max_abs_diff(y0.value(), conv_oracle(x, w, nullptr, c.g)) < 1e-12);
    }
}

TEST_CASE("conv2d gradients w.r.t. input, weight and bias") {
    Rng rng(2);
    for (const auto& c : conv_cases()) {
        auto x = random_tensor(c.x, rng);
        auto w = random_tensor(c.w, rng);
        auto b = random_tensor({1, c.w[0], 1, 1}, rng);
        Tape<double> probe(false);
        const Shape ys = ops::conv2d(probe.constant(x), probe.constant(w), Var<double>(), c.g).shape();
        const auto r = random_tensor(ys, rng);
        CHECK(check_input(x, [&](Tape<double>& t, const Var<double>& xv) {
                  return project(ops::conv2d(xv, t.constant(w), t.constant(b), c.g), r);
              }) < 1e-7);
        CHECK(check_input(w, [&](Tape<double>& t, const Var<double>& wv) {
                  return project(ops::conv2d(t.constant(x), wv, t.constant(b), c.g), r);
              }) < 1e-7);
        CHECK(check_input(b, [&](Tape<double>& t, const Var<double>& bv) {
                  return project(ops::conv2d(t.constant(x), t.constant(w), bv, c.g), r);
              }) < 1e-7);
    }
}

TEST_CASE("conv2d rejects mismatched channels") {
    Tape<double> t(false);
    auto x = t.constant(Tensor<double>({1, 3, 4, 4}));
    auto w = t.constant(Tensor<double>({2, 2, 3, 3}));
    CHECK_THROWS_AS(ops::conv2d(x, w, Var<double>(), ops::ConvGeom{}), ShapeError);
}

TEST_CASE("scalar and AVX2 backends give the same conv forward") {
    if (!simd::avx2_available()) return;
    Rng rng(3);
    const auto x = random_tensor({2, 16, 32, 32}, rng).cast<float>();
    const auto w = random_tensor({16, 16, 3, 3}, rng, -0.2, 0.2).cast<float>();
    ops::ConvGeom g;
    g.pad_h = g.pad_w = 1;
    auto run = [&] {
        Tape<float> t(false);
        return ops::conv2d(t.constant(x), t.constant(w), Var<float>(), g).value();
    };
    simd::set_backend(simd::Backend::Scalar);
    const auto ys = run();
    simd::set_backend(simd::Backend::Avx2);
    const auto yv = run();
    double worst = 0;
    for (std::size_t i = 0; i < ys.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(ys.data[i] - yv.data[i])));
    CHECK(worst < 1e-4);
}

TEST_CASE("elementwise and structural op gradients") {
    Rng rng(4);
    auto a = random_tensor({2, 3, 4, 5}, rng);
    auto b = random_tensor({1, 3, 1, 5}, rng);
    const auto r = random_tensor({2, 3, 4, 5}, rng);

    SUBCASE("broadcast add/sub/mul") {
        for (int op = 0; op < 3; ++op) {
            auto f = [&](const Var<double>& u, const Var<double>& v) {
                return op == 0 ? ops::add(u, v) : op == 1 ? ops::sub(u, v) : ops::mul(u, v);
            };
            CHECK(check_input(a, [&](Tape<double>& t, const Var<double>& x) { return project(f(x, t.constant(b)), r); }) < 1e-8);
            CHECK(check_input(b, [&](Tape<double>& t, const Var<double>& x) { return project(f(t.constant(a), x), r); }) < 1e-8);
            CHECK(check_input(b, [&](Tape<double>& t, const Var<double>& x) { return project(f(x, t.constant(a)), r); }) < 1e-8);
        }
    }
    SUBCASE("two-sided broadcast") {
        auto col = random_tensor({1, 2, 4, 1}, rng);
        auto row = random_tensor({1, 2, 1, 5}, rng);
        const auto rr = random_tensor({1, 2, 4, 5}, rng);
        CHECK(check_input(col, [&](Tape<double>& t, const Var<double>& x) { return project(ops::mul(x, t.constant(row)), rr); }) < 1e-8);
        CHECK(check_input(row, [&](Tape<double>& t, const Var<double>& x) { return project(ops::mul(t.constant(col), x), rr); }) < 1e-8);
    }
    SUBCASE("relu, sigmoid, affine") {
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::relu(x), r); }) < 1e-8);
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::sigmoid(x), r); }) < 1e-8);
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::affine(x, 2.5, -1.0), r); }) < 1e-8);
    }
    SUBCASE("concat, slice, reshape") {
        auto c2 = random_tensor({2, 2, 4, 5}, rng);
        const auto rc = random_tensor({2, 5, 4, 5}, rng);
        CHECK(check_input(c2, [&](Tape<double>& t, const Var<double>& x) {
                  return project(ops::concat<double>({t.constant(a), x}, 1), rc);
              }) < 1e-8);
        const auto rs = random_tensor({2, 3, 2, 5}, rng);
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::slice(x, 2, 1, 2), rs); }) < 1e-8);
        const auto rh = random_tensor({2, 3, 20, 1}, rng);
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::reshape(x, {2, 3, 20, 1}), rh); }) < 1e-8);
    }
    SUBCASE("reductions") {
        for (unsigned axes : {ops::kAxisH, ops::kAxisW, ops::kAxisC, ops::kAxisH | ops::kAxisW}) {
            Tape<double> probe(false);
            const auto rs = random_tensor(ops::mean_over(probe.constant(a), axes).shape(), rng);
            CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::mean_over(x, axes), rs); }) < 1e-8);
            CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::max_over(x, axes), rs); }) < 1e-8);
        }
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return ops::mean_all(x); }) < 1e-8);
    }
    SUBCASE("upsample") {
        const auto ru = random_tensor({2, 3, 8, 10}, rng);
        CHECK(check_input(a, [&](Tape<double>&, const Var<double>& x) { return project(ops::upsample_nearest2(x), ru); }) < 1e-8);
    }
}

TEST_CASE("mean_over forward equals brute-force means") {
    Rng rng(5);
    const auto a = random_tensor({2, 3, 4, 5}, rng);
    Tape<double> t(false);
    const auto& rows = ops::mean_over(t.constant(a), ops::kAxisW).value();
    const auto& cols = ops::mean_over(t.constant(a), ops::kAxisH).value();
    for (int n = 0; n < 2; ++n)
        for (int c = 0; c < 3; ++c) {
            for (int y = 0; y < 4; ++y) {
                double s = 0;
                for (int x = 0; x < 5; ++x) s += a.at(n, c, y, x);
                CHECK(rows.at(n, c, y, 0) == doctest::Approx(s / 5).epsilon(1e-14));
            }
            for (int x = 0; x < 5; ++x) {
                double s = 0;
                for (int y = 0; y < 4; ++y) s += a.at(n, c, y, x);
                CHECK(cols.at(n, c, 0, x) == doctest::Approx(s / 4).epsilon(1e-14));
            }
        }
}

TEST_CASE("normalization gradients") {
    Rng rng(6);
    auto x = random_tensor({2, 4, 3, 3}, rng, -2, 2);
    auto gamma = random_tensor({1, 4, 1, 1}, rng, 0.5, 1.5);
    auto beta = random_tensor({1, 4, 1, 1}, rng);
    const auto r = random_tensor({2, 4, 3, 3}, rng);
    auto ln = [&](Tape<double>& t, const Var<double>& xv, const Var<double>& g, const Var<double>& b) {
        (void)t;
        return project(ops::layer_norm_channels(xv, g, b), r);
    };
    CHECK(check_input(x, [&](Tape<double>& t, const Var<double>& v) { return ln(t, v, t.constant(gamma), t.constant(beta)); }) < 1e-7);
    CHECK(check_input(gamma, [&](Tape<double>& t, const Var<double>& v) { return ln(t, t.constant(x), v, t.constant(beta)); }) < 1e-7);
    CHECK(check_input(beta, [&](Tape<double>& t, const Var<double>& v) { return ln(t, t.constant(x), t.constant(gamma), v); }) < 1e-7);

    Parameter<double> rm{Tensor<double>({1, 4, 1, 1}), {}, false}, rv{Tensor<double>({1, 4, 1, 1}, 1.0), {}, false};
    CHECK(check_input(x, [&](Tape<double>& t, const Var<double>& v) {
              return project(ops::batch_norm(v, t.constant(gamma), t.constant(beta), rm, rv, true), r);
          }) < 1e-6);
}

TEST_CASE("layer norm output has zero mean and unit variance over channels") {
    Rng rng(7);
    const auto x = random_tensor({1, 6, 2, 3}, rng, -5, 5);
    Tape<double> t(false);
    const auto& y = ops::layer_norm_channels(t.constant(x), t.constant(Tensor<double>({1, 6, 1, 1}, 1.0)),
                                             t.constant(Tensor<double>({1, 6, 1, 1})))
                        .value();
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 3; ++j) {
            double m = 0, v = 0;
            for (int c = 0; c < 6; ++c) m += y.at(0, c, i, j) / 6;
            for (int c = 0; c < 6; ++c) v += (y.at(0, c, i, j) - m) * (y.at(0, c, i, j) - m) / 6;
            CHECK(std::abs(m) < 1e-12);
            CHECK(v == doctest::Approx(1.0).epsilon(1e-5));
        }
}

namespace {

// Naive multi-head attention in double.
Tensor<double> attention_oracle(const Tensor<double>& q, const Tensor<double>& k, const Tensor<double>& v, int heads) {
    const int n = q.n(), dm = q.c(), l = q.h() * q.w(), dh = dm / heads;
    Tensor<double> out(q.shape);
    for (int b = 0; b < n; ++b)
        for (int hd = 0; hd < heads; ++hd)
            for (int i = 0; i < l; ++i) {
                std::vector<double> s(static_cast<std::size_t>(l));
                double mx = -1e300;
                for (int j = 0; j < l; ++j) {
                    double d = 0;
                    for (int c = 0; c < dh; ++c) d += q.data[q.index(b, hd * dh + c, 0, 0) + i] * k.data[k.index(b, hd * dh + c, 0, 0) + j];
                    s[static_cast<std::size_t>(j)] = d / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, s[static_cast<std::size_t>(j)]);
                }
                double z = 0;
                for (auto& e : s) z += (e = std::exp(e - mx));
                for (int c = 0; c < dh; ++c) {
                    double acc = 0;
                    for (int j = 0; j < l; ++j) acc += s[static_cast<std::size_t>(j)] / z * v.data[v.index(b, hd * dh + c, 0, 0) + j];
                    out.data[out.index(b, hd * dh + c, 0, 0) + i] = acc;
                }
            }
    return out;
}

}  // namespace

TEST_CASE("attention forward, normalization and gradients") {
    Rng rng(8);
    auto q = random_tensor({2, 4, 3, 4}, rng);
    auto k = random_tensor({2, 4, 3, 4}, rng);
    auto v = random_tensor({2, 4, 3, 4}, rng);
    Tape<double> t(false);
    const auto& y = ops::attention(t.constant(q), t.constant(k), t.constant(v), 2).value();
    CHECK(max_abs_diff(y, attention_oracle(q, k, v, 2)) < 1e-12);

    const auto w = ops::attention_weights(q, k, 2, 1, 1);
    REQUIRE(w.size() == 144u);
    for (int i = 0; i < 12; ++i) {
        double s = 0;
        for (int j = 0; j < 12; ++j) {
            CHECK(w[static_cast<std::size_t>(i * 12 + j)] >= 0.0);
            s += w[static_cast<std::size_t>(i * 12 + j)];
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
    }

    const auto r = random_tensor(q.shape, rng);
    auto f = [&](Tape<double>& tp, const Var<double>* qv, const Var<double>* kv, const Var<double>* vv) {
        return project(ops::attention(qv ? *qv : tp.constant(q), kv ? *kv : tp.constant(k), vv ? *vv : tp.constant(v), 2), r);
    };
    CHECK(check_input(q, [&](Tape<double>& tp, const Var<double>& x) { return f(tp, &x, nullptr, nullptr); }) < 1e-7);
    CHECK(check_input(k, [&](Tape<double>& tp, const Var<double>& x) { return f(tp, nullptr, &x, nullptr); }) < 1e-7);
    CHECK(check_input(v, [&](Tape<double>& tp, const Var<double>& x) { return f(tp, nullptr, nullptr, &x); }) < 1e-7);
}

TEST_CASE("float attention agrees with the double oracle") {
    Rng rng(9);
    const auto q = random_tensor({1, 8, 8, 8}, rng);
    const auto k = random_tensor({1, 8, 8, 8}, rng);
    const auto v = random_tensor({1, 8, 8, 8}, rng);
    Tape<float> t(false);
    const auto y = ops::attention(t.constant(q.cast<float>()), t.constant(k.cast<float>()), t.constant(v.cast<float>()), 4).value();
    CHECK(max_abs_diff(y.cast<double>(), attention_oracle(q, k, v, 4)) < 1e-5);
}

TEST_CASE("bilinear sampling: grid identity, midpoint mean and gradient") {
    Rng rng(10);
    auto field = random_tensor({2, 3, 4, 5}, rng);
    Tensor<double> coords({2, 2, 1, 3});
    // grid point, horizontal midpoint, interior point
    const double pts[3][2] = {{2, 3}, {1, 1.5}, {2.3, 0.7}};
    for (int b = 0; b < 2; ++b)
        for (int p = 0; p < 3; ++p) {
            coords.at(b, 0, 0, p) = pts[p][0];
            coords.at(b, 1, 0, p) = pts[p][1];
        }
    Tape<double> t(false);
    const auto& s = ops::bilinear_sample(t.constant(field), coords).value();
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c) {
            CHECK(s.at(b, c, 0, 0) == field.at(b, c, 2, 3));
            CHECK(s.at(b, c, 0, 1) == doctest::Approx(0.5 * (field.at(b, c, 1, 1) + field.at(b, c, 1, 2))).epsilon(1e-14));
            const double fu = 0.3, fv = 0.7;
            const double ref = (1 - fu) * ((1 - fv) * field.at(b, c, 2, 0) + fv * field.at(b, c, 2, 1)) +
                               fu * ((1 - fv) * field.at(b, c, 3, 0) + fv * field.at(b, c, 3, 1));
            CHECK(s.at(b, c, 0, 2) == doctest::Approx(ref).epsilon(1e-13));
        }
    const auto r = random_tensor({2, 3, 1, 3}, rng);
    CHECK(check_input(field, [&](Tape<double>&, const Var<double>& x) { return project(ops::bilinear_sample(x, coords), r); }) < 1e-8);
}

TEST_CASE("point losses: values and gradients w.r.t. raw outputs") {
    Rng rng(11);
    const int p = 7;
    auto raw5 = random_tensor({2, 5, 1, p}, rng, -2, 2);
    auto raw2 = random_tensor({2, 2, 1, p}, rng, -2, 2);
    auto raw1 = random_tensor({2, 1, 1, p}, rng, -2, 2);
    const auto target = random_tensor({2, 1, 1, p}, rng, -2, 2);
    Tensor<double> weight({2, 1, 1, p}, 1.0);
    weight.at(1, 0, 0, 3) = 0.0;
    CHECK(check_input(raw5, [&](Tape<double>&, const Var<double>& x) { return ops::mixture_nll(x, target, weight, 1e-3); }) < 1e-7);
    CHECK(check_input(raw2, [&](Tape<double>&, const Var<double>& x) { return ops::unimodal_nll(x, target, weight, 1e-3); }) < 1e-7);
    // L1 has a kink at zero residual; the random targets keep residuals away from it.
    CHECK(check_input(raw1, [&](Tape<double>&, const Var<double>& x) { return ops::l1_loss(x, target, weight); }) < 1e-7);

    auto logits = random_tensor({1, 1, 3, 4}, rng, -3, 3);
    Tensor<double> lab({1, 1, 3, 4});
    for (std::size_t i = 0; i < lab.size(); i += 2) lab.data[i] = 1.0;
    CHECK(check_input(logits, [&](Tape<double>&, const Var<double>& x) { return ops::bce_with_logits(x, lab, 1e-7); }) < 1e-7);

    // Masked points contribute nothing.
    Tape<double> t(false);
    const double l1 = ops::l1_loss(t.constant(raw1), target, weight).value().data[0];
    double ref = 0;
    for (int b = 0; b < 2; ++b)
        for (int j = 0; j < p; ++j) ref += weight.at(b, 0, 0, j) * std::abs(raw1.at(b, 0, 0, j) - target.at(b, 0, 0, j));
    CHECK(l1 == doctest::Approx(ref / 13).epsilon(1e-12));
}

TEST_CASE("parameters accumulate gradients across tapes") {
    Parameter<double> p{Tensor<double>({1, 1, 1, 3}, 2.0), {}, true};
    for (int i = 0; i < 2; ++i) {
        Tape<double> t;
        auto v = t.param(p);
        t.backward(ops::sum_all(ops::mul(v, v)));
    }
    for (double g : p.grad.data) CHECK(g == 8.0);
    Tape<double> inference(false);
    CHECK_FALSE(inference.param(p).needs_grad());
}
