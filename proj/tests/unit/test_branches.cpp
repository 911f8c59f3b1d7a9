#include <algorithm>
#include <numeric>
#include <set>

#include "doctest.h"
#include "dualshot/transformer_branch.hpp"
#include "gradcheck.hpp"

using namespace dualshot;
using testing::check_params;
using testing::fill;
using testing::project;
using testing::random_tensor;
using testing::randomize;

namespace {

void fill_all(ParamStore<double>& ps, double v) {
    for (auto& [name, p] : ps.items()) std::fill(p->value.data.begin(), p->value.data.end(), v);
}

Tensor<double> impulse(int c, int h, int w, int y, int x) {
    Tensor<double> t({1, c, h, w});
    for (int k = 0; k < c; ++k) t.at(0, k, y, x) = 1.0;
    return t;
}

std::set<std::pair<int, int>> support(const Tensor<double>& t) {
    std::set<std::pair<int, int>> s;
    for (int c = 0; c < t.c(); ++c)
        for (int y = 0; y < t.h(); ++y)
            for (int x = 0; x < t.w(); ++x)
                if (t.at(0, c, y, x) != 0.0) s.insert({y, x});
    return s;
}

int chebyshev_radius(const std::set<std::pair<int, int>>& s, int cy, int cx) {
    int r = 0;
    for (const auto& [y, x] : s) r = std::max({r, std::abs(y - cy), std::abs(x - cx)});
    return r;
}

// Offsets reached by composing 3x3 kernels at the given dilations.
std::set<std::pair<int, int>> composed_offsets(const std::vector<int>& dilations) {
    std::set<std::pair<int, int>> s{{0, 0}};
    for (int d : dilations) {
        std::set<std::pair<int, int>> next;
        for (const auto& [y, x] : s)
            for (int i = -1; i <= 1; ++i)
                for (int j = -1; j <= 1; ++j) next.insert({y + i * d, x + j * d});
        s = std::move(next);
    }
    return s;
}

}  // namespace

TEST_CASE("HPB preserves shape and maps zero weights to zero") {
    ParamStore<double> ps;
    Rng rng(1);
    HpbBlock<double> hpb(ps, "hpb", 4, rng, false);
    Tape<double> t(false);
    const auto x = random_tensor({2, 4, 9, 11}, rng);
    CHECK(hpb.forward(t.constant(x), false).shape() == x.shape);
    fill_all(ps, 0.0);
    const auto& y = hpb.forward(t.constant(x), false).value();
    CHECK(y.shape == x.shape);
    CHECK(std::all_of(y.data.begin(), y.data.end(), [](double v) { return v == 0.0; }));
    CHECK_THROWS_AS(hpb.forward(t.constant(Tensor<double>({1, 3, 8, 8})), false), DimensionError);
}

TEST_CASE("HPB dilation-12 sub-branch support equals the composed receptive field") {
    ParamStore<double> ps;
    Rng rng(2);
    HpbBlock<double> hpb(ps, "hpb", 1, rng, false);
    fill_all(ps, 0.0);
    for (int i = 0; i < 3; ++i) {
        fill(hpb.dilated[static_cast<std::size_t>(i)].weight, 1.0);
        fill(hpb.refine[static_cast<std::size_t>(i)].weight, 1.0);
    }
    const int n = 41, c = 20;
    Tape<double> t(false);
    const auto out = hpb.pyramid_branch(t.constant(impulse(1, n, n, c, c)), 2, false).value();
    std::set<std::pair<int, int>> expect;
    for (const auto& [dy, dx] : composed_offsets({12, 1})) expect.insert({c + dy, c + dx});
    CHECK(support(out) == expect);
    CHECK(chebyshev_radius(support(out), c, c) == 13);
}

TEST_CASE("HPB locality: a full block reaches exactly the pyramid radius plus merge and fuse") {
    ParamStore<double> ps;
    Rng rng(3);
    HpbBlock<double> hpb(ps, "hpb", 2, rng, false);
    fill_all(ps, 0.0);
    for (auto& [name, p] : ps.items())
        if (name.find("weight") != std::string::npos) std::fill(p->value.data.begin(), p->value.data.end(), 0.25);
    const int n = 45, c = 22;
    Tape<double> t(false);
    const auto s = support(hpb.forward(t.constant(impulse(2, n, n, c, c)), false).value());
    std::set<std::pair<int, int>> expect;
    for (const auto& [dy, dx] : composed_offsets({1, 1, 1, 1})) expect.insert({c + dy, c + dx});
    for (int d : {1, 6, 12})
        for (const auto& [dy, dx] : composed_offsets({d, 1, 1, 1})) expect.insert({c + dy, c + dx});
    CHECK(s == expect);
    CHECK(chebyshev_radius(s, c, c) == 15);
}

TEST_CASE("CNN branch: stride arithmetic, depth and zero input") {
    Rng rng(4);
    ParamStore<double> p1, p3;
    CnnBranch<double> b1(p1, "sp", 16, 1, rng), b3(p3, "sp", 16, 3, rng);
    Tape<double> t(false);
    const auto img = random_tensor({1, 1, 128, 128}, rng, 0, 1);
    CHECK(b3.forward(t.constant(img), false).shape() == Shape{1, 16, 32, 32});
    CHECK(b1.forward(t.constant(img), false).shape() == Shape{1, 16, 32, 32});
    CHECK(p1.count() < p3.count());

    for (auto& [name, p] : p3.items())
        if (name.find("bias") != std::string::npos) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    const auto& z = b3.forward(t.constant(Tensor<double>({1, 1, 32, 32})), false).value();
    CHECK(std::all_of(z.data.begin(), z.data.end(), [](double v) { return v == 0.0; }));

    CHECK_THROWS_AS(b3.forward(t.constant(Tensor<double>({1, 1, 30, 32})), false), DimensionError);
    CHECK_THROWS_AS(b3.forward(t.constant(Tensor<double>({1, 1, 32, 34})), false), DimensionError);
    CHECK_THROWS_AS(b3.forward(t.constant(Tensor<double>({1, 2, 32, 32})), false), DimensionError);
}

TEST_CASE("transformer branch shape matches the CNN branch") {
    Rng rng(5);
    ParamStore<double> pa, pb;
    TransformerBranch<double> tb(pa, "fr", 16, 3, LtbOptions{}, rng);
    CnnBranch<double> cb(pb, "sp", 16, 3, rng);
    Tape<double> t(false);
    const auto img = random_tensor({2, 1, 64, 48}, rng, 0, 1);
    const auto a = tb.forward(t.constant(img), false).shape();
    CHECK(a == Shape{2, 16, 16, 12});
    CHECK(a == cb.forward(t.constant(img), false).shape());
    CHECK(tb.pre_feature(t.constant(img), false).shape() == a);
    CHECK_THROWS_AS(tb.forward(t.constant(Tensor<double>({1, 1, 64, 50})), false), DimensionError);
    CHECK_THROWS_AS(LtbBlock<double>(pa, "odd", 7, LtbOptions{}, rng), DimensionError);
}

TEST_CASE("pre-feature stage: zero in zero out, constant plane gives a constant interior") {
    Rng rng(6);
    ParamStore<double> ps;
    TransformerBranch<double> tb(ps, "fr", 8, 1, LtbOptions{2, 2}, rng);
    Tape<double> t(false);
    for (auto& [name, p] : ps.items())
        if (name.find("bias") != std::string::npos) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    const auto& z = tb.pre_feature(t.constant(Tensor<double>({1, 1, 32, 32})), false).value();
    CHECK(std::all_of(z.data.begin(), z.data.end(), [](double v) { return v == 0.0; }));

    randomize(ps, rng);
    const auto y = tb.pre_feature(t.constant(Tensor<double>({1, 1, 32, 32}, 0.7)), false).value();
    // Output pixels farther than one step from the border see no padding through both stride-2 convs.
    for (int c = 0; c < 8; ++c)
        for (int i = 1; i < 7; ++i)
            for (int j = 1; j < 7; ++j) CHECK(y.at(0, c, i, j) == doctest::Approx(y.at(0, c, 1, 1)).epsilon(1e-12));
}

TEST_CASE("LTB is the identity on a channel-constant map with a zero feed-forward") {
    Rng rng(7);
    ParamStore<double> ps;
    LtbBlock<double> b(ps, "ltb", 8, LtbOptions{}, rng);
    for (auto& [name, p] : ps.items())
        if (name.find("bias") != std::string::npos) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    fill(b.ffn_out.weight, 0.0);
    Tensor<double> x({1, 8, 5, 6}, 0.0);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 6; ++j)
            for (int c = 0; c < 8; ++c) x.at(0, c, i, j) = 0.3 * i - 0.1 * j;
    Tape<double> t(false);
    const auto& y = b.forward(t.constant(x)).value();
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y.data[i] - x.data[i]) < 1e-12);
}

TEST_CASE("attention path commutes with token permutations") {
    Rng rng(8);
    ParamStore<double> ps;
    LtbBlock<double> b(ps, "ltb", 8, LtbOptions{}, rng);
    randomize(ps, rng);
    const int h = 4, w = 5, l = h * w, half = 4;
    const auto x = random_tensor({2, half, h, w}, rng);
    std::vector<int> perm(static_cast<std::size_t>(l));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937(9));
    auto permute = [&](const Tensor<double>& a) {
        Tensor<double> o(a.shape);
        for (int n = 0; n < a.n(); ++n)
            for (int c = 0; c < a.c(); ++c)
                for (int i = 0; i < l; ++i)
                    o.data[o.index(n, c, 0, 0) + static_cast<std::size_t>(i)] =
                        a.data[a.index(n, c, 0, 0) + static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        return o;
    };
    Tape<double> t(false);
    const auto y = b.attention_path(t.constant(x)).value();
    const auto yp = b.attention_path(t.constant(permute(x))).value();
    const auto expect = permute(y);
    for (std::size_t i = 0; i < yp.size(); ++i) CHECK(yp.data[i] == doctest::Approx(expect.data[i]).epsilon(1e-12));
}

TEST_CASE("global reach: LTB output responds to distant tokens, HPB does not") {
    Rng rng(10);
    const int n = 40;
    auto far_gradient = [&](auto&& block_fn, int channels) {
        Tape<double> t;
        auto x = t.constant(random_tensor({1, channels, n, n}, rng), true);
        auto y = block_fn(x);
        Tensor<double> r(y.shape());
        for (int c = 0; c < channels; ++c) r.at(0, c, n - 1, n - 1) = 1.0;
        t.backward(project(y, r));
        double g = 0;
        for (int c = 0; c < channels; ++c) g += std::abs(t.grad(x.id()).at(0, c, 0, 0));
        return g;
    };
    ParamStore<double> pa;
    LtbBlock<double> ltb(pa, "ltb", 8, LtbOptions{}, rng);
    randomize(pa, rng);
    CHECK(far_gradient([&](const Var<double>& x) { return ltb.forward(x); }, 8) > 1e-12);

    ParamStore<double> pb;
    HpbBlock<double> hpb(pb, "hpb", 8, rng, false);
    randomize(pb, rng);
    CHECK(far_gradient([&](const Var<double>& x) { return hpb.forward(x, false); }, 8) == 0.0);
}

TEST_CASE("HPB parameter gradients match central differences") {
    Rng rng(11);
    int tries = 0;
    for (int draw = 0; draw < 3; ++tries) {
        REQUIRE(tries < 100);
        ParamStore<double> ps;
        HpbBlock<double> hpb(ps, "hpb", 2, rng, false);
        randomize(ps, rng);
        const auto x = random_tensor({1, 2, 14, 14}, rng);
        const auto r = random_tensor({1, 2, 14, 14}, rng);
        auto loss = [&](Tape<double>& t) { return project(hpb.forward(t.constant(x), false), r); };
        const auto res = check_params(ps, loss);
        if (res.crossed) continue;
        ++draw;
        INFO(res.where);
        CHECK(res.worst < 1e-4);
    }
}

TEST_CASE("LTB parameter gradients match central differences") {
    Rng rng(12);
    int tries = 0;
    for (int draw = 0; draw < 3; ++tries) {
        REQUIRE(tries < 100);
        ParamStore<double> ps;
        LtbBlock<double> b(ps, "ltb", 8, LtbOptions{}, rng);
        randomize(ps, rng);
        const auto x = random_tensor({2, 8, 4, 5}, rng);
        const auto r = random_tensor({2, 8, 4, 5}, rng);
        auto loss = [&](Tape<double>& t) { return project(b.forward(t.constant(x)), r); };
        const auto res = check_params(ps, loss);
        if (res.crossed) continue;
        ++draw;
        INFO(res.where);
        CHECK(res.worst < 1e-4);
    }
}

TEST_CASE("mean branch output: gradient w.r.t. attention projections") {
    Rng rng(13);
    for (int tries = 0;; ++tries) {
        REQUIRE(tries < 100);
        ParamStore<double> ps;
        TransformerBranch<double> tb(ps, "fr", 8, 2, LtbOptions{2, 2}, rng);
        const auto img = random_tensor({1, 1, 16, 16}, rng, 0, 1);
        auto loss = [&](Tape<double>& t) { return ops::mean_all(tb.forward(t.constant(img), false)); };
        const auto res = check_params(ps, loss);
        if (res.crossed) continue;
        INFO(res.where);
        CHECK(res.worst < 1e-4);
        break;
    }
}
