#include <algorithm>

#include "doctest.h"
#include "dualshot/model.hpp"
#include "gradcheck.hpp"

using namespace dualshot;
using testing::random_tensor;

namespace {

ModelConfig small_config(SaliencyPaths paths) {
    ModelConfig cfg;
    cfg.channels = 8;
    cfg.n_lt = cfg.n_hp = 1;
    cfg.heads = 2;
    cfg.feature_dim = 16;
    cfg.saliency_paths = paths;
    cfg.mu_init = {4.0, 12.0};
    return cfg;
}

}  // namespace

TEST_CASE("saliency path names round-trip") {
    for (auto p : {SaliencyPaths::Both, SaliencyPaths::BtOnly, SaliencyPaths::BcOnly, SaliencyPaths::None})
        CHECK(parse_saliency(saliency_name(p)) == p);
    CHECK(has_fringe_path(SaliencyPaths::BtOnly));
    CHECK_FALSE(has_speckle_path(SaliencyPaths::BtOnly));
    CHECK(has_speckle_path(SaliencyPaths::BcOnly));
    CHECK_FALSE(has_fringe_path(SaliencyPaths::None));
    CHECK_THROWS_AS(parse_saliency("sometimes"), std::invalid_argument);
}

TEST_CASE("decoder restores the input resolution with probabilities in (0,1)") {
    Rng rng(1);
    ParamStore<double> ps;
    SaliencyDecoder<double> dec(ps, "sal", 16, rng);
    CHECK(dec.attached());
    Tape<double> t(false);
    const auto f = random_tensor({2, 16, 32, 32}, rng, -2, 2);
    const auto p = dec.probability(t.constant(f));
    CHECK(p.shape == Shape{2, 1, 128, 128});
    CHECK(std::all_of(p.data.begin(), p.data.end(), [](double v) { return v > 0.0 && v < 1.0; }));
    CHECK_FALSE(SaliencyDecoder<double>().attached());
}

TEST_CASE("zero-weight decoder predicts one half everywhere") {
    Rng rng(2);
    ParamStore<double> ps;
    SaliencyDecoder<double> dec(ps, "sal", 8, rng);
    for (auto& [name, p] : ps.items()) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    Tape<double> t(false);
    const auto p = dec.probability(t.constant(random_tensor({1, 8, 4, 5}, rng)));
    CHECK(p.shape == Shape{1, 1, 16, 20});
    for (double v : p.data) CHECK(v == 0.5);
}

TEST_CASE("inference graph is identical across the four path configurations") {
    Rng rng(3);
    const auto fr = random_tensor({1, 1, 32, 32}, rng, 0, 1).cast<float>();
    const auto sp = random_tensor({1, 1, 32, 32}, rng, 0, 1).cast<float>();
    const Model<float> both(small_config(SaliencyPaths::Both));
    const auto ref = both.predict(fr, sp);
    for (auto paths : {SaliencyPaths::BtOnly, SaliencyPaths::BcOnly, SaliencyPaths::None}) {
        const Model<float> m(small_config(paths));
        INFO(saliency_name(paths));
        CHECK(m.inference_parameter_count() == both.inference_parameter_count());
        const auto y = m.predict(fr, sp);
        CHECK(y.data == ref.data);
    }
    const Model<float> none(small_config(SaliencyPaths::None));
    CHECK(none.parameter_count() == none.inference_parameter_count());
    CHECK(both.parameter_count() > both.inference_parameter_count());
}

TEST_CASE("training forward returns one saliency map per attached decoder") {
    Rng rng(4);
    const auto fr = random_tensor({1, 1, 32, 32}, rng, 0, 1).cast<float>();
    const auto sp = random_tensor({1, 1, 32, 32}, rng, 0, 1).cast<float>();
    const std::pair<SaliencyPaths, std::size_t> cases[] = {
        {SaliencyPaths::Both, 2}, {SaliencyPaths::BtOnly, 1}, {SaliencyPaths::BcOnly, 1}, {SaliencyPaths::None, 0}};
    for (const auto& [paths, n] : cases) {
        const Model<float> m(small_config(paths));
        const auto out = m.forward(fr, sp, true);
        CHECK(out.saliency.size() == n);
        for (const auto& s : out.saliency) CHECK(s.shape == Shape{1, 1, 32, 32});
        CHECK(m.forward(fr, sp, false).saliency.empty());
    }
}
