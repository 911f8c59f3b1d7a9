#pragma once
// Central-difference gradient checks in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "dualshot/autograd.hpp"
#include "dualshot/ops.hpp"
#include "dualshot/rng.hpp"

namespace testing {

using dualshot::ParamStore;
using dualshot::Rng;
using dualshot::Tape;
using dualshot::Tensor;
using dualshot::Var;

struct GradResult {
    double worst = 0.0;  // largest per-tensor relative error
    std::string where;
    bool crossed = false;  // some step changed the activation pattern; the draw says nothing
};

// ||a - n|| / max(||a||, ||n||), with a floor so gradients that vanish analytically
// (rounding-level values) compare as equal.
inline double rel_error(const std::vector<double>& a, const std::vector<double>& n) {
    double d = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += (a[i] - n[i]) * (a[i] - n[i]);
        na += a[i] * a[i];
        nn += n[i] * n[i];
    }
    const double den = std::max({std::sqrt(na), std::sqrt(nn), 1e-10});
    return std::sqrt(d) / den;
}

inline Tensor<double> random_tensor(dualshot::Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

// Scalar reduction <out, R> with a fixed random R so every output element carries a distinct weight.
inline Var<double> project(const Var<double>& out, const Tensor<double>& r) {
    return dualshot::ops::sum_all(dualshot::ops::mul(out, out.tape().constant(r)));
}

// Overwrites every trainable tensor (biases included) with U(-scale, scale) draws.
inline void randomize(ParamStore<double>& ps, Rng& rng, double scale = 0.5) {
    for (auto& [name, p] : ps.items()) {
        if (!p->trainable) continue;
        for (auto& v : p->value.data) v = rng.uniform(-scale, scale);
    }
}

inline void fill(dualshot::Parameter<double>* p, double v) {
    if (p) std::fill(p->value.data.begin(), p->value.data.end(), v);
}

using ScalarFn = std::function<double()>;

inline double central_difference(double& x, const ScalarFn& f, double h) {
    const double keep = x;
    x = keep + h;
    const double fp = f();
    x = keep - h;
    const double fm = f();
    x = keep;
    return (fp - fm) / (2 * h);
}

// Checks every trainable tensor of ps.  loss builds the scalar on the given tape.
// Central differences are meaningless when a step crosses a rectifier kink or a
// max tie, so such draws are flagged and callers redraw.
inline GradResult check_params(ParamStore<double>& ps, const std::function<Var<double>(Tape<double>&)>& loss,
                               double h = 1e-4) {
    ps.zero_grad();
    {
        Tape<double> tape;
        auto l = loss(tape);
        tape.backward(l);
    }
    std::uint64_t base = 0;
    GradResult res;
    auto eval = [&] {
        dualshot::ops::KinkProbe probe;
        Tape<double> tape(false);
        const double v = loss(tape).value().data[0];
        if (probe.pattern() != base) res.crossed = true;
        return v;
    };
    {
        dualshot::ops::KinkProbe probe;
        Tape<double> tape(false);
        loss(tape);
        base = probe.pattern();
    }
    for (auto& [name, p] : ps.items()) {
        if (!p->trainable) continue;
        std::vector<double> analytic = p->grad.data, numeric(p->value.size());
        if (analytic.empty()) analytic.assign(p->value.size(), 0.0);
        for (std::size_t i = 0; i < p->value.size(); ++i) numeric[i] = central_difference(p->value.data[i], eval, h);
        const double e = rel_error(analytic, numeric);
        if (e > res.worst) {
            res.worst = e;
            res.where = name;
        }
    }
    return res;
}

// Checks d loss / d x for a leaf input.
inline double check_input(Tensor<double>& x, const std::function<Var<double>(Tape<double>&, const Var<double>&)>& loss,
                          double h = 1e-4) {
    std::vector<double> analytic;
    {
        Tape<double> tape;
        auto xv = tape.constant(x, true);
        auto l = loss(tape, xv);
        tape.backward(l);
        analytic = tape.grad(xv.id()).data;
    }
    auto eval = [&] {
        Tape<double> tape(false);
        return loss(tape, tape.constant(x)).value().data[0];
    };
    std::vector<double> numeric(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) numeric[i] = central_difference(x.data[i], eval, h);
    return rel_error(analytic, numeric);
}

}  // namespace testing
