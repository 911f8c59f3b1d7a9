#include "dualshot/head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dualshot {

HeadKind parse_head(const std::string& name) {
    if (name == "adaptive") return HeadKind::Adaptive;
    if (name == "unimodal") return HeadKind::Unimodal;
    if (name == "regression") return HeadKind::Regression;
    throw std::invalid_argument("unknown head '" + name + "' (expected adaptive, unimodal or regression)");
}

std::string head_name(HeadKind kind) {
    switch (kind) {
        case HeadKind::Adaptive: return "adaptive";
        case HeadKind::Unimodal: return "unimodal";
        case HeadKind::Regression: return "regression";
    }
    return "adaptive";
}

int head_outputs(HeadKind kind) {
    switch (kind) {
        case HeadKind::Adaptive: return 5;
        case HeadKind::Unimodal: return 2;
        case HeadKind::Regression: return 1;
    }
    return 5;
}

std::vector<int> head_widths(HeadKind kind, int d) {
    if (kind == HeadKind::Adaptive) return {d, d, d, 5};
    return {d, d, head_outputs(kind)};
}

double logistic(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

MixtureParams mixture_from_raw(const std::array<double, 5>& raw, double sigma_min) {
    MixtureParams p;
    // Kept strictly inside (0, 1) where the logistic saturates in double.
    p.w1 = std::clamp(logistic(raw[0]), 1e-15, 1.0 - 1e-15);
    p.mu1 = raw[1];
    p.sigma1 = softplus(raw[2]) + sigma_min;
    p.mu2 = raw[3];
    p.sigma2 = softplus(raw[4]) + sigma_min;
    return p;
}

double mixture_density(const MixtureParams& p, double d) {
    const double e1 = (p.mu1 - d) / p.sigma1;
    const double e2 = (p.mu2 - d) / p.sigma2;
    return p.w1 / p.sigma1 * std::exp(-0.5 * e1 * e1) + (1.0 - p.w1) / p.sigma2 * std::exp(-0.5 * e2 * e2);
}

double adaptive_select(const MixtureParams& p, double thr) {
    const double r1 = mixture_density(p, p.mu1);
    const double r2 = mixture_density(p, p.mu2);
    const bool first = r1 >= r2;
    const double d_max = first ? p.mu1 : p.mu2;
    const double r_max = first ? r1 : r2;
    const double r_min = first ? r2 : r1;
    if (r_min < 1e-30) return d_max;
    if (r_max / r_min < thr) return 0.5 * (p.mu1 + p.mu2);
    return d_max;
}

template <class T>
std::vector<T> sample_feature(const Tensor<T>& field, int n, double u, double v) {
    const int h = field.h(), w = field.w();
    if (!(u >= 0 && u <= h - 1 && v >= 0 && v <= w - 1)) {
        throw std::out_of_range("sample point (" + std::to_string(u) + ", " + std::to_string(v) +
                                ") outside the field domain");
    }
    const int r0 = std::min(static_cast<int>(std::floor(u)), std::max(h - 2, 0));
    const int c0 = std::min(static_cast<int>(std::floor(v)), std::max(w - 2, 0));
    const int r1 = std::min(r0 + 1, h - 1), c1 = std::min(c0 + 1, w - 1);
    const double fu = u - r0, fv = v - c0;
    std::vector<T> out(static_cast<std::size_t>(field.c()));
    for (int c = 0; c < field.c(); ++c) {
        const double a = field.at(n, c, r0, c0), b = field.at(n, c, r0, c1);
        const double cc = field.at(n, c, r1, c0), d = field.at(n, c, r1, c1);
        out[static_cast<std::size_t>(c)] =
            static_cast<T>((1 - fu) * ((1 - fv) * a + fv * b) + fu * ((1 - fv) * cc + fv * d));
    }
    return out;
}

double field_coord(int i, int out_size, int field_size) {
    if (out_size <= 1) return 0.0;
    return static_cast<double>(i) * (field_size - 1) / (out_size - 1);
}

template <class T>
Mlp<T>::Mlp(ParamStore<T>& ps, const std::string& prefix, const std::vector<int>& widths, Rng& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const bool last = i + 2 == widths.size();
        layers.push_back(conv1x1(ps, prefix + "/fc" + std::to_string(i), widths[i], widths[i + 1], rng,
                                 last ? Init::FanInUniform : Init::HeUniform));
    }
}

template <class T>
Var<T> Mlp<T>::operator()(const Var<T>& x) const {
    Var<T> y = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        y = layers[i](y);
        if (i + 1 < layers.size()) y = ops::relu(y);
    }
    return y;
}

template <class T>
DisparityHead<T>::DisparityHead(ParamStore<T>& ps, const std::string& prefix, int channels, int d, HeadKind k,
                                Rng& rng, std::array<double, 2> mu_init)
    : kind(k), feature_dim(d) {
    projection = conv1x1(ps, prefix + "/projection", channels, d, rng, Init::FanInUniform);
    mlp = Mlp<T>(ps, prefix + "/mlp", head_widths(k, d), rng);
    auto& bias = mlp.layers.back().bias->value.data;
    if (k == HeadKind::Adaptive) {
        bias[1] = static_cast<T>(mu_init[0]);
        bias[3] = static_cast<T>(mu_init[1]);
    } else {
        bias[0] = static_cast<T>(0.5 * (mu_init[0] + mu_init[1]));
    }
}

template <class T>
double DisparityHead<T>::decode(const double* r, double thr) const {
    switch (kind) {
        case HeadKind::Adaptive: return adaptive_select(mixture_from_raw({r[0], r[1], r[2], r[3], r[4]}), thr);
        case HeadKind::Unimodal:
        case HeadKind::Regression: return r[0];
    }
    return r[0];
}

template <class T>
Tensor<T> DisparityHead<T>::dense_infer(const Tensor<T>& field, int out_h, int out_w, double thr) const {
    const int n = field.n(), fh = field.h(), fw = field.w();
    if (out_h < fh || out_w < fw) throw std::invalid_argument("dense_infer output smaller than the field");
    Tensor<T> out({n, 1, out_h, out_w});
    const int total = out_h * out_w;
    const int chunk = 4096;
    const int k = head_outputs(kind);
    std::vector<double> col(static_cast<std::size_t>(k));
    for (int start = 0; start < total; start += chunk) {
        const int p = std::min(chunk, total - start);
        Tensor<T> coords({n, 2, 1, p});
        for (int b = 0; b < n; ++b) {
            for (int j = 0; j < p; ++j) {
                const int idx = start + j;
                coords.at(b, 0, 0, j) = static_cast<T>(field_coord(idx / out_w, out_h, fh));
                coords.at(b, 1, 0, j) = static_cast<T>(field_coord(idx % out_w, out_w, fw));
            }
        }
        Tape<T> tape(false);
        auto f = tape.constant(field);
        auto r = raw(ops::bilinear_sample(f, coords));
        const Tensor<T>& R = r.value();
        for (int b = 0; b < n; ++b) {
            for (int j = 0; j < p; ++j) {
                for (int c = 0; c < k; ++c) col[static_cast<std::size_t>(c)] = R.at(b, c, 0, j);
                const int idx = start + j;
                out.at(b, 0, idx / out_w, idx % out_w) = static_cast<T>(decode(col.data(), thr));
            }
        }
    }
    return out;
}

template std::vector<float> sample_feature<float>(const Tensor<float>&, int, double, double);
template std::vector<double> sample_feature<double>(const Tensor<double>&, int, double, double);
template class Mlp<float>;
template class Mlp<double>;
template class DisparityHead<float>;
template class DisparityHead<double>;

}  // namespace dualshot
