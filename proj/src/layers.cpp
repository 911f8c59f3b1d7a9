#include "dualshot/layers.hpp"

#include <cmath>

namespace dualshot {

template <class T>
void initialize(Tensor<T>& w, Init init, int fan_in, Rng& rng) {
    switch (init) {
        case Init::HeUniform:
        case Init::FanInUniform: {
            const double bound = std::sqrt((init == Init::HeUniform ? 6.0 : 3.0) / std::max(fan_in, 1));
            for (auto& v : w.data) v = static_cast<T>(rng.uniform(-bound, bound));
            break;
        }
        case Init::SmallNormal:
            for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, 0.02));
            break;
        case Init::Zero:
            for (auto& v : w.data) v = T(0);
            break;
    }
}

template <class T>
Conv<T>::Conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, int kh, int kw, ops::ConvGeom g,
              Rng& rng, Init init, bool with_bias)
    : geom(g) {
    const int per_group = g.groups == 1 ? cin : 1;
    weight = &ps.add(name + "/weight", {cout, per_group, kh, kw});
    initialize(weight->value, init, per_group * kh * kw, rng);
    if (with_bias) bias = &ps.add(name + "/bias", {1, cout, 1, 1});
}

template <class T>
Var<T> Conv<T>::operator()(const Var<T>& x) const {
    Tape<T>& t = x.tape();
    return ops::conv2d(x, t.param(*weight), bias != nullptr ? t.param(*bias) : Var<T>(), geom);
}

template <class T>
Conv<T> conv3x3(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng, Init init, int dilation) {
    ops::ConvGeom g;
    g.pad_h = g.pad_w = dilation;
    g.dil_h = g.dil_w = dilation;
    return Conv<T>(ps, name, cin, cout, 3, 3, g, rng, init);
}

template <class T>
Conv<T> conv1x1(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng, Init init) {
    return Conv<T>(ps, name, cin, cout, 1, 1, ops::ConvGeom{}, rng, init);
}

template <class T>
LayerNorm<T>::LayerNorm(ParamStore<T>& ps, const std::string& name, int channels) {
    gamma = &ps.add(name + "/gamma", {1, channels, 1, 1});
    beta = &ps.add(name + "/beta", {1, channels, 1, 1});
    std::fill(gamma->value.data.begin(), gamma->value.data.end(), T(1));
}

template <class T>
Var<T> LayerNorm<T>::operator()(const Var<T>& x) const {
    Tape<T>& t = x.tape();
    return ops::layer_norm_channels(x, t.param(*gamma), t.param(*beta));
}

template <class T>
BatchNorm<T>::BatchNorm(ParamStore<T>& ps, const std::string& name, int channels) {
    gamma = &ps.add(name + "/gamma", {1, channels, 1, 1});
    beta = &ps.add(name + "/beta", {1, channels, 1, 1});
    running_mean = &ps.add(name + "/running_mean", {1, channels, 1, 1}, false);
    running_var = &ps.add(name + "/running_var", {1, channels, 1, 1}, false);
    std::fill(gamma->value.data.begin(), gamma->value.data.end(), T(1));
    std::fill(running_var->value.data.begin(), running_var->value.data.end(), T(1));
}

template <class T>
Var<T> BatchNorm<T>::operator()(const Var<T>& x, bool training) const {
    if (!enabled()) return x;
    Tape<T>& t = x.tape();
    return ops::batch_norm(x, t.param(*gamma), t.param(*beta), *running_mean, *running_var, training);
}

#define DUALSHOT_LAYERS_INSTANTIATE(T)                                                                      \
    template void initialize<T>(Tensor<T>&, Init, int, Rng&);                                                \
    template class Conv<T>;                                                                                 \
    template class LayerNorm<T>;                                                                            \
    template class BatchNorm<T>;                                                                            \
    template Conv<T> conv3x3<T>(ParamStore<T>&, const std::string&, int, int, Rng&, Init, int);              \
    template Conv<T> conv1x1<T>(ParamStore<T>&, const std::string&, int, int, Rng&, Init);

DUALSHOT_LAYERS_INSTANTIATE(float)
DUALSHOT_LAYERS_INSTANTIATE(double)

}  // namespace dualshot
