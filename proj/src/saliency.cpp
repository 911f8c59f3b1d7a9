#include "dualshot/saliency.hpp"

#include <cmath>

namespace dualshot {

SaliencyPaths parse_saliency(const std::string& name) {
    if (name == "both") return SaliencyPaths::Both;
    if (name == "bt_only") return SaliencyPaths::BtOnly;
    if (name == "bc_only") return SaliencyPaths::BcOnly;
    if (name == "none") return SaliencyPaths::None;
    throw std::invalid_argument("unknown saliency_paths '" + name + "' (expected both, bt_only, bc_only or none)");
}

std::string saliency_name(SaliencyPaths paths) {
    switch (paths) {
        case SaliencyPaths::Both: return "both";
        case SaliencyPaths::BtOnly: return "bt_only";
        case SaliencyPaths::BcOnly: return "bc_only";
        case SaliencyPaths::None: return "none";
    }
    return "both";
}

template <class T>
SaliencyDecoder<T>::SaliencyDecoder(ParamStore<T>& ps, const std::string& prefix, int ch, Rng& rng) {
    const int half = std::max(1, ch / 2);
    up1 = conv3x3(ps, prefix + "/up1", ch, half, rng, Init::HeUniform);
    up2 = conv3x3(ps, prefix + "/up2", half, half, rng, Init::HeUniform);
    out = conv1x1(ps, prefix + "/out", half, 1, rng, Init::FanInUniform);
}

template <class T>
Var<T> SaliencyDecoder<T>::logits(const Var<T>& f) const {
    auto x = ops::relu(up1(ops::upsample_nearest2(f)));
    x = ops::relu(up2(ops::upsample_nearest2(x)));
    return out(x);
}

template <class T>
Tensor<T> SaliencyDecoder<T>::probability(const Var<T>& f) const {
    return ops::sigmoid(logits(f)).value();
}

template class SaliencyDecoder<float>;
template class SaliencyDecoder<double>;

}  // namespace dualshot
