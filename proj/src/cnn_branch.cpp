#include "dualshot/cnn_branch.hpp"

namespace dualshot {

void check_stem_input(int height, int width) {
    if (height <= 0 || width <= 0 || height % 4 != 0 || width % 4 != 0) {
        throw DimensionError("input " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not divisible by 4");
    }
}

template <class T>
Stem<T>::Stem(ParamStore<T>& ps, const std::string& prefix, int ch, Rng& rng, bool batch_norm) : channels(ch) {
    ops::ConvGeom g;
    g.stride = 2;
    g.pad_h = g.pad_w = 1;
    const int half = std::max(1, ch / 2);
    conv1_ = Conv<T>(ps, prefix + "/conv1", 1, half, 3, 3, g, rng, Init::HeUniform);
    conv2_ = Conv<T>(ps, prefix + "/conv2", half, ch, 3, 3, g, rng, Init::HeUniform);
    if (batch_norm) {
        bn1_ = BatchNorm<T>(ps, prefix + "/bn1", half);
        bn2_ = BatchNorm<T>(ps, prefix + "/bn2", ch);
    }
}

template <class T>
Var<T> Stem<T>::forward(const Var<T>& image, bool training) const {
    const Shape& s = image.shape();
    if (s[1] != 1) throw DimensionError("stem expects a single-channel image");
    check_stem_input(s[2], s[3]);
    auto x = ops::relu(bn1_(conv1_(image), training));
    return ops::relu(bn2_(conv2_(x), training));
}

template <class T>
HpbBlock<T>::HpbBlock(ParamStore<T>& ps, const std::string& prefix, int ch, Rng& rng, bool batch_norm)
    : channels(ch) {
    for (std::size_t i = 0; i < kDilations.size(); ++i) {
        const std::string tag = "/r" + std::to_string(kDilations[i]);
        dilated[i] = conv3x3(ps, prefix + tag + "/dilated", ch, ch, rng, Init::HeUniform, kDilations[i]);
        refine[i] = conv3x3(ps, prefix + tag + "/refine", ch, ch, rng, Init::HeUniform);
        if (batch_norm) {
            bn_dilated_[i] = BatchNorm<T>(ps, prefix + tag + "/bn_dilated", ch);
            bn_refine_[i] = BatchNorm<T>(ps, prefix + tag + "/bn_refine", ch);
        }
    }
    merge = conv3x3(ps, prefix + "/merge", ch, ch, rng, Init::HeUniform);
    fuse = conv3x3(ps, prefix + "/fuse", 2 * ch, ch, rng, Init::FanInUniform);
    if (batch_norm) bn_merge_ = BatchNorm<T>(ps, prefix + "/bn_merge", ch);
}

template <class T>
Var<T> HpbBlock<T>::pyramid_branch(const Var<T>& x, int index, bool training) const {
    const auto i = static_cast<std::size_t>(index);
    auto y = ops::relu(bn_dilated_[i](dilated[i](x), training));
    return ops::relu(bn_refine_[i](refine[i](y), training));
}

template <class T>
Var<T> HpbBlock<T>::forward(const Var<T>& x, bool training) const {
    if (x.shape()[1] != channels) {
        throw DimensionError("HPB expects " + std::to_string(channels) + " channels, got " +
                             std::to_string(x.shape()[1]));
    }
    auto sum = pyramid_branch(x, 0, training);
    sum = ops::add(sum, pyramid_branch(x, 1, training));
    sum = ops::add(sum, pyramid_branch(x, 2, training));
    auto merged = ops::relu(bn_merge_(merge(sum), training));
    return fuse(ops::concat<T>({merged, x}, 1));
}

template <class T>
CnnBranch<T>::CnnBranch(ParamStore<T>& ps, const std::string& prefix, int ch, int depth, Rng& rng, bool batch_norm)
    : stem_(ps, prefix + "/stem", ch, rng, batch_norm) {
    if (depth < 1) throw std::invalid_argument("CNN branch depth must be >= 1");
    for (int i = 0; i < depth; ++i) blocks_.emplace_back(ps, prefix + "/hpb" + std::to_string(i), ch, rng, batch_norm);
}

template <class T>
Var<T> CnnBranch<T>::forward(const Var<T>& image, bool training) const {
    auto x = stem_.forward(image, training);
    for (const auto& b : blocks_) x = b.forward(x, training);
    return x;
}

template class Stem<float>;
template class Stem<double>;
template class HpbBlock<float>;
template class HpbBlock<double>;
template class CnnBranch<float>;
template class CnnBranch<double>;

}  // namespace dualshot
