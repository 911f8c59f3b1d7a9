#include "dualshot/transformer_branch.hpp"

namespace dualshot {

template <class T>
LtbBlock<T>::LtbBlock(ParamStore<T>& ps, const std::string& prefix, int ch, const LtbOptions& opt, Rng& rng)
    : channels(ch), heads(opt.heads) {
    if (ch % 2 != 0) throw DimensionError("LTB needs an even channel count, got " + std::to_string(ch));
    const int half = ch / 2;
    if (half % opt.heads != 0) throw DimensionError("attention width not divisible by head count");
    norm1 = LayerNorm<T>(ps, prefix + "/norm1", ch);
    norm2 = LayerNorm<T>(ps, prefix + "/norm2", ch);
    query = conv1x1(ps, prefix + "/attn/query", half, half, rng, Init::SmallNormal);
    // Softmax over keys is blind to a key bias, so the key projection has none.
    key = Conv<T>(ps, prefix + "/attn/key", half, half, 1, 1, ops::ConvGeom{}, rng, Init::SmallNormal, false);
    value = conv1x1(ps, prefix + "/attn/value", half, half, rng, Init::SmallNormal);
    proj = conv1x1(ps, prefix + "/attn/proj", half, half, rng, Init::SmallNormal);
    ops::ConvGeom dw;
    dw.pad_h = dw.pad_w = 1;
    dw.groups = half;
    local = Conv<T>(ps, prefix + "/local", half, half, 3, 3, dw, rng, Init::FanInUniform);
    ffn_in = conv1x1(ps, prefix + "/ffn/in", ch, ch * opt.ffn_expansion, rng, Init::HeUniform);
    ffn_out = conv1x1(ps, prefix + "/ffn/out", ch * opt.ffn_expansion, ch, rng, Init::FanInUniform);
}

template <class T>
Var<T> LtbBlock<T>::attention_path(const Var<T>& g) const {
    auto a = ops::attention(query(g), key(g), value(g), heads);
    return proj(a);
}

template <class T>
Var<T> LtbBlock<T>::forward(const Var<T>& x) const {
    if (x.shape()[1] != channels) {
        throw DimensionError("LTB expects " + std::to_string(channels) + " channels, got " +
                             std::to_string(x.shape()[1]));
    }
    const int half = channels / 2;
    auto y = norm1(x);
    auto global = attention_path(ops::slice(y, 1, 0, half));
    auto loc = local(ops::slice(y, 1, half, half));
    auto x1 = ops::add(x, ops::concat<T>({global, loc}, 1));
    auto f = ffn_out(ops::relu(ffn_in(norm2(x1))));
    return ops::add(x1, f);
}

template <class T>
TransformerBranch<T>::TransformerBranch(ParamStore<T>& ps, const std::string& prefix, int ch, int depth,
                                        const LtbOptions& opt, Rng& rng, bool batch_norm)
    : stem_(ps, prefix + "/stem", ch, rng, batch_norm) {
    if (depth < 1) throw std::invalid_argument("transformer branch depth must be >= 1");
    for (int i = 0; i < depth; ++i) blocks_.emplace_back(ps, prefix + "/ltb" + std::to_string(i), ch, opt, rng);
}

template <class T>
Var<T> TransformerBranch<T>::forward(const Var<T>& image, bool training) const {
    auto x = stem_.forward(image, training);
    for (const auto& b : blocks_) x = b.forward(x);
    return x;
}

template class LtbBlock<float>;
template class LtbBlock<double>;
template class TransformerBranch<float>;
template class TransformerBranch<double>;

}  // namespace dualshot
