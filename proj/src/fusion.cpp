#include "dualshot/fusion.hpp"

namespace dualshot {

AttentionKind parse_attention(const std::string& name) {
    if (name == "daam") return AttentionKind::Daam;
    if (name == "se") return AttentionKind::Se;
    if (name == "cbam") return AttentionKind::Cbam;
    throw std::invalid_argument("unknown attention '" + name + "' (expected daam, se or cbam)");
}

std::string attention_name(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::Daam: return "daam";
        case AttentionKind::Se: return "se";
        case AttentionKind::Cbam: return "cbam";
    }
    return "daam";
}

namespace {

// Repeats the first and last rows once so a 3-tap column filter keeps the length.
template <class T>
Var<T> edge_pad_rows(const Var<T>& x) {
    const int len = x.shape()[2];
    return ops::concat<T>({ops::slice(x, 2, 0, 1), x, ops::slice(x, 2, len - 1, 1)}, 2);
}

template <class T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape) {
    if (x.shape() == shape) return x;
    return ops::add(x, x.tape().constant(Tensor<T>(shape)));
}

}  // namespace

template <class T>
Daam<T>::Daam(ParamStore<T>& ps, const std::string& p, int ch, Rng& rng) : channels(ch) {
    // Pooled maps have a unit axis, so the depthwise taps run along the pooled axis only.
    ops::ConvGeom dw;
    dw.groups = ch;
    dconv = Conv<T>(ps, p + "/dconv", ch, ch, 3, 1, dw, rng, Init::FanInUniform);
    pconv = conv1x1(ps, p + "/pconv", ch, ch, rng, Init::HeUniform);
    squeeze = conv1x1(ps, p + "/squeeze", ch, ch, rng, Init::FanInUniform);
    gate_h = conv1x1(ps, p + "/gate_h", ch, ch, rng, Init::FanInUniform);
    gate_w = conv1x1(ps, p + "/gate_w", ch, ch, rng, Init::FanInUniform);
    feat = conv3x3(ps, p + "/feat", ch, ch, rng, Init::FanInUniform);
    gap_gate = conv1x1(ps, p + "/gap_gate", ch, ch, rng, Init::FanInUniform);
    spatial_gate = conv3x3(ps, p + "/spatial_gate", ch, 1, rng, Init::FanInUniform);
    out = conv1x1(ps, p + "/out", ch, ch, rng, Init::FanInUniform);
}

template <class T>
Var<T> Daam<T>::coordinate_weight(const Var<T>& f) const {
    const Shape s = f.shape();
    const int n = s[0], c = s[1], h = s[2], w = s[3];
    auto rows = dconv(edge_pad_rows(pool_rows(f)));
    auto cols = dconv(edge_pad_rows(ops::reshape(pool_cols(f), {n, c, w, 1})));
    auto mixed = squeeze(ops::relu(pconv(ops::concat<T>({rows, cols}, 2))));
    auto fh = ops::slice(mixed, 2, 0, h);
    auto fw = ops::reshape(ops::slice(mixed, 2, h, w), {n, c, 1, w});
    return ops::mul(ops::sigmoid(gate_h(fh)), ops::sigmoid(gate_w(fw)));
}

template <class T>
Var<T> Daam<T>::parallel_weight(const Var<T>& f) const {
    auto f1 = feat(f);
    auto channel = ops::sigmoid(gap_gate(ops::mean_over(f1, ops::kAxisH | ops::kAxisW)));
    auto spatial = ops::sigmoid(spatial_gate(f1));
    return ops::mul(channel, spatial);
}

template <class T>
Var<T> Daam<T>::operator()(const Var<T>& f) const {
    if (f.shape()[1] != channels) throw DimensionError("DAAM channel mismatch");
    auto sum = ops::add(coordinate_weight(f), parallel_weight(f));
    return ops::sigmoid(out(sum));
}

template <class T>
SeAttention<T>::SeAttention(ParamStore<T>& ps, const std::string& p, int ch, Rng& rng) {
    const int mid = std::max(1, ch / 4);
    reduce = conv1x1(ps, p + "/reduce", ch, mid, rng, Init::HeUniform);
    expand = conv1x1(ps, p + "/expand", mid, ch, rng, Init::FanInUniform);
}

template <class T>
Var<T> SeAttention<T>::operator()(const Var<T>& f) const {
    auto g = ops::mean_over(f, ops::kAxisH | ops::kAxisW);
    auto wch = ops::sigmoid(expand(ops::relu(reduce(g))));
    return broadcast_to(wch, f.shape());
}

template <class T>
CbamAttention<T>::CbamAttention(ParamStore<T>& ps, const std::string& p, int ch, Rng& rng) {
    const int mid = std::max(1, ch / 4);
    reduce = conv1x1(ps, p + "/reduce", ch, mid, rng, Init::HeUniform);
    expand = conv1x1(ps, p + "/expand", mid, ch, rng, Init::FanInUniform);
    ops::ConvGeom g;
    g.pad_h = g.pad_w = 3;
    spatial = Conv<T>(ps, p + "/spatial", 2, 1, 7, 7, g, rng, Init::FanInUniform);
}

template <class T>
Var<T> CbamAttention<T>::operator()(const Var<T>& f) const {
    auto mlp = [&](const Var<T>& v) { return expand(ops::relu(reduce(v))); };
    auto avg = mlp(ops::mean_over(f, ops::kAxisH | ops::kAxisW));
    auto mx = mlp(ops::max_over(f, ops::kAxisH | ops::kAxisW));
    auto ca = ops::sigmoid(ops::add(avg, mx));
    auto refined = ops::mul(f, ca);
    auto pooled = ops::concat<T>({ops::mean_over(refined, ops::kAxisC), ops::max_over(refined, ops::kAxisC)}, 1);
    auto sa = ops::sigmoid(spatial(pooled));
    return ops::mul(ca, sa);
}

template <class T>
std::unique_ptr<GateModule<T>> make_gate(AttentionKind kind, ParamStore<T>& ps, const std::string& prefix,
                                         int channels, Rng& rng) {
    switch (kind) {
        case AttentionKind::Se: return std::make_unique<SeAttention<T>>(ps, prefix, channels, rng);
        case AttentionKind::Cbam: return std::make_unique<CbamAttention<T>>(ps, prefix, channels, rng);
        case AttentionKind::Daam: break;
    }
    return std::make_unique<Daam<T>>(ps, prefix, channels, rng);
}

template <class T>
Var<T> complementary_mix(const Var<T>& a, const Var<T>& b, const Var<T>& w) {
    // b + w*(a-b) is the same convex combination and is exact when a == b.
    return ops::add(b, ops::mul(w, ops::sub(a, b)));
}

template <class T>
FusionOutput<T> cross_modal_fuse(const Var<T>& f_sp, const Var<T>& f_fr, const GateModule<T>& gate_sp,
                                 const GateModule<T>& gate_fr) {
    if (f_sp.shape() != f_fr.shape()) {
        throw DimensionError("fusion inputs differ: " + to_string(f_sp.shape()) + " vs " + to_string(f_fr.shape()));
    }
    FusionOutput<T> o;
    o.w_sp = gate_sp(f_sp);
    o.w_fr = gate_fr(f_fr);
    o.enhanced_sp = complementary_mix(f_sp, f_fr, o.w_sp);
    o.enhanced_fr = complementary_mix(f_fr, f_sp, o.w_fr);
    o.fused = ops::add(o.enhanced_sp, o.enhanced_fr);
    return o;
}

#define DUALSHOT_FUSION_INSTANTIATE(T)                                                                       \
    template class Daam<T>;                                                                                  \
    template class SeAttention<T>;                                                                           \
    template class CbamAttention<T>;                                                                         \
    template std::unique_ptr<GateModule<T>> make_gate<T>(AttentionKind, ParamStore<T>&, const std::string&, \
                                                         int, Rng&);                                         \
    template Var<T> complementary_mix<T>(const Var<T>&, const Var<T>&, const Var<T>&);                       \
    template FusionOutput<T> cross_modal_fuse<T>(const Var<T>&, const Var<T>&, const GateModule<T>&,         \
                                                 const GateModule<T>&);

DUALSHOT_FUSION_INSTANTIATE(float)
DUALSHOT_FUSION_INSTANTIATE(double)

}  // namespace dualshot
