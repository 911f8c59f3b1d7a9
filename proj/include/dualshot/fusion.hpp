#pragma once
// Cross-modal fusion: attention modules that map a feature map to a gate in
// (0,1) of the same shape, and the complementary gating that mixes the two
// modalities.

#include <memory>
#include <string>

#include "dualshot/cnn_branch.hpp"

namespace dualshot {

enum class AttentionKind { Daam, Se, Cbam };

AttentionKind parse_attention(const std::string& name);
std::string attention_name(AttentionKind kind);

template <class T>
class GateModule {
  public:
    virtual ~GateModule() = default;
    // [N,C,h,w] -> gate [N,C,h,w], entries in (0,1)
    virtual Var<T> operator()(const Var<T>& f) const = 0;
};

template <class T>
class Daam : public GateModule<T> {
  public:
    Daam(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng);
    Var<T> operator()(const Var<T>& f) const override;

    // Average over width ([N,C,h,1]) and over height ([N,C,1,w]).
    static Var<T> pool_rows(const Var<T>& f) { return ops::mean_over(f, ops::kAxisW); }
    static Var<T> pool_cols(const Var<T>& f) { return ops::mean_over(f, ops::kAxisH); }

    // Coordinate path and parallel channel/spatial path, both pre-fusion.
    Var<T> coordinate_weight(const Var<T>& f) const;
    Var<T> parallel_weight(const Var<T>& f) const;

    int channels;
    Conv<T> dconv, pconv, squeeze;
    Conv<T> gate_h, gate_w;
    Conv<T> feat, gap_gate, spatial_gate;
    Conv<T> out;
};

template <class T>
class SeAttention : public GateModule<T> {
  public:
    SeAttention(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng);
    Var<T> operator()(const Var<T>& f) const override;

    Conv<T> reduce, expand;
};

template <class T>
class CbamAttention : public GateModule<T> {
  public:
    CbamAttention(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng);
    Var<T> operator()(const Var<T>& f) const override;

    Conv<T> reduce, expand;
    Conv<T> spatial;
};

template <class T>
std::unique_ptr<GateModule<T>> make_gate(AttentionKind kind, ParamStore<T>& ps, const std::string& prefix,
                                         int channels, Rng& rng);

// Per-modality gated mixing; the two enhanced maps are summed.
template <class T>
struct FusionOutput {
    Var<T> fused, enhanced_sp, enhanced_fr, w_sp, w_fr;
};

template <class T>
FusionOutput<T> cross_modal_fuse(const Var<T>& f_sp, const Var<T>& f_fr, const GateModule<T>& gate_sp,
                                 const GateModule<T>& gate_fr);

// Gated mixing for precomputed gates: a*w + b*(1-w).
template <class T>
Var<T> complementary_mix(const Var<T>& a, const Var<T>& b, const Var<T>& w);

}  // namespace dualshot
