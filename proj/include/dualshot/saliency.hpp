#pragma once
// Training-only saliency decoders that predict object presence at input
// resolution from a branch's scale-4 features.

#include <string>

#include "dualshot/layers.hpp"

namespace dualshot {

// Which branch outputs carry a decoder.  "bt" is the fringe (Transformer
// position) branch and "bc" the speckle (CNN position) branch.
enum class SaliencyPaths { Both, BtOnly, BcOnly, None };

SaliencyPaths parse_saliency(const std::string& name);
std::string saliency_name(SaliencyPaths paths);
inline bool has_fringe_path(SaliencyPaths p) { return p == SaliencyPaths::Both || p == SaliencyPaths::BtOnly; }
inline bool has_speckle_path(SaliencyPaths p) { return p == SaliencyPaths::Both || p == SaliencyPaths::BcOnly; }

template <class T>
class SaliencyDecoder {
  public:
    SaliencyDecoder() = default;
    SaliencyDecoder(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng);

    // [N, C, h, w] -> logits [N, 1, 4h, 4w]
    Var<T> logits(const Var<T>& features) const;
    // Logistic of the logits.
    Tensor<T> probability(const Var<T>& features) const;

    bool attached() const { return out.weight != nullptr; }

    Conv<T> up1, up2, out;
};

}  // namespace dualshot
