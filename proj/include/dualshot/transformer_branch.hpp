#pragma once
// Fringe-side feature extractor: the same convolutional stem as the CNN
// branch, then Lite Transformer blocks with long-short range attention.
//
// Each block normalizes over channels and splits them in half.  The global
// half runs multi-head self-attention over the row-major token sequence of
// the stride-4 grid; the local half runs a depthwise 3x3 convolution.  The
// halves are concatenated and added back to the input, followed by a
// pointwise feed-forward network with its own residual.

#include <string>
#include <vector>

#include "dualshot/cnn_branch.hpp"

namespace dualshot {

struct LtbOptions {
    int heads = 4;
    int ffn_expansion = 2;
};

template <class T>
class LtbBlock {
  public:
    LtbBlock() = default;
    LtbBlock(ParamStore<T>& ps, const std::string& prefix, int channels, const LtbOptions& opt, Rng& rng);

    Var<T> forward(const Var<T>& x) const;
    // Projections + attention on a [N, C/2, h, w] map; no normalization, no local path.
    Var<T> attention_path(const Var<T>& global_half) const;

    int channels = 0;
    int heads = 0;
    LayerNorm<T> norm1, norm2;
    Conv<T> query, key, value, proj;
    Conv<T> local;
    Conv<T> ffn_in, ffn_out;
};

template <class T>
class TransformerBranch : public FeatureBranch<T> {
  public:
    TransformerBranch(ParamStore<T>& ps, const std::string& prefix, int channels, int depth, const LtbOptions& opt,
                      Rng& rng, bool batch_norm = false);
    Var<T> forward(const Var<T>& image, bool training) const override;
    // Convolutional pre-feature stage alone.
    Var<T> pre_feature(const Var<T>& image, bool training) const { return stem_.forward(image, training); }
    int channels() const override { return stem_.channels; }
    const std::vector<LtbBlock<T>>& blocks() const { return blocks_; }

  private:
    Stem<T> stem_;
    std::vector<LtbBlock<T>> blocks_;
};

}  // namespace dualshot
