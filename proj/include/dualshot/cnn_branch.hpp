#pragma once
// Speckle-side feature extractor: a stride-4 convolutional stem followed by
// stacked hierarchical pooling blocks (dilated pyramid + dense connection).

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "dualshot/layers.hpp"

namespace dualshot {

class DimensionError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// Common interface of the two branch kinds so the assembly can swap them per modality.
template <class T>
class FeatureBranch {
  public:
    virtual ~FeatureBranch() = default;
    // image [N, 1, H, W] -> features [N, C, H/4, W/4]
    virtual Var<T> forward(const Var<T>& image, bool training) const = 0;
    virtual int channels() const = 0;
};

// Two stride-2 3x3 convolutions (1 -> C/2 -> C), each followed by a rectifier.
template <class T>
class Stem {
  public:
    Stem() = default;
    Stem(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng, bool batch_norm);
    Var<T> forward(const Var<T>& image, bool training) const;

    int channels = 0;

  private:
    Conv<T> conv1_, conv2_;
    BatchNorm<T> bn1_, bn2_;
};

template <class T>
class HpbBlock {
  public:
    static constexpr std::array<int, 3> kDilations{1, 6, 12};

    HpbBlock() = default;
    HpbBlock(ParamStore<T>& ps, const std::string& prefix, int channels, Rng& rng, bool batch_norm);

    // conv([conv(sum_i conv(dilated_i(x))) ; x]), shape preserving.
    Var<T> forward(const Var<T>& x, bool training) const;
    // One pyramid sub-branch: dilated conv then its 3x3 conv (both rectified).
    Var<T> pyramid_branch(const Var<T>& x, int index, bool training) const;

    int channels = 0;
    std::array<Conv<T>, 3> dilated;
    std::array<Conv<T>, 3> refine;
    Conv<T> merge;
    Conv<T> fuse;

  private:
    std::array<BatchNorm<T>, 3> bn_dilated_, bn_refine_;
    BatchNorm<T> bn_merge_;
};

template <class T>
class CnnBranch : public FeatureBranch<T> {
  public:
    CnnBranch(ParamStore<T>& ps, const std::string& prefix, int channels, int depth, Rng& rng, bool batch_norm = false);
    Var<T> forward(const Var<T>& image, bool training) const override;
    int channels() const override { return stem_.channels; }
    const std::vector<HpbBlock<T>>& blocks() const { return blocks_; }

  private:
    Stem<T> stem_;
    std::vector<HpbBlock<T>> blocks_;
};

// Throws DimensionError unless both spatial dims are positive multiples of 4.
void check_stem_input(int height, int width);

}  // namespace dualshot
