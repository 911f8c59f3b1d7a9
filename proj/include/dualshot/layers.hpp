#pragma once
// Parameterized building blocks shared by the branch, fusion, head and saliency modules.

#include <string>

#include "dualshot/autograd.hpp"
#include "dualshot/ops.hpp"
#include "dualshot/rng.hpp"

namespace dualshot {

enum class Init {
    HeUniform,     // U(+-sqrt(6 / fan_in)), for convolutions feeding a rectifier
    FanInUniform,  // U(+-sqrt(3 / fan_in))
    SmallNormal,   // N(0, 0.02^2), attention projections
    Zero,
};

template <class T>
void initialize(Tensor<T>& w, Init init, int fan_in, Rng& rng);

template <class T>
class Conv {
  public:
    Conv() = default;
    Conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, int kh, int kw, ops::ConvGeom geom, Rng& rng,
         Init init = Init::FanInUniform, bool with_bias = true);

    Var<T> operator()(const Var<T>& x) const;

    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
    ops::ConvGeom geom;
};

// 3x3 convolution, stride 1, "same" padding at the given dilation.
template <class T>
Conv<T> conv3x3(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng, Init init, int dilation = 1);
template <class T>
Conv<T> conv1x1(ParamStore<T>& ps, const std::string& name, int cin, int cout, Rng& rng, Init init);

template <class T>
class LayerNorm {
  public:
    LayerNorm() = default;
    LayerNorm(ParamStore<T>& ps, const std::string& name, int channels);
    Var<T> operator()(const Var<T>& x) const;

    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
};

// Optional per-channel batch normalization; a default-constructed instance is the identity.
template <class T>
class BatchNorm {
  public:
    BatchNorm() = default;
    BatchNorm(ParamStore<T>& ps, const std::string& name, int channels);
    Var<T> operator()(const Var<T>& x, bool training) const;
    bool enabled() const { return gamma != nullptr; }

    Parameter<T>* gamma = nullptr;
    Parameter<T>* beta = nullptr;
    Parameter<T>* running_mean = nullptr;
    Parameter<T>* running_var = nullptr;
};

}  // namespace dualshot
