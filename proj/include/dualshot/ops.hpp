#pragma once
// Differentiable tensor ops.  Every op reads its inputs from the tape,
// records its output and, when any input needs a gradient, a backward closure.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <vector>

#include "dualshot/autograd.hpp"

namespace dualshot::ops {

struct ConvGeom {
    int stride = 1;
    int pad_h = 0;
    int pad_w = 0;
    int dil_h = 1;
    int dil_w = 1;
    // 1 = dense convolution; == input channels = depthwise (multiplier 1).
    int groups = 1;
};

// Spatial output size of a convolution along one axis.
inline int conv_out(int in, int k, int stride, int pad, int dil) { return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1; }

// weight [Co, Ci/groups, kh, kw]; bias [1, Co, 1, 1] or invalid.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeom& g);

template <class T>
Var<T> relu(const Var<T>& x);

// While alive, fingerprints the activation pattern of every rectifier (input
// sign) and max reduction (argmax).  Finite-difference checks compare the
// fingerprint of each perturbed evaluation against the unperturbed one to
// detect steps that cross a point where the function is not differentiable.
class KinkProbe {
  public:
    KinkProbe();
    ~KinkProbe();
    KinkProbe(const KinkProbe&) = delete;
    KinkProbe& operator=(const KinkProbe&) = delete;
    std::uint64_t pattern() const { return hash_; }
    void observe(std::uint64_t v) { hash_ = (hash_ ^ v) * 0x100000001b3ULL; }
    static KinkProbe* active();

  private:
    KinkProbe* prev_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};
template <class T>
Var<T> sigmoid(const Var<T>& x);

// Broadcasting elementwise ops: each axis must match or be 1 on one side.
template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
// scale * x + shift
template <class T>
Var<T> affine(const Var<T>& x, T scale, T shift);

template <class T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <class T>
Var<T> slice(const Var<T>& x, int axis, int start, int length);
template <class T>
Var<T> reshape(const Var<T>& x, Shape shape);

// Reductions with kept (size-1) axes; axes is a bitmask over N,C,H,W (bit 0 = N).
template <class T>
Var<T> mean_over(const Var<T>& x, unsigned axes);
template <class T>
Var<T> max_over(const Var<T>& x, unsigned axes);
inline constexpr unsigned kAxisN = 1u, kAxisC = 2u, kAxisH = 4u, kAxisW = 8u;

// Normalizes each spatial position over channels; gamma/beta are [1, C, 1, 1].
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5));

// Per-channel batch normalization over N, H, W.  In eval mode the running
// statistics are used; in training mode they are updated with `momentum`.
template <class T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, Parameter<T>& running_mean,
                  Parameter<T>& running_var, bool training, T momentum = T(0.1), T eps = T(1e-5));

template <class T>
Var<T> upsample_nearest2(const Var<T>& x);

// Multi-head scaled dot-product self-attention over the H*W token sequence
// (row-major flattening).  q, k, v are [N, dm, H, W]; dm must divide by heads.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, int heads);

// Row-stochastic attention matrix [L, L] of one batch element and head, for inspection.
template <class T>
std::vector<T> attention_weights(const Tensor<T>& q, const Tensor<T>& k, int heads, int batch, int head);

// Bilinear sampling of a field [N, D, h, w] at continuous (row, col) points.
// coords is [N, 2, 1, P] (channel 0 = row, channel 1 = col), clamped to the
// field domain.  Output is [N, D, 1, P].
template <class T>
Var<T> bilinear_sample(const Var<T>& field, const Tensor<T>& coords);

// Scalar losses over point sets.  target/weight are [N, 1, 1, P]; the result
// is the weight-normalized mean, shape [1, 1, 1, 1].
// raw channels: logit(w1), mu1, sigma1_raw, mu2, sigma2_raw.
template <class T>
Var<T> mixture_nll(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight, T sigma_min);
// raw channels: mu, sigma_raw.
template <class T>
Var<T> unimodal_nll(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight, T sigma_min);
template <class T>
Var<T> l1_loss(const Var<T>& raw, const Tensor<T>& target, const Tensor<T>& weight);
// Binary cross-entropy of sigmoid(logits) against a 0/1 target, mean over all elements.
template <class T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target, T eps);

// Sum of all elements, [1, 1, 1, 1].
template <class T>
Var<T> sum_all(const Var<T>& x);
template <class T>
Var<T> mean_all(const Var<T>& x);

}  // namespace dualshot::ops
