#pragma once
// Disparity head: projection of the fused map to a D-channel feature field,
// bilinear sampling at continuous coordinates, and a per-point perceptron
// emitting either a two-component Gaussian mixture, a single Gaussian or a
// plain regression value.

#include <array>
#include <string>
#include <vector>

#include "dualshot/layers.hpp"

namespace dualshot {

enum class HeadKind { Adaptive, Unimodal, Regression };

HeadKind parse_head(const std::string& name);
std::string head_name(HeadKind kind);
// Raw outputs per point: 5, 2 or 1.
int head_outputs(HeadKind kind);
// Perceptron widths from the feature dim D: D-D-D-5, D-D-2 or D-D-1.
std::vector<int> head_widths(HeadKind kind, int feature_dim);

inline constexpr double kSigmaMin = 1e-3;
inline constexpr double kDefaultThr = 1.1;

struct MixtureParams {
    double w1 = 0.5;  // weight of mode 1; mode 2 gets 1 - w1
    double mu1 = 0, sigma1 = 1;
    double mu2 = 0, sigma2 = 1;
};

double logistic(double x);
double softplus(double x);

// raw = (logit w1, mu1, sigma1_raw, mu2, sigma2_raw)
MixtureParams mixture_from_raw(const std::array<double, 5>& raw, double sigma_min = kSigmaMin);

// Sum over modes of w_m / sigma_m * exp(-(mu_m - d)^2 / (2 sigma_m^2)); no 1/sqrt(2 pi).
double mixture_density(const MixtureParams& p, double d);

// Picks the denser mode, or the mean of both modes when their density ratio is below thr.
double adaptive_select(const MixtureParams& p, double thr = kDefaultThr);

// Bilinear sample of field[n] at (u = row, v = col).  Throws std::out_of_range outside [0,h-1]x[0,w-1].
template <class T>
std::vector<T> sample_feature(const Tensor<T>& field, int n, double u, double v);

// Row/col coordinate in the field for an output pixel under the align-corners mapping.
double field_coord(int out_index, int out_size, int field_size);

// Stack of 1x1 convolutions on [N, Din, 1, P] point features; rectifiers between layers.
template <class T>
class Mlp {
  public:
    Mlp() = default;
    Mlp(ParamStore<T>& ps, const std::string& prefix, const std::vector<int>& widths, Rng& rng);
    Var<T> operator()(const Var<T>& x) const;

    std::vector<Conv<T>> layers;
};

template <class T>
class DisparityHead {
  public:
    DisparityHead(ParamStore<T>& ps, const std::string& prefix, int channels, int feature_dim, HeadKind kind, Rng& rng, std::array<double, 2> mu_init = {0.0, 0.0});

    // F_cm [N, C, h, w] -> field [N, D, h, w]
    Var<T> project(const Var<T>& fused) const { return projection(fused); }
    // Sampled field points [N, D, 1, P] -> raw head outputs [N, k, 1, P]
    Var<T> raw(const Var<T>& points) const { return mlp(points); }

    // Point disparity from one column of raw outputs.
    double decode(const double* raw, double thr) const;

    // Full-resolution disparity [N, 1, out_h, out_w] from a field tensor.
    Tensor<T> dense_infer(const Tensor<T>& field, int out_h, int out_w, double thr) const;

    HeadKind kind;
    int feature_dim;
    Conv<T> projection;
    Mlp<T> mlp;
};

}  // namespace dualshot
