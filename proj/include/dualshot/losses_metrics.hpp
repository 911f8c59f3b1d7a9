#pragma once
// Scalar training objectives and disparity evaluation metrics.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dualshot/head.hpp"
#include "json.hpp"

namespace dualshot {

struct LossConfig {
    double z_n = 0.8;
    double bce_epsilon = 1e-7;
    int see_window = 1;
    double edge_threshold = 3.0;

    void validate() const;
};

// -log r(d) evaluated with log-sum-exp.
double nll_loss(const MixtureParams& p, double d);
// d nll / d (w1, mu1, sigma1, mu2, sigma2)
std::array<double, 5> nll_gradient(const MixtureParams& p, double d);

// Mean binary cross-entropy of probabilities p (clamped to [eps, 1-eps]) against 0/1 targets.
template <class T>
double bce_loss(std::span<const T> p, std::span<const std::uint8_t> target, double eps = 1e-7);

double total_loss(double l_n, double l_s, const LossConfig& cfg);

struct MetricReport {
    double epe = 0, err3 = 0, err5 = 0, err10 = 0;
    double see = 0;  // NaN when there are no edge pixels
    std::string subset = "full";
    int n_samples = 0;
    std::int64_t n_pixels = 0;
    std::int64_t n_edge_pixels = 0;

    nlohmann::json to_json() const;
};

// Valid pixels whose ground truth differs from a valid 4-neighbour by more than the threshold.
std::vector<std::uint8_t> edge_mask(std::span<const float> gt, std::span<const std::uint8_t> valid, int height,
                                    int width, double threshold);

// Pools per-pixel errors over any number of samples.
class MetricAccumulator {
  public:
    explicit MetricAccumulator(LossConfig cfg = {}) : cfg_(cfg) {}
    void add(std::span<const float> pred, std::span<const float> gt, std::span<const std::uint8_t> valid, int height,
             int width);
    MetricReport report(const std::string& subset = "full") const;
    std::int64_t pixels() const { return n_; }
    double abs_error_sum() const { return sum_abs_; }

  private:
    LossConfig cfg_;
    int samples_ = 0;
    std::int64_t n_ = 0, over3_ = 0, over5_ = 0, over10_ = 0;
    double sum_abs_ = 0;
    std::int64_t n_edge_ = 0;
    double sum_see_ = 0;
};

MetricReport compute_metrics(std::span<const float> pred, std::span<const float> gt,
                             std::span<const std::uint8_t> valid, int height, int width, const LossConfig& cfg = {});

}  // namespace dualshot
