#include "dualshot/losses_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dualshot {

void LossConfig::validate() const {
    if (!(z_n >= 0.0 && z_n <= 1.0)) throw std::invalid_argument("z_N must lie in [0, 1]");
    if (see_window < 1) throw std::invalid_argument("SEE window radius must be >= 1");
    if (!(bce_epsilon > 0.0 && bce_epsilon < 0.5)) throw std::invalid_argument("bce epsilon must lie in (0, 0.5)");
}

namespace {

struct ModeTerms {
    double l1, l2, lse, e1, e2;
};

ModeTerms mode_terms(const MixtureParams& p, double d) {
    ModeTerms t;
    t.e1 = (p.mu1 - d) / p.sigma1;
    t.e2 = (p.mu2 - d) / p.sigma2;
    t.l1 = std::log(p.w1) - std::log(p.sigma1) - 0.5 * t.e1 * t.e1;
    t.l2 = std::log1p(-p.w1) - std::log(p.sigma2) - 0.5 * t.e2 * t.e2;
    const double mx = std::max(t.l1, t.l2);
    t.lse = mx + std::log(std::exp(t.l1 - mx) + std::exp(t.l2 - mx));
    return t;
}

}  // namespace

double nll_loss(const MixtureParams& p, double d) { return -mode_terms(p, d).lse; }

std::array<double, 5> nll_gradient(const MixtureParams& p, double d) {
    const ModeTerms t = mode_terms(p, d);
    const double g1 = std::exp(t.l1 - t.lse), g2 = std::exp(t.l2 - t.lse);
    return {
        -(g1 / p.w1 - g2 / (1.0 - p.w1)),
        g1 * t.e1 / p.sigma1,
        g1 * (1.0 - t.e1 * t.e1) / p.sigma1,
        g2 * t.e2 / p.sigma2,
        g2 * (1.0 - t.e2 * t.e2) / p.sigma2,
    };
}

template <class T>
double bce_loss(std::span<const T> p, std::span<const std::uint8_t> target, double eps) {
    if (p.size() != target.size()) throw std::invalid_argument("bce_loss: probability and target sizes differ");
    if (p.empty()) return 0.0;
    double sum = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double q = std::clamp(static_cast<double>(p[i]), eps, 1.0 - eps);
        sum += target[i] != 0 ? std::log(q) : std::log(1.0 - q);
    }
    return -sum / static_cast<double>(p.size());
}

template double bce_loss<float>(std::span<const float>, std::span<const std::uint8_t>, double);
template double bce_loss<double>(std::span<const double>, std::span<const std::uint8_t>, double);

double total_loss(double l_n, double l_s, const LossConfig& cfg) { return cfg.z_n * l_n + (1.0 - cfg.z_n) * l_s; }

nlohmann::json MetricReport::to_json() const {
    nlohmann::json j;
    j["epe"] = epe;
    j["err3"] = err3;
    j["err5"] = err5;
    j["err10"] = err10;
    if (std::isnan(see)) {
        j["see"] = nullptr;
        j["see_note"] = "no edges";
    } else {
        j["see"] = see;
    }
    j["subset"] = subset;
    j["n_samples"] = n_samples;
    j["n_pixels"] = n_pixels;
    j["n_edge_pixels"] = n_edge_pixels;
    return j;
}

std::vector<std::uint8_t> edge_mask(std::span<const float> gt, std::span<const std::uint8_t> valid, int h, int w,
                                    double threshold) {
    std::vector<std::uint8_t> edges(gt.size(), 0);
    static constexpr int dy[4] = {-1, 1, 0, 0};
    static constexpr int dx[4] = {0, 0, -1, 1};
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (!valid[i]) continue;
            for (int k = 0; k < 4; ++k) {
                const int yy = y + dy[k], xx = x + dx[k];
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                const std::size_t j = static_cast<std::size_t>(yy) * w + xx;
                if (valid[j] && std::abs(static_cast<double>(gt[i]) - gt[j]) > threshold) {
                    edges[i] = 1;
                    break;
                }
            }
        }
    }
    return edges;
}

void MetricAccumulator::add(std::span<const float> pred, std::span<const float> gt,
                            std::span<const std::uint8_t> valid, int h, int w) {
    const std::size_t n = static_cast<std::size_t>(h) * w;
    if (pred.size() != n || gt.size() != n || valid.size() != n) {
        throw std::invalid_argument("metrics: raster sizes do not match " + std::to_string(h) + "x" +
                                    std::to_string(w));
    }
    ++samples_;
    for (std::size_t i = 0; i < n; ++i) {
        if (!valid[i]) continue;
        const double e = std::abs(static_cast<double>(pred[i]) - static_cast<double>(gt[i]));
        sum_abs_ += e;
        ++n_;
        over3_ += e > 3.0;
        over5_ += e > 5.0;
        over10_ += e > 10.0;
    }
    const auto edges = edge_mask(gt, valid, h, w, cfg_.edge_threshold);
    const int r = cfg_.see_window;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            if (!edges[i]) continue;
            double best = std::numeric_limits<double>::infinity();
            for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy) {
                for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
                    const double e = std::abs(static_cast<double>(pred[static_cast<std::size_t>(yy) * w + xx]) -
                                              static_cast<double>(gt[i]));
                    best = std::min(best, e);
                }
            }
            sum_see_ += best;
            ++n_edge_;
        }
    }
}

MetricReport MetricAccumulator::report(const std::string& subset) const {
    if (n_ == 0) throw std::invalid_argument("metrics: no valid pixels");
    MetricReport m;
    const double n = static_cast<double>(n_);
    m.epe = sum_abs_ / n;
    m.err3 = 100.0 * static_cast<double>(over3_) / n;
    m.err5 = 100.0 * static_cast<double>(over5_) / n;
    m.err10 = 100.0 * static_cast<double>(over10_) / n;
    m.see = n_edge_ > 0 ? sum_see_ / static_cast<double>(n_edge_) : std::numeric_limits<double>::quiet_NaN();
    m.subset = subset;
    m.n_samples = samples_;
    m.n_pixels = n_;
    m.n_edge_pixels = n_edge_;
    return m;
}

MetricReport compute_metrics(std::span<const float> pred, std::span<const float> gt,
                             std::span<const std::uint8_t> valid, int h, int w, const LossConfig& cfg) {
    MetricAccumulator acc(cfg);
    acc.add(pred, gt, valid, h, w);
    return acc.report();
}

}  // namespace dualshot
