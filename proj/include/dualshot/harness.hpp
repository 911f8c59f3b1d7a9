#pragma once
// Training, evaluation, ablation sweeps and single-pair inference.

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dualshot/model.hpp"
#include "dualshot/slsim.hpp"

namespace dualshot {

struct RunConfig {
    ModelConfig model;
    std::string manifest;
    int epochs = 50;
    int batch_size = 2;
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::string out_dir = "run";
    int max_steps = 0;             // >0 caps the total step count
    int points_per_image = 1024;   // supervised points per image per step
    double edge_point_fraction = 0.5;
    double val_fraction = 0.0;     // tail of the train split held out; 0 validates on the train split itself
    int val_max_samples = 16;
    int eval_every = 0;            // steps between validations; 0 = once per epoch
    bool auto_mu_init = true;      // seed the mode-mean biases from train-set disparity quantiles
    bool verbose = false;

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
    std::filesystem::path checkpoint;  // best validation EPE
    double best_val_epe = 0;
    double final_val_epe = 0;          // validation EPE after the last step
    int best_step = 0;
    int steps = 0;
    double seconds = 0;                // wall time of the training loop
    std::vector<double> loss_curve;    // total loss per step
};

class TrainingError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

TrainResult train(const RunConfig& run);

// Adam over the trainable parameters of a store.
class Adam {
  public:
    Adam(ParamStore<float>& ps, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step();
    int steps() const { return t_; }

  private:
    struct Slot {
        Parameter<float>* p;
        std::vector<float> m, v;
    };
    std::vector<Slot> slots_;
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
};

// Supervised point set for one sample: a mix of valid edge pixels and uniformly drawn valid pixels.
struct PointSet {
    std::vector<int> ys, xs;
    std::vector<float> target;
    std::vector<float> weight;
};
PointSet sample_points(const slsim::Sample& s, int count, double edge_fraction, Rng& rng);

Batch<float> make_batch(const std::vector<const slsim::Sample*>& samples, int points, double edge_fraction, Rng& rng);

enum class Subset { Full, OccludedOnly };
Subset parse_subset(const std::string& s);
std::string subset_name(Subset s);

class EmptySubsetError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

struct SampleError {
    std::string path;
    bool occluded = false;
    double abs_error_sum = 0;
    std::int64_t valid_pixels = 0;
};

struct EvalResult {
    MetricReport report;
    std::vector<SampleError> per_sample;
};

using Predictor = std::function<std::vector<float>(const slsim::Sample&)>;

Predictor model_predictor(const Model<float>& model);

// Metrics over the selected split/subset; optional error-map images go to map_dir.
EvalResult evaluate(const Predictor& predict, const slsim::Manifest& manifest, Subset subset,
                    const std::string& split = "test", const std::optional<std::filesystem::path>& map_dir = {},
                    const LossConfig& metrics = {});
EvalResult evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest, Subset subset,
                    const std::string& split = "test", const std::optional<std::filesystem::path>& map_dir = {});

enum class SweepKind { Arch, Zn, Depth, Attention, Saliency, Head };
SweepKind parse_sweep(const std::string& s);
std::string sweep_name(SweepKind k);

struct AblationSpec {
    SweepKind kind = SweepKind::Head;
    std::vector<std::string> values;   // empty: the default row set for the kind
    std::vector<std::uint64_t> seeds = {0};
};

std::vector<std::string> default_sweep_values(SweepKind kind);
// Applies one sweep value to a base config; throws on an invalid value.
ModelConfig apply_sweep_value(ModelConfig base, SweepKind kind, const std::string& value);
std::string sweep_row_label(SweepKind kind, const std::string& value);

struct AblationRow {
    std::string value, label;
    std::vector<MetricReport> per_seed;
    MetricReport mean;
};

struct AblationTable {
    SweepKind kind;
    std::vector<AblationRow> rows;

    nlohmann::json to_json() const;
    std::string to_markdown() const;
};

AblationTable ablate(const AblationSpec& spec, const RunConfig& base);

// Single-channel float raster file: "SLPLANE1", u32 LE header length, JSON {"height","width"}, f32 LE data.
struct Plane {
    int height = 0, width = 0;
    std::vector<float> data;
};
void write_plane(const Plane& p, const std::filesystem::path& path);
Plane read_plane(const std::filesystem::path& path);

// 8-bit binary graymap of |error| mapped linearly from [0, 10] px onto [0, 255]; invalid pixels are 0.
std::vector<std::uint8_t> error_map_pixels(std::span<const float> pred, std::span<const float> gt,
                                           std::span<const std::uint8_t> valid);
void write_pgm(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& px);

struct InferResult {
    std::filesystem::path disparity_path;
    std::optional<std::filesystem::path> error_map_path;
    std::optional<double> mean_abs_error;
};

// fringe/speckle/gt may be plane files or sample files (the matching plane is taken).
InferResult infer(const std::filesystem::path& checkpoint, const std::filesystem::path& fringe,
                  const std::filesystem::path& speckle, const std::optional<std::filesystem::path>& gt,
                  const std::filesystem::path& out_dir);

}  // namespace dualshot
