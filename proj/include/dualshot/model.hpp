#pragma once
// Full network: per-modality branches, cross-modal fusion, disparity head and
// the optional training-only saliency decoders.

#include <array>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dualshot/fusion.hpp"
#include "dualshot/head.hpp"
#include "dualshot/losses_metrics.hpp"
#include "dualshot/saliency.hpp"
#include "dualshot/transformer_branch.hpp"
#include "json.hpp"

namespace dualshot {

// Named "<fringe branch>_<speckle branch>".
enum class Arch { CnnCnn, CnnTrans, TransTrans, TransCnn };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch arch);
bool fringe_is_transformer(Arch arch);
bool speckle_is_transformer(Arch arch);

struct ModelConfig {
    Arch arch = Arch::TransCnn;
    int channels = 16;
    int n_lt = 3, n_hp = 3;
    int heads = 4;
    int ffn_expansion = 2;
    AttentionKind attention = AttentionKind::Daam;
    HeadKind head = HeadKind::Adaptive;
    SaliencyPaths saliency_paths = SaliencyPaths::Both;
    int feature_dim = 96;
    double thr = kDefaultThr;
    double z_n = 0.8;
    double sigma_min = kSigmaMin;
    bool batch_norm = false;
    std::array<double, 2> mu_init = {0.0, 0.0};  // initial biases of the two mode means
    std::uint64_t init_seed = 1;

    void validate() const;
    nlohmann::json to_json() const;
    // Missing keys keep their defaults; unknown enum strings throw.
    static ModelConfig from_json(const nlohmann::json& j);
};

// One training mini-batch.  Point coordinates are in field (scale-4) units.
template <class T>
struct Batch {
    Tensor<T> fringe, speckle;   // [N, 1, H, W]
    Tensor<T> saliency;          // [N, 1, H, W], 0/1
    Tensor<T> coords;            // [N, 2, 1, P]
    Tensor<T> target, weight;    // [N, 1, 1, P]
};

template <class T>
struct LossTerms {
    Var<T> total;
    double l_n = 0, l_s = 0;
    int saliency_terms = 0;
};

template <class T>
struct ForwardResult {
    Tensor<T> disparity;                 // [N, 1, H, W]
    std::vector<Tensor<T>> saliency;     // probability maps, training mode only
};

template <class T>
class Model {
  public:
    explicit Model(const ModelConfig& cfg);
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    struct Features {
        Var<T> f_fr, f_sp, fused, field;
        FusionOutput<T> fusion;
    };
    Features features(Tape<T>& tape, const Tensor<T>& fringe, const Tensor<T>& speckle, bool training) const;

    ForwardResult<T> forward(const Tensor<T>& fringe, const Tensor<T>& speckle, bool training = false) const;
    Tensor<T> predict(const Tensor<T>& fringe, const Tensor<T>& speckle) const {
        return forward(fringe, speckle, false).disparity;
    }

    LossTerms<T> loss(Tape<T>& tape, const Batch<T>& batch) const;

    std::size_t parameter_count() const { return params.count(); }
    // Excludes the saliency decoders, which are dropped at inference.
    std::size_t inference_parameter_count() const { return params.count({"saliency/"}); }

    const ModelConfig& config() const { return cfg_; }
    const FeatureBranch<T>& fringe_branch() const { return *fringe_; }
    const FeatureBranch<T>& speckle_branch() const { return *speckle_; }
    const DisparityHead<T>& head() const { return *head_; }

    ParamStore<T> params;

  private:
    ModelConfig cfg_;
    std::unique_ptr<FeatureBranch<T>> fringe_, speckle_;
    std::unique_ptr<GateModule<T>> gate_sp_, gate_fr_;
    std::unique_ptr<DisparityHead<T>> head_;
    SaliencyDecoder<T> sal_fringe_, sal_speckle_;
};

class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Single file: magic, JSON (config, metadata, parameter table), float32 LE blobs.
void save_checkpoint(const Model<float>& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

// Per-module initialization stream: a stable function of the seed and the module name.
Rng module_rng(std::uint64_t seed, const std::string& name);

}  // namespace dualshot
