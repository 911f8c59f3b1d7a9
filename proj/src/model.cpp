#include "dualshot/model.hpp"

#include <cstring>
#include <fstream>

namespace dualshot {

Arch parse_arch(const std::string& name) {
    if (name == "cnn_cnn" || name == "a") return Arch::CnnCnn;
    if (name == "cnn_trans" || name == "b") return Arch::CnnTrans;
    if (name == "trans_trans" || name == "c") return Arch::TransTrans;
    if (name == "trans_cnn" || name == "d") return Arch::TransCnn;
    throw std::invalid_argument("unknown arch '" + name + "' (expected cnn_cnn, cnn_trans, trans_trans or trans_cnn)");
}

std::string arch_name(Arch arch) {
    switch (arch) {
        case Arch::CnnCnn: return "cnn_cnn";
        case Arch::CnnTrans: return "cnn_trans";
        case Arch::TransTrans: return "trans_trans";
        case Arch::TransCnn: return "trans_cnn";
    }
    return "trans_cnn";
}

bool fringe_is_transformer(Arch a) { return a == Arch::TransTrans || a == Arch::TransCnn; }
bool speckle_is_transformer(Arch a) { return a == Arch::CnnTrans || a == Arch::TransTrans; }

void ModelConfig::validate() const {
    if (channels < 2 || channels % 2 != 0) throw std::invalid_argument("channels must be even and >= 2");
    if ((channels / 2) % heads != 0) throw std::invalid_argument("channels/2 must be divisible by heads");
    if (n_lt < 1 || n_hp < 1) throw std::invalid_argument("block counts must be >= 1");
    if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
    if (!(thr >= 1.0)) throw std::invalid_argument("thr must be >= 1");
    if (!(sigma_min > 0)) throw std::invalid_argument("sigma_min must be positive");
    LossConfig lc;
    lc.z_n = z_n;
    lc.validate();
}

nlohmann::json ModelConfig::to_json() const {
    nlohmann::json j;
    j["arch"] = arch_name(arch);
    j["channels"] = channels;
    j["n_lt"] = n_lt;
    j["n_hp"] = n_hp;
    j["heads"] = heads;
    j["ffn_expansion"] = ffn_expansion;
    j["attention"] = attention_name(attention);
    j["head"] = head_name(head);
    j["saliency_paths"] = saliency_name(saliency_paths);
    j["feature_dim"] = feature_dim;
    j["thr"] = thr;
    j["z_n"] = z_n;
    j["sigma_min"] = sigma_min;
    j["batch_norm"] = batch_norm;
    j["mu_init"] = mu_init;
    j["init_seed"] = init_seed;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("arch")) c.arch = parse_arch(j["arch"].get<std::string>());
    c.channels = j.value("channels", c.channels);
    c.n_lt = j.value("n_lt", c.n_lt);
    c.n_hp = j.value("n_hp", c.n_hp);
    c.heads = j.value("heads", c.heads);
    c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
    if (j.contains("attention")) c.attention = parse_attention(j["attention"].get<std::string>());
    if (j.contains("head")) c.head = parse_head(j["head"].get<std::string>());
    if (j.contains("saliency_paths")) c.saliency_paths = parse_saliency(j["saliency_paths"].get<std::string>());
    c.feature_dim = j.value("feature_dim", c.feature_dim);
    c.thr = j.value("thr", c.thr);
    c.z_n = j.value("z_n", c.z_n);
    c.sigma_min = j.value("sigma_min", c.sigma_min);
    c.batch_norm = j.value("batch_norm", c.batch_norm);
    if (j.contains("mu_init")) c.mu_init = j["mu_init"].get<std::array<double, 2>>();
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
}

Rng module_rng(std::uint64_t seed, const std::string& name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : name) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return Rng(derive_seed(seed, h));
}

namespace {

template <class T>
std::unique_ptr<FeatureBranch<T>> make_branch(bool transformer, ParamStore<T>& ps, const std::string& prefix,
                                              const ModelConfig& c) {
    Rng rng = module_rng(c.init_seed, prefix);
    if (transformer) {
        LtbOptions opt;
        opt.heads = c.heads;
        opt.ffn_expansion = c.ffn_expansion;
        return std::make_unique<TransformerBranch<T>>(ps, prefix, c.channels, c.n_lt, opt, rng, c.batch_norm);
    }
    return std::make_unique<CnnBranch<T>>(ps, prefix, c.channels, c.n_hp, rng, c.batch_norm);
}

}  // namespace

template <class T>
Model<T>::Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    fringe_ = make_branch<T>(fringe_is_transformer(cfg_.arch), params, "fringe", cfg_);
    speckle_ = make_branch<T>(speckle_is_transformer(cfg_.arch), params, "speckle", cfg_);
    {
        Rng r = module_rng(cfg_.init_seed, "fusion/sp");
        gate_sp_ = make_gate<T>(cfg_.attention, params, "fusion/sp", cfg_.channels, r);
    }
    {
        Rng r = module_rng(cfg_.init_seed, "fusion/fr");
        gate_fr_ = make_gate<T>(cfg_.attention, params, "fusion/fr", cfg_.channels, r);
    }
    {
        Rng r = module_rng(cfg_.init_seed, "head");
        head_ = std::make_unique<DisparityHead<T>>(params, "head", cfg_.channels, cfg_.feature_dim, cfg_.head, r,
                                                   cfg_.mu_init);
    }
    if (has_fringe_path(cfg_.saliency_paths)) {
        Rng r = module_rng(cfg_.init_seed, "saliency/fringe");
        sal_fringe_ = SaliencyDecoder<T>(params, "saliency/fringe", cfg_.channels, r);
    }
    if (has_speckle_path(cfg_.saliency_paths)) {
        Rng r = module_rng(cfg_.init_seed, "saliency/speckle");
        sal_speckle_ = SaliencyDecoder<T>(params, "saliency/speckle", cfg_.channels, r);
    }
}

template <class T>
typename Model<T>::Features Model<T>::features(Tape<T>& tape, const Tensor<T>& fringe, const Tensor<T>& speckle,
                                               bool training) const {
    if (fringe.shape != speckle.shape) {
        throw DimensionError("fringe " + to_string(fringe.shape) + " and speckle " + to_string(speckle.shape) +
                             " differ in shape");
    }
    Features f;
    f.f_fr = fringe_->forward(tape.constant(fringe), training);
    f.f_sp = speckle_->forward(tape.constant(speckle), training);
    f.fusion = cross_modal_fuse(f.f_sp, f.f_fr, *gate_sp_, *gate_fr_);
    f.fused = f.fusion.fused;
    f.field = head_->project(f.fused);
    return f;
}

template <class T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& fringe, const Tensor<T>& speckle, bool training) const {
    Tape<T> tape(false);
    auto f = features(tape, fringe, speckle, training);
    ForwardResult<T> out;
    out.disparity = head_->dense_infer(f.field.value(), fringe.h(), fringe.w(), cfg_.thr);
    if (training) {
        if (sal_fringe_.attached()) out.saliency.push_back(sal_fringe_.probability(f.f_fr));
        if (sal_speckle_.attached()) out.saliency.push_back(sal_speckle_.probability(f.f_sp));
    }
    return out;
}

template <class T>
LossTerms<T> Model<T>::loss(Tape<T>& tape, const Batch<T>& b) const {
    auto f = features(tape, b.fringe, b.speckle, true);
    auto raw = head_->raw(ops::bilinear_sample(f.field, b.coords));
    Var<T> l_n;
    const T smin = static_cast<T>(cfg_.sigma_min);
    switch (cfg_.head) {
        case HeadKind::Adaptive: l_n = ops::mixture_nll(raw, b.target, b.weight, smin); break;
        case HeadKind::Unimodal: l_n = ops::unimodal_nll(raw, b.target, b.weight, smin); break;
        case HeadKind::Regression: l_n = ops::l1_loss(raw, b.target, b.weight); break;
    }
    LossTerms<T> out;
    out.l_n = static_cast<double>(l_n.value().data[0]);
    const T zn = static_cast<T>(cfg_.z_n);
    out.total = ops::affine(l_n, zn, T(0));
    if (cfg_.z_n < 1.0) {
        const T eps = static_cast<T>(LossConfig{}.bce_epsilon);
        std::vector<Var<T>> terms;
        if (sal_fringe_.attached()) terms.push_back(ops::bce_with_logits(sal_fringe_.logits(f.f_fr), b.saliency, eps));
        if (sal_speckle_.attached()) {
            terms.push_back(ops::bce_with_logits(sal_speckle_.logits(f.f_sp), b.saliency, eps));
        }
        if (!terms.empty()) {
            Var<T> l_s = terms[0];
            for (std::size_t i = 1; i < terms.size(); ++i) l_s = ops::add(l_s, terms[i]);
            const T inv = T(1) / static_cast<T>(terms.size());
            out.l_s = static_cast<double>(l_s.value().data[0]) * static_cast<double>(inv);
            out.saliency_terms = static_cast<int>(terms.size());
            out.total = ops::add(out.total, ops::affine(l_s, (T(1) - zn) * inv, T(0)));
        }
    }
    return out;
}

template class Model<float>;
template class Model<double>;

namespace {

constexpr char kCkptMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

void save_checkpoint(const Model<float>& model, const std::filesystem::path& path, const nlohmann::json& metadata) {
    nlohmann::json hdr;
    hdr["config"] = model.config().to_json();
    hdr["metadata"] = metadata;
    auto table = nlohmann::json::array();
    for (const auto& [name, p] : model.params.items()) {
        table.push_back({{"name", name},
                         {"shape", std::vector<int>(p->value.shape.begin(), p->value.shape.end())},
                         {"trainable", p->trainable}});
    }
    hdr["params"] = table;
    const std::string text = hdr.dump();
    std::vector<char> out(kCkptMagic, kCkptMagic + 8);
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put_u32(static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& [name, p] : model.params.items()) {
        for (float v : p->value.data) {
            std::uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(bits);
        }
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw CheckpointError("cannot write checkpoint " + tmp.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw CheckpointError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::unique_ptr<Model<float>> load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<unsigned char> b((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (b.size() < 12 || std::memcmp(b.data(), kCkptMagic, 8) != 0) {
        throw CheckpointError(path.string() + " is not a checkpoint");
    }
    auto get_u32 = [&](std::size_t off) {
        return static_cast<std::uint32_t>(b[off]) | static_cast<std::uint32_t>(b[off + 1]) << 8 |
               static_cast<std::uint32_t>(b[off + 2]) << 16 | static_cast<std::uint32_t>(b[off + 3]) << 24;
    };
    const std::size_t len = get_u32(8);
    if (b.size() < 12 + len) throw CheckpointError("checkpoint header truncated");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(b.begin() + 12, b.begin() + static_cast<std::ptrdiff_t>(12 + len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint header: ") + e.what());
    }
    auto model = std::make_unique<Model<float>>(ModelConfig::from_json(hdr.at("config")));
    std::size_t off = 12 + len;
    const auto& table = hdr.at("params");
    if (table.size() != model->params.items().size()) throw CheckpointError("checkpoint parameter count mismatch");
    for (const auto& e : table) {
        const auto name = e.at("name").get<std::string>();
        if (!model->params.contains(name)) throw CheckpointError("checkpoint has unknown parameter " + name);
        auto& p = model->params.get(name);
        const auto shape = e.at("shape").get<std::vector<int>>();
        if (shape != std::vector<int>(p.value.shape.begin(), p.value.shape.end())) {
            throw CheckpointError("shape mismatch for " + name);
        }
        if (b.size() < off + 4 * p.value.size()) throw CheckpointError("checkpoint truncated at " + name);
        for (auto& v : p.value.data) {
            const std::uint32_t bits = get_u32(off);
            std::memcpy(&v, &bits, 4);
            off += 4;
        }
    }
    if (off != b.size()) throw CheckpointError("checkpoint has trailing bytes");
    if (metadata != nullptr) *metadata = hdr.value("metadata", nlohmann::json::object());
    return model;
}

}  // namespace dualshot
