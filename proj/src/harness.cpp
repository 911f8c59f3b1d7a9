#include "dualshot/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace dualshot {

namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["model"] = model.to_json();
    j["manifest"] = manifest;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["lr"] = lr;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["adam_eps"] = adam_eps;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["max_steps"] = max_steps;
    j["points_per_image"] = points_per_image;
    j["edge_point_fraction"] = edge_point_fraction;
    j["val_fraction"] = val_fraction;
    j["val_max_samples"] = val_max_samples;
    j["eval_every"] = eval_every;
    j["auto_mu_init"] = auto_mu_init;
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig r;
    if (j.contains("model")) r.model = ModelConfig::from_json(j["model"]);
    r.manifest = j.value("manifest", r.manifest);
    r.epochs = j.value("epochs", r.epochs);
    r.batch_size = j.value("batch_size", r.batch_size);
    r.lr = j.value("lr", r.lr);
    r.beta1 = j.value("beta1", r.beta1);
    r.beta2 = j.value("beta2", r.beta2);
    r.adam_eps = j.value("adam_eps", r.adam_eps);
    r.seed = j.value("seed", r.seed);
    r.out_dir = j.value("out_dir", r.out_dir);
    r.max_steps = j.value("max_steps", r.max_steps);
    r.points_per_image = j.value("points_per_image", r.points_per_image);
    r.edge_point_fraction = j.value("edge_point_fraction", r.edge_point_fraction);
    r.val_fraction = j.value("val_fraction", r.val_fraction);
    r.val_max_samples = j.value("val_max_samples", r.val_max_samples);
    r.eval_every = j.value("eval_every", r.eval_every);
    r.auto_mu_init = j.value("auto_mu_init", r.auto_mu_init);
    r.verbose = j.value("verbose", r.verbose);
    if (r.epochs < 1 || r.batch_size < 1 || r.points_per_image < 1) {
        throw std::invalid_argument("epochs, batch_size and points_per_image must be >= 1");
    }
    if (!(r.lr > 0)) throw std::invalid_argument("lr must be positive");
    if (!(r.val_fraction >= 0 && r.val_fraction < 1)) throw std::invalid_argument("val_fraction must lie in [0, 1)");
    return r;
}

// ---------------------------------------------------------------- optimizer

Adam::Adam(ParamStore<float>& ps, double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& [name, p] : ps.items()) {
        if (!p->trainable) continue;
        slots_.push_back({p.get(), std::vector<float>(p->value.size(), 0.0f), std::vector<float>(p->value.size(), 0.0f)});
    }
}

void Adam::step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    const float step = static_cast<float>(lr_ / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2);
    const float eps = static_cast<float>(eps_);
    for (auto& s : slots_) {
        auto& w = s.p->value.data;
        const auto& g = s.p->grad.data;
        if (g.empty()) continue;
        for (std::size_t i = 0; i < w.size(); ++i) {
            s.m[i] = b1 * s.m[i] + (1 - b1) * g[i];
            s.v[i] = b2 * s.v[i] + (1 - b2) * g[i] * g[i];
            w[i] -= step * s.m[i] / (std::sqrt(s.v[i] * inv_c2) + eps);
        }
    }
}

// ---------------------------------------------------------------- data

PointSet sample_points(const slsim::Sample& s, int count, double edge_fraction, Rng& rng) {
    std::vector<int> valid_idx, edge_idx;
    const auto edges = edge_mask(s.disparity, s.valid, s.height, s.width, LossConfig{}.edge_threshold);
    for (int i = 0; i < s.height * s.width; ++i) {
        if (!s.valid[static_cast<std::size_t>(i)]) continue;
        valid_idx.push_back(i);
        if (edges[static_cast<std::size_t>(i)]) edge_idx.push_back(i);
    }
    PointSet p;
    const int n_edge = edge_idx.empty() ? 0 : static_cast<int>(std::lround(edge_fraction * count));
    for (int k = 0; k < count; ++k) {
        int idx = 0;
        float wt = 1.0f;
        if (k < n_edge) {
            idx = edge_idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(edge_idx.size()) - 1))];
        } else if (!valid_idx.empty()) {
            idx = valid_idx[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(valid_idx.size()) - 1))];
        } else {
            wt = 0.0f;
        }
        p.ys.push_back(idx / s.width);
        p.xs.push_back(idx % s.width);
        p.target.push_back(s.disparity[static_cast<std::size_t>(idx)]);
        p.weight.push_back(wt);
    }
    return p;
}

namespace {

Tensor<float> image_tensor(const std::vector<const slsim::Sample*>& ss, const std::vector<float> slsim::Sample::*plane) {
    const int n = static_cast<int>(ss.size()), h = ss[0]->height, w = ss[0]->width;
    Tensor<float> t({n, 1, h, w});
    for (int b = 0; b < n; ++b) {
        const auto& src = ss[static_cast<std::size_t>(b)]->*plane;
        std::copy(src.begin(), src.end(), t.data.begin() + static_cast<std::ptrdiff_t>(b) * h * w);
    }
    return t;
}

}  // namespace

Batch<float> make_batch(const std::vector<const slsim::Sample*>& ss, int points, double edge_fraction, Rng& rng) {
    if (ss.empty()) throw std::invalid_argument("make_batch: empty batch");
    const int n = static_cast<int>(ss.size()), h = ss[0]->height, w = ss[0]->width;
    for (const auto* s : ss) {
        if (s->height != h || s->width != w) throw DimensionError("batch samples differ in size");
    }
    Batch<float> b;
    b.fringe = image_tensor(ss, &slsim::Sample::fringe);
    b.speckle = image_tensor(ss, &slsim::Sample::speckle);
    b.saliency = Tensor<float>({n, 1, h, w});
    for (int k = 0; k < n; ++k) {
        const auto& sal = ss[static_cast<std::size_t>(k)]->saliency;
        for (std::size_t i = 0; i < sal.size(); ++i) b.saliency.data[static_cast<std::size_t>(k) * h * w + i] = sal[i];
    }
    b.coords = Tensor<float>({n, 2, 1, points});
    b.target = Tensor<float>({n, 1, 1, points});
    b.weight = Tensor<float>({n, 1, 1, points});
    for (int k = 0; k < n; ++k) {
        const PointSet p = sample_points(*ss[static_cast<std::size_t>(k)], points, edge_fraction, rng);
        for (int j = 0; j < points; ++j) {
            const auto jj = static_cast<std::size_t>(j);
            b.coords.at(k, 0, 0, j) = static_cast<float>(field_coord(p.ys[jj], h, h / 4));
            b.coords.at(k, 1, 0, j) = static_cast<float>(field_coord(p.xs[jj], w, w / 4));
            b.target.at(k, 0, 0, j) = p.target[jj];
            b.weight.at(k, 0, 0, j) = p.weight[jj];
        }
    }
    return b;
}

Subset parse_subset(const std::string& s) {
    if (s == "full") return Subset::Full;
    if (s == "occluded" || s == "occluded_only") return Subset::OccludedOnly;
    throw std::invalid_argument("unknown subset '" + s + "' (expected full or occluded)");
}

std::string subset_name(Subset s) { return s == Subset::Full ? "full" : "occluded_only"; }

// ---------------------------------------------------------------- training

namespace {

class SampleStore {
  public:
    SampleStore(const slsim::Manifest& m, std::vector<slsim::ManifestEntry> entries)
        : manifest_(m), entries_(std::move(entries)), cache_(entries_.size()) {}
    std::size_t size() const { return entries_.size(); }
    const slsim::Sample& get(std::size_t i) {
        if (!cache_[i]) cache_[i] = slsim::read_sample(manifest_.resolve(entries_[i]));
        return *cache_[i];
    }

  private:
    const slsim::Manifest& manifest_;
    std::vector<slsim::ManifestEntry> entries_;
    std::vector<std::optional<slsim::Sample>> cache_;
};

std::array<double, 2> disparity_quantiles(SampleStore& store) {
    std::vector<float> vals;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const auto& s = store.get(i);
        for (std::size_t k = 0; k < s.disparity.size(); k += 7) {
            if (s.valid[k]) vals.push_back(s.disparity[k]);
        }
    }
    if (vals.empty()) return {0.0, 0.0};
    std::sort(vals.begin(), vals.end());
    auto q = [&](double f) { return static_cast<double>(vals[static_cast<std::size_t>(f * (vals.size() - 1))]); };
    return {q(0.2), q(0.8)};
}

double validation_epe(const Model<float>& model, SampleStore& val) {
    MetricAccumulator acc;
    for (std::size_t i = 0; i < val.size(); ++i) {
        const auto& s = val.get(i);
        Tensor<float> fr({1, 1, s.height, s.width}), sp({1, 1, s.height, s.width});
        fr.data = s.fringe;
        sp.data = s.speckle;
        const auto pred = model.predict(fr, sp);
        acc.add(pred.data, s.disparity, s.valid, s.height, s.width);
    }
    return acc.pixels() > 0 ? acc.report().epe : std::numeric_limits<double>::quiet_NaN();
}

void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << j.dump(2) << '\n';
}

}  // namespace

TrainResult train(const RunConfig& run) {
    if (run.manifest.empty() || !fs::exists(run.manifest)) {
        throw TrainingError("missing dataset: manifest '" + run.manifest + "' not found");
    }
    const slsim::Manifest manifest = slsim::read_manifest(run.manifest);
    auto train_entries = manifest.select("train");
    if (train_entries.empty()) throw TrainingError("missing dataset: manifest has no train entries");

    std::vector<slsim::ManifestEntry> val_entries;
    if (run.val_fraction > 0 && train_entries.size() > 1) {
        const auto n_val = std::clamp<std::size_t>(
            static_cast<std::size_t>(std::lround(run.val_fraction * static_cast<double>(train_entries.size()))), 1,
            train_entries.size() - 1);
        val_entries.assign(train_entries.end() - static_cast<std::ptrdiff_t>(n_val), train_entries.end());
        train_entries.resize(train_entries.size() - n_val);
    } else {
        val_entries = train_entries;
    }
    if (val_entries.size() > static_cast<std::size_t>(run.val_max_samples)) {
        val_entries.resize(static_cast<std::size_t>(run.val_max_samples));
    }

    SampleStore train_set(manifest, train_entries), val_set(manifest, val_entries);

    ModelConfig mc = run.model;
    mc.init_seed = run.seed;
    if (run.auto_mu_init) mc.mu_init = disparity_quantiles(train_set);
    Model<float> model(mc);
    Adam opt(model.params, run.lr, run.beta1, run.beta2, run.adam_eps);

    const fs::path out(run.out_dir);
    fs::create_directories(out);
    nlohmann::json cfg_json = run.to_json();
    cfg_json["model"] = mc.to_json();
    write_json(out / "config.json", cfg_json);

    const int n_train = static_cast<int>(train_set.size());
    const int spe = (n_train + run.batch_size - 1) / run.batch_size;
    const int total = run.max_steps > 0 ? run.max_steps : run.epochs * spe;
    const int eval_every = run.eval_every > 0 ? run.eval_every : spe;

    TrainResult res;
    res.checkpoint = out / "best.ckpt";
    res.best_val_epe = std::numeric_limits<double>::infinity();
    std::ofstream log(out / "train_log.jsonl", std::ios::trunc);
    std::vector<int> order(static_cast<std::size_t>(n_train));
    double window_loss = 0, window_ln = 0, window_ls = 0;
    int window = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (int step = 0; step < total; ++step) {
        const int epoch = step / spe, in_epoch = step % spe;
        if (in_epoch == 0) {
            std::iota(order.begin(), order.end(), 0);
            Rng shuffle(derive_seed(run.seed, 0x5100000ULL + static_cast<std::uint64_t>(epoch)));
            for (int i = n_train - 1; i > 0; --i) {
                std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(shuffle.uniform_int(0, i))]);
            }
        }
        std::vector<const slsim::Sample*> batch;
        for (int k = in_epoch * run.batch_size; k < std::min(n_train, (in_epoch + 1) * run.batch_size); ++k) {
            batch.push_back(&train_set.get(static_cast<std::size_t>(order[static_cast<std::size_t>(k)])));
        }
        Rng point_rng(derive_seed(run.seed, 0x9000000ULL + static_cast<std::uint64_t>(step)));
        const Batch<float> b = make_batch(batch, run.points_per_image, run.edge_point_fraction, point_rng);

        model.params.zero_grad();
        Tape<float> tape;
        const LossTerms<float> lt = model.loss(tape, b);
        const double loss = lt.total.value().data[0];
        if (!std::isfinite(loss)) {
            std::ostringstream msg;
            msg << "non-finite loss at step " << step << " (L_N=" << lt.l_n << ", L_S=" << lt.l_s << ")";
            if (fs::exists(res.checkpoint)) msg << "; last good checkpoint kept at " << res.checkpoint.string();
            log << nlohmann::json{{"event", "abort"}, {"step", step}, {"reason", msg.str()}}.dump() << '\n';
            throw TrainingError(msg.str());
        }
        tape.backward(lt.total);
        opt.step();
        res.loss_curve.push_back(loss);
        window_loss += loss;
        window_ln += lt.l_n;
        window_ls += lt.l_s;
        ++window;

        const bool last = step + 1 == total;
        if ((step + 1) % eval_every == 0 || last) {
            const double epe = validation_epe(model, val_set);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            nlohmann::json rec{{"step", step + 1},          {"epoch", epoch},
                               {"train_loss", window_loss / window}, {"l_n", window_ln / window},
                               {"l_s", window_ls / window}, {"val_epe", epe},
                               {"seconds", secs}};
            log << rec.dump() << '\n';
            log.flush();
            if (run.verbose) std::cerr << rec.dump() << '\n';
            window_loss = window_ln = window_ls = 0;
            window = 0;
            res.final_val_epe = epe;
            if (epe < res.best_val_epe) {
                res.best_val_epe = epe;
                res.best_step = step + 1;
                save_checkpoint(model, res.checkpoint,
                                {{"step", step + 1}, {"val_epe", epe}, {"seed", run.seed}});
            }
        }
    }
    res.steps = total;
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_json(out / "result.json", {{"best_val_epe", res.best_val_epe},
                                     {"final_val_epe", res.final_val_epe},
                                     {"best_step", res.best_step},
                                     {"steps", res.steps},
                                     {"seconds", res.seconds},
                                     {"seed", run.seed},
                                     {"checkpoint", res.checkpoint.string()}});
    return res;
}

// ---------------------------------------------------------------- evaluation

Predictor model_predictor(const Model<float>& model) {
    return [&model](const slsim::Sample& s) {
        Tensor<float> fr({1, 1, s.height, s.width}), sp({1, 1, s.height, s.width});
        fr.data = s.fringe;
        sp.data = s.speckle;
        return model.predict(fr, sp).data;
    };
}

EvalResult evaluate(const Predictor& predict, const slsim::Manifest& manifest, Subset subset, const std::string& split,
                    const std::optional<fs::path>& map_dir, const LossConfig& metrics) {
    const auto entries = manifest.select(split, subset == Subset::OccludedOnly);
    if (entries.empty()) {
        throw EmptySubsetError("no " + split + " samples in subset " + subset_name(subset));
    }
    if (map_dir) fs::create_directories(*map_dir);
    MetricAccumulator acc(metrics);
    EvalResult out;
    for (const auto& e : entries) {
        const slsim::Sample s = slsim::read_sample(manifest.resolve(e));
        const std::vector<float> pred = predict(s);
        MetricAccumulator one(metrics);
        one.add(pred, s.disparity, s.valid, s.height, s.width);
        acc.add(pred, s.disparity, s.valid, s.height, s.width);
        out.per_sample.push_back({e.path, e.occluded, one.abs_error_sum(), one.pixels()});
        if (map_dir) {
            const auto stem = fs::path(e.path).stem().string();
            write_pgm(*map_dir / (stem + "_error.pgm"), s.height, s.width,
                      error_map_pixels(pred, s.disparity, s.valid));
        }
    }
    out.report = acc.report(subset_name(subset));
    return out;
}

EvalResult evaluate(const fs::path& checkpoint, const fs::path& manifest, Subset subset, const std::string& split,
                    const std::optional<fs::path>& map_dir) {
    const auto model = load_checkpoint(checkpoint);
    return evaluate(model_predictor(*model), slsim::read_manifest(manifest), subset, split, map_dir);
}

// ---------------------------------------------------------------- ablation

SweepKind parse_sweep(const std::string& s) {
    if (s == "arch") return SweepKind::Arch;
    if (s == "zn") return SweepKind::Zn;
    if (s == "depth") return SweepKind::Depth;
    if (s == "attention") return SweepKind::Attention;
    if (s == "saliency") return SweepKind::Saliency;
    if (s == "head") return SweepKind::Head;
    throw std::invalid_argument("unknown sweep '" + s + "'");
}

std::string sweep_name(SweepKind k) {
    switch (k) {
        case SweepKind::Arch: return "arch";
        case SweepKind::Zn: return "zn";
        case SweepKind::Depth: return "depth";
        case SweepKind::Attention: return "attention";
        case SweepKind::Saliency: return "saliency";
        case SweepKind::Head: return "head";
    }
    return "head";
}

std::vector<std::string> default_sweep_values(SweepKind kind) {
    switch (kind) {
        case SweepKind::Arch: return {"a", "b", "c", "d"};
        case SweepKind::Zn: return {"0.5", "0.6", "0.7", "0.8", "0.9"};
        case SweepKind::Depth: return {"1", "2", "3", "4", "5"};
        case SweepKind::Attention: return {"daam", "se", "cbam"};
        case SweepKind::Saliency: return {"ours", "bt", "bc", "bt_bc"};
        case SweepKind::Head: return {"regression", "unimodal", "adaptive"};
    }
    return {};
}

ModelConfig apply_sweep_value(ModelConfig c, SweepKind kind, const std::string& v) {
    switch (kind) {
        case SweepKind::Arch: c.arch = parse_arch(v); break;
        case SweepKind::Zn: {
            std::size_t used = 0;
            c.z_n = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("bad z_N value '" + v + "'");
            break;
        }
        case SweepKind::Depth: {
            std::size_t used = 0;
            const int d = std::stoi(v, &used);
            if (used != v.size()) throw std::invalid_argument("bad depth value '" + v + "'");
            c.n_lt = c.n_hp = d;
            break;
        }
        case SweepKind::Attention: c.attention = parse_attention(v); break;
        case SweepKind::Saliency:
            // Row names say which path is removed.
            if (v == "ours") c.saliency_paths = SaliencyPaths::Both;
            else if (v == "bt") c.saliency_paths = SaliencyPaths::BcOnly;
            else if (v == "bc") c.saliency_paths = SaliencyPaths::BtOnly;
            else if (v == "bt_bc") c.saliency_paths = SaliencyPaths::None;
            else c.saliency_paths = parse_saliency(v);
            break;
        case SweepKind::Head: c.head = parse_head(v); break;
    }
    c.validate();
    return c;
}

std::string sweep_row_label(SweepKind kind, const std::string& v) {
    if (kind == SweepKind::Arch) {
        const Arch a = parse_arch(v);
        const std::string letter = a == Arch::CnnCnn ? "a" : a == Arch::CnnTrans ? "b" : a == Arch::TransTrans ? "c" : "d";
        return letter + " | " + (fringe_is_transformer(a) ? "Trans" : "CNN") + " | " +
               (speckle_is_transformer(a) ? "Trans" : "CNN");
    }
    if (kind == SweepKind::Saliency) {
        if (v == "ours") return "Ours";
        if (v == "bt") return "Ours-BT";
        if (v == "bc") return "Ours-BC";
        if (v == "bt_bc") return "Ours-BT-BC";
    }
    if (kind == SweepKind::Zn) return "z_N=" + v;
    if (kind == SweepKind::Depth) return "N=" + v;
    return v;
}

namespace {

MetricReport mean_report(const std::vector<MetricReport>& rs) {
    MetricReport m;
    if (rs.empty()) return m;
    double see_sum = 0;
    int see_n = 0;
    for (const auto& r : rs) {
        m.epe += r.epe;
        m.err3 += r.err3;
        m.err5 += r.err5;
        m.err10 += r.err10;
        if (!std::isnan(r.see)) {
            see_sum += r.see;
            ++see_n;
        }
        m.n_samples = r.n_samples;
        m.n_pixels = r.n_pixels;
        m.n_edge_pixels = r.n_edge_pixels;
    }
    const double n = static_cast<double>(rs.size());
    m.epe /= n;
    m.err3 /= n;
    m.err5 /= n;
    m.err10 /= n;
    m.see = see_n > 0 ? see_sum / see_n : std::numeric_limits<double>::quiet_NaN();
    m.subset = rs[0].subset;
    return m;
}

std::string fmt(double v) {
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

}  // namespace

nlohmann::json AblationTable::to_json() const {
    nlohmann::json j;
    j["sweep"] = sweep_name(kind);
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json row{{"value", r.value}, {"label", r.label}, {"mean", r.mean.to_json()}};
        row["per_seed"] = nlohmann::json::array();
        for (const auto& s : r.per_seed) row["per_seed"].push_back(s.to_json());
        j["rows"].push_back(row);
    }
    return j;
}

std::string AblationTable::to_markdown() const {
    std::ostringstream o;
    if (kind == SweepKind::Arch) {
        o << "| Row | Fringe | Speckle | EPE | ERR3 | ERR5 | ERR10 | SEE |\n|---|---|---|---|---|---|---|---|\n";
    } else {
        o << "| " << sweep_name(kind) << " | EPE | ERR3 | ERR5 | ERR10 | SEE |\n|---|---|---|---|---|---|\n";
    }
    for (const auto& r : rows) {
        o << "| " << r.label << " | " << fmt(r.mean.epe) << " | " << fmt(r.mean.err3) << " | " << fmt(r.mean.err5)
          << " | " << fmt(r.mean.err10) << " | " << fmt(r.mean.see) << " |\n";
    }
    return o.str();
}

AblationTable ablate(const AblationSpec& spec, const RunConfig& base) {
    const auto values = spec.values.empty() ? default_sweep_values(spec.kind) : spec.values;
    if (values.empty() || spec.seeds.empty()) throw std::invalid_argument("ablation needs values and seeds");
    // Validate every row up front so a bad value fails before any training.
    for (const auto& v : values) apply_sweep_value(base.model, spec.kind, v);

    const fs::path root = fs::path(base.out_dir) / sweep_name(spec.kind);
    fs::create_directories(root);
    const auto manifest = slsim::read_manifest(base.manifest);
    AblationTable table;
    table.kind = spec.kind;
    for (const auto& v : values) {
        AblationRow row;
        row.value = v;
        row.label = sweep_row_label(spec.kind, v);
        for (const auto seed : spec.seeds) {
            RunConfig r = base;
            r.model = apply_sweep_value(base.model, spec.kind, v);
            r.seed = seed;
            r.out_dir = (root / v / ("seed" + std::to_string(seed))).string();
            const TrainResult tr = train(r);
            const auto model = load_checkpoint(tr.checkpoint);
            const EvalResult ev = evaluate(model_predictor(*model), manifest, Subset::Full, "test");
            write_json(fs::path(r.out_dir) / "eval_full.json", ev.report.to_json());
            row.per_seed.push_back(ev.report);
        }
        row.mean = mean_report(row.per_seed);
        table.rows.push_back(row);
    }
    write_json(root / "table.json", table.to_json());
    std::ofstream(root / "table.md", std::ios::trunc) << table.to_markdown();
    return table;
}

// ---------------------------------------------------------------- planes, images, inference

namespace {

constexpr char kPlaneMagic[8] = {'S', 'L', 'P', 'L', 'A', 'N', 'E', '1'};

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    return {(std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()};
}

}  // namespace

void write_plane(const Plane& p, const fs::path& path) {
    if (p.data.size() != static_cast<std::size_t>(p.height) * p.width) {
        throw std::invalid_argument("write_plane: data size does not match the frame");
    }
    nlohmann::ordered_json hdr;
    hdr["height"] = p.height;
    hdr["width"] = p.width;
    const std::string text = hdr.dump();
    std::vector<char> out(kPlaneMagic, kPlaneMagic + 8);
    auto put_u32 = [&](std::uint32_t v) {
        for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    put_u32(static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (float v : p.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(bits);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

Plane read_plane(const fs::path& path) {
    const auto b = read_bytes(path);
    if (b.size() < 12 || std::memcmp(b.data(), kPlaneMagic, 8) != 0) {
        throw slsim::BadMagicError(path.string() + ": not a plane file");
    }
    const std::uint32_t len = static_cast<std::uint32_t>(b[8]) | static_cast<std::uint32_t>(b[9]) << 8 |
                              static_cast<std::uint32_t>(b[10]) << 16 | static_cast<std::uint32_t>(b[11]) << 24;
    if (b.size() < 12 + static_cast<std::size_t>(len)) throw slsim::TruncatedError(path.string() + ": truncated header");
    Plane p;
    try {
        const auto hdr = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + len);
        p.height = hdr.at("height").get<int>();
        p.width = hdr.at("width").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw slsim::HeaderMismatchError(path.string() + ": " + e.what());
    }
    const std::size_t n = static_cast<std::size_t>(p.height) * p.width, off = 12 + len;
    if (b.size() < off + 4 * n) throw slsim::TruncatedError(path.string() + ": truncated plane data");
    if (b.size() > off + 4 * n) throw slsim::HeaderMismatchError(path.string() + ": trailing bytes");
    p.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t* q = b.data() + off + 4 * i;
        const std::uint32_t bits = static_cast<std::uint32_t>(q[0]) | static_cast<std::uint32_t>(q[1]) << 8 |
                                   static_cast<std::uint32_t>(q[2]) << 16 | static_cast<std::uint32_t>(q[3]) << 24;
        std::memcpy(&p.data[i], &bits, 4);
    }
    return p;
}

std::vector<std::uint8_t> error_map_pixels(std::span<const float> pred, std::span<const float> gt,
                                           std::span<const std::uint8_t> valid) {
    std::vector<std::uint8_t> px(pred.size(), 0);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!valid.empty() && !valid[i]) continue;
        const double e = std::min(10.0, std::abs(static_cast<double>(pred[i]) - gt[i]));
        px[i] = static_cast<std::uint8_t>(std::lround(e * 25.5));
    }
    return px;
}

void write_pgm(const fs::path& path, int height, int width, const std::vector<std::uint8_t>& px) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << "P5\n" << width << ' ' << height << "\n255\n";
    f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

namespace {

struct LoadedPlane {
    Plane plane;
    std::vector<std::uint8_t> valid;  // empty when the source carries no mask
};

LoadedPlane load_any_plane(const fs::path& path, const std::string& which) {
    const auto b = read_bytes(path);
    LoadedPlane out;
    if (b.size() >= 8 && std::memcmp(b.data(), "SLSAMP01", 8) == 0) {
        const auto s = slsim::decode_sample(b);
        out.plane.height = s.height;
        out.plane.width = s.width;
        out.plane.data = which == "fringe" ? s.fringe : which == "speckle" ? s.speckle : s.disparity;
        if (which == "disparity") out.valid = s.valid;
        return out;
    }
    out.plane = read_plane(path);
    return out;
}

}  // namespace

InferResult infer(const fs::path& checkpoint, const fs::path& fringe, const fs::path& speckle,
                  const std::optional<fs::path>& gt, const fs::path& out_dir) {
    const auto model = load_checkpoint(checkpoint);
    const auto fr = load_any_plane(fringe, "fringe");
    const auto sp = load_any_plane(speckle, "speckle");
    if (fr.plane.height != sp.plane.height || fr.plane.width != sp.plane.width) {
        throw DimensionError("fringe and speckle sizes differ");
    }
    const int h = fr.plane.height, w = fr.plane.width;
    Tensor<float> tf({1, 1, h, w}), ts({1, 1, h, w});
    tf.data = fr.plane.data;
    ts.data = sp.plane.data;
    const auto pred = model->predict(tf, ts);
    fs::create_directories(out_dir);
    InferResult res;
    res.disparity_path = out_dir / "disparity.plane";
    write_plane({h, w, pred.data}, res.disparity_path);
    if (gt) {
        const auto g = load_any_plane(*gt, "disparity");
        if (g.plane.height != h || g.plane.width != w) throw DimensionError("ground truth size differs from input");
        std::vector<std::uint8_t> valid = g.valid.empty() ? std::vector<std::uint8_t>(pred.data.size(), 1) : g.valid;
        res.error_map_path = out_dir / "error.pgm";
        write_pgm(*res.error_map_path, h, w, error_map_pixels(pred.data, g.plane.data, valid));
        double sum = 0;
        std::int64_t n = 0;
        for (std::size_t i = 0; i < valid.size(); ++i) {
            if (!valid[i]) continue;
            sum += std::abs(static_cast<double>(pred.data[i]) - g.plane.data[i]);
            ++n;
        }
        if (n > 0) res.mean_abs_error = sum / static_cast<double>(n);
    }
    return res;
}

}  // namespace dualshot
