// Command-line front end: dataset generation, training, evaluation,
// ablation sweeps, inference and training-curve plots.

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "dualshot/harness.hpp"
#include "dualshot/simd/kernels.hpp"

namespace fs = std::filesystem;
using namespace dualshot;

namespace {

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config " + path);
    return nlohmann::json::parse(f);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (!tok.empty()) out.push_back(std::stoull(tok));
    }
    return out;
}

// Polyline SVG of one column of a train_log.jsonl file against its step column.
std::string curve_svg(const std::vector<std::pair<double, double>>& pts, const std::string& title) {
    const double w = 640, h = 360, m = 40;
    double x0 = pts.front().first, x1 = pts.front().first, y0 = pts.front().second, y1 = pts.front().second;
    for (const auto& [x, y] : pts) {
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    std::ostringstream o;
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << m << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << title << " ("
      << y0 << " .. " << y1 << ")</text>\n"
      << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
        o << m + (x - x0) / (x1 - x0) * (w - 2 * m) << ',' << h - m - (y - y0) / (y1 - y0) * (h - 2 * m) << ' ';
    }
    o << "\"/>\n</svg>\n";
    return o.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Dual-modality structured-light disparity network"};
    app.require_subcommand(1);
    std::string simd = "auto";
    app.add_option("--simd", simd, "Kernel backend: auto, scalar or avx2")->check(CLI::IsMember({"auto", "scalar", "avx2"}));

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic dataset and its manifest");
    std::string gen_out;
    int gen_n = 1000, gen_h = 480, gen_w = 640;
    std::uint64_t gen_seed = 0;
    double gen_bias = 0.563, gen_split = 0.8, gen_noise = 0.01;
    double gen_dmax = -1;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--n", gen_n, "Number of samples");
    gen->add_option("--seed", gen_seed, "Dataset seed");
    gen->add_option("--height", gen_h, "Frame height");
    gen->add_option("--width", gen_w, "Frame width");
    gen->add_option("--occluded-bias", gen_bias, "Probability that a scene is drawn as occluded");
    gen->add_option("--split", gen_split, "Train fraction");
    gen->add_option("--noise", gen_noise, "Additive noise sigma");
    gen->add_option("--d-max", gen_dmax, "Largest object disparity (default: min(40, width/4 - 2))");

    // train
    auto* tr = app.add_subcommand("train", "Train a model from a JSON run config");
    std::string tr_config, tr_out, tr_manifest;
    std::uint64_t tr_seed = 0;
    int tr_epochs = 0, tr_steps = 0;
    bool tr_verbose = false;
    tr->add_option("--config", tr_config, "Run config (JSON)")->required();
    tr->add_option("--seed", tr_seed, "Run seed");
    tr->add_option("--out", tr_out, "Output directory")->required();
    tr->add_option("--manifest", tr_manifest, "Override the manifest path");
    tr->add_option("--epochs", tr_epochs, "Override the epoch count");
    tr->add_option("--max-steps", tr_steps, "Override the step count");
    tr->add_flag("--verbose", tr_verbose, "Print validation records");

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ev_ckpt, ev_manifest, ev_subset = "full", ev_split = "test", ev_out;
    ev->add_option("--ckpt", ev_ckpt, "Checkpoint")->required();
    ev->add_option("--manifest", ev_manifest, "Dataset manifest")->required();
    ev->add_option("--subset", ev_subset, "full or occluded")->check(CLI::IsMember({"full", "occluded", "occluded_only"}));
    ev->add_option("--split", ev_split, "Manifest split to evaluate");
    ev->add_option("--out", ev_out, "Directory for the report and error maps");

    // ablate
    auto* ab = app.add_subcommand("ablate", "Run an ablation sweep");
    std::string ab_sweep, ab_config, ab_seeds = "0", ab_out, ab_manifest;
    std::vector<std::string> ab_values;
    ab->add_option("--sweep", ab_sweep, "arch, zn, depth, attention, saliency or head")
        ->required()
        ->check(CLI::IsMember({"arch", "zn", "depth", "attention", "saliency", "head"}));
    ab->add_option("--config", ab_config, "Base run config (JSON)")->required();
    ab->add_option("--seeds", ab_seeds, "Comma-separated seeds");
    ab->add_option("--values", ab_values, "Sweep values (default: the full row set)");
    ab->add_option("--out", ab_out, "Output directory");
    ab->add_option("--manifest", ab_manifest, "Override the manifest path");

    // infer
    auto* inf = app.add_subcommand("infer", "Predict disparity for one fringe/speckle pair");
    std::string in_ckpt, in_fr, in_sp, in_gt, in_out;
    inf->add_option("--ckpt", in_ckpt, "Checkpoint")->required();
    inf->add_option("--fringe", in_fr, "Fringe plane or sample file")->required();
    inf->add_option("--speckle", in_sp, "Speckle plane or sample file")->required();
    inf->add_option("--gt", in_gt, "Ground-truth disparity plane or sample file");
    inf->add_option("--out", in_out, "Output directory")->required();

    // plot
    auto* pl = app.add_subcommand("plot", "Render a training curve from train_log.jsonl as SVG");
    std::string pl_log, pl_out, pl_key = "val_epe";
    pl->add_option("--log", pl_log, "train_log.jsonl")->required();
    pl->add_option("--out", pl_out, "SVG path")->required();
    pl->add_option("--key", pl_key, "Column to plot (train_loss, l_n, l_s, val_epe)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (simd == "scalar") simd::set_backend(simd::Backend::Scalar);
        if (simd == "avx2") {
            if (!simd::avx2_available()) throw std::runtime_error("AVX2 is not available on this CPU");
            simd::set_backend(simd::Backend::Avx2);
        }

        if (*gen) {
            slsim::SceneSpec spec;
            spec.seed = gen_seed;
            spec.height = gen_h;
            spec.width = gen_w;
            spec.occluded_bias = gen_bias;
            spec.noise_sigma = gen_noise;
            spec.d_max = gen_dmax > 0 ? gen_dmax : slsim::default_d_max(gen_w);
            const auto m = slsim::make_dataset(spec, gen_n, gen_split, gen_out);
            int occluded = 0;
            for (const auto& e : m.entries) occluded += e.occluded;
            std::cout << "wrote " << m.entries.size() << " samples (" << occluded << " occluded) to " << gen_out
                      << "/manifest.jsonl\n";
        } else if (*tr) {
            RunConfig run = RunConfig::from_json(read_json_file(tr_config));
            run.seed = tr_seed;
            run.out_dir = tr_out;
            if (!tr_manifest.empty()) run.manifest = tr_manifest;
            if (tr_epochs > 0) run.epochs = tr_epochs;
            if (tr_steps > 0) run.max_steps = tr_steps;
            run.verbose = tr_verbose;
            const auto res = train(run);
            std::cout << "best val EPE " << res.best_val_epe << " at step " << res.best_step << "; checkpoint "
                      << res.checkpoint.string() << '\n';
        } else if (*ev) {
            const std::optional<fs::path> maps = ev_out.empty() ? std::nullopt : std::optional<fs::path>(fs::path(ev_out) / "error_maps");
            const auto res = evaluate(ev_ckpt, ev_manifest, parse_subset(ev_subset), ev_split, maps);
            const auto j = res.report.to_json();
            if (!ev_out.empty()) write_text(fs::path(ev_out) / ("report_" + res.report.subset + ".json"), j.dump(2) + "\n");
            std::cout << j.dump(2) << '\n';
        } else if (*ab) {
            RunConfig base = RunConfig::from_json(read_json_file(ab_config));
            if (!ab_manifest.empty()) base.manifest = ab_manifest;
            if (!ab_out.empty()) base.out_dir = ab_out;
            AblationSpec spec;
            spec.kind = parse_sweep(ab_sweep);
            spec.values = ab_values;
            spec.seeds = parse_seeds(ab_seeds);
            const auto table = ablate(spec, base);
            std::cout << table.to_markdown();
        } else if (*inf) {
            const std::optional<fs::path> gt = in_gt.empty() ? std::nullopt : std::optional<fs::path>(in_gt);
            const auto res = infer(in_ckpt, in_fr, in_sp, gt, in_out);
            std::cout << "disparity: " << res.disparity_path.string() << '\n';
            if (res.error_map_path) std::cout << "error map: " << res.error_map_path->string() << '\n';
            if (res.mean_abs_error) std::cout << "mean abs error: " << *res.mean_abs_error << " px\n";
        } else if (*pl) {
            std::ifstream f(pl_log);
            if (!f) throw std::runtime_error("cannot open " + pl_log);
            std::vector<std::pair<double, double>> pts;
            std::string line;
            while (std::getline(f, line)) {
                if (line.empty()) continue;
                const auto j = nlohmann::json::parse(line);
                if (j.contains("step") && j.contains(pl_key) && j[pl_key].is_number()) {
                    pts.emplace_back(j["step"].get<double>(), j[pl_key].get<double>());
                }
            }
            if (pts.empty()) throw std::runtime_error("no '" + pl_key + "' records in " + pl_log);
            write_text(pl_out, curve_svg(pts, pl_key));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
