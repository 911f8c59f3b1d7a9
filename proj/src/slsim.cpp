#include "dualshot/slsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "dualshot/rng.hpp"
#include "json.hpp"

namespace dualshot::slsim {

namespace {

enum Stream : std::uint64_t { kSceneStream = 0, kFringeNoise = 1, kSpeckleNoise = 2, kMaskStream = 3 };

constexpr char kMagic[8] = {'S', 'L', 'S', 'A', 'M', 'P', '0', '1'};
const std::vector<std::string> kPlanes = {"fringe", "speckle", "disparity", "saliency", "valid"};

std::size_t pixels(const SceneSpec& s) { return static_cast<std::size_t>(s.height) * s.width; }

ObjectSpec draw_object(const SceneSpec& spec, Rng& rng) {
    ObjectSpec o;
    const double side = std::min(spec.height, spec.width);
    o.kind = static_cast<ShapeKind>(rng.uniform_int(0, 2));
    o.ry = rng.uniform(0.08 * side, 0.25 * side);
    o.rx = rng.uniform(0.08 * side, 0.25 * side);
    o.cy = rng.uniform(0.15 * spec.height, 0.85 * spec.height);
    o.cx = rng.uniform(0.15 * spec.width, 0.85 * spec.width);
    o.angle = rng.uniform(0.0, std::numbers::pi);
    o.d0 = rng.uniform(spec.d_min, spec.d_max);
    o.d1 = o.d0;
    if (o.kind == ShapeKind::Ramp) {
        // Keep the disparity slope at most 0.5 px per px so the ramp does not fold over itself.
        const double reach = std::min(spec.d_max - spec.d_min, o.rx);
        const double lo = std::max(spec.d_min, o.d0 - reach), hi = std::min(spec.d_max, o.d0 + reach);
        o.d1 = rng.uniform(lo, hi);
    }
    return o;
}

// Object geometry with the rotation evaluated once.
struct Footprint {
    const ObjectSpec& o;
    double c, s;

    explicit Footprint(const ObjectSpec& obj) : o(obj), c(std::cos(obj.angle)), s(std::sin(obj.angle)) {}

    double local_x(double y, double x) const { return (x - o.cx) * c + (y - o.cy) * s; }

    bool contains(double y, double x) const {
        const double a = local_x(y, x);
        const double b = -(x - o.cx) * s + (y - o.cy) * c;
        if (o.kind == ShapeKind::Ellipse) return (a / o.rx) * (a / o.rx) + (b / o.ry) * (b / o.ry) <= 1.0;
        return std::abs(a) <= o.rx && std::abs(b) <= o.ry;
    }

    double disparity_at(double y, double x) const {
        if (o.kind != ShapeKind::Ramp) return o.d0;
        const double t = std::clamp((local_x(y, x) / o.rx + 1.0) * 0.5, 0.0, 1.0);
        return o.d0 + (o.d1 - o.d0) * t;
    }
};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

void put_floats(std::vector<std::uint8_t>& out, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

void get_floats(const std::uint8_t* p, std::vector<float>& v, std::size_t n) {
    v.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t bits = get_u32(p + 4 * i);
        std::memcpy(&v[i], &bits, 4);
    }
}

}  // namespace

bool ObjectSpec::contains(double y, double x) const { return Footprint(*this).contains(y, x); }

double ObjectSpec::disparity_at(double y, double x) const { return Footprint(*this).disparity_at(y, x); }

double default_d_max(int width) { return std::min(40.0, width / 4.0 - 2.0); }

void SceneSpec::validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("scene spec: " + m); };
    if (height <= 0 || width <= 0) fail("frame size must be positive");
    if (!(d_min > 0)) fail("d_min must be positive");
    if (!(d_max > d_min)) fail("d_max must exceed d_min");
    if (!(d_max < width / 4.0)) fail("d_max must be below width/4 (" + std::to_string(width / 4.0) + ")");
    if (!(background_disparity >= 0 && background_disparity + 0.5 < d_min)) {
        fail("background disparity must be nonnegative and more than 0.5 px below d_min");
    }
    if (!(fringe_period > 0)) fail("fringe period must be positive");
    if (fringe_mean + fringe_amplitude > 1.0 || fringe_mean - fringe_amplitude < 0.0 || fringe_amplitude < 0) {
        fail("fringe mean/amplitude must keep intensities in [0, 1]");
    }
    if (!(speckle_density > 0 && speckle_density <= 1)) fail("speckle density must lie in (0, 1]");
    if (speckle_blur_sigma < 0 || noise_sigma < 0) fail("blur and noise sigmas must be nonnegative");
    if (n_objects < -1 || n_objects > 4) fail("n_objects must lie in [0, 4]");
    if (mask_count < -1) fail("mask_count must be nonnegative");
    if (!(occluded_bias >= 0 && occluded_bias <= 1)) fail("occluded bias must lie in [0, 1]");
    if (mask_side_min() < 1 || mask_side_max() < mask_side_min()) fail("invalid mask size range");
}

int SceneSpec::reference_margin() const { return static_cast<int>(std::ceil(d_max)) + 1; }

int SceneSpec::mask_side_min() const { return mask_min >= 0 ? mask_min : std::max(2, std::min(height, width) / 16); }

int SceneSpec::mask_side_max() const {
    return mask_max >= 0 ? mask_max : std::max(mask_side_min(), std::min(height, width) / 4);
}

Scene compose_scene(const SceneSpec& spec, const std::vector<ObjectSpec>& objects) {
    Scene sc;
    sc.height = spec.height;
    sc.width = spec.width;
    sc.objects = objects;
    sc.disparity.assign(pixels(spec), static_cast<float>(spec.background_disparity));
    sc.saliency.assign(pixels(spec), 0);
    std::vector<double> best(pixels(spec), spec.background_disparity);
    std::vector<std::uint8_t> hits(pixels(spec), 0);
    for (const auto& o : objects) {
        const Footprint fp(o);
        // Only pixels within the circumscribed circle can be inside.
        const double reach = std::hypot(o.rx, o.ry);
        const int y0 = std::max(0, static_cast<int>(std::floor(o.cy - reach)));
        const int y1 = std::min(spec.height - 1, static_cast<int>(std::ceil(o.cy + reach)));
        const int x0 = std::max(0, static_cast<int>(std::floor(o.cx - reach)));
        const int x1 = std::min(spec.width - 1, static_cast<int>(std::ceil(o.cx + reach)));
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                if (!fp.contains(y, x)) continue;
                const std::size_t i = static_cast<std::size_t>(y) * spec.width + x;
                if (++hits[i] >= 2) sc.occluded = true;
                best[i] = std::max(best[i], fp.disparity_at(y, x));
            }
        }
    }
    for (std::size_t i = 0; i < best.size(); ++i) {
        sc.disparity[i] = static_cast<float>(best[i]);
        sc.saliency[i] = sc.disparity[i] > spec.background_disparity + 0.5 ? 1 : 0;
    }
    return sc;
}

Scene generate_scene(const SceneSpec& spec) {
    spec.validate();
    if (spec.objects) return compose_scene(spec, *spec.objects);
    Rng rng(derive_seed(spec.seed, kSceneStream));
    int n = spec.n_objects;
    bool want_occluded;
    if (n < 0) {
        want_occluded = rng.uniform() < spec.occluded_bias;
        n = want_occluded ? rng.uniform_int(2, 4) : rng.uniform_int(0, 4);
    } else {
        want_occluded = n >= 2 && rng.uniform() < spec.occluded_bias;
    }
    std::vector<ObjectSpec> objs;
    for (int attempt = 0; attempt < 64; ++attempt) {
        objs.clear();
        for (int k = 0; k < n; ++k) objs.push_back(draw_object(spec, rng));
        Scene sc = compose_scene(spec, objs);
        if (sc.occluded == want_occluded) return sc;
    }
    if (want_occluded) {
        objs[1].cy = objs[0].cy;
        objs[1].cx = objs[0].cx;
        return compose_scene(spec, objs);
    }
    Scene sc = compose_scene(spec, objs);
    while (sc.occluded && !objs.empty()) {
        objs.pop_back();
        sc = compose_scene(spec, objs);
    }
    return sc;
}

std::vector<float> render_fringe(const std::vector<float>& disparity, const SceneSpec& spec) {
    if (disparity.size() != pixels(spec)) throw std::invalid_argument("render_fringe: disparity size mismatch");
    Rng rng(derive_seed(spec.seed, kFringeNoise));
    std::vector<float> out(disparity.size());
    const double two_pi = 2.0 * std::numbers::pi;
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * spec.width + x;
            // Reducing the phase argument first keeps the output exactly periodic in the disparity.
            const double phase = std::fmod(x + static_cast<double>(disparity[i]), spec.fringe_period);
            double v = spec.fringe_mean + spec.fringe_amplitude * std::cos(two_pi * phase / spec.fringe_period);
            if (spec.noise_sigma > 0) v += spec.noise_sigma * rng.normal();
            out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

std::vector<float> reference_pattern(const SceneSpec& spec) {
    const int h = spec.height, margin = spec.reference_margin(), w = spec.width + margin;
    std::vector<double> dots(static_cast<std::size_t>(h) * w, 0.0);
    // A dot at (row, camera-aligned column) is a pure function of the pattern seed, so the
    // pattern seen at zero disparity does not depend on the margin.
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto col = static_cast<std::int64_t>(x - margin);
            const std::uint64_t key = derive_seed(spec.pattern_seed, (static_cast<std::uint64_t>(y) << 32) ^
                                                                         static_cast<std::uint64_t>(col + (1LL << 31)));
            const double u = static_cast<double>(key >> 11) * 0x1.0p-53;
            if (u < spec.speckle_density) dots[static_cast<std::size_t>(y) * w + x] = 1.0;
        }
    }
    const double sigma = spec.speckle_blur_sigma;
    std::vector<double> blurred = dots;
    if (sigma > 0) {
        const int r = static_cast<int>(std::ceil(3.0 * sigma));
        std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
        for (int i = -r; i <= r; ++i) k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
        std::vector<double> tmp(dots.size(), 0.0);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double s = 0;
                for (int i = -r; i <= r; ++i) {
                    const int xx = x + i;
                    if (xx >= 0 && xx < w) s += k[static_cast<std::size_t>(i + r)] * dots[static_cast<std::size_t>(y) * w + xx];
                }
                tmp[static_cast<std::size_t>(y) * w + x] = s;
            }
        }
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double s = 0;
                for (int i = -r; i <= r; ++i) {
                    const int yy = y + i;
                    if (yy >= 0 && yy < h) s += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(yy) * w + x];
                }
                blurred[static_cast<std::size_t>(y) * w + x] = s;
            }
        }
    }
    const double mx = *std::max_element(blurred.begin(), blurred.end());
    std::vector<float> out(blurred.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(mx > 0 ? blurred[i] / mx : 0.0);
    return out;
}

SpeckleImage render_speckle(const std::vector<float>& disparity, const SceneSpec& spec,
                            const std::vector<float>& reference) {
    if (disparity.size() != pixels(spec)) throw std::invalid_argument("render_speckle: disparity size mismatch");
    const int h = spec.height, w = spec.width, margin = spec.reference_margin(), wr = w + margin;
    if (reference.size() != static_cast<std::size_t>(h) * wr) {
        throw std::invalid_argument("render_speckle: reference pattern size mismatch");
    }
    SpeckleImage out;
    out.intensity.assign(disparity.size(), 0.0f);
    out.valid.assign(disparity.size(), 0);
    std::vector<int> owner(static_cast<std::size_t>(wr));
    for (int y = 0; y < h; ++y) {
        std::fill(owner.begin(), owner.end(), -1);
        const float* d = disparity.data() + static_cast<std::size_t>(y) * w;
        for (int x = 0; x < w; ++x) {
            const long src = x + margin - std::lround(static_cast<double>(d[x]));
            if (src < 0 || src >= wr) continue;
            int& o = owner[static_cast<std::size_t>(src)];
            if (o < 0 || d[x] > d[o]) o = x;
        }
        for (int s = 0; s < wr; ++s) {
            const int x = owner[static_cast<std::size_t>(s)];
            if (x < 0) continue;
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            out.intensity[i] = reference[static_cast<std::size_t>(y) * wr + s];
            out.valid[i] = 1;
        }
    }
    if (spec.noise_sigma > 0) {
        Rng rng(derive_seed(spec.seed, kSpeckleNoise));
        for (std::size_t i = 0; i < out.intensity.size(); ++i) {
            const double n = spec.noise_sigma * rng.normal();
            if (out.valid[i]) out.intensity[i] = static_cast<float>(std::clamp(out.intensity[i] + n, 0.0, 1.0));
        }
    }
    return out;
}

SpeckleImage render_speckle(const std::vector<float>& disparity, const SceneSpec& spec) {
    return render_speckle(disparity, spec, reference_pattern(spec));
}

std::vector<MaskRect> draw_masks(const SceneSpec& spec) {
    Rng rng(derive_seed(spec.seed, kMaskStream));
    const int count = spec.mask_count >= 0 ? spec.mask_count : rng.uniform_int(0, 3);
    std::vector<MaskRect> masks;
    for (int k = 0; k < count; ++k) {
        MaskRect m;
        m.h = std::min(spec.height, rng.uniform_int(spec.mask_side_min(), spec.mask_side_max()));
        m.w = std::min(spec.width, rng.uniform_int(spec.mask_side_min(), spec.mask_side_max()));
        m.y0 = rng.uniform_int(0, spec.height - m.h);
        m.x0 = rng.uniform_int(0, spec.width - m.w);
        masks.push_back(m);
    }
    return masks;
}

void apply_masks(Sample& s, const std::vector<MaskRect>& masks) {
    for (const auto& m : masks) {
        for (int y = std::max(0, m.y0); y < std::min(s.height, m.y0 + m.h); ++y) {
            for (int x = std::max(0, m.x0); x < std::min(s.width, m.x0 + m.w); ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
                s.fringe[i] = 0.0f;
                s.speckle[i] = 0.0f;
                s.valid[i] = 0;
            }
        }
    }
}

void apply_masks(Sample& s, const SceneSpec& spec) { apply_masks(s, draw_masks(spec)); }

Sample generate_sample(const SceneSpec& spec, const std::vector<float>& reference) {
    Scene sc = generate_scene(spec);
    Sample s;
    s.height = spec.height;
    s.width = spec.width;
    s.fringe = render_fringe(sc.disparity, spec);
    SpeckleImage sp = render_speckle(sc.disparity, spec, reference);
    s.speckle = std::move(sp.intensity);
    s.valid = std::move(sp.valid);
    s.disparity = std::move(sc.disparity);
    s.saliency = std::move(sc.saliency);
    s.occluded = sc.occluded;
    apply_masks(s, spec);
    return s;
}

Sample generate_sample(const SceneSpec& spec) { return generate_sample(spec, reference_pattern(spec)); }

std::vector<std::uint8_t> encode_sample(const Sample& s) {
    const std::size_t n = static_cast<std::size_t>(s.height) * s.width;
    if (s.fringe.size() != n || s.speckle.size() != n || s.disparity.size() != n || s.saliency.size() != n ||
        s.valid.size() != n) {
        throw std::invalid_argument("encode_sample: plane sizes do not match the frame");
    }
    nlohmann::ordered_json hdr;
    hdr["height"] = s.height;
    hdr["width"] = s.width;
    hdr["occluded"] = s.occluded;
    hdr["planes"] = kPlanes;
    const std::string text = hdr.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 8);
    out.reserve(12 + text.size() + n * 14);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    put_floats(out, s.fringe);
    put_floats(out, s.speckle);
    put_floats(out, s.disparity);
    out.insert(out.end(), s.saliency.begin(), s.saliency.end());
    out.insert(out.end(), s.valid.begin(), s.valid.end());
    return out;
}

Sample decode_sample(const std::vector<std::uint8_t>& b) {
    const std::size_t head = std::min<std::size_t>(b.size(), 8);
    if (std::memcmp(b.data(), kMagic, head) != 0) throw BadMagicError("sample file: bad magic");
    if (b.size() < 12) throw TruncatedError("sample file: truncated before the header");
    const std::uint32_t len = get_u32(b.data() + 8);
    if (b.size() < 12 + static_cast<std::size_t>(len)) throw TruncatedError("sample file: truncated header");
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(b.begin() + 12, b.begin() + 12 + len);
    } catch (const nlohmann::json::exception& e) {
        throw HeaderMismatchError(std::string("sample file: unreadable header: ") + e.what());
    }
    Sample s;
    try {
        s.height = hdr.at("height").get<int>();
        s.width = hdr.at("width").get<int>();
        s.occluded = hdr.at("occluded").get<bool>();
        if (hdr.at("planes").get<std::vector<std::string>>() != kPlanes) {
            throw HeaderMismatchError("sample file: unexpected plane list");
        }
    } catch (const nlohmann::json::exception& e) {
        throw HeaderMismatchError(std::string("sample file: malformed header: ") + e.what());
    }
    if (s.height <= 0 || s.width <= 0) throw HeaderMismatchError("sample file: nonpositive frame size");
    const std::size_t n = static_cast<std::size_t>(s.height) * s.width;
    const std::size_t body = 12 + len, expected = body + n * 14;
    if (b.size() < expected) {
        throw TruncatedError("sample file: holds " + std::to_string(b.size() - body) + " plane bytes, header implies " +
                             std::to_string(n * 14));
    }
    if (b.size() > expected) throw HeaderMismatchError("sample file: trailing bytes beyond the declared planes");
    const std::uint8_t* p = b.data() + body;
    get_floats(p, s.fringe, n);
    get_floats(p + 4 * n, s.speckle, n);
    get_floats(p + 8 * n, s.disparity, n);
    s.saliency.assign(p + 12 * n, p + 13 * n);
    s.valid.assign(p + 13 * n, p + 14 * n);
    return s;
}

void write_sample(const Sample& s, const std::filesystem::path& path) {
    const auto bytes = encode_sample(s);
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + tmp.string());
        f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Sample read_sample(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open sample " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_sample(bytes);
}

std::vector<ManifestEntry> Manifest::select(const std::string& split, bool occluded_only) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == split && (!occluded_only || e.occluded)) out.push_back(e);
    }
    return out;
}

Manifest read_manifest(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open manifest " + path.string());
    Manifest m;
    m.root = path.parent_path();
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            m.entries.push_back({j.at("path").get<std::string>(), j.at("split").get<std::string>(),
                                 j.at("occluded").get<bool>()});
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return m;
}

void write_manifest(const Manifest& m, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write manifest " + path.string());
    for (const auto& e : m.entries) {
        nlohmann::ordered_json j;
        j["path"] = e.path;
        j["split"] = e.split;
        j["occluded"] = e.occluded;
        f << j.dump() << '\n';
    }
}

Manifest make_dataset(const SceneSpec& spec, int n_samples, double train_fraction,
                      const std::filesystem::path& out_dir) {
    if (n_samples < 2) throw std::invalid_argument("make_dataset needs at least 2 samples");
    if (!(train_fraction >= 0 && train_fraction <= 1)) throw std::invalid_argument("split must lie in [0, 1]");
    spec.validate();
    std::filesystem::create_directories(out_dir);
    const auto reference = reference_pattern(spec);
    const int n_train = static_cast<int>(std::lround(train_fraction * n_samples));
    Manifest m;
    m.root = out_dir;
    for (int i = 0; i < n_samples; ++i) {
        SceneSpec si = spec;
        si.seed = derive_seed(spec.seed, static_cast<std::uint64_t>(i));
        const Sample s = generate_sample(si, reference);
        char name[32];
        std::snprintf(name, sizeof name, "sample_%05d.slsamp", i);
        write_sample(s, out_dir / name);
        m.entries.push_back({name, i < n_train ? "train" : "test", s.occluded});
    }
    write_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

}  // namespace dualshot::slsim
