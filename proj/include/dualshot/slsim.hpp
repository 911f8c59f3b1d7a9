#pragma once
// Synthetic structured-light scenes: a background plane with up to four
// objects, rendered as a phase-shifted fringe image and a horizontally
// warped speckle image, plus the on-disk sample format and dataset manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualshot::slsim {

enum class ShapeKind { Ellipse, Rectangle, Ramp };

// Rotated object footprint.  Ramps vary linearly from d0 to d1 along the
// object's local x axis; ellipses and rectangles are flat at d0.
struct ObjectSpec {
    ShapeKind kind = ShapeKind::Rectangle;
    double cy = 0, cx = 0;
    double ry = 1, rx = 1;  // half extents
    double angle = 0;       // radians
    double d0 = 10, d1 = 10;

    bool contains(double y, double x) const;
    double disparity_at(double y, double x) const;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    int height = 480, width = 640;
    int n_objects = -1;  // -1: drawn per scene
    double d_min = 2.0, d_max = 40.0;
    double background_disparity = 1.0;
    double fringe_period = 16.0;
    double fringe_mean = 0.5, fringe_amplitude = 0.45;
    double speckle_density = 0.08;
    double speckle_blur_sigma = 0.8;
    double noise_sigma = 0.01;
    int mask_count = -1;  // -1: uniform in [0, 3]
    int mask_min = -1, mask_max = -1;  // side length range; -1: derived from the frame size
    double occluded_bias = 0.563;      // probability that a drawn scene is an occluded one
    std::uint64_t pattern_seed = 0x5eed5eedULL;
    std::optional<std::vector<ObjectSpec>> objects;  // explicit layout, bypasses random placement

    // Throws std::invalid_argument when an invariant is broken.
    void validate() const;
    int reference_margin() const;
    int mask_side_min() const;
    int mask_side_max() const;
};

// Largest default disparity that keeps d_max < width / 4.
double default_d_max(int width);

struct Scene {
    int height = 0, width = 0;
    std::vector<float> disparity;
    std::vector<std::uint8_t> saliency;
    bool occluded = false;
    std::vector<ObjectSpec> objects;
};

struct Sample {
    int height = 0, width = 0;
    std::vector<float> fringe, speckle, disparity;
    std::vector<std::uint8_t> saliency, valid;
    bool occluded = false;

    bool operator==(const Sample& o) const = default;
};

Scene generate_scene(const SceneSpec& spec);
// Rasterize an explicit object list over the background.
Scene compose_scene(const SceneSpec& spec, const std::vector<ObjectSpec>& objects);

std::vector<float> render_fringe(const std::vector<float>& disparity, const SceneSpec& spec);

// Fixed projector pattern of size [height, width + margin], values in [0, 1].
std::vector<float> reference_pattern(const SceneSpec& spec);

struct SpeckleImage {
    std::vector<float> intensity;
    std::vector<std::uint8_t> valid;
};
SpeckleImage render_speckle(const std::vector<float>& disparity, const SceneSpec& spec,
                            const std::vector<float>& reference);
SpeckleImage render_speckle(const std::vector<float>& disparity, const SceneSpec& spec);

struct MaskRect {
    int y0, x0, h, w;
};
std::vector<MaskRect> draw_masks(const SceneSpec& spec);
void apply_masks(Sample& sample, const std::vector<MaskRect>& masks);
void apply_masks(Sample& sample, const SceneSpec& spec);

// Full pipeline: scene, both renders, masks.
Sample generate_sample(const SceneSpec& spec);
Sample generate_sample(const SceneSpec& spec, const std::vector<float>& reference);

class SampleFormatError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};
class BadMagicError : public SampleFormatError {
  public:
    using SampleFormatError::SampleFormatError;
};
class TruncatedError : public SampleFormatError {
  public:
    using SampleFormatError::SampleFormatError;
};
class HeaderMismatchError : public SampleFormatError {
  public:
    using SampleFormatError::SampleFormatError;
};

std::vector<std::uint8_t> encode_sample(const Sample& s);
Sample decode_sample(const std::vector<std::uint8_t>& bytes);
// Atomic: writes a temporary file next to path and renames it.
void write_sample(const Sample& s, const std::filesystem::path& path);
Sample read_sample(const std::filesystem::path& path);

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory
    std::string split;
    bool occluded = false;
};

struct Manifest {
    std::filesystem::path root;
    std::vector<ManifestEntry> entries;

    std::filesystem::path resolve(const ManifestEntry& e) const { return root / e.path; }
    std::vector<ManifestEntry> select(const std::string& split, bool occluded_only = false) const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& m, const std::filesystem::path& path);

// Writes n samples (seeded from spec.seed and the index) and "manifest.jsonl" under out_dir.
Manifest make_dataset(const SceneSpec& spec, int n_samples, double train_fraction,
                      const std::filesystem::path& out_dir);

}  // namespace dualshot::slsim
