#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dmloc/affine.hpp"
#include "dmloc/tensor.hpp"

namespace dmloc {

/// Placement and appearance statistics for one synthetic disease class.
/// Coordinates are normalized to the canonical (un-posed) canvas, origin top
/// left, x to the right.
struct ClassSpec {
    int id = 0;
    std::string name;
    double mean_x = 0.5;
    double mean_y = 0.5;
    double spread = 0.03;
    bool symmetric = true;  // eligible for left/right mirrored placement
    double size_min = 0.05; // normalized radius (2 sigma)
    double size_max = 0.08;
    double intensity_min = 0.4;
    double intensity_max = 0.8;
};

/// One cardiac-like asymmetric class followed by three lung classes.
std::vector<ClassSpec> default_taxonomy();
void validate_taxonomy(const std::vector<ClassSpec>& taxonomy);

struct DatasetConfig {
    std::uint64_t seed = 42;
    std::size_t train_count = 4000;
    std::size_t val_count = 500;
    std::size_t test_count = 1000;
    std::size_t num_classes = 4;
    std::size_t image_size = 64;
    /// Unconditional per-class positive rate.
    std::vector<double> prevalence{0.2, 0.2, 0.2, 0.2};
    double rotation_deg = 15.0;
    double scale_min = 0.85;
    double scale_max = 1.15;
    double translation = 0.10;  // fraction of the image extent
    double normal_fraction = 0.4;
    double noise_std = 0.03;
    double anatomy_jitter = 0.05;

    void validate() const;
};

/// Axis-aligned box in pixel-edge coordinates (pixel j spans [j, j+1)).
struct GtBox {
    int class_id = 0;
    double x = 0, y = 0, w = 0, h = 0;
    friend bool operator==(const GtBox&, const GtBox&) = default;
};

struct BlobDraw {
    int class_id = 0;
    double cx = 0.5, cy = 0.5;  // normalized canonical centre
    double rx = 0.05, ry = 0.05; // normalized radius (2 sigma) per axis
    double amplitude = 0.5;
    bool mirrored = false;
};

struct AnatomyDraw {
    double lung_scale = 1.0;
    double heart_scale = 1.0;
    std::uint64_t noise_seed = 0;
    double noise_std = 0.0;
};

struct SampleDraws {
    AnatomyDraw anatomy;
    std::vector<BlobDraw> blobs;
};

struct SyntheticSample {
    std::size_t index = 0;
    Tensor image;  // [1,H,W] in [-1,1]
    std::vector<std::uint8_t> labels;
    std::vector<GtBox> boxes;
    AffineParams nuisance;
    bool is_normal = true;
};

struct Split {
    std::string name;
    std::vector<SyntheticSample> samples;
};

struct GenerationReport {
    std::vector<std::string> warnings;
};

struct Corpus {
    DatasetConfig config;
    std::vector<ClassSpec> taxonomy;
    Split train{"train", {}}, val{"val", {}}, test{"test", {}};
    GenerationReport report;

    const Split& split(const std::string& name) const;
    Split& split(const std::string& name);
    std::size_t num_classes() const { return taxonomy.size(); }
    std::size_t image_size() const { return config.image_size; }
};

/// Geometry of the phantom in canonical normalized coordinates. Lungs are
/// mirror images about x = 0.5; the cardiac ellipse is offset to the right.
struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(double x, double y) const;
};

struct PhantomGeometry {
    Ellipse torso{0.5, 0.56, 0.46, 0.50};
    Ellipse left_lung{0.31, 0.47, 0.14, 0.27};
    Ellipse heart{0.58, 0.63, 0.13, 0.11};
    double mediastinum_half_width = 0.035;

    Ellipse right_lung() const { return {1.0 - left_lung.cx, left_lung.cy, left_lung.rx, left_lung.ry}; }
};

const PhantomGeometry& phantom_geometry();

/// Canonical phantom without blobs, [1,H,W].
Tensor render_phantom(const AnatomyDraw& anatomy, std::size_t size);

/// Renders blobs onto the phantom, applies the nuisance pose, and derives the
/// ground-truth boxes. Blobs that end up off canvas are dropped together with
/// their label.
SyntheticSample render_sample(const SampleDraws& draws, const AffineParams& nuisance, std::size_t size,
                              std::size_t num_classes);

/// Draws the labels, blobs, anatomy and nuisance of one sample from its own
/// seeded stream.
struct SampleRecipe {
    SampleDraws draws;
    AffineParams nuisance;
};
SampleRecipe draw_sample(const DatasetConfig& config, const std::vector<ClassSpec>& taxonomy,
                         std::uint64_t stream_seed);

Corpus generate_dataset(const DatasetConfig& config, const std::vector<ClassSpec>& taxonomy);

// ---- persistence ----------------------------------------------------------

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);
/// Hash over config, taxonomy, labels and image payloads.
std::string corpus_hash(const Corpus& corpus);

/// Imports 8-bit binary PGM images listed in a JSONL sidecar (one object per
/// line: file, labels, optional boxes) as a split. Images are mapped to
/// [-1,1] and resized to `size` when needed.
Split import_pgm_split(const std::filesystem::path& labels_jsonl, const std::string& split_name, std::size_t size,
                       std::size_t num_classes);

}  // namespace dmloc
