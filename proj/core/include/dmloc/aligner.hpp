#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dmloc/affine.hpp"
#include "dmloc/classifier.hpp"

namespace dmloc {

// ---- anchor ---------------------------------------------------------------

struct AnchorImage {
    Tensor image;  // [1,H,W]
    std::size_t sample_count = 0;
    std::string source_split;
};

/// Pixel-wise mean of `count` images drawn without replacement from `normals`
/// (seeded). Throws ConfigError naming the shortfall when too few are given.
AnchorImage build_anchor(std::span<const Tensor> normals, std::size_t count, std::uint64_t seed,
                         std::string source_split = "train");
/// Same over the normal samples of a split.
AnchorImage build_anchor(const Split& split, std::size_t count, std::uint64_t seed);

std::string anchor_hash(const AnchorImage& a);

// ---- transform ------------------------------------------------------------

/// Raw (sx, sy, tx, ty, theta).
template <class T>
using PoseVector = std::array<T, 5>;

/// affine_warp, then avg_pool2d(kernel = stride = pool_kernel), then
/// bilinear_resample back to the input extent.
template <class T>
BasicTensor<T> transform_image(const BasicTensor<T>& input, const PoseVector<T>& params, std::size_t pool_kernel);
Tensor transform_image(const Tensor& input, const AffineParams& params, std::size_t pool_kernel);

/// Gradient of <grad_out, transform_image(input, params)> w.r.t. the five
/// parameters.
PoseVector<float> transform_image_backward(const Tensor& input, const PoseVector<float>& params,
                                           std::size_t pool_kernel, const Tensor& grad_out);

// ---- loss -----------------------------------------------------------------

struct LossParts {
    double total = 0.0;
    double perceptual = 0.0;
    double euclidean = 0.0;
};

/// Perceptual term: sum over the selected conv blocks s of
/// ||F_s(anchor) - F_s(x)||_2 / (C_s H_s W_s). Euclidean term: sum of
/// per-pixel |anchor - x|. The extractor is only read.
template <class T>
class AlignmentObjective {
public:
    AlignmentObjective(const BasicTensor<T>& anchor, const BasicModelWeights<T>* extractor,
                       std::vector<std::size_t> layers);

    LossParts value(const BasicTensor<T>& transformed) const;
    /// Fills `grad` with dTotal/dtransformed.
    LossParts value_and_grad(const BasicTensor<T>& transformed, BasicTensor<T>& grad) const;

    const std::vector<std::size_t>& layers() const { return layers_; }

private:
    LossParts evaluate(const BasicTensor<T>& x, BasicTensor<T>* grad) const;

    BasicTensor<T> anchor_;
    const BasicModelWeights<T>* extractor_;
    std::vector<std::size_t> layers_;
    std::vector<BasicTensor<T>> anchor_features_;  // indexed by block
};

template <class T>
LossParts alignment_loss(const BasicTensor<T>& anchor, const BasicTensor<T>& transformed,
                         const BasicModelWeights<T>* extractor, const std::vector<std::size_t>& layers);

// ---- regressor ------------------------------------------------------------

/// Small conv stack (3x3, padding 1, ReLU), flattened into a linear head with
/// five outputs: pose = identity + output_scale * (W f + b).
///
/// The alignment loss sums over every pixel, so its pose gradients are in the
/// thousands; the fixed output scale keeps plain SGD at lr 1e-3 stable.
struct AlignerArch {
    std::size_t input_size = 64;
    std::vector<std::size_t> channels{8, 16, 32, 32};
    std::size_t stride = 2;
    std::size_t kernel = 3;
    double output_scale = 0.03;

    std::size_t feature_size() const;
    std::size_t flat_features() const { return channels.back() * feature_size() * feature_size(); }
    void validate() const;
    friend bool operator==(const AlignerArch&, const AlignerArch&) = default;
};

/// conv{i}.weight, conv{i}.bias for every block, then head.weight [5,F] and
/// head.bias [5].
template <class T>
struct BasicAlignerWeights {
    AlignerArch arch;
    std::uint64_t init_seed = 0;
    std::vector<BasicTensor<T>> params;

    BasicTensor<T>& conv_w(std::size_t b) { return params[2 * b]; }
    const BasicTensor<T>& conv_w(std::size_t b) const { return params[2 * b]; }
    BasicTensor<T>& conv_b(std::size_t b) { return params[2 * b + 1]; }
    const BasicTensor<T>& conv_b(std::size_t b) const { return params[2 * b + 1]; }
    BasicTensor<T>& head_w() { return params[2 * arch.channels.size()]; }
    const BasicTensor<T>& head_w() const { return params[2 * arch.channels.size()]; }
    BasicTensor<T>& head_b() { return params[2 * arch.channels.size() + 1]; }
    const BasicTensor<T>& head_b() const { return params[2 * arch.channels.size() + 1]; }

    std::vector<std::string> param_names() const;

    template <class U>
    BasicAlignerWeights<U> cast() const {
        BasicAlignerWeights<U> out{arch, init_seed, {}};
        for (const auto& p : params) out.params.push_back(p.template cast<U>());
        return out;
    }
};

using AlignerWeights = BasicAlignerWeights<float>;

/// He-normal convs, zero head weights and bias: the initial pose is the
/// identity.
AlignerWeights init_aligner(const AlignerArch& arch, std::uint64_t seed);
std::string aligner_hash(const AlignerWeights& w);

template <class T>
struct AlignerTrace {
    std::vector<BasicTensor<T>> inputs, pre, outputs;
    PoseVector<T> pose{};
};

template <class T>
AlignerTrace<T> aligner_forward(const BasicAlignerWeights<T>& w, const BasicTensor<T>& image);

/// Parameter gradients from dLoss/dpose.
template <class T>
std::vector<BasicTensor<T>> aligner_backward(const BasicAlignerWeights<T>& w, const AlignerTrace<T>& trace,
                                             const PoseVector<T>& grad_pose);

AffineParams predict_pose(const AlignerWeights& w, const Tensor& image);

/// Full per-sample loss of the aligner on one image and, when `grads` is
/// non-null, the parameter gradients.
LossParts aligner_sample_loss(const AlignerWeights& w, const AlignmentObjective<float>& objective,
                              const Tensor& image, std::size_t pool_kernel, std::vector<Tensor>* grads);

// ---- training -------------------------------------------------------------

struct AlignerTrainConfig {
    std::size_t epochs = 5;
    double lr = 0.001;
    std::size_t batch = 16;
    std::uint64_t seed = 0;
    std::size_t pool_kernel = 4;
    std::vector<std::size_t> layers{0, 1, 2, 3};

    void validate() const;
};

struct AlignerEpoch {
    std::size_t epoch = 0;
    LossParts train;  // mean per-sample loss over the epoch
};

struct AlignerTrainResult {
    AlignerWeights weights;
    std::vector<AlignerEpoch> curve;
    std::vector<double> batch_losses;
    std::string extractor_hash_before, extractor_hash_after;
};

/// The target the transformed images are compared with: the anchor through
/// the same pool + resample at identity pose. The smoother alone magnifies by
/// H/(H-k) about the centre; smoothing both sides keeps identity optimal for
/// unposed inputs.
Tensor smoothed_anchor(const AnchorImage& anchor, std::size_t pool_kernel);

/// Plain SGD on the batch-mean alignment loss against smoothed_anchor(). Throws TrainingError on a
/// non-finite loss, gradient or weight.
AlignerTrainResult train_aligner(AlignerWeights weights, const Split& train, const AnchorImage& anchor,
                                 const ModelWeights& extractor, const AlignerTrainConfig& config);

/// Mean per-sample loss over a split, against smoothed_anchor().
LossParts mean_alignment_loss(const AlignerWeights& w, const Split& split, const AnchorImage& anchor,
                              const ModelWeights& extractor, const std::vector<std::size_t>& layers,
                              std::size_t pool_kernel);

// ---- inference ------------------------------------------------------------

struct AlignedSplit {
    Split split;
    std::vector<AffineParams> predicted;
};

/// Box in observed coordinates -> box in aligned coordinates: extent of the
/// mapped inscribed ellipse, clipped to the canvas.
GtBox align_box(const GtBox& box, const AffineParams& predicted, std::size_t size);

/// Where a box lands after the pool + resample smoother at identity pose
/// (a magnification by (H-1)/(H-k) about the centre).
GtBox smooth_box(const GtBox& box, std::size_t size, std::size_t pool_kernel);

/// Replaces every image by its aligned version (transform_image when
/// `smooth`, the bare warp otherwise) and maps ground-truth boxes alongside
/// (align_box, then smooth_box when smoothing).
AlignedSplit align_dataset(const AlignerWeights& w, const Split& split, std::size_t pool_kernel, bool smooth = true);

// ---- checkpoints ----------------------------------------------------------

/// {name}.dmt per parameter plus meta.json. `extra` is merged into the meta
/// (training settings, anchor hash).
void save_aligner(const AlignerWeights& w, const std::filesystem::path& dir, const std::string& extra_json = "{}");
AlignerWeights load_aligner(const std::filesystem::path& dir);

}  // namespace dmloc
