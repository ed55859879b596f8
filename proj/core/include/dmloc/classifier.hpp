#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmloc/synth.hpp"
#include "dmloc/tensor.hpp"

namespace dmloc {

/// Conv stack (3x3, zero padding 1, ReLU after every block), then global
/// average pooling and one linear unit per class.
struct Architecture {
    std::size_t input_size = 64;
    std::vector<std::size_t> channels{16, 32, 64, 64};
    std::vector<std::size_t> strides{2, 2, 2, 1};
    std::size_t kernel = 3;
    std::size_t num_classes = 4;

    std::size_t blocks() const { return channels.size(); }
    std::size_t feature_channels() const { return channels.back(); }
    std::size_t feature_size() const;  // p
    void validate() const;
    friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Parameters in a fixed order: conv{i}.weight, conv{i}.bias for every block,
/// then head.weight [K,C'] and head.bias [K].
template <class T>
struct BasicModelWeights {
    Architecture arch;
    std::uint64_t init_seed = 0;
    std::vector<BasicTensor<T>> params;

    BasicTensor<T>& conv_w(std::size_t b) { return params[2 * b]; }
    const BasicTensor<T>& conv_w(std::size_t b) const { return params[2 * b]; }
    BasicTensor<T>& conv_b(std::size_t b) { return params[2 * b + 1]; }
    const BasicTensor<T>& conv_b(std::size_t b) const { return params[2 * b + 1]; }
    BasicTensor<T>& head_w() { return params[2 * arch.blocks()]; }
    const BasicTensor<T>& head_w() const { return params[2 * arch.blocks()]; }
    BasicTensor<T>& head_b() { return params[2 * arch.blocks() + 1]; }
    const BasicTensor<T>& head_b() const { return params[2 * arch.blocks() + 1]; }

    std::vector<std::string> param_names() const;

    template <class U>
    BasicModelWeights<U> cast() const {
        BasicModelWeights<U> out{arch, init_seed, {}};
        for (const auto& p : params) out.params.push_back(p.template cast<U>());
        return out;
    }
};

using ModelWeights = BasicModelWeights<float>;
using ModelWeights64 = BasicModelWeights<double>;

/// He-normal conv kernels, small normal head weights, zero biases.
ModelWeights init_model(const Architecture& arch, std::uint64_t seed);

/// Content hash over architecture and every parameter.
std::string model_hash(const ModelWeights& w);

// ---- backbone -------------------------------------------------------------

template <class T>
struct BackboneTrace {
    std::vector<BasicTensor<T>> inputs;  // inputs[b] feeds block b
    std::vector<BasicTensor<T>> pre;     // pre-activation of block b
    std::vector<BasicTensor<T>> outputs; // ReLU output of block b; outputs.back() is f(x)
};

template <class T>
BackboneTrace<T> backbone_forward(const BasicModelWeights<T>& w, const BasicTensor<T>& image);

template <class T>
struct BackboneGrads {
    std::vector<BasicTensor<T>> params;  // conv{i}.weight, conv{i}.bias; empty when not requested
    BasicTensor<T> input;                // empty when not requested
};

/// grad_outputs[b] is the upstream gradient on outputs[b]; an empty tensor
/// means zero. Only blocks up to the deepest non-empty entry are visited.
template <class T>
BackboneGrads<T> backbone_backward(const BasicModelWeights<T>& w, const BackboneTrace<T>& trace,
                                   const std::vector<BasicTensor<T>>& grad_outputs, bool need_params,
                                   bool need_input);

// ---- classification head --------------------------------------------------

/// One [p,p] mask per class (values in [0,1]) or an empty span for none.
template <class T>
using MaskSpan = std::span<const BasicTensor<T>>;

template <class T>
struct ForwardResult {
    BackboneTrace<T> trace;
    std::vector<std::vector<T>> pooled;  // [K][C'] GAP of (masked) features per class head
    std::vector<T> logits;
    std::vector<T> probs;
    const BasicTensor<T>& features() const { return trace.outputs.back(); }
};

/// logit_c = sum_k W[c,k] * GAP(f'_k) + b_c with f' = psi_c * f + f when a
/// mask set is given, f' = f otherwise.
template <class T>
ForwardResult<T> forward(const BasicModelWeights<T>& w, const BasicTensor<T>& image, MaskSpan<T> masks = {});

/// Gradient of every parameter (same order as params) given dLoss/dlogits.
template <class T>
std::vector<BasicTensor<T>> backward(const BasicModelWeights<T>& w, const ForwardResult<T>& fwd,
                                     std::span<const T> grad_logits, MaskSpan<T> masks = {});

/// Checks that a mask set matches the architecture (K masks of p x p in [0,1]).
void validate_masks(const Architecture& arch, MaskSpan<float> masks);

/// Replaces every class mask by the elementwise maximum over classes, i.e. a
/// single shared prior applied to every head.
std::vector<Tensor> shared_mask_set(MaskSpan<float> masks);

// ---- loss -----------------------------------------------------------------

struct BceStats {
    double loss = 0.0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    double w_pos = 0.0;
    double w_neg = 0.0;
    bool degenerate = false;  // |P| or |N| was zero; that weight was set to 0
};

inline constexpr double kProbClamp = 1e-7;

/// Eq.-10 style weighted binary cross-entropy over all batch x K entries:
/// w_P * sum_P -ln p + w_N * sum_N -ln(1-p), with w_P = (|P|+|N|)/|P| and
/// w_N = (|P|+|N|)/|N|. Probabilities are clamped to [1e-7, 1-1e-7].
template <class T>
BceStats weighted_bce(std::span<const T> probs, std::span<const std::uint8_t> labels);

/// dLoss/dlogit for probabilities produced by a sigmoid. Zero where the clamp
/// is active.
template <class T>
std::vector<T> weighted_bce_grad_logits(std::span<const T> probs, std::span<const std::uint8_t> labels);

// ---- training -------------------------------------------------------------

/// lr defaults to 1e-3: at desk scale (from-scratch 4-block net, 4000
/// images) 1e-4 leaves stage-1 at chance-level CAMs after five epochs.
struct TrainConfig {
    std::size_t epochs = 5;
    double lr = 1e-3;
    std::size_t batch = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;            // mean batch loss over the epoch
    std::vector<double> val_auc;        // per class; NaN when undefined
    double mean_val_auc = 0.0;
};

struct TrainTrace {
    std::vector<EpochMetrics> epochs;
    std::vector<double> batch_losses;
    std::size_t degenerate_batches = 0;
};

struct TrainResult {
    ModelWeights weights;
    TrainTrace trace;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t batch) : Error(what), batch_(batch) {}
    std::size_t batch() const { return batch_; }

private:
    std::size_t batch_;
};

/// Adam on the weighted BCE. Deterministic given config.seed and independent
/// of the worker count. `val` may be null (no AUC tracking).
TrainResult train_classifier(ModelWeights weights, const Split& train, const Split* val, const TrainConfig& config,
                             MaskSpan<float> masks = {});

/// Per-sample probabilities [N,K] and logits [N,K].
struct Scores {
    Tensor probs;
    Tensor logits;
};
Scores predict_scores(const ModelWeights& w, const Split& split, MaskSpan<float> masks = {});

/// Per-class AUC over a split; NaN for classes with a single label value.
std::vector<double> per_class_auc(const Tensor& probs, const Split& split);

// ---- checkpoints ----------------------------------------------------------

/// Writes {name}.dmt per parameter plus model.json (architecture, init seed,
/// per-file hashes).
void save_model(const ModelWeights& w, const std::filesystem::path& dir);
/// Throws CorruptionError when a tensor file does not match its recorded hash.
ModelWeights load_model(const std::filesystem::path& dir);

}  // namespace dmloc
