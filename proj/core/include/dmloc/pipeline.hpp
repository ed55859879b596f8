#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dmloc/aligner.hpp"
#include "dmloc/classifier.hpp"
#include "dmloc/loc_eval.hpp"
#include "dmloc/masks.hpp"
#include "dmloc/synth.hpp"

namespace dmloc {

enum class Variant { base, base_align, base_align_dm, base_align_pdm };

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct EvalConfig {
    std::vector<double> thresholds{0.3, 0.5, 0.7};
    double binarize = 0.5;
};

struct AlignStageConfig {
    AlignerArch arch;
    AlignerTrainConfig train;  // seed is derived from the global seed
    std::size_t anchor_count = 500;
    bool smooth = true;  // apply the pool + resample smoother at inference
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    Variant variant = Variant::base_align_dm;
    std::filesystem::path out = "experiment";
    DatasetConfig corpus;  // corpus.seed is the global seed
    std::vector<ClassSpec> taxonomy = default_taxonomy();
    AlignStageConfig aligner;
    Architecture classifier;
    TrainConfig stage1, stage2;
    MaskBuildConfig masks;
    bool asymmetric_from_taxonomy = true;  // unless masks.asymmetric was given
    EvalConfig eval;

    /// Derives every nested seed from `seed` (the corpus uses it as is), sizes
    /// the networks from the taxonomy and, unless given, marks its
    /// non-symmetric classes asymmetric.
    void resolve();
    void validate() const;
};

/// Line-oriented YAML with sections corpus, aligner, classifier (stage1,
/// stage2), masks, eval. Missing keys keep their defaults; unknown keys are a
/// ConfigError.
ExperimentConfig parse_experiment_config(const std::string& yaml);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
std::string experiment_config_yaml(const ExperimentConfig& config);

// ---- stages ---------------------------------------------------------------

enum class Stage { synth, train_align, align, train, build_masks, retrain, evaluate };

const char* to_string(Stage s);

/// The stage chain a variant runs, in order.
std::vector<Stage> stages_for(Variant v);

/// A stage failure: names the stage and the artifact directory it was writing.
class StageError : public Error {
public:
    StageError(std::string stage, std::filesystem::path artifact, const std::string& what);
    const std::string& stage() const { return stage_; }
    const std::filesystem::path& artifact() const { return artifact_; }

private:
    std::string stage_;
    std::filesystem::path artifact_;
};

struct StageRecord {
    std::string name;
    std::filesystem::path dir;
    std::string hash;  // content hash of the artifact
    bool reused = false;
};

struct RunOptions {
    /// Stop after this stage (inclusive); the variant must run it.
    std::optional<Stage> until;
    std::function<void(const std::string&)> log;
};

struct RunResult {
    std::vector<StageRecord> stages;
    std::optional<AccuracyTable> accuracy;  // set once evaluate ran
    std::vector<double> auc;                // test split, per class
};

/// Runs the variant's stage chain in config.out. Each stage writes its
/// artifact plus a meta.json holding the hashes of its inputs and is skipped
/// when a previous run left a matching meta.json. evaluate writes
/// results/localization.jsonl, results/auc.json, summary.json and
/// summary.txt.
RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options = {});

// ---- reports --------------------------------------------------------------

struct OverlayManifest {
    std::vector<std::filesystem::path> images;
    std::vector<std::string> warnings;
};

/// Draws `count` evaluated test records (picked by the experiment seed): the
/// CAM blended into the image, ground-truth box in white, predicted box in
/// black. Writes overlays/{sample}_{class}.pgm with a .json sidecar and
/// overlays/manifest.json.
OverlayManifest emit_overlays(const std::filesystem::path& experiment, const std::string& split, std::size_t count);

struct Comparison {
    std::string text;
    std::vector<std::string> rows;  // row labels, one per experiment
};

/// Accuracy per IoU threshold (taxonomy order, then mean), an AUC block and,
/// when both mask sources are present, a DM-vs-PDM table. Refuses experiments
/// built on different corpora.
Comparison compare_variants(const std::vector<std::filesystem::path>& experiments);

}  // namespace dmloc
