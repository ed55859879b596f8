#pragma once

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "dmloc/cam.hpp"
#include "dmloc/synth.hpp"

namespace dmloc {

enum class MaskMode { soft, binary, pseudo };

const char* to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string& s);

struct MaskBuildConfig {
    double score_threshold = 0.8;
    double tau = 0.5;
    std::set<int> asymmetric;  // classes whose maps are not flip-symmetrized
    MaskMode mode = MaskMode::soft;

    void validate() const;
};

struct MaskMetadata {
    std::size_t maps_used = 0;  // N_c; 0 for pseudo masks
    double score_threshold = 0.0;
    double tau = 0.0;
    bool symmetrized = false;
    MaskMode mode = MaskMode::soft;
};

struct DiseaseMask {
    int class_id = 0;
    Tensor mask;  // [p,p] in [0,1]
    MaskMetadata meta;
};

/// Plain activation maps of the positive-labelled samples whose class score
/// reaches the threshold. Throws when none qualify.
std::vector<ActivationMap> collect_high_quality(const ModelWeights& w, const Split& split, int class_id,
                                                double score_threshold);

/// Same for every class with one forward pass per sample; result[c] may be
/// empty (no throw).
std::vector<std::vector<ActivationMap>> collect_high_quality_all(const ModelWeights& w, const Split& split,
                                                                 double score_threshold);

/// Mean over maps of minmax(L~), L~ = L for asymmetric classes and
/// hflip(L) + L otherwise, followed by the threshold T: soft keeps values
/// >= tau and zeroes the rest, binary maps them to {0,1}.
DiseaseMask build_mask(const std::vector<ActivationMap>& maps, int class_id, const MaskBuildConfig& config);

/// Binary anatomical priors at p x p: the cardiac ellipse for asymmetric
/// classes, both lung fields for symmetric ones. Cells are tested at their
/// centres in canonical phantom coordinates.
std::vector<DiseaseMask> build_pseudo_masks(const std::vector<ClassSpec>& taxonomy, std::size_t p);

std::vector<Tensor> mask_tensors(const std::vector<DiseaseMask>& masks);
std::string masks_hash(const std::vector<DiseaseMask>& masks);

/// masks/{class}.dmt plus meta.json with per-class metadata and hashes.
void save_masks(const std::vector<DiseaseMask>& masks, const std::filesystem::path& dir);
/// Throws CorruptionError on hash mismatch or a missing class file.
std::vector<DiseaseMask> load_masks(const std::filesystem::path& dir, std::size_t num_classes);

}  // namespace dmloc
