#pragma once

#include <filesystem>
#include <string>

#include "dmloc/classifier.hpp"

namespace dmloc {

enum class MapSource { plain, attention };

const char* to_string(MapSource s);

/// Unnormalized p x p class activation map.
struct ActivationMap {
    int class_id = 0;
    Tensor map;  // [p,p]
    MapSource source = MapSource::plain;
    std::size_t sample_id = 0;
};

/// S_c = sum_k W[c,k] f_k over final features [C',p,p].
Tensor cam_from_features(const Tensor& features, const Tensor& head_w, int class_id);

ActivationMap class_activation_map(const ModelWeights& w, const Tensor& image, int class_id,
                                   std::size_t sample_id = 0);

/// Guided map: sum_k W[c,k] (psi * f_k + f_k).
ActivationMap attention_cam(const ModelWeights& w, const Tensor& image, int class_id, const Tensor& mask,
                            std::size_t sample_id = 0);

/// sigmoid(mean(map) + bias).
float class_probability(const ActivationMap& map, float bias);

/// Writes cams/{split}/{sample}_{class}.dmt for every sample and class plus an
/// index.jsonl (sample, class, source, probability). Masks select the guided
/// maps; without masks the plain maps are written.
void export_cams(const ModelWeights& w, const Split& split, MaskSpan<float> masks, const std::filesystem::path& dir);

}  // namespace dmloc
