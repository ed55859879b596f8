#include "dmloc/cam.hpp"

#include "dmloc/ops.hpp"
#include "dmloc/util.hpp"
#include "json_io.hpp"

namespace dmloc {

const char* to_string(MapSource s) { return s == MapSource::plain ? "plain" : "attention"; }

Tensor cam_from_features(const Tensor& features, const Tensor& head_w, int class_id) {
    if (features.rank() != 3 || head_w.rank() != 2 || head_w.dim(1) != features.dim(0)) {
        throw ShapeError("cam: features " + shape_string(features.shape()) + " incompatible with head " +
                         shape_string(head_w.shape()));
    }
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= head_w.dim(0)) {
        throw ConfigError("cam: class id " + std::to_string(class_id) + " out of range");
    }
    const std::size_t ch = features.dim(0), area = features.dim(1) * features.dim(2);
    Tensor map({features.dim(1), features.dim(2)});
    const float* wc = head_w.data() + static_cast<std::size_t>(class_id) * ch;
    for (std::size_t x = 0; x < area; ++x) {
        double acc = 0.0;
        for (std::size_t k = 0; k < ch; ++k) acc += double(wc[k]) * features[k * area + x];
        map[x] = static_cast<float>(acc);
    }
    return map;
}

namespace {

void check_class(const ModelWeights& w, int class_id) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= w.arch.num_classes) {
        throw ConfigError("class id " + std::to_string(class_id) + " out of range for " +
                          std::to_string(w.arch.num_classes) + " classes");
    }
}

}  // namespace

ActivationMap class_activation_map(const ModelWeights& w, const Tensor& image, int class_id, std::size_t sample_id) {
    check_class(w, class_id);
    const auto trace = backbone_forward(w, image);
    return {class_id, cam_from_features(trace.outputs.back(), w.head_w(), class_id), MapSource::plain, sample_id};
}

ActivationMap attention_cam(const ModelWeights& w, const Tensor& image, int class_id, const Tensor& mask,
                            std::size_t sample_id) {
    check_class(w, class_id);
    const auto trace = backbone_forward(w, image);
    const Tensor fused = fuse_attention(trace.outputs.back(), mask);
    return {class_id, cam_from_features(fused, w.head_w(), class_id), MapSource::attention, sample_id};
}

float class_probability(const ActivationMap& map, float bias) {
    double acc = 0.0;
    for (float v : map.map.values()) acc += v;
    return sigmoid_scalar(static_cast<float>(acc / double(map.map.size()) + bias));
}

void export_cams(const ModelWeights& w, const Split& split, MaskSpan<float> masks, const std::filesystem::path& dir) {
    validate_masks(w.arch, masks);
    const auto out = dir / split.name;
    std::filesystem::create_directories(out);
    const std::size_t k = w.arch.num_classes;
    std::vector<std::string> lines(split.samples.size());
    parallel_for(split.samples.size(), [&](std::size_t i) {
        const auto& s = split.samples[i];
        const auto trace = backbone_forward(w, s.image);
        for (std::size_t c = 0; c < k; ++c) {
            ActivationMap m{int(c), {}, masks.empty() ? MapSource::plain : MapSource::attention, s.index};
            m.map = cam_from_features(masks.empty() ? trace.outputs.back()
                                                    : fuse_attention(trace.outputs.back(), masks[c]),
                                      w.head_w(), int(c));
            write_dmt(out / (std::to_string(s.index) + "_" + std::to_string(c) + ".dmt"), m.map);
            lines[i] += json{{"sample", s.index},
                             {"class", c},
                             {"source", to_string(m.source)},
                             {"probability", class_probability(m, w.head_b()[c])}}
                            .dump() +
                        "\n";
        }
    });
    std::string index;
    for (const auto& l : lines) index += l;
    write_text(out / "index.jsonl", index);
}

}  // namespace dmloc
