#include "dmloc/masks.hpp"

#include <algorithm>

#include "dmloc/ops.hpp"
#include "dmloc/util.hpp"
#include "json_io.hpp"

namespace dmloc {

const char* to_string(MaskMode m) {
    switch (m) {
        case MaskMode::soft: return "soft";
        case MaskMode::binary: return "binary";
        case MaskMode::pseudo: return "pseudo";
    }
    return "?";
}

MaskMode mask_mode_from_string(const std::string& s) {
    if (s == "soft") return MaskMode::soft;
    if (s == "binary") return MaskMode::binary;
    if (s == "pseudo") return MaskMode::pseudo;
    throw ConfigError("unknown mask mode '" + s + "' (expected soft, binary or pseudo)");
}

void MaskBuildConfig::validate() const {
    if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) throw ConfigError("score threshold must lie in [0,1]");
    if (!(tau > 0.0 && tau < 1.0)) throw ConfigError("mask threshold tau must lie in (0,1)");
}

std::vector<std::vector<ActivationMap>> collect_high_quality_all(const ModelWeights& w, const Split& split,
                                                                 double score_threshold) {
    const std::size_t k = w.arch.num_classes;
    std::vector<std::vector<ActivationMap>> per_sample(split.samples.size());
    parallel_for(split.samples.size(), [&](std::size_t i) {
        const auto& s = split.samples[i];
        bool any = false;
        for (std::size_t c = 0; c < k; ++c) any = any || s.labels.at(c);
        if (!any) return;
        const auto r = forward(w, s.image);
        for (std::size_t c = 0; c < k; ++c) {
            if (s.labels[c] && double(r.probs[c]) >= score_threshold) {
                per_sample[i].push_back(
                    {int(c), cam_from_features(r.features(), w.head_w(), int(c)), MapSource::plain, s.index});
            }
        }
    });
    std::vector<std::vector<ActivationMap>> out(k);
    for (auto& maps : per_sample) {
        for (auto& m : maps) out[static_cast<std::size_t>(m.class_id)].push_back(std::move(m));
    }
    return out;
}

std::vector<ActivationMap> collect_high_quality(const ModelWeights& w, const Split& split, int class_id,
                                                double score_threshold) {
    if (class_id < 0 || static_cast<std::size_t>(class_id) >= w.arch.num_classes) {
        throw ConfigError("collect_high_quality: class id out of range");
    }
    auto all = collect_high_quality_all(w, split, score_threshold);
    auto maps = std::move(all[static_cast<std::size_t>(class_id)]);
    if (maps.empty()) {
        throw Error("no positive sample of class " + std::to_string(class_id) + " reaches score " +
                    std::to_string(score_threshold) + "; lower the score threshold to build this mask");
    }
    return maps;
}

DiseaseMask build_mask(const std::vector<ActivationMap>& maps, int class_id, const MaskBuildConfig& config) {
    config.validate();
    if (config.mode == MaskMode::pseudo) throw ConfigError("build_mask: pseudo masks come from build_pseudo_masks");
    if (maps.empty()) {
        throw Error("build_mask: no activation maps for class " + std::to_string(class_id) +
                    "; lower the score threshold");
    }
    const bool symmetrize = !config.asymmetric.count(class_id);
    const Shape shape = maps.front().map.shape();
    if (shape.size() != 2) throw ShapeError("build_mask: maps must be [p,p]");
    Tensor sum(shape);
    for (const auto& m : maps) {
        if (m.class_id != class_id) throw ConfigError("build_mask: map of another class in the input");
        if (m.map.shape() != shape) throw ShapeError("build_mask: maps differ in shape");
        const Tensor bar = symmetrize ? [&] {
            Tensor t = hflip(m.map);
            for (std::size_t i = 0; i < t.size(); ++i) t[i] += m.map[i];
            return t;
        }()
                                      : m.map;
        const Tensor n = minmax_normalize(bar);
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += n[i];
    }
    const float tau = static_cast<float>(config.tau), inv = 1.0f / static_cast<float>(maps.size());
    DiseaseMask out{class_id, Tensor(shape), {maps.size(), config.score_threshold, config.tau, symmetrize, config.mode}};
    for (std::size_t i = 0; i < sum.size(); ++i) {
        const float v = std::clamp(sum[i] * inv, 0.0f, 1.0f);
        out.mask[i] = config.mode == MaskMode::binary ? (v >= tau ? 1.0f : 0.0f) : (v >= tau ? v : 0.0f);
    }
    return out;
}

std::vector<DiseaseMask> build_pseudo_masks(const std::vector<ClassSpec>& taxonomy, std::size_t p) {
    if (p == 0) throw ShapeError("build_pseudo_masks: p must be positive");
    const auto& geo = phantom_geometry();
    Tensor heart({p, p}), lungs({p, p});
    for (std::size_t i = 0; i < p; ++i) {
        const double y = (double(i) + 0.5) / double(p);
        for (std::size_t j = 0; j < p; ++j) {
            const double x = (double(j) + 0.5) / double(p);
            heart[i * p + j] = geo.heart.contains(x, y) ? 1.0f : 0.0f;
            lungs[i * p + j] = geo.left_lung.contains(x, y) ? 1.0f : 0.0f;
        }
    }
    // Mirror the rasterized left field instead of testing the right ellipse,
    // so the pair is symmetric to the bit.
    const Tensor mirrored = hflip(lungs);
    for (std::size_t i = 0; i < lungs.size(); ++i) lungs[i] = std::max(lungs[i], mirrored[i]);

    std::vector<DiseaseMask> out;
    for (const auto& c : taxonomy) {
        out.push_back({c.id, c.symmetric ? lungs : heart, {0, 0.0, 0.0, c.symmetric, MaskMode::pseudo}});
    }
    return out;
}

std::vector<Tensor> mask_tensors(const std::vector<DiseaseMask>& masks) {
    std::vector<Tensor> t;
    for (const auto& m : masks) t.push_back(m.mask);
    return t;
}

std::string masks_hash(const std::vector<DiseaseMask>& masks) {
    Fnv1a h;
    for (const auto& m : masks) {
        h.update_u64(static_cast<std::uint64_t>(m.class_id)).update(m.mask);
        h.update(to_string(m.meta.mode));
    }
    return h.hex();
}

void save_masks(const std::vector<DiseaseMask>& masks, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    json classes = json::array();
    for (const auto& m : masks) {
        write_dmt(dir / (std::to_string(m.class_id) + ".dmt"), m.mask);
        classes.push_back(json{{"class", m.class_id},
                               {"maps_used", m.meta.maps_used},
                               {"score_threshold", m.meta.score_threshold},
                               {"tau", m.meta.tau},
                               {"mode", to_string(m.meta.mode)},
                               {"symmetrized", m.meta.symmetrized},
                               {"hash", hash_tensor(m.mask)}});
    }
    write_json(dir / "meta.json", json{{"masks_hash", masks_hash(masks)}, {"classes", classes}});
}

std::vector<DiseaseMask> load_masks(const std::filesystem::path& dir, std::size_t num_classes) {
    const json meta = read_json(dir / "meta.json");
    std::vector<DiseaseMask> out;
    try {
        const auto& classes = meta.at("classes");
        for (std::size_t c = 0; c < num_classes; ++c) {
            const auto it = std::find_if(classes.begin(), classes.end(),
                                         [&](const json& j) { return j.at("class").get<std::size_t>() == c; });
            const auto path = dir / (std::to_string(c) + ".dmt");
            if (it == classes.end() || !std::filesystem::exists(path)) {
                throw CorruptionError("mask set in " + dir.string() + " is missing class " + std::to_string(c));
            }
            DiseaseMask m;
            m.class_id = static_cast<int>(c);
            m.mask = read_dmt(path);
            if (hash_tensor(m.mask) != it->at("hash").get<std::string>()) {
                throw CorruptionError(path.string() + ": content hash does not match meta.json");
            }
            m.meta.maps_used = it->at("maps_used").get<std::size_t>();
            m.meta.score_threshold = it->at("score_threshold").get<double>();
            m.meta.tau = it->at("tau").get<double>();
            m.meta.mode = mask_mode_from_string(it->at("mode").get<std::string>());
            m.meta.symmetrized = it->at("symmetrized").get<bool>();
            out.push_back(std::move(m));
        }
    } catch (const json::exception& e) {
        throw CorruptionError((dir / "meta.json").string() + ": " + e.what());
    }
    return out;
}

}  // namespace dmloc
