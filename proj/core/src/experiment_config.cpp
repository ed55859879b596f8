#include <yaml-cpp/yaml.h>

#include <charconv>
#include <set>
#include <sstream>

#include "dmloc/pipeline.hpp"
#include "experiment_json.hpp"

namespace dmloc {

const char* to_string(Variant v) {
    switch (v) {
        case Variant::base: return "base";
        case Variant::base_align: return "base+align";
        case Variant::base_align_dm: return "base+align+dm";
        case Variant::base_align_pdm: return "base+align+pdm";
    }
    return "?";
}

Variant variant_from_string(const std::string& s) {
    for (auto v : {Variant::base, Variant::base_align, Variant::base_align_dm, Variant::base_align_pdm}) {
        if (s == to_string(v)) return v;
    }
    throw ConfigError("unknown variant '" + s + "' (expected base, base+align, base+align+dm or base+align+pdm)");
}

void ExperimentConfig::resolve() {
    corpus.seed = seed;
    stage1.seed = derive_seed(seed, "cls");
    stage2.seed = stage1.seed;
    aligner.train.seed = derive_seed(seed, "align");
    corpus.num_classes = taxonomy.size();
    classifier.num_classes = taxonomy.size();
    classifier.input_size = corpus.image_size;
    aligner.arch.input_size = corpus.image_size;
    if (asymmetric_from_taxonomy) {
        masks.asymmetric.clear();
        for (const auto& c : taxonomy) {
            if (!c.symmetric) masks.asymmetric.insert(c.id);
        }
    }
}

void ExperimentConfig::validate() const {
    corpus.validate();
    validate_taxonomy(taxonomy);
    if (corpus.num_classes != taxonomy.size()) {
        throw ConfigError("corpus has " + std::to_string(corpus.num_classes) + " classes but the taxonomy " +
                          std::to_string(taxonomy.size()));
    }
    classifier.validate();
    if (classifier.input_size != corpus.image_size || classifier.num_classes != taxonomy.size()) {
        throw ConfigError("classifier input size / class count do not match the corpus");
    }
    aligner.arch.validate();
    aligner.train.validate();
    if (aligner.anchor_count == 0) throw ConfigError("aligner.anchor_count must be at least 1");
    for (const TrainConfig* t : {&stage1, &stage2}) {
        if (t->epochs == 0 || t->batch == 0 || !(t->lr > 0.0)) {
            throw ConfigError("classifier stages need epochs >= 1, batch >= 1 and lr > 0");
        }
    }
    masks.validate();
    if (masks.mode == MaskMode::pseudo) throw ConfigError("masks.mode is soft or binary; pseudo masks come from the pdm variant");
    for (int c : masks.asymmetric) {
        if (c < 0 || static_cast<std::size_t>(c) >= taxonomy.size()) {
            throw ConfigError("masks.asymmetric names class " + std::to_string(c) + " outside the taxonomy");
        }
    }
    if (eval.thresholds.empty()) throw ConfigError("eval.thresholds must not be empty");
    for (double t : eval.thresholds) {
        if (!(t > 0.0 && t <= 1.0)) throw ConfigError("eval.thresholds must lie in (0, 1]");
    }
    if (!(eval.binarize > 0.0 && eval.binarize <= 1.0)) throw ConfigError("eval.binarize must lie in (0, 1]");
    if (out.empty()) throw ConfigError("output directory must not be empty");
}

// ---- YAML -----------------------------------------------------------------

namespace {

class Section {
public:
    Section(const YAML::Node& node, std::string path, std::set<std::string> keys)
        : node_(node), path_(std::move(path)), present_(node && !node.IsNull()) {
        if (!present_) return;
        if (!node_.IsMap()) throw ConfigError(path_ + ": expected a section");
        for (const auto& kv : node_) {
            const auto key = kv.first.as<std::string>();
            if (!keys.count(key)) throw ConfigError("unknown key '" + qualified(key) + "'");
        }
    }

    template <class T>
    void get(const std::string& key, T& out) const {
        if (!has(key)) return;
        try {
            out = node_[key].template as<T>();
        } catch (const YAML::Exception&) {
            throw ConfigError("bad value for '" + qualified(key) + "'");
        }
    }

    YAML::Node child(const std::string& key) const { return has(key) ? node_[key] : YAML::Node(); }
    bool has(const std::string& key) const { return present_ && node_[key] && !node_[key].IsNull(); }
    std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    YAML::Node node_;
    std::string path_;
    bool present_;
};

void read_train(const Section& s, TrainConfig& t) {
    s.get("epochs", t.epochs);
    s.get("lr", t.lr);
    s.get("batch", t.batch);
    s.get("beta1", t.beta1);
    s.get("beta2", t.beta2);
    s.get("adam_eps", t.adam_eps);
}

const std::set<std::string> kTrainKeys{"epochs", "lr", "batch", "beta1", "beta2", "adam_eps"};

std::vector<ClassSpec> read_taxonomy(const YAML::Node& node) {
    if (!node.IsSequence()) throw ConfigError("taxonomy: expected a list of classes");
    std::vector<ClassSpec> out;
    for (std::size_t i = 0; i < node.size(); ++i) {
        const Section s(node[i], "taxonomy[" + std::to_string(i) + "]",
                        {"name", "placement", "spread", "symmetric", "radius", "intensity"});
        ClassSpec c;
        c.id = static_cast<int>(i);
        std::vector<double> placement{c.mean_x, c.mean_y}, radius{c.size_min, c.size_max},
            intensity{c.intensity_min, c.intensity_max};
        s.get("name", c.name);
        s.get("placement", placement);
        s.get("spread", c.spread);
        s.get("symmetric", c.symmetric);
        s.get("radius", radius);
        s.get("intensity", intensity);
        if (placement.size() != 2 || radius.size() != 2 || intensity.size() != 2) {
            throw ConfigError("taxonomy[" + std::to_string(i) + "]: placement, radius and intensity take two values");
        }
        c.mean_x = placement[0];
        c.mean_y = placement[1];
        c.size_min = radius[0];
        c.size_max = radius[1];
        c.intensity_min = intensity[0];
        c.intensity_max = intensity[1];
        out.push_back(c);
    }
    return out;
}

std::string num(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, r.ptr);
    if (s.find_first_of(".en") == std::string::npos) s += ".0";
    return s;
}

template <class T>
std::string list(const std::vector<T>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ", ";
        if constexpr (std::is_floating_point_v<T>) {
            s += num(v[i]);
        } else {
            s += std::to_string(v[i]);
        }
    }
    return s + "]";
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& yaml) {
    YAML::Node root;
    try {
        root = YAML::Load(yaml);
    } catch (const YAML::Exception& e) {
        throw ConfigError(std::string("config is not valid YAML: ") + e.what());
    }
    ExperimentConfig c;
    if (!root || root.IsNull()) return c;
    const Section top(root, "", {"seed", "variant", "out", "corpus", "taxonomy", "aligner", "classifier", "masks", "eval"});
    top.get("seed", c.seed);
    std::string variant = to_string(c.variant), out = c.out.string();
    top.get("variant", variant);
    top.get("out", out);
    c.variant = variant_from_string(variant);
    c.out = out;

    const Section corpus(top.child("corpus"), "corpus",
                         {"train_count", "val_count", "test_count", "image_size", "prevalence", "rotation_deg",
                          "scale_min", "scale_max", "translation", "normal_fraction", "noise_std", "anatomy_jitter"});
    corpus.get("train_count", c.corpus.train_count);
    corpus.get("val_count", c.corpus.val_count);
    corpus.get("test_count", c.corpus.test_count);
    corpus.get("image_size", c.corpus.image_size);
    corpus.get("prevalence", c.corpus.prevalence);
    corpus.get("rotation_deg", c.corpus.rotation_deg);
    corpus.get("scale_min", c.corpus.scale_min);
    corpus.get("scale_max", c.corpus.scale_max);
    corpus.get("translation", c.corpus.translation);
    corpus.get("normal_fraction", c.corpus.normal_fraction);
    corpus.get("noise_std", c.corpus.noise_std);
    corpus.get("anatomy_jitter", c.corpus.anatomy_jitter);
    if (top.has("taxonomy")) {
        c.taxonomy = read_taxonomy(top.child("taxonomy"));
        if (!corpus.has("prevalence")) c.corpus.prevalence.assign(c.taxonomy.size(), c.corpus.prevalence.front());
    }

    const Section al(top.child("aligner"), "aligner",
                     {"channels", "output_scale", "epochs", "lr", "batch", "pool_kernel", "layers", "anchor_count",
                      "smooth"});
    al.get("channels", c.aligner.arch.channels);
    al.get("output_scale", c.aligner.arch.output_scale);
    al.get("epochs", c.aligner.train.epochs);
    al.get("lr", c.aligner.train.lr);
    al.get("batch", c.aligner.train.batch);
    al.get("pool_kernel", c.aligner.train.pool_kernel);
    al.get("layers", c.aligner.train.layers);
    al.get("anchor_count", c.aligner.anchor_count);
    al.get("smooth", c.aligner.smooth);

    const Section cls(top.child("classifier"), "classifier", {"channels", "strides", "kernel", "stage1", "stage2"});
    cls.get("channels", c.classifier.channels);
    cls.get("strides", c.classifier.strides);
    cls.get("kernel", c.classifier.kernel);
    read_train(Section(cls.child("stage1"), "classifier.stage1", kTrainKeys), c.stage1);
    read_train(Section(cls.child("stage2"), "classifier.stage2", kTrainKeys), c.stage2);

    const Section masks(top.child("masks"), "masks", {"score_threshold", "tau", "mode", "asymmetric"});
    masks.get("score_threshold", c.masks.score_threshold);
    masks.get("tau", c.masks.tau);
    std::string mode = to_string(c.masks.mode);
    masks.get("mode", mode);
    c.masks.mode = mask_mode_from_string(mode);
    if (masks.has("asymmetric")) {
        std::vector<int> ids;
        masks.get("asymmetric", ids);
        c.masks.asymmetric = {ids.begin(), ids.end()};
        c.asymmetric_from_taxonomy = false;
    }

    const Section ev(top.child("eval"), "eval", {"thresholds", "binarize"});
    ev.get("thresholds", c.eval.thresholds);
    ev.get("binarize", c.eval.binarize);
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
    return parse_experiment_config(read_text(path));
}

std::string experiment_config_yaml(const ExperimentConfig& c) {
    std::ostringstream o;
    o << "seed: " << c.seed << "\n"
      << "variant: " << to_string(c.variant) << "\n"
      << "out: \"" << c.out.string() << "\"\n"
      << "corpus:\n"
      << "  train_count: " << c.corpus.train_count << "\n"
      << "  val_count: " << c.corpus.val_count << "\n"
      << "  test_count: " << c.corpus.test_count << "\n"
      << "  image_size: " << c.corpus.image_size << "\n"
      << "  prevalence: " << list(c.corpus.prevalence) << "\n"
      << "  rotation_deg: " << num(c.corpus.rotation_deg) << "\n"
      << "  scale_min: " << num(c.corpus.scale_min) << "\n"
      << "  scale_max: " << num(c.corpus.scale_max) << "\n"
      << "  translation: " << num(c.corpus.translation) << "\n"
      << "  normal_fraction: " << num(c.corpus.normal_fraction) << "\n"
      << "  noise_std: " << num(c.corpus.noise_std) << "\n"
      << "  anatomy_jitter: " << num(c.corpus.anatomy_jitter) << "\n"
      << "taxonomy:\n";
    for (const auto& t : c.taxonomy) {
        o << "  - name: " << t.name << "\n"
          << "    placement: " << list(std::vector<double>{t.mean_x, t.mean_y}) << "\n"
          << "    spread: " << num(t.spread) << "\n"
          << "    symmetric: " << (t.symmetric ? "true" : "false") << "\n"
          << "    radius: " << list(std::vector<double>{t.size_min, t.size_max}) << "\n"
          << "    intensity: " << list(std::vector<double>{t.intensity_min, t.intensity_max}) << "\n";
    }
    o << "aligner:\n"
      << "  channels: " << list(c.aligner.arch.channels) << "\n"
      << "  output_scale: " << num(c.aligner.arch.output_scale) << "\n"
      << "  epochs: " << c.aligner.train.epochs << "\n"
      << "  lr: " << num(c.aligner.train.lr) << "\n"
      << "  batch: " << c.aligner.train.batch << "\n"
      << "  pool_kernel: " << c.aligner.train.pool_kernel << "\n"
      << "  layers: " << list(c.aligner.train.layers) << "\n"
      << "  anchor_count: " << c.aligner.anchor_count << "\n"
      << "  smooth: " << (c.aligner.smooth ? "true" : "false") << "\n"
      << "classifier:\n"
      << "  channels: " << list(c.classifier.channels) << "\n"
      << "  strides: " << list(c.classifier.strides) << "\n"
      << "  kernel: " << c.classifier.kernel << "\n";
    for (const auto& [name, t] : {std::pair{"stage1", &c.stage1}, std::pair{"stage2", &c.stage2}}) {
        o << "  " << name << ":\n"
          << "    epochs: " << t->epochs << "\n"
          << "    lr: " << num(t->lr) << "\n"
          << "    batch: " << t->batch << "\n"
          << "    beta1: " << num(t->beta1) << "\n"
          << "    beta2: " << num(t->beta2) << "\n"
          << "    adam_eps: " << num(t->adam_eps) << "\n";
    }
    o << "masks:\n"
      << "  score_threshold: " << num(c.masks.score_threshold) << "\n"
      << "  tau: " << num(c.masks.tau) << "\n"
      << "  mode: " << to_string(c.masks.mode) << "\n";
    if (!c.asymmetric_from_taxonomy) {
        o << "  asymmetric: " << list(std::vector<int>(c.masks.asymmetric.begin(), c.masks.asymmetric.end())) << "\n";
    }
    o << "eval:\n"
      << "  thresholds: " << list(c.eval.thresholds) << "\n"
      << "  binarize: " << num(c.eval.binarize) << "\n";
    return o.str();
}

// ---- JSON echo ------------------------------------------------------------

json train_json(const TrainConfig& t) {
    return json{{"epochs", t.epochs}, {"lr", t.lr},       {"batch", t.batch}, {"seed", t.seed},
                {"beta1", t.beta1},   {"beta2", t.beta2}, {"adam_eps", t.adam_eps}};
}

json corpus_settings_json(const ExperimentConfig& c) {
    const auto& d = c.corpus;
    json tax = json::array();
    for (const auto& t : c.taxonomy) {
        tax.push_back(json{{"name", t.name},
                           {"placement", {t.mean_x, t.mean_y}},
                           {"spread", t.spread},
                           {"symmetric", t.symmetric},
                           {"radius", {t.size_min, t.size_max}},
                           {"intensity", {t.intensity_min, t.intensity_max}}});
    }
    return json{{"seed", d.seed},
                {"train_count", d.train_count},
                {"val_count", d.val_count},
                {"test_count", d.test_count},
                {"image_size", d.image_size},
                {"prevalence", d.prevalence},
                {"rotation_deg", d.rotation_deg},
                {"scale_min", d.scale_min},
                {"scale_max", d.scale_max},
                {"translation", d.translation},
                {"normal_fraction", d.normal_fraction},
                {"noise_std", d.noise_std},
                {"anatomy_jitter", d.anatomy_jitter},
                {"taxonomy", tax}};
}

json aligner_settings_json(const ExperimentConfig& c) {
    const auto& a = c.aligner;
    return json{{"channels", a.arch.channels},     {"output_scale", a.arch.output_scale},
                {"stride", a.arch.stride},         {"kernel", a.arch.kernel},
                {"epochs", a.train.epochs},        {"lr", a.train.lr},
                {"batch", a.train.batch},          {"seed", a.train.seed},
                {"pool_kernel", a.train.pool_kernel}, {"layers", a.train.layers},
                {"anchor_count", a.anchor_count},  {"anchor_seed", derive_seed(c.seed, "anchor")},
                {"smooth", a.smooth}};
}

json classifier_arch_json(const ExperimentConfig& c) {
    return json{{"input_size", c.classifier.input_size},
                {"channels", c.classifier.channels},
                {"strides", c.classifier.strides},
                {"kernel", c.classifier.kernel},
                {"num_classes", c.classifier.num_classes}};
}

json mask_settings_json(const MaskBuildConfig& m) {
    return json{{"score_threshold", m.score_threshold},
                {"tau", m.tau},
                {"mode", to_string(m.mode)},
                {"asymmetric", std::vector<int>(m.asymmetric.begin(), m.asymmetric.end())}};
}

json experiment_config_json(const ExperimentConfig& c) {
    return json{{"seed", c.seed},
                {"variant", to_string(c.variant)},
                {"out", c.out.generic_string()},
                {"corpus", corpus_settings_json(c)},
                {"aligner", aligner_settings_json(c)},
                {"classifier",
                 {{"architecture", classifier_arch_json(c)},
                  {"stage1", train_json(c.stage1)},
                  {"stage2", train_json(c.stage2)}}},
                {"masks", mask_settings_json(c.masks)},
                {"eval", {{"thresholds", c.eval.thresholds}, {"binarize", c.eval.binarize}}}};
}

}  // namespace dmloc
