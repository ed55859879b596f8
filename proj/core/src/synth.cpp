#include "dmloc/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "dmloc/image_io.hpp"
#include "dmloc/util.hpp"
#include "json_io.hpp"

namespace dmloc {

std::vector<ClassSpec> default_taxonomy() {
    // Placement statistics are invented for the phantom; only the symmetry
    // structure (one asymmetric cardiac class, the rest lung-field classes)
    // carries over from real chest radiographs. Radii are sized so that even
    // the smallest lesion spans more than one cell of the 8x8 CAM grid.
    return {
        {0, "cardio", 0.58, 0.64, 0.02, false, 0.195, 0.255, 0.35, 0.60},
        {1, "effusion", 0.30, 0.66, 0.03, true, 0.135, 0.195, 0.50, 0.80},
        {2, "nodule", 0.32, 0.35, 0.04, true, 0.09, 0.12, 0.55, 0.90},
        {3, "mass", 0.25, 0.50, 0.04, true, 0.12, 0.165, 0.45, 0.80},
    };
}

void validate_taxonomy(const std::vector<ClassSpec>& taxonomy) {
    std::size_t asymmetric = 0;
    for (std::size_t c = 0; c < taxonomy.size(); ++c) {
        const auto& s = taxonomy[c];
        if (s.id != static_cast<int>(c)) throw ConfigError("taxonomy ids must be 0..K-1 in order");
        if (s.mean_x < 0 || s.mean_x > 1 || s.mean_y < 0 || s.mean_y > 1) {
            throw ConfigError("class " + s.name + ": placement mean outside [0,1]^2");
        }
        if (s.size_min > s.size_max || s.intensity_min > s.intensity_max || s.size_min <= 0 || s.spread < 0) {
            throw ConfigError("class " + s.name + ": invalid size or intensity range");
        }
        asymmetric += !s.symmetric;
    }
    if (taxonomy.empty()) throw ConfigError("taxonomy is empty");
    if (asymmetric > 1) throw ConfigError("at most one class may be asymmetric");
}

void DatasetConfig::validate() const {
    if (train_count == 0 || val_count == 0 || test_count == 0) throw ConfigError("split counts must be positive");
    if (image_size < 32) throw ConfigError("image_size must be at least 32");
    if (prevalence.size() != num_classes) throw ConfigError("prevalence must list one rate per class");
    for (double p : prevalence) {
        if (p < 0 || p > 1) throw ConfigError("prevalence values must lie in [0,1]");
    }
    if (normal_fraction < 0 || normal_fraction > 1) throw ConfigError("normal_fraction must lie in [0,1]");
    if (scale_min <= 0 || scale_min > scale_max) throw ConfigError("invalid nuisance scale range");
    if (normal_fraction < 1) {
        double sum = 0;
        for (double p : prevalence) {
            if (p > 1 - normal_fraction + 1e-12) {
                throw ConfigError("prevalence exceeds the abnormal fraction 1 - normal_fraction");
            }
            sum += p;
        }
        if (sum < 1 - normal_fraction - 1e-12) {
            throw ConfigError("prevalences too small: every abnormal sample needs at least one label");
        }
    }
}

const Split& Corpus::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
}

Split& Corpus::split(const std::string& name) {
    return const_cast<Split&>(static_cast<const Corpus&>(*this).split(name));
}

bool Ellipse::contains(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy <= 1.0;
}

const PhantomGeometry& phantom_geometry() {
    static const PhantomGeometry geometry{};
    return geometry;
}

namespace {

double soft_ellipse(const Ellipse& e, double scale, double x, double y) {
    const double dx = (x - e.cx) / (e.rx * scale), dy = (y - e.cy) / (e.ry * scale);
    const double r = std::sqrt(dx * dx + dy * dy);
    return 1.0 / (1.0 + std::exp(-(1.0 - r) / 0.04));
}

}  // namespace

Tensor render_phantom(const AnatomyDraw& anatomy, std::size_t size) {
    const auto& geo = phantom_geometry();
    const Ellipse right = geo.right_lung();
    Tensor img({1, size, size});
    std::mt19937_64 rng(anatomy.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < size; ++i) {
        const double y = (double(i) + 0.5) / double(size);
        for (std::size_t j = 0; j < size; ++j) {
            const double x = (double(j) + 0.5) / double(size);
            const double torso = soft_ellipse(geo.torso, 1.0, x, y);
            double v = 0.35 * torso;
            const double band = (std::abs(x - 0.5) < geo.mediastinum_half_width && y > 0.18 && y < 0.85) ? 1.0 : 0.0;
            v += 0.2 * band * torso;
            const double lung = std::max(soft_ellipse(geo.left_lung, anatomy.lung_scale, x, y),
                                         soft_ellipse(right, anatomy.lung_scale, x, y));
            v = v * (1.0 - lung) - 0.55 * lung;
            const double heart = soft_ellipse(geo.heart, anatomy.heart_scale, x, y);
            v = v * (1.0 - heart) + 0.55 * heart;
            if (anatomy.noise_std > 0) v += anatomy.noise_std * noise(rng);
            img.at(0, i, j) = static_cast<float>(std::clamp(v, -1.0, 1.0));
        }
    }
    return img;
}

SyntheticSample render_sample(const SampleDraws& draws, const AffineParams& nuisance, std::size_t size,
                              std::size_t num_classes) {
    if (size < 32) throw ConfigError("render_sample: size must be at least 32");
    if (!nuisance.valid()) throw ConfigError("render_sample: invalid nuisance parameters");
    Tensor canvas = render_phantom(draws.anatomy, size);
    const double n = double(size);
    for (const auto& b : draws.blobs) {
        const double ci = b.cy * n - 0.5, cj = b.cx * n - 0.5;
        const double sx = b.rx * n / 2.0, sy = b.ry * n / 2.0;
        for (std::size_t i = 0; i < size; ++i) {
            const double dy = (double(i) - ci) / sy;
            for (std::size_t j = 0; j < size; ++j) {
                const double dx = (double(j) - cj) / sx;
                canvas.at(0, i, j) += static_cast<float>(b.amplitude * std::exp(-0.5 * (dx * dx + dy * dy)));
            }
        }
    }
    for (auto& v : canvas.values()) v = std::clamp(v, -1.0f, 1.0f);

    const Affine2x3<double> pose = affine_matrix64(nuisance);
    const Affine2x3<double> inv = invert_affine(pose);
    Affine2x3<float> inv_f;
    for (int k = 0; k < 6; ++k) inv_f[k] = static_cast<float>(inv[k]);

    SyntheticSample s;
    s.image = affine_warp(canvas, inv_f);
    s.nuisance = nuisance;
    s.labels.assign(num_classes, 0);
    for (const auto& b : draws.blobs) {
        // The box is the 2-sigma ellipse's extent in the observed image.
        auto [lo_x, lo_y, hi_x, hi_y] =
            map_edge_ellipse(pose, (b.cx - b.rx) * n, (b.cy - b.ry) * n, 2 * b.rx * n, 2 * b.ry * n, size);
        const auto [mx, my] = map_edge_point(pose, b.cx * n, b.cy * n, size, size);
        lo_x = std::max(lo_x, 0.0), lo_y = std::max(lo_y, 0.0);
        hi_x = std::min(hi_x, n), hi_y = std::min(hi_y, n);
        const bool centre_inside = mx >= 0 && mx < n && my >= 0 && my < n;
        if (!centre_inside || hi_x - lo_x < 1.0 || hi_y - lo_y < 1.0) continue;
        s.boxes.push_back({b.class_id, lo_x, lo_y, hi_x - lo_x, hi_y - lo_y});
        s.labels.at(static_cast<std::size_t>(b.class_id)) = 1;
    }
    s.is_normal = std::none_of(s.labels.begin(), s.labels.end(), [](auto l) { return l != 0; });
    return s;
}

namespace {

// Per-class Bernoulli rates for abnormal samples, conditioned on at least one
// positive, that reproduce the requested unconditional prevalence.
std::vector<double> conditional_rates(const DatasetConfig& config) {
    const std::size_t k = config.num_classes;
    std::vector<double> target(k);
    for (std::size_t c = 0; c < k; ++c) target[c] = config.prevalence[c] / (1.0 - config.normal_fraction);
    std::vector<double> q = target;
    for (int it = 0; it < 500; ++it) {
        double none = 1.0;
        for (double v : q) none *= 1.0 - v;
        for (std::size_t c = 0; c < k; ++c) q[c] = std::min(1.0, target[c] * (1.0 - none));
    }
    return q;
}

double truncated_normal(std::mt19937_64& rng) {
    std::normal_distribution<double> z(0.0, 1.0);
    return std::clamp(z(rng), -2.5, 2.5);
}

SampleRecipe draw_with_rates(const DatasetConfig& config, const std::vector<ClassSpec>& taxonomy,
                             const std::vector<double>& rates, std::uint64_t stream_seed) {
    std::mt19937_64 rng(stream_seed);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unif(rng); };

    SampleRecipe r;
    const std::size_t k = taxonomy.size();
    std::vector<std::uint8_t> labels(k, 0);
    const bool normal = unif(rng) < config.normal_fraction;
    if (!normal) {
        double total = 0;
        for (double q : rates) total += q;
        bool any = false;
        for (int attempt = 0; attempt < 10000 && !any; ++attempt) {
            for (std::size_t c = 0; c < k; ++c) {
                labels[c] = unif(rng) < rates[c];
                any = any || labels[c];
            }
        }
        if (!any && total > 0) {
            // Degenerate rates: fall back to a single class drawn by weight.
            double u = unif(rng) * total;
            for (std::size_t c = 0; c < k; ++c) {
                if ((u -= rates[c]) <= 0 || c + 1 == k) {
                    labels[c] = 1;
                    break;
                }
            }
        }
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (!labels[c]) continue;
        const auto& spec = taxonomy[c];
        BlobDraw b;
        b.class_id = spec.id;
        b.mirrored = spec.symmetric && unif(rng) < 0.5;
        b.cx = spec.mean_x + spec.spread * truncated_normal(rng);
        b.cy = spec.mean_y + spec.spread * truncated_normal(rng);
        if (b.mirrored) b.cx = 1.0 - b.cx;
        b.rx = uniform(spec.size_min, spec.size_max);
        b.ry = uniform(spec.size_min, spec.size_max);
        b.amplitude = uniform(spec.intensity_min, spec.intensity_max);
        r.draws.blobs.push_back(b);
    }
    r.draws.anatomy.lung_scale = 1.0 + config.anatomy_jitter * uniform(-1, 1);
    r.draws.anatomy.heart_scale = 1.0 + config.anatomy_jitter * uniform(-1, 1);
    r.draws.anatomy.noise_seed = rng();
    r.draws.anatomy.noise_std = config.noise_std;

    const double rot = config.rotation_deg * std::numbers::pi / 180.0;
    r.nuisance.theta = static_cast<float>(uniform(-rot, rot));
    r.nuisance.sx = static_cast<float>(uniform(config.scale_min, config.scale_max));
    r.nuisance.sy = static_cast<float>(uniform(config.scale_min, config.scale_max));
    r.nuisance.tx = static_cast<float>(2.0 * config.translation * uniform(-1, 1));
    r.nuisance.ty = static_cast<float>(2.0 * config.translation * uniform(-1, 1));
    return r;
}

}  // namespace

SampleRecipe draw_sample(const DatasetConfig& config, const std::vector<ClassSpec>& taxonomy,
                         std::uint64_t stream_seed) {
    return draw_with_rates(config, taxonomy, conditional_rates(config), stream_seed);
}

Corpus generate_dataset(const DatasetConfig& config, const std::vector<ClassSpec>& taxonomy) {
    config.validate();
    validate_taxonomy(taxonomy);
    if (taxonomy.size() != config.num_classes) throw ConfigError("taxonomy length must equal num_classes");

    Corpus corpus;
    corpus.config = config;
    corpus.taxonomy = taxonomy;
    const auto rates = conditional_rates(config);

    const std::pair<Split*, std::size_t> splits[] = {
        {&corpus.train, config.train_count}, {&corpus.val, config.val_count}, {&corpus.test, config.test_count}};
    for (auto [split, count] : splits) {
        const std::uint64_t split_seed = derive_seed(config.seed, split->name);
        split->samples.resize(count);
        const bool keep_boxes = split->name == "test";
        parallel_for(count, [&, split = split](std::size_t i) {
            const auto recipe = draw_with_rates(config, taxonomy, rates, derive_seed(split_seed, std::uint64_t{i}));
            auto s = render_sample(recipe.draws, recipe.nuisance, config.image_size, config.num_classes);
            s.index = i;
            if (!keep_boxes) s.boxes.clear();
            split->samples[i] = std::move(s);
        });
    }

    for (std::size_t c = 0; c < config.num_classes; ++c) {
        const bool any = std::any_of(corpus.train.samples.begin(), corpus.train.samples.end(),
                                     [c](const auto& s) { return s.labels[c] != 0; });
        if (!any) corpus.report.warnings.push_back("class " + taxonomy[c].name + " has no positive training samples");
    }
    return corpus;
}

// ---- persistence ----------------------------------------------------------

namespace {

json config_json(const DatasetConfig& c) {
    return json{{"seed", c.seed},
                {"train_count", c.train_count},
                {"val_count", c.val_count},
                {"test_count", c.test_count},
                {"num_classes", c.num_classes},
                {"image_size", c.image_size},
                {"prevalence", c.prevalence},
                {"rotation_deg", c.rotation_deg},
                {"scale_min", c.scale_min},
                {"scale_max", c.scale_max},
                {"translation", c.translation},
                {"normal_fraction", c.normal_fraction},
                {"noise_std", c.noise_std},
                {"anatomy_jitter", c.anatomy_jitter}};
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.train_count = j.at("train_count").get<std::size_t>();
    c.val_count = j.at("val_count").get<std::size_t>();
    c.test_count = j.at("test_count").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.prevalence = j.at("prevalence").get<std::vector<double>>();
    c.rotation_deg = j.at("rotation_deg").get<double>();
    c.scale_min = j.at("scale_min").get<double>();
    c.scale_max = j.at("scale_max").get<double>();
    c.translation = j.at("translation").get<double>();
    c.normal_fraction = j.at("normal_fraction").get<double>();
    c.noise_std = j.value("noise_std", 0.0);
    c.anatomy_jitter = j.value("anatomy_jitter", 0.0);
    return c;
}

json taxonomy_json(const std::vector<ClassSpec>& taxonomy) {
    json classes = json::array();
    for (const auto& s : taxonomy) {
        classes.push_back(json{{"id", s.id},
                               {"name", s.name},
                               {"placement_mean", {s.mean_x, s.mean_y}},
                               {"placement_spread", s.spread},
                               {"symmetric", s.symmetric},
                               {"blob_size_range", {s.size_min, s.size_max}},
                               {"intensity_range", {s.intensity_min, s.intensity_max}}});
    }
    return json{{"note", "placement statistics are invented for the synthetic phantom, not measured"},
                {"classes", classes}};
}

std::vector<ClassSpec> taxonomy_from_json(const json& j) {
    std::vector<ClassSpec> out;
    for (const auto& c : j.at("classes")) {
        ClassSpec s;
        s.id = c.at("id").get<int>();
        s.name = c.at("name").get<std::string>();
        s.mean_x = c.at("placement_mean").at(0).get<double>();
        s.mean_y = c.at("placement_mean").at(1).get<double>();
        s.spread = c.at("placement_spread").get<double>();
        s.symmetric = c.at("symmetric").get<bool>();
        s.size_min = c.at("blob_size_range").at(0).get<double>();
        s.size_max = c.at("blob_size_range").at(1).get<double>();
        s.intensity_min = c.at("intensity_range").at(0).get<double>();
        s.intensity_max = c.at("intensity_range").at(1).get<double>();
        out.push_back(s);
    }
    return out;
}

json sample_json(const SyntheticSample& s) {
    json boxes = json::array();
    for (const auto& b : s.boxes) boxes.push_back(to_json(b));
    return json{{"index", s.index},
                {"labels", s.labels},
                {"boxes", boxes},
                {"nuisance", to_json(s.nuisance)},
                {"is_normal", s.is_normal}};
}

std::string labels_jsonl(const Split& split) {
    std::string out;
    for (const auto& s : split.samples) out += sample_json(s).dump() + "\n";
    return out;
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "labels");
    write_json(dir / "config.json", config_json(corpus.config));
    write_json(dir / "taxonomy.json", taxonomy_json(corpus.taxonomy));
    for (const Split* split : {&corpus.train, &corpus.val, &corpus.test}) {
        const auto img_dir = dir / "images" / split->name;
        fs::create_directories(img_dir);
        for (const auto& s : split->samples) write_dmt(img_dir / (std::to_string(s.index) + ".dmt"), s.image);
        write_text(dir / "labels" / (split->name + ".jsonl"), labels_jsonl(*split));
    }
    json report = json::array();
    for (const auto& w : corpus.report.warnings) report.push_back(w);
    write_json(dir / "generation_report.json", json{{"warnings", report}});
}

Corpus load_corpus(const std::filesystem::path& dir) {
    Corpus corpus;
    corpus.config = config_from_json(read_json(dir / "config.json"));
    corpus.taxonomy = taxonomy_from_json(read_json(dir / "taxonomy.json"));
    for (Split* split : {&corpus.train, &corpus.val, &corpus.test}) {
        const auto text = read_text(dir / "labels" / (split->name + ".jsonl"));
        std::size_t pos = 0;
        while (pos < text.size()) {
            const auto end = text.find('\n', pos);
            const auto line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
            pos = end == std::string::npos ? text.size() : end + 1;
            if (line.empty()) continue;
            json j;
            try {
                j = json::parse(line);
            } catch (const json::exception& e) {
                throw CorruptionError("labels/" + split->name + ".jsonl: " + e.what());
            }
            SyntheticSample s;
            s.index = j.at("index").get<std::size_t>();
            s.labels = j.at("labels").get<std::vector<std::uint8_t>>();
            for (const auto& b : j.at("boxes")) s.boxes.push_back(box_from_json(b));
            s.nuisance = affine_from_json(j.at("nuisance"));
            s.is_normal = j.at("is_normal").get<bool>();
            split->samples.push_back(std::move(s));
        }
        const auto img_dir = dir / "images" / split->name;
        parallel_for(split->samples.size(), [&](std::size_t i) {
            auto& s = split->samples[i];
            s.image = read_dmt(img_dir / (std::to_string(s.index) + ".dmt"));
        });
    }
    return corpus;
}

std::string corpus_hash(const Corpus& corpus) {
    Fnv1a h;
    h.update(config_json(corpus.config).dump());
    h.update(taxonomy_json(corpus.taxonomy).dump());
    for (const Split* split : {&corpus.train, &corpus.val, &corpus.test}) {
        h.update(labels_jsonl(*split));
        for (const auto& s : split->samples) h.update(s.image);
    }
    return h.hex();
}

Split import_pgm_split(const std::filesystem::path& labels_jsonl_path, const std::string& split_name,
                       std::size_t size, std::size_t num_classes) {
    Split split{split_name, {}};
    const auto base = labels_jsonl_path.parent_path();
    const auto text = read_text(labels_jsonl_path);
    std::size_t pos = 0, index = 0;
    while (pos < text.size()) {
        const auto end = text.find('\n', pos);
        const auto line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
        pos = end == std::string::npos ? text.size() : end + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const json j = json::parse(line);
        const GrayImage gray = read_pgm(base / j.at("file").get<std::string>());
        Tensor img = gray_to_tensor(gray);
        const double sx = double(size) / double(gray.width), sy = double(size) / double(gray.height);
        if (gray.width != size || gray.height != size) img = bilinear_resample(img, size, size);

        SyntheticSample s;
        s.index = index++;
        s.image = std::move(img);
        s.labels = j.at("labels").get<std::vector<std::uint8_t>>();
        if (s.labels.size() != num_classes) {
            throw ConfigError(labels_jsonl_path.string() + ": label vector length does not match class count");
        }
        if (j.contains("boxes")) {
            for (const auto& b : j.at("boxes")) {
                GtBox box = box_from_json(b);
                box.x *= sx, box.w *= sx, box.y *= sy, box.h *= sy;
                s.boxes.push_back(box);
            }
        }
        s.is_normal = std::none_of(s.labels.begin(), s.labels.end(), [](auto l) { return l != 0; });
        split.samples.push_back(std::move(s));
    }
    return split;
}

}  // namespace dmloc
