#include "dmloc/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "dmloc/cam.hpp"
#include "dmloc/image_io.hpp"
#include "experiment_json.hpp"

namespace dmloc {

namespace fs = std::filesystem;

const char* to_string(Stage s) {
    switch (s) {
        case Stage::synth: return "synth";
        case Stage::train_align: return "train-align";
        case Stage::align: return "align";
        case Stage::train: return "train";
        case Stage::build_masks: return "build-masks";
        case Stage::retrain: return "retrain";
        case Stage::evaluate: return "evaluate";
    }
    return "?";
}

std::vector<Stage> stages_for(Variant v) {
    switch (v) {
        case Variant::base: return {Stage::synth, Stage::train, Stage::evaluate};
        case Variant::base_align:
            return {Stage::synth, Stage::train_align, Stage::align, Stage::train, Stage::evaluate};
        case Variant::base_align_dm:
        case Variant::base_align_pdm:
            return {Stage::synth,       Stage::train_align, Stage::align,   Stage::train,
                    Stage::build_masks, Stage::retrain,     Stage::evaluate};
    }
    return {};
}

StageError::StageError(std::string stage, fs::path artifact, const std::string& what)
    : Error("stage " + stage + " failed (artifact " + artifact.string() + "): " + what),
      stage_(std::move(stage)),
      artifact_(std::move(artifact)) {}

namespace {

bool uses_alignment(Variant v) { return v != Variant::base; }
bool uses_masks(Variant v) { return v == Variant::base_align_dm || v == Variant::base_align_pdm; }
const char* mask_source(Variant v) { return v == Variant::base_align_pdm ? "pdm" : "dm"; }

std::vector<std::string> class_names(const std::vector<ClassSpec>& taxonomy) {
    std::vector<std::string> out;
    for (const auto& c : taxonomy) out.push_back(c.name);
    return out;
}

json optional_number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json bbox_json(const BBox& b) { return json{{"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}}; }

BBox bbox_from_json(const json& j, int class_id) {
    return {j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(), j.at("h").get<double>(),
            class_id};
}

json record_json(const LocalizationRecord& r, const std::string& class_name) {
    return json{{"sample", r.sample_id},
                {"class", r.class_id},
                {"class_name", class_name},
                {"ground_truth", bbox_json(r.ground_truth)},
                {"predicted", r.predicted ? bbox_json(*r.predicted) : json(nullptr)},
                {"iou", r.iou}};
}

LocalizationRecord record_from_json(const json& j) {
    LocalizationRecord r;
    r.sample_id = j.at("sample").get<std::size_t>();
    r.class_id = j.at("class").get<int>();
    r.ground_truth = bbox_from_json(j.at("ground_truth"), r.class_id);
    if (!j.at("predicted").is_null()) r.predicted = bbox_from_json(j.at("predicted"), r.class_id);
    r.iou = j.at("iou").get<double>();
    return r;
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::vector<json> out;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw CorruptionError(path.string() + ": " + e.what());
        }
    }
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

json loss_json(const LossParts& l) {
    return json{{"total", l.total}, {"perceptual", l.perceptual}, {"euclidean", l.euclidean}};
}

json classifier_curve(const TrainTrace& t) {
    json epochs = json::array();
    for (const auto& e : t.epochs) {
        json auc = json::array();
        for (double v : e.val_auc) auc.push_back(optional_number(v));
        epochs.push_back(json{{"epoch", e.epoch},
                              {"train_loss", e.train_loss},
                              {"val_auc", auc},
                              {"mean_val_auc", optional_number(e.mean_val_auc)}});
    }
    return json{{"epochs", epochs}, {"degenerate_batches", t.degenerate_batches}};
}

GrayImage preview(const Tensor& mask, std::size_t size) {
    const std::size_t p = mask.dim(0);
    GrayImage g{size, size, std::vector<std::uint8_t>(size * size)};
    for (std::size_t y = 0; y < size; ++y) {
        for (std::size_t x = 0; x < size; ++x) {
            const float v = mask[(y * p / size) * p + x * p / size];
            g.pixels[y * size + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
        }
    }
    return g;
}

// Every artifact lives in its own directory with a meta.json written last:
// {stage, key, inputs, settings, output_hash, ...}. The key hashes the stage
// name, input hashes and settings; a matching key means the stage is reused.
class Runner {
public:
    Runner(ExperimentConfig config, RunOptions options) : cfg_(std::move(config)), opt_(std::move(options)) {}

    RunResult run();

private:
    struct Step {
        std::string name;
        fs::path dir;
        json inputs, settings;
        std::string key;
    };

    Step step(std::string name, const std::string& dir, json inputs, json settings) const {
        Step s{std::move(name), cfg_.out / dir, std::move(inputs), std::move(settings), {}};
        Fnv1a h;
        h.update(s.name).update(s.inputs.dump()).update(s.settings.dump());
        s.key = h.hex();
        return s;
    }

    // Returns the stored meta when the stage can be reused.
    std::optional<json> reusable(const Step& s) const {
        const auto path = s.dir / "meta.json";
        if (!fs::exists(path)) return std::nullopt;
        json meta;
        try {
            meta = read_json(path);
        } catch (const CorruptionError&) {
            return std::nullopt;
        }
        if (meta.value("key", std::string{}) != s.key) return std::nullopt;
        return meta;
    }

    // Runs `body` (reuse or compute) with stage-tagged errors.
    template <class F>
    auto guarded(const Step& s, F&& body) -> decltype(body()) {
        try {
            return body();
        } catch (const CorruptionError& e) {
            throw CorruptionError("stage " + s.name + " (" + s.dir.string() + "): " + e.what());
        } catch (const ConfigError& e) {
            throw ConfigError("stage " + s.name + " (" + s.dir.string() + "): " + e.what());
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(s.name, s.dir, e.what());
        }
    }

    void fresh(const Step& s) const {
        fs::remove_all(s.dir);
        fs::create_directories(s.dir);
    }

    void finish(const Step& s, const std::string& hash, json extra = json::object()) {
        json meta{{"stage", s.name}, {"key", s.key}, {"inputs", s.inputs}, {"settings", s.settings},
                  {"output_hash", hash}};
        for (const auto& [k, v] : extra.items()) meta[k] = v;
        write_json(s.dir / "meta.json", meta);
        record(s, hash, false);
    }

    void record(const Step& s, const std::string& hash, bool reused) {
        result_.stages.push_back({s.name, s.dir, hash, reused});
        log(std::string(reused ? "reused  " : "built   ") + s.name + "  " + s.dir.string() + "  " + hash);
    }

    static void check_hash(const Step&, const json& meta, const std::string& actual) {
        if (meta.at("output_hash").get<std::string>() != actual) {
            throw CorruptionError("artifact content does not match output_hash in meta.json");
        }
    }

    void log(const std::string& msg) const {
        if (opt_.log) opt_.log(msg);
    }

    bool wanted(Stage s) const {
        const auto chain = stages_for(cfg_.variant);
        const auto last = opt_.until ? *opt_.until : Stage::evaluate;
        return std::find(chain.begin(), chain.end(), s) != chain.end() &&
               std::find(chain.begin(), chain.end(), s) <= std::find(chain.begin(), chain.end(), last);
    }

    void synth();
    ModelWeights train_classifier_stage(const std::string& name, const std::string& dir, const Corpus& corpus,
                                        const std::string& corpus_hash_value, const ModelWeights* init,
                                        const std::string& init_hash, const TrainConfig& tc,
                                        const std::vector<Tensor>& masks, const std::string& masks_hash_value);
    void train_align();
    void align();
    void build_masks();
    void evaluate();

    ExperimentConfig cfg_;
    RunOptions opt_;
    RunResult result_;

    Corpus corpus_;
    std::string corpus_hash_;
    ModelWeights base_model_;
    std::string base_hash_;
    AlignerWeights aligner_;
    std::string aligner_hash_;
    Corpus aligned_;
    std::string aligned_hash_;
    ModelWeights stage1_;
    std::string stage1_hash_;
    std::vector<DiseaseMask> masks_;
    std::string masks_hash_;
    ModelWeights final_;
    std::string final_hash_;
    fs::path final_dir_, masks_dir_, eval_corpus_dir_;
    json curves_ = json::object();
};

void Runner::synth() {
    const auto s = step("synth", "corpus", json::object(), corpus_settings_json(cfg_));
    guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            corpus_ = load_corpus(s.dir);
            corpus_hash_ = corpus_hash(corpus_);
            check_hash(s, *meta, corpus_hash_);
            record(s, corpus_hash_, true);
            return;
        }
        fresh(s);
        corpus_ = generate_dataset(cfg_.corpus, cfg_.taxonomy);
        save_corpus(corpus_, s.dir);
        corpus_hash_ = corpus_hash(corpus_);
        json warnings = corpus_.report.warnings;
        finish(s, corpus_hash_, json{{"warnings", warnings}});
    });
}

ModelWeights Runner::train_classifier_stage(const std::string& name, const std::string& dir, const Corpus& corpus,
                                            const std::string& corpus_hash_value, const ModelWeights* init,
                                            const std::string& init_hash, const TrainConfig& tc,
                                            const std::vector<Tensor>& masks, const std::string& masks_hash_value) {
    json inputs{{"corpus", corpus_hash_value}};
    if (init) inputs["init_model"] = init_hash;
    if (!masks.empty()) inputs["masks"] = masks_hash_value;
    const auto s = step(name, dir, inputs, json{{"architecture", classifier_arch_json(cfg_)}, {"train", train_json(tc)}});
    return guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            auto w = load_model(s.dir);
            check_hash(s, *meta, model_hash(w));
            curves_[name] = meta->at("curve");
            record(s, model_hash(w), true);
            return w;
        }
        fresh(s);
        const auto start = std::chrono::steady_clock::now();
        auto r = train_classifier(init ? *init : init_model(cfg_.classifier, tc.seed), corpus.train, &corpus.val, tc,
                                  masks);
        save_model(r.weights, s.dir);
        curves_[name] = classifier_curve(r.trace);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log(name + ": " + std::to_string(tc.epochs) + " epochs in " + std::to_string(std::lround(secs)) + " s");
        finish(s, model_hash(r.weights), json{{"curve", curves_[name]}});
        return r.weights;
    });
}

void Runner::train_align() {
    const auto s = step("train-align", "aligner", json{{"corpus", corpus_hash_}, {"extractor", base_hash_}},
                        aligner_settings_json(cfg_));
    guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            aligner_ = load_aligner(s.dir / "weights");
            aligner_hash_ = aligner_hash(aligner_);
            check_hash(s, *meta, aligner_hash_);
            curves_["aligner"] = meta->at("curve");
            record(s, aligner_hash_, true);
            return;
        }
        fresh(s);
        const auto& ac = cfg_.aligner;
        const auto anchor = build_anchor(corpus_.train, ac.anchor_count, derive_seed(cfg_.seed, "anchor"));
        write_dmt(s.dir / "anchor.dmt", anchor.image);
        const auto init = init_aligner(ac.arch, ac.train.seed);
        const auto k = ac.train.pool_kernel;
        const auto before = mean_alignment_loss(init, corpus_.val, anchor, base_model_, ac.train.layers, k);
        auto r = train_aligner(init, corpus_.train, anchor, base_model_, ac.train);
        const auto after = mean_alignment_loss(r.weights, corpus_.val, anchor, base_model_, ac.train.layers, k);
        if (r.extractor_hash_before != r.extractor_hash_after) throw Error("the extractor changed during training");

        std::vector<double> predicted(corpus_.val.samples.size()), injected(predicted.size());
        parallel_for(predicted.size(), [&](std::size_t i) {
            predicted[i] = predict_pose(r.weights, corpus_.val.samples[i].image).theta;
            injected[i] = corpus_.val.samples[i].nuisance.theta;
        });
        aligner_ = r.weights;
        aligner_hash_ = aligner_hash(aligner_);
        save_aligner(aligner_, s.dir / "weights");

        json epochs = json::array();
        for (const auto& e : r.curve) epochs.push_back(json{{"epoch", e.epoch}, {"train", loss_json(e.train)}});
        curves_["aligner"] = json{{"epochs", epochs}};
        const json validation{{"identity", loss_json(before)},
                              {"trained", loss_json(after)},
                              {"relative_change", (after.total - before.total) / before.total},
                              {"theta_pearson", pearson(predicted, injected)}};
        log("train-align: val loss " + std::to_string(before.total) + " -> " + std::to_string(after.total) +
            ", theta r " + std::to_string(validation["theta_pearson"].get<double>()));
        finish(s, aligner_hash_,
               json{{"anchor_hash", anchor_hash(anchor)},
                    {"extractor_hash", r.extractor_hash_after},
                    {"curve", curves_["aligner"]},
                    {"validation", validation}});
    });
}

void Runner::align() {
    const auto s = step("align", "aligned", json{{"corpus", corpus_hash_}, {"aligner", aligner_hash_}},
                        json{{"pool_kernel", cfg_.aligner.train.pool_kernel}, {"smooth", cfg_.aligner.smooth}});
    guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            aligned_ = load_corpus(s.dir);
            aligned_hash_ = corpus_hash(aligned_);
            check_hash(s, *meta, aligned_hash_);
            record(s, aligned_hash_, true);
            return;
        }
        fresh(s);
        aligned_ = Corpus{corpus_.config, corpus_.taxonomy, {}, {}, {}, corpus_.report};
        std::string poses;
        for (const char* name : {"train", "val", "test"}) {
            auto a = align_dataset(aligner_, corpus_.split(name), cfg_.aligner.train.pool_kernel, cfg_.aligner.smooth);
            for (std::size_t i = 0; i < a.predicted.size(); ++i) {
                poses += json{{"split", name}, {"sample", a.split.samples[i].index}, {"pose", to_json(a.predicted[i])}}
                             .dump() +
                         "\n";
            }
            aligned_.split(name) = std::move(a.split);
        }
        save_corpus(aligned_, s.dir);
        write_text(s.dir / "poses.jsonl", poses);
        aligned_hash_ = corpus_hash(aligned_);
        finish(s, aligned_hash_);
    });
}

void Runner::build_masks() {
    const bool pseudo = cfg_.variant == Variant::base_align_pdm;
    const std::string name = std::string("build-masks");
    const auto p = cfg_.classifier.feature_size();
    auto settings = pseudo ? json{{"mode", "pseudo"}, {"size", p}} : mask_settings_json(cfg_.masks);
    auto inputs = pseudo ? json{{"taxonomy", corpus_settings_json(cfg_)["taxonomy"]}}
                         : json{{"corpus", aligned_hash_}, {"model", stage1_hash_}};
    const auto s = step(name, std::string("masks_") + mask_source(cfg_.variant), inputs, settings);
    masks_dir_ = s.dir / "masks";
    guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            masks_ = load_masks(masks_dir_, cfg_.taxonomy.size());
            masks_hash_ = masks_hash(masks_);
            check_hash(s, *meta, masks_hash_);
            record(s, masks_hash_, true);
            return;
        }
        fresh(s);
        json warnings = json::array();
        if (pseudo) {
            masks_ = build_pseudo_masks(cfg_.taxonomy, p);
        } else {
            // A class without a single map at the configured score falls back
            // to the highest threshold (in steps of 0.1) that yields one.
            const auto k = cfg_.taxonomy.size();
            std::vector<std::vector<ActivationMap>> maps(k);
            std::vector<double> used(k, cfg_.masks.score_threshold);
            double t = cfg_.masks.score_threshold;
            for (;;) {
                auto all = collect_high_quality_all(stage1_, aligned_.train, t);
                bool missing = false;
                for (std::size_t c = 0; c < k; ++c) {
                    if (maps[c].empty() && !all[c].empty()) {
                        maps[c] = std::move(all[c]);
                        used[c] = t;
                    }
                    missing = missing || maps[c].empty();
                }
                if (!missing || t <= 0.0) break;
                t = std::max(0.0, std::round((t - 0.1) * 10.0) / 10.0);
            }
            for (std::size_t c = 0; c < k; ++c) {
                if (maps[c].empty()) throw Error("no positive training sample of class " + cfg_.taxonomy[c].name);
                auto mc = cfg_.masks;
                mc.score_threshold = used[c];
                if (used[c] != cfg_.masks.score_threshold) {
                    warnings.push_back("class " + cfg_.taxonomy[c].name + ": no map reached score " +
                                       std::to_string(cfg_.masks.score_threshold) + "; used " +
                                       std::to_string(used[c]));
                }
                masks_.push_back(build_mask(maps[c], static_cast<int>(c), mc));
            }
        }
        save_masks(masks_, masks_dir_);
        fs::create_directories(s.dir / "preview");
        for (const auto& m : masks_) {
            write_pgm(s.dir / "preview" / (std::to_string(m.class_id) + ".pgm"),
                      preview(m.mask, cfg_.corpus.image_size));
        }
        masks_hash_ = masks_hash(masks_);
        finish(s, masks_hash_, json{{"warnings", warnings}});
    });
}

void Runner::evaluate() {
    const bool aligned = uses_alignment(cfg_.variant);
    const Corpus& corpus = aligned ? aligned_ : corpus_;
    const auto& corpus_h = aligned ? aligned_hash_ : corpus_hash_;
    json inputs{{"corpus", corpus_h}, {"model", final_hash_}};
    if (uses_masks(cfg_.variant)) inputs["masks"] = masks_hash_;
    const auto s = step("evaluate", "results", inputs,
                        json{{"variant", to_string(cfg_.variant)},
                             {"thresholds", cfg_.eval.thresholds},
                             {"binarize", cfg_.eval.binarize}});
    const auto names = class_names(cfg_.taxonomy);
    std::vector<LocalizationRecord> records;
    json auc_json;
    guarded(s, [&] {
        if (const auto meta = reusable(s)) {
            Fnv1a h;
            h.update(read_text(s.dir / "localization.jsonl")).update(read_text(s.dir / "auc.json"));
            check_hash(s, *meta, h.hex());
            for (const auto& j : read_jsonl(s.dir / "localization.jsonl")) records.push_back(record_from_json(j));
            auc_json = read_json(s.dir / "auc.json");
            record(s, h.hex(), true);
            return;
        }
        fresh(s);
        const std::vector<Tensor> masks = uses_masks(cfg_.variant) ? mask_tensors(masks_) : std::vector<Tensor>{};
        const auto& test = corpus.test;
        std::vector<std::vector<LocalizationRecord>> per(test.samples.size());
        parallel_for(test.samples.size(), [&](std::size_t i) {
            const auto& smp = test.samples[i];
            for (const auto& b : smp.boxes) {
                const auto map = masks.empty()
                                     ? class_activation_map(final_, smp.image, b.class_id, smp.index)
                                     : attention_cam(final_, smp.image, b.class_id, masks[b.class_id], smp.index);
                const auto pred = cam_to_bbox(map.map, cfg_.corpus.image_size, cfg_.eval.binarize, b.class_id);
                per[i].push_back(make_record(smp.index, BBox{b.x, b.y, b.w, b.h, b.class_id}, pred));
            }
        });
        std::string lines;
        for (auto& v : per) {
            for (auto& r : v) {
                lines += record_json(r, names[r.class_id]).dump() + "\n";
                records.push_back(std::move(r));
            }
        }
        write_text(s.dir / "localization.jsonl", lines);

        const auto scores = predict_scores(final_, test, masks);
        const auto auc = per_class_auc(scores.probs, test);
        json per_class = json::object();
        double sum = 0;
        std::size_t n = 0;
        for (std::size_t c = 0; c < auc.size(); ++c) {
            per_class[names[c]] = optional_number(auc[c]);
            if (std::isfinite(auc[c])) {
                sum += auc[c];
                ++n;
            }
        }
        auc_json = json{{"split", "test"}, {"per_class", per_class}, {"mean", n ? json(sum / double(n)) : json(nullptr)}};
        write_json(s.dir / "auc.json", auc_json);
        Fnv1a h;
        h.update(read_text(s.dir / "localization.jsonl")).update(read_text(s.dir / "auc.json"));
        finish(s, h.hex(),
               json{{"model_dir", fs::relative(final_dir_, cfg_.out).generic_string()},
                    {"corpus_dir", fs::relative(eval_corpus_dir_, cfg_.out).generic_string()},
                    {"masks_dir", uses_masks(cfg_.variant) ? json(fs::relative(masks_dir_, cfg_.out).generic_string())
                                                           : json(nullptr)},
                    {"seed", cfg_.seed}});
    });

    const auto table = accuracy_at_iou(records, cfg_.eval.thresholds, names);
    result_.accuracy = table;
    for (const auto& name : names) {
        const auto& v = auc_json.at("per_class").at(name);
        result_.auc.push_back(v.is_null() ? std::nan("") : v.get<double>());
    }

    // summary.json: a pure function of the config (no timings, no reuse flags).
    json acc = json::array();
    for (std::size_t t = 0; t < table.thresholds.size(); ++t) {
        json per_class = json::object();
        for (std::size_t c = 0; c < names.size(); ++c) {
            per_class[names[c]] = table.accuracy[t][c] ? json(*table.accuracy[t][c]) : json(nullptr);
        }
        acc.push_back(json{{"threshold", table.thresholds[t]},
                           {"per_class", per_class},
                           {"mean", table.mean[t] ? json(*table.mean[t]) : json(nullptr)}});
    }
    json stages = json::array();
    for (const auto& r : result_.stages) {
        stages.push_back(json{{"stage", r.name}, {"dir", fs::relative(r.dir, cfg_.out).generic_string()}, {"hash", r.hash}});
    }
    json mask_preview = nullptr;
    if (uses_masks(cfg_.variant)) {
        mask_preview = json{{"source", mask_source(cfg_.variant)}, {"classes", json::object()}};
        for (const auto& m : masks_) {
            const std::size_t p = m.mask.dim(0);
            json grid = json::array();
            for (std::size_t y = 0; y < p; ++y) {
                json row = json::array();
                for (std::size_t x = 0; x < p; ++x) row.push_back(std::round(m.mask[y * p + x] * 1000.0) / 1000.0);
                grid.push_back(row);
            }
            mask_preview["classes"][names[m.class_id]] =
                json{{"maps_used", m.meta.maps_used},
                     {"score_threshold", m.meta.score_threshold},
                     {"symmetrized", m.meta.symmetrized},
                     {"preview", fs::relative(masks_dir_.parent_path() / "preview" /
                                                  (std::to_string(m.class_id) + ".pgm"),
                                              cfg_.out)
                                     .generic_string()},
                     {"grid", grid}};
        }
    }
    json counts = json::object();
    for (std::size_t c = 0; c < names.size(); ++c) counts[names[c]] = table.counts[c];
    const json summary{{"variant", to_string(cfg_.variant)},
                       {"seed", cfg_.seed},
                       {"corpus_hash", corpus_hash_},
                       {"classes", names},
                       {"localization",
                        {{"split", "test"},
                         {"binarize", cfg_.eval.binarize},
                         {"boxes", counts},
                         {"accuracy", acc},
                         {"warnings", table.warnings}}},
                       {"auc", auc_json},
                       {"loss_curves", curves_},
                       {"masks", mask_preview},
                       {"stages", stages},
                       {"config", experiment_config_json(cfg_)}};
    write_json(cfg_.out / "summary.json", summary);

    std::ostringstream txt;
    txt << "variant " << to_string(cfg_.variant) << "  seed " << cfg_.seed << "  corpus " << corpus_hash_ << "\n\n"
        << "localization accuracy (test split, binarize " << cfg_.eval.binarize << ")\n"
        << format_accuracy_table(table) << "\n"
        << "AUC (test split):";
    for (const auto& name : names) {
        const auto& v = auc_json["per_class"][name];
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.3f", v.is_null() ? std::nan("") : v.get<double>());
        txt << "  " << name << " " << (v.is_null() ? "n/a" : buf);
    }
    txt << "\n";
    for (const auto& w : table.warnings) txt << "warning: " << w << "\n";
    write_text(cfg_.out / "summary.txt", txt.str());
}

RunResult Runner::run() {
    fs::create_directories(cfg_.out);
    write_text(cfg_.out / "config.yaml", experiment_config_yaml(cfg_));
    const bool align_chain = uses_alignment(cfg_.variant);

    synth();
    if (!wanted(Stage::train_align) && !wanted(Stage::train)) return result_;

    // The unaligned stage-1 classifier: the base variant's model and the
    // aligner's perceptual extractor.
    base_model_ = train_classifier_stage("train-base", "stage1_base", corpus_, corpus_hash_, nullptr, {}, cfg_.stage1,
                                         {}, {});
    base_hash_ = model_hash(base_model_);
    final_ = base_model_;
    final_hash_ = base_hash_;
    final_dir_ = cfg_.out / "stage1_base";
    eval_corpus_dir_ = cfg_.out / "corpus";

    if (align_chain) {
        if (!wanted(Stage::train_align)) return result_;
        train_align();
        if (!wanted(Stage::align)) return result_;
        align();
        if (!wanted(Stage::train)) return result_;
        stage1_ = train_classifier_stage("train", "stage1_align", aligned_, aligned_hash_, nullptr, {}, cfg_.stage1,
                                         {}, {});
        stage1_hash_ = model_hash(stage1_);
        final_ = stage1_;
        final_hash_ = stage1_hash_;
        final_dir_ = cfg_.out / "stage1_align";
        eval_corpus_dir_ = cfg_.out / "aligned";
    }
    if (uses_masks(cfg_.variant)) {
        if (!wanted(Stage::build_masks)) return result_;
        build_masks();
        if (!wanted(Stage::retrain)) return result_;
        const auto src = std::string(mask_source(cfg_.variant));
        final_ = train_classifier_stage("retrain-" + src, "stage2_" + src, aligned_, aligned_hash_, &stage1_,
                                        stage1_hash_, cfg_.stage2, mask_tensors(masks_), masks_hash_);
        final_hash_ = model_hash(final_);
        final_dir_ = cfg_.out / ("stage2_" + src);
    }
    if (wanted(Stage::evaluate)) evaluate();
    return result_;
}

}  // namespace

RunResult run_pipeline(const ExperimentConfig& config, const RunOptions& options) {
    auto cfg = config;
    cfg.resolve();
    cfg.validate();
    if (options.until) {
        const auto chain = stages_for(cfg.variant);
        if (std::find(chain.begin(), chain.end(), *options.until) == chain.end()) {
            throw ConfigError(std::string("variant ") + to_string(cfg.variant) + " does not run stage " +
                              to_string(*options.until));
        }
    }
    return Runner(std::move(cfg), options).run();
}

// ---- overlays -------------------------------------------------------------

namespace {

void draw_rect(GrayImage& g, const BBox& b, std::uint8_t value) {
    const auto clampi = [&](double v, std::size_t n) {
        return static_cast<long>(std::clamp(v, 0.0, static_cast<double>(n) - 1.0));
    };
    const long x0 = clampi(std::floor(b.x), g.width), x1 = clampi(std::ceil(b.x + b.w) - 1.0, g.width);
    const long y0 = clampi(std::floor(b.y), g.height), y1 = clampi(std::ceil(b.y + b.h) - 1.0, g.height);
    for (long x = x0; x <= x1; ++x) {
        g.pixels[y0 * g.width + x] = value;
        g.pixels[y1 * g.width + x] = value;
    }
    for (long y = y0; y <= y1; ++y) {
        g.pixels[y * g.width + x0] = value;
        g.pixels[y * g.width + x1] = value;
    }
}

}  // namespace

OverlayManifest emit_overlays(const fs::path& experiment, const std::string& split, std::size_t count) {
    if (split != "train" && split != "val" && split != "test") throw ConfigError("unknown split '" + split + "'");
    if (split != "test") throw ConfigError("overlays need evaluated boxes; only the test split carries them");
    const auto results = experiment / "results";
    if (!fs::exists(results / "meta.json")) {
        throw ConfigError(experiment.string() + " has no completed evaluation (results/meta.json missing)");
    }
    const json meta = read_json(results / "meta.json");
    const json records = [&] {
        json a = json::array();
        for (auto& j : read_jsonl(results / "localization.jsonl")) a.push_back(std::move(j));
        return a;
    }();

    OverlayManifest manifest;
    if (count > records.size()) {
        manifest.warnings.push_back("requested " + std::to_string(count) + " overlays but the split has " +
                                    std::to_string(records.size()) + " evaluated boxes; clamped");
        count = records.size();
    }
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(meta.at("seed").get<std::uint64_t>(), "overlay"));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(count);
    std::sort(order.begin(), order.end());

    const auto out = experiment / "overlays";
    fs::remove_all(out);
    fs::create_directories(out);
    json entries = json::array();
    if (count > 0) {
        const auto model = load_model(experiment / meta.at("model_dir").get<std::string>());
        const auto corpus = load_corpus(experiment / meta.at("corpus_dir").get<std::string>());
        std::vector<Tensor> masks;
        if (!meta.at("masks_dir").is_null()) {
            masks = mask_tensors(load_masks(experiment / meta.at("masks_dir").get<std::string>(), corpus.num_classes()));
        }
        const auto& samples = corpus.split(split).samples;
        for (std::size_t idx : order) {
            const auto& rec = records[idx];
            const auto sample_id = rec.at("sample").get<std::size_t>();
            const int cls = rec.at("class").get<int>();
            const auto it = std::find_if(samples.begin(), samples.end(),
                                         [&](const SyntheticSample& s) { return s.index == sample_id; });
            if (it == samples.end()) throw CorruptionError("record names sample " + std::to_string(sample_id) + " not in the corpus");
            const auto map = masks.empty() ? class_activation_map(model, it->image, cls, sample_id)
                                           : attention_cam(model, it->image, cls, masks[cls], sample_id);
            const std::size_t size = it->image.dim(1);
            const auto heat = bilinear_resample(minmax_normalize(map.map.reshaped({1, map.map.dim(0), map.map.dim(1)})),
                                                size, size);
            auto img = tensor_to_gray(it->image);
            for (std::size_t i = 0; i < img.pixels.size(); ++i) {
                img.pixels[i] = static_cast<std::uint8_t>(
                    std::lround(0.5 * img.pixels[i] + 0.5 * 255.0 * std::clamp(double(heat[i]), 0.0, 1.0)));
            }
            draw_rect(img, bbox_from_json(rec.at("ground_truth"), cls), 255);
            if (!rec.at("predicted").is_null()) draw_rect(img, bbox_from_json(rec.at("predicted"), cls), 0);

            const auto stem = std::to_string(sample_id) + "_" + std::to_string(cls);
            write_pgm(out / (stem + ".pgm"), img);
            json sidecar = rec;
            sidecar["image"] = stem + ".pgm";
            sidecar["map"] = to_string(map.source);
            sidecar["ground_truth_value"] = 255;
            sidecar["predicted_value"] = 0;
            write_json(out / (stem + ".json"), sidecar);
            manifest.images.push_back(out / (stem + ".pgm"));
            entries.push_back(stem);
        }
    }
    write_json(out / "manifest.json", json{{"split", split}, {"images", entries}, {"warnings", manifest.warnings}});
    return manifest;
}

// ---- comparison -----------------------------------------------------------

Comparison compare_variants(const std::vector<fs::path>& experiments) {
    if (experiments.size() < 2) throw ConfigError("compare needs at least two experiment directories");
    struct Entry {
        std::string label, variant;
        json summary;
        std::optional<json> auc;
    };
    std::vector<Entry> entries;
    for (const auto& dir : experiments) {
        if (!fs::exists(dir / "summary.json")) throw ConfigError(dir.string() + " is not a completed experiment");
        Entry e;
        e.summary = read_json(dir / "summary.json");
        e.variant = e.summary.at("variant").get<std::string>();
        e.label = e.variant + " [" + dir.filename().string() + "]";
        if (fs::exists(dir / "results" / "auc.json")) e.auc = read_json(dir / "results" / "auc.json");
        entries.push_back(std::move(e));
    }
    const auto hash = entries.front().summary.at("corpus_hash").get<std::string>();
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].summary.at("corpus_hash").get<std::string>() != hash) {
            throw ConfigError("refusing to compare: " + experiments[i].string() + " was built on corpus " +
                              entries[i].summary.at("corpus_hash").get<std::string>() + ", " +
                              experiments.front().string() + " on " + hash);
        }
    }
    std::vector<std::string> names;
    const auto tax_path = experiments.front() / "corpus" / "taxonomy.json";
    if (fs::exists(tax_path)) {
        const json taxonomy = read_json(tax_path);
        for (const auto& c : taxonomy.at("classes")) names.push_back(c.at("name").get<std::string>());
    } else {
        names = entries.front().summary.at("classes").get<std::vector<std::string>>();
    }

    std::size_t width = 14;  // fits the "@0.3 dm-pdm" labels
    for (const auto& e : entries) width = std::max(width, e.label.size());
    const auto pad = [](const std::string& s, std::size_t w) { return std::string(w - std::min(w, s.size()), ' ') + s; };
    const auto cell = [](const json& v) {
        if (v.is_null()) return std::string("n/a");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", v.get<double>());
        return std::string(buf);
    };
    const auto col = [&](std::size_t c) { return std::max<std::size_t>(6, names[c].size()); };
    const auto header = [&](std::ostringstream& o, const std::string& title) {
        o << title << "\n" << std::string(width, ' ');
        for (std::size_t c = 0; c < names.size(); ++c) o << " " << pad(names[c], col(c));
        o << " |   mean\n";
    };
    const auto row = [&](std::ostringstream& o, const std::string& label, const std::vector<json>& cells,
                         const json& mean) {
        o << label << std::string(width - std::min(width, label.size()), ' ');
        for (std::size_t c = 0; c < cells.size(); ++c) o << " " << pad(cell(cells[c]), col(c));
        o << " | " << pad(cell(mean), 6) << "\n";
    };
    const auto acc_at = [&](const Entry& e, std::size_t t) {
        const auto& a = e.summary.at("localization").at("accuracy").at(t);
        std::vector<json> cells;
        for (const auto& n : names) cells.push_back(a.at("per_class").value(n, json(nullptr)));
        return std::pair{cells, a.at("mean")};
    };

    std::ostringstream o;
    Comparison cmp;
    for (const auto& e : entries) cmp.rows.push_back(e.label);
    const auto& thresholds = entries.front().summary.at("localization").at("accuracy");
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        char title[64];
        std::snprintf(title, sizeof title, "localization accuracy, IoU %.1f", thresholds[t].at("threshold").get<double>());
        header(o, title);
        for (const auto& e : entries) {
            const auto [cells, mean] = acc_at(e, t);
            row(o, e.label, cells, mean);
        }
        o << "\n";
    }
    header(o, "classification AUC (test split)");
    for (const auto& e : entries) {
        std::vector<json> cells;
        for (const auto& n : names) cells.push_back(e.auc ? e.auc->at("per_class").value(n, json(nullptr)) : json(nullptr));
        row(o, e.label, cells, e.auc ? e.auc->at("mean") : json(nullptr));
    }

    const auto find = [&](const std::string& v) {
        return std::find_if(entries.begin(), entries.end(), [&](const Entry& e) { return e.variant == v; });
    };
    const auto dm = find(to_string(Variant::base_align_dm));
    const auto pdm = find(to_string(Variant::base_align_pdm));
    if (dm != entries.end() && pdm != entries.end()) {
        o << "\n";
        header(o, "DM vs PDM");
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            char tag[32];
            std::snprintf(tag, sizeof tag, "@%.1f ", thresholds[t].at("threshold").get<double>());
            const auto [dc, dmean] = acc_at(*dm, t);
            const auto [pc, pmean] = acc_at(*pdm, t);
            std::vector<json> diff;
            for (std::size_t c = 0; c < names.size(); ++c) {
                diff.push_back(dc[c].is_null() || pc[c].is_null() ? json(nullptr)
                                                                  : json(dc[c].get<double>() - pc[c].get<double>()));
            }
            const json dmean_diff =
                dmean.is_null() || pmean.is_null() ? json(nullptr) : json(dmean.get<double>() - pmean.get<double>());
            row(o, std::string(tag) + "dm", dc, dmean);
            row(o, std::string(tag) + "pdm", pc, pmean);
            row(o, std::string(tag) + "dm-pdm", diff, dmean_diff);
        }
    }
    cmp.text = o.str();
    return cmp;
}

}  // namespace dmloc
