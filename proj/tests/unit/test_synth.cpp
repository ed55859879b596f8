#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dmloc/image_io.hpp"
#include "dmloc/synth.hpp"
#include "dmloc/util.hpp"

using namespace dmloc;

namespace {

DatasetConfig small_config(std::size_t n = 40) {
    DatasetConfig c;
    c.train_count = n;
    c.val_count = n / 4 + 1;
    c.test_count = n / 2 + 1;
    return c;
}

std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("dmloc_test_synth_" + name);
    std::filesystem::remove_all(p);
    return p;
}

}  // namespace

TEST_CASE("default taxonomy has exactly one asymmetric class") {
    const auto tax = default_taxonomy();
    CHECK_NOTHROW(validate_taxonomy(tax));
    int asym = 0;
    for (const auto& c : tax) asym += !c.symmetric;
    CHECK(asym == 1);
}

TEST_CASE("config validation") {
    DatasetConfig c;
    CHECK_NOTHROW(c.validate());
    c.train_count = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DatasetConfig{};
    c.prevalence = {0.2, 1.2, 0.2, 0.2};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = DatasetConfig{};
    c.image_size = 16;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    auto tax = default_taxonomy();
    tax.pop_back();
    CHECK_THROWS_AS(generate_dataset(DatasetConfig{}, tax), ConfigError);
}

TEST_CASE("generation is deterministic and thread-count independent") {
    const auto cfg = small_config();
    const auto a = generate_dataset(cfg, default_taxonomy());
    const auto b = generate_dataset(cfg, default_taxonomy());
    CHECK(corpus_hash(a) == corpus_hash(b));
    for (std::size_t i = 0; i < a.train.samples.size(); ++i) {
        CHECK(a.train.samples[i].image == b.train.samples[i].image);
        CHECK(a.train.samples[i].labels == b.train.samples[i].labels);
    }
    auto other = cfg;
    other.seed = 43;
    CHECK(corpus_hash(generate_dataset(other, default_taxonomy())) != corpus_hash(a));
}

TEST_CASE("normal fraction 1 gives only normal samples") {
    auto cfg = small_config();
    cfg.normal_fraction = 1.0;
    const auto corpus = generate_dataset(cfg, default_taxonomy());
    for (const Split* s : {&corpus.train, &corpus.val, &corpus.test}) {
        for (const auto& x : s->samples) {
            CHECK(x.is_normal);
            CHECK(x.boxes.empty());
            for (auto l : x.labels) CHECK(l == 0);
        }
    }
    // Every class is then absent from train: reported, not fatal.
    CHECK(corpus.report.warnings.size() == 4);
}

TEST_CASE("empirical prevalence over 10k samples is within 2 points") {
    DatasetConfig cfg;
    cfg.train_count = 10000;
    cfg.val_count = 1;
    cfg.test_count = 1;
    cfg.prevalence = {0.15, 0.25, 0.2, 0.3};
    const auto corpus = generate_dataset(cfg, default_taxonomy());
    std::vector<double> pos(4, 0.0);
    double normals = 0;
    for (const auto& s : corpus.train.samples) {
        for (int c = 0; c < 4; ++c) pos[c] += s.labels[c];
        normals += s.is_normal;
    }
    for (int c = 0; c < 4; ++c) CHECK(std::abs(pos[c] / 10000.0 - cfg.prevalence[c]) < 0.02);
    CHECK(std::abs(normals / 10000.0 - cfg.normal_fraction) < 0.02);
}

TEST_CASE("sample invariants: labels, boxes inside image, is_normal") {
    const auto corpus = generate_dataset(small_config(200), default_taxonomy());
    const double n = 64.0;
    for (const auto& s : corpus.test.samples) {
        CHECK(s.image.shape() == Shape{1, 64, 64});
        for (float v : s.image.values()) CHECK((v >= -1.0f && v <= 1.0f));
        std::vector<int> has_box(4, 0);
        for (const auto& b : s.boxes) {
            CHECK(b.x >= 0);
            CHECK(b.y >= 0);
            CHECK(b.x + b.w <= n);
            CHECK(b.y + b.h <= n);
            has_box[b.class_id] = 1;
        }
        bool any = false;
        for (int c = 0; c < 4; ++c) {
            CHECK(has_box[c] == s.labels[c]);
            any = any || s.labels[c];
        }
        CHECK(s.is_normal == !any);
    }
    // Boxes are evaluation-only and kept for the test split alone.
    for (const auto& s : corpus.train.samples) CHECK(s.boxes.empty());
}

TEST_CASE("identity nuisance: centred blob box is centred on the placement") {
    SampleDraws d;
    d.blobs.push_back({2, 0.5, 0.5, 0.08, 0.08, 0.7, false});
    const auto s = render_sample(d, AffineParams{}, 64, 4);
    REQUIRE(s.boxes.size() == 1);
    const auto& b = s.boxes[0];
    CHECK(std::abs(b.x + b.w / 2 - 32.0) <= 1.0);
    CHECK(std::abs(b.y + b.h / 2 - 32.0) <= 1.0);
    CHECK(b.w == doctest::Approx(2 * 0.08 * 64));
    CHECK(s.labels == std::vector<std::uint8_t>{0, 0, 1, 0});
    CHECK_FALSE(s.is_normal);
}

TEST_CASE("render_sample rejects small canvases") {
    CHECK_THROWS_AS(render_sample({}, AffineParams{}, 31, 4), ConfigError);
}

TEST_CASE("zero blobs: image equals the nuisance-warped phantom") {
    AnatomyDraw a{1.02, 0.97, 7, 0.03};
    const AffineParams pose{1.1f, 0.9f, 0.1f, -0.05f, 0.2f};
    const auto s = render_sample({a, {}}, pose, 64, 4);
    const auto inv = invert_affine(affine_matrix64(pose));
    Affine2x3<float> inv_f;
    for (int k = 0; k < 6; ++k) inv_f[k] = static_cast<float>(inv[k]);
    const auto expected = affine_warp(render_phantom(a, 64), inv_f);
    CHECK(s.image == expected);
    CHECK(s.is_normal);
}

TEST_CASE("blob entirely off canvas after nuisance is dropped with its label") {
    SampleDraws d;
    d.blobs.push_back({3, 0.5, 0.5, 0.05, 0.05, 0.7, false});
    const auto s = render_sample(d, AffineParams{1, 1, 5.0f, 0, 0}, 64, 4);
    CHECK(s.boxes.empty());
    CHECK(s.is_normal);
}

TEST_CASE("box consistency: blob intensity maximum lies inside its box") {
    // Render each blob alone on a black canvas (no phantom) by differencing.
    DatasetConfig cfg = small_config();
    cfg.noise_std = 0.0;
    const auto tax = default_taxonomy();
    for (std::uint64_t seed = 0; seed < 60; ++seed) {
        auto r = draw_sample(cfg, tax, derive_seed(std::uint64_t{99}, seed));
        for (const auto& blob : r.draws.blobs) {
            SampleDraws one{r.draws.anatomy, {blob}};
            SampleDraws none{r.draws.anatomy, {}};
            const auto with = render_sample(one, r.nuisance, 64, 4);
            const auto without = render_sample(none, r.nuisance, 64, 4);
            if (with.boxes.empty()) continue;
            std::size_t best = 0;
            float best_v = -1e9f;
            for (std::size_t i = 0; i < with.image.size(); ++i) {
                const float v = with.image[i] - without.image[i];
                if (v > best_v) best_v = v, best = i;
            }
            const double px = double(best % 64) + 0.5, py = double(best / 64) + 0.5;
            const auto& b = with.boxes[0];
            CHECK(px >= b.x - 1.0);
            CHECK(px <= b.x + b.w + 1.0);
            CHECK(py >= b.y - 1.0);
            CHECK(py <= b.y + b.h + 1.0);
        }
    }
}

TEST_CASE("asymmetric class never mirrors; symmetric classes mirror about half the time") {
    DatasetConfig cfg;
    cfg.normal_fraction = 0.0;
    cfg.prevalence = {1.0, 1.0, 1.0, 1.0};
    const auto tax = default_taxonomy();
    std::vector<int> right(4, 0), total(4, 0);
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const auto r = draw_sample(cfg, tax, derive_seed(std::uint64_t{7}, i));
        for (const auto& b : r.draws.blobs) {
            ++total[b.class_id];
            right[b.class_id] += b.cx > 0.5;
            if (!tax[b.class_id].symmetric) CHECK_FALSE(b.mirrored);
        }
    }
    for (int c = 0; c < 4; ++c) {
        REQUIRE(total[c] == 1000);
        const double frac = right[c] / 1000.0;
        if (tax[c].symmetric) {
            CHECK(frac >= 0.45);
            CHECK(frac <= 0.55);
        } else {
            CHECK(right[c] == (tax[c].mean_x > 0.5 ? 1000 : 0));
        }
    }
}

TEST_CASE("corpus save/load round trip") {
    const auto corpus = generate_dataset(small_config(12), default_taxonomy());
    const auto dir = scratch("roundtrip");
    save_corpus(corpus, dir);
    CHECK(std::filesystem::exists(dir / "images" / "train" / "0.dmt"));
    CHECK(std::filesystem::exists(dir / "labels" / "test.jsonl"));
    CHECK(read_text(dir / "taxonomy.json").find("invented") != std::string::npos);
    const auto back = load_corpus(dir);
    CHECK(corpus_hash(back) == corpus_hash(corpus));
    CHECK(back.test.samples[3].boxes == corpus.test.samples[3].boxes);
    CHECK(back.train.samples[5].nuisance == corpus.train.samples[5].nuisance);

    write_text(dir / "labels" / "val.jsonl", "{not json\n");
    CHECK_THROWS_AS(load_corpus(dir), CorruptionError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("PGM write/read and import") {
    const auto dir = scratch("pgm");
    std::filesystem::create_directories(dir);
    GrayImage g{32, 16, std::vector<std::uint8_t>(32 * 16)};
    for (std::size_t i = 0; i < g.pixels.size(); ++i) g.pixels[i] = static_cast<std::uint8_t>(i % 256);
    write_pgm(dir / "a.pgm", g);
    const auto back = read_pgm(dir / "a.pgm");
    CHECK(back.width == 32);
    CHECK(back.height == 16);
    CHECK(back.pixels == g.pixels);
    CHECK(tensor_to_gray(gray_to_tensor(g)).pixels == g.pixels);

    {
        std::ofstream f(dir / "c.pgm", std::ios::binary);
        f << "P5\n# comment line\n2 2\n255\n";
        f.write("\x00\xff\x80\x7f", 4);
    }
    const auto c = read_pgm(dir / "c.pgm");
    CHECK(c.pixels == std::vector<std::uint8_t>{0, 255, 128, 127});
    write_text(dir / "bad.pgm", "P2\n2 2\n255\n0 0 0 0\n");
    CHECK_THROWS_AS(read_pgm(dir / "bad.pgm"), Error);

    write_text(dir / "labels.jsonl",
               "{\"file\": \"a.pgm\", \"labels\": [1,0], \"boxes\": [{\"class\":0,\"x\":4,\"y\":2,\"w\":8,\"h\":4}]}\n"
               "{\"file\": \"c.pgm\", \"labels\": [0,0]}\n");
    const auto split = import_pgm_split(dir / "labels.jsonl", "test", 32, 2);
    REQUIRE(split.samples.size() == 2);
    CHECK(split.samples[0].image.shape() == Shape{1, 32, 32});
    CHECK(split.samples[0].boxes[0] == GtBox{0, 4, 4, 8, 8});
    CHECK(split.samples[1].is_normal);
    CHECK_THROWS_AS(import_pgm_split(dir / "labels.jsonl", "test", 32, 3), ConfigError);
    std::filesystem::remove_all(dir);
}
