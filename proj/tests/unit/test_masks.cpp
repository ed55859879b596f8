#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "dmloc/masks.hpp"
#include "dmloc/ops.hpp"
#include "oracles.hpp"

using namespace dmloc;

namespace {

ActivationMap one_hot(int c, std::size_t p, std::size_t i, std::size_t j) {
    ActivationMap m{c, Tensor({p, p}), MapSource::plain, 0};
    m.map[i * p + j] = 3.0f;
    return m;
}

std::vector<ActivationMap> random_maps(int c, std::size_t n, std::uint64_t seed) {
    std::vector<ActivationMap> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({c, oracle::random_tensor({8, 8}, seed + i, -2, 5), MapSource::plain, i});
    return out;
}

Split labelled_split(std::size_t n, std::uint64_t seed) {
    Split s{"train", {}};
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
        SyntheticSample x;
        x.index = i;
        x.image = oracle::random_tensor({1, 64, 64}, seed * 7919 + i);
        x.labels.assign(4, 0);
        for (auto& l : x.labels) l = rng() % 2;
        s.samples.push_back(std::move(x));
    }
    return s;
}

bool is_flip_symmetric(const Tensor& m) { return hflip(m) == m; }

}  // namespace

TEST_CASE("mask mode strings round trip") {
    for (auto m : {MaskMode::soft, MaskMode::binary, MaskMode::pseudo}) CHECK(mask_mode_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(mask_mode_from_string("fuzzy"), ConfigError);
}

TEST_CASE("build_mask: one-hot symmetric class gets equal mirrored mass") {
    MaskBuildConfig cfg;
    const auto m = build_mask({one_hot(1, 8, 2, 1)}, 1, cfg);
    CHECK(m.meta.symmetrized);
    CHECK(m.meta.maps_used == 1);
    CHECK(m.mask[2 * 8 + 1] == 1.0f);
    CHECK(m.mask[2 * 8 + 6] == 1.0f);
    float total = 0;
    for (float v : m.mask.values()) total += v;
    CHECK(total == 2.0f);
}

TEST_CASE("build_mask: asymmetric class keeps its mass where it was") {
    MaskBuildConfig cfg;
    cfg.asymmetric = {0};
    const auto m = build_mask({one_hot(0, 8, 5, 6)}, 0, cfg);
    CHECK_FALSE(m.meta.symmetrized);
    Tensor expected({8, 8});
    expected[5 * 8 + 6] = 1.0f;
    CHECK(m.mask == expected);
}

TEST_CASE("build_mask: identical maps are idempotent and rebuilds are bit-identical") {
    MaskBuildConfig cfg;
    const auto maps = random_maps(2, 1, 40);
    const auto single = build_mask(maps, 2, cfg);
    const auto twice = build_mask({maps[0], maps[0]}, 2, cfg);
    CHECK(single.mask == twice.mask);
    const auto many = random_maps(2, 9, 50);
    CHECK(build_mask(many, 2, cfg).mask == build_mask(many, 2, cfg).mask);
}

TEST_CASE("build_mask: range, symmetry, soft floor and tau monotonicity") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto maps = random_maps(3, 1 + seed % 6, 1000 + 37 * seed);
        for (bool asym : {false, true}) {
            MaskBuildConfig cfg;
            if (asym) cfg.asymmetric = {3};
            Tensor prev;
            for (double tau : {0.3, 0.5, 0.7}) {
                cfg.tau = tau;
                cfg.mode = MaskMode::soft;
                const auto m = build_mask(maps, 3, cfg);
                for (float v : m.mask.values()) {
                    CHECK(v >= 0.0f);
                    CHECK(v <= 1.0f);
                    if (v != 0.0f) CHECK(v >= float(tau));
                }
                if (!asym) CHECK(is_flip_symmetric(m.mask));
                if (prev.size()) {
                    for (std::size_t i = 0; i < prev.size(); ++i) CHECK(m.mask[i] <= prev[i]);
                }
                prev = m.mask;

                cfg.mode = MaskMode::binary;
                const auto b = build_mask(maps, 3, cfg);
                for (std::size_t i = 0; i < b.mask.size(); ++i) {
                    CHECK((b.mask[i] == 0.0f || b.mask[i] == 1.0f));
                    CHECK((b.mask[i] == 1.0f) == (m.mask[i] != 0.0f));
                }
            }
        }
    }
}

TEST_CASE("build_mask rejects bad input") {
    MaskBuildConfig cfg;
    CHECK_THROWS_AS(build_mask({}, 0, cfg), Error);
    CHECK_THROWS_AS(build_mask({one_hot(1, 8, 0, 0)}, 0, cfg), ConfigError);
    cfg.tau = 1.0;
    CHECK_THROWS_AS(build_mask({one_hot(0, 8, 0, 0)}, 0, cfg), ConfigError);
    cfg.tau = 0.5;
    cfg.mode = MaskMode::pseudo;
    CHECK_THROWS_AS(build_mask({one_hot(0, 8, 0, 0)}, 0, cfg), ConfigError);
}

TEST_CASE("collect_high_quality: vacuous and impossible thresholds, scan oracle") {
    auto w = init_model(Architecture{}, 5);
    for (auto& v : w.head_w().values()) v *= 80.0f;
    const auto split = labelled_split(40, 6);

    const auto all = collect_high_quality(w, split, 1, 0.0);
    std::size_t positives = 0;
    for (const auto& s : split.samples) positives += s.labels[1];
    CHECK(all.size() == positives);
    for (const auto& m : all) CHECK(split.samples[m.sample_id].labels[1] == 1);

    CHECK_THROWS_AS(collect_high_quality(w, split, 1, 1.0), Error);

    const auto scores = predict_scores(w, split);
    for (double thr : {0.3, 0.5, 0.6}) {
        const auto per_class = collect_high_quality_all(w, split, thr);
        for (std::size_t c = 0; c < 4; ++c) {
            std::size_t expected = 0;
            for (std::size_t i = 0; i < split.samples.size(); ++i)
                expected += split.samples[i].labels[c] && double(scores.probs[i * 4 + c]) >= thr;
            CHECK(per_class[c].size() == expected);
        }
    }
}

TEST_CASE("pseudo masks: binary, symmetric for lung classes, coverage matches a count oracle") {
    const auto tax = default_taxonomy();
    for (std::size_t p : {8u, 16u, 64u}) {
        const auto masks = build_pseudo_masks(tax, p);
        REQUIRE(masks.size() == tax.size());
        const auto& g = phantom_geometry();
        for (std::size_t c = 0; c < tax.size(); ++c) {
            const auto& m = masks[c];
            CHECK(m.meta.mode == MaskMode::pseudo);
            double ones = 0;
            for (float v : m.mask.values()) {
                CHECK((v == 0.0f || v == 1.0f));
                ones += v;
            }
            // Analytic ellipse area, as a cell count.
            const auto& e = tax[c].symmetric ? g.left_lung : g.heart;
            const double area = (tax[c].symmetric ? 2.0 : 1.0) * M_PI * e.rx * e.ry * double(p * p);
            CHECK(std::abs(ones - area) <= double(p));
            if (tax[c].symmetric) CHECK(is_flip_symmetric(m.mask));
        }
    }
}

TEST_CASE("mask sets round trip through disk") {
    const auto dir = std::filesystem::temp_directory_path() / "dmloc_test_masks";
    std::filesystem::remove_all(dir);
    MaskBuildConfig cfg;
    cfg.asymmetric = {0};
    cfg.score_threshold = 0.65;
    cfg.tau = 0.4;
    std::vector<DiseaseMask> masks;
    for (int c = 0; c < 4; ++c) masks.push_back(build_mask(random_maps(c, 2 + c, 70 + 10 * c), c, cfg));
    save_masks(masks, dir);
    const auto back = load_masks(dir, 4);
    REQUIRE(back.size() == 4);
    for (int c = 0; c < 4; ++c) {
        CHECK(back[c].mask == masks[c].mask);
        CHECK(back[c].meta.maps_used == std::size_t(2 + c));
        CHECK(back[c].meta.score_threshold == 0.65);
        CHECK(back[c].meta.tau == 0.4);
        CHECK(back[c].meta.symmetrized == (c != 0));
        CHECK(back[c].meta.mode == MaskMode::soft);
    }
    CHECK(masks_hash(back) == masks_hash(masks));

    SUBCASE("missing class file") {
        std::filesystem::remove(dir / "2.dmt");
        CHECK_THROWS_AS(load_masks(dir, 4), CorruptionError);
    }
    SUBCASE("tampered tensor") {
        auto t = masks[1].mask;
        t[0] += 0.25f;
        write_dmt(dir / "1.dmt", t);
        CHECK_THROWS_AS(load_masks(dir, 4), CorruptionError);
    }
    std::filesystem::remove_all(dir);
}
