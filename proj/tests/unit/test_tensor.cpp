#include "doctest.h"

#include <filesystem>

#include "dmloc/tensor.hpp"
#include "dmloc/util.hpp"
#include "oracles.hpp"

using namespace dmloc;

TEST_CASE("tensor rejects inconsistent data length") {
    CHECK_THROWS_AS(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    Tensor t({2, 3}, 1.5f);
    CHECK(t.size() == 6);
    CHECK(t.all_finite());
}

TEST_CASE("DMT1 layout is magic, rank, extents, payload") {
    Tensor t({1, 2}, {1.0f, -2.0f});
    const auto bytes = encode_dmt(t);
    REQUIRE(bytes.size() == 4 + 4 + 8 + 8);
    CHECK(bytes[0] == 'D');
    CHECK(bytes[3] == '1');
    CHECK(bytes[4] == 2);  // rank, little-endian
    CHECK(bytes[8] == 1);
    CHECK(bytes[12] == 2);
    // 1.0f = 0x3f800000
    CHECK(bytes[16] == 0x00);
    CHECK(bytes[19] == 0x3f);
}

TEST_CASE("DMT1 round trip is bit exact for random tensors") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        auto t = oracle::random_tensor({3, 1 + seed, 7}, seed, -1e6f, 1e6f);
        CHECK(decode_dmt(encode_dmt(t)) == t);
    }
    auto path = std::filesystem::temp_directory_path() / "dmloc_tensor_roundtrip.dmt";
    auto t = oracle::random_tensor({4, 4}, 9);
    write_dmt(path, t);
    CHECK(read_dmt(path) == t);
    std::filesystem::remove(path);
}

TEST_CASE("DMT1 decoder flags corruption") {
    auto bytes = encode_dmt(Tensor({2, 2}, 0.0f));
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(decode_dmt(bad_magic), CorruptionError);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_dmt(bytes), CorruptionError);
    CHECK_THROWS_AS(read_dmt("/nonexistent/never.dmt"), CorruptionError);
}

TEST_CASE("derived seeds are stable and distinct") {
    CHECK(derive_seed(42, "corpus") == derive_seed(42, "corpus"));
    CHECK(derive_seed(42, "corpus") != derive_seed(42, "aligner"));
    CHECK(derive_seed(42, std::uint64_t{1}) != derive_seed(42, std::uint64_t{2}));
    CHECK(hash_tensor(Tensor({2}, {1.0f, 2.0f})) != hash_tensor(Tensor({2}, {2.0f, 1.0f})));
}

TEST_CASE("parallel_for visits every index once") {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) CHECK(h == 1);
}
