#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>

#include "dmloc/tensor.hpp"

namespace dmloc {

/// Worker cap: DM_LOCATE_THREADS if set and positive, else hardware concurrency.
std::size_t thread_count();

/// Runs body(i) for i in [0, n). Each index must write only its own outputs;
/// results are then identical for any thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// 64-bit FNV-1a. Used for content hashes in artifact metadata.
class Fnv1a {
public:
    Fnv1a& update(std::span<const std::uint8_t> bytes);
    Fnv1a& update(std::string_view s);
    Fnv1a& update(const Tensor& t);
    Fnv1a& update_u64(std::uint64_t v);
    std::uint64_t digest() const { return state_; }
    std::string hex() const;

private:
    std::uint64_t state_ = 0xcbf29ce484222325ull;
};

std::string hash_hex(std::uint64_t h);
std::string hash_tensor(const Tensor& t);
std::string hash_file(const std::filesystem::path& path);

/// Derives an independent stream seed from a parent seed and a label / index.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label);
std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

}  // namespace dmloc
