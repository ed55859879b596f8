#include "dmloc/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dmloc {

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

template <class T>
bool BasicTensor<T>::all_finite() const noexcept {
    for (T v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

namespace {

static_assert(std::endian::native == std::endian::little, "DMT1 codec assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[offset + i]) << (8 * i);
    return v;
}

}  // namespace

std::vector<std::uint8_t> encode_dmt(const Tensor& t) {
    std::vector<std::uint8_t> out;
    out.reserve(8 + 4 * t.rank() + 4 * t.size());
    out.insert(out.end(), {'D', 'M', 'T', '1'});
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(out, static_cast<std::uint32_t>(e));
    const auto* raw = reinterpret_cast<const std::uint8_t*>(t.data());
    out.insert(out.end(), raw, raw + 4 * t.size());
    return out;
}

Tensor decode_dmt(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), "DMT1", 4) != 0) {
        throw CorruptionError("not a DMT1 tensor (bad magic)");
    }
    const std::uint32_t rank = get_u32(bytes, 4);
    if (rank == 0 || bytes.size() < 8 + 4ull * rank) throw CorruptionError("truncated DMT1 header");
    Shape shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = get_u32(bytes, 8 + 4 * i);
    const std::size_t header = 8 + 4ull * rank;
    const std::size_t n = shape_volume(shape);
    if (bytes.size() != header + 4 * n) {
        throw CorruptionError("DMT1 payload length mismatch for shape " + shape_string(shape));
    }
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + header, 4 * n);
    return Tensor(std::move(shape), std::move(data));
}

void write_dmt(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_dmt(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + path.string() + " for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("short write to " + path.string());
}

Tensor read_dmt(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CorruptionError("missing tensor file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    try {
        return decode_dmt(bytes);
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError("max_abs_diff shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace dmloc
