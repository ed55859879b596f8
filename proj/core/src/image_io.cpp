#include "dmloc/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

namespace dmloc {

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
    for (;;) {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        if (pos < bytes.size() && bytes[pos] == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            continue;
        }
        break;
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) tok.push_back(static_cast<char>(bytes[pos++]));
    return tok;
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open PGM " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (next_token(bytes, pos) != "P5") throw Error(path.string() + ": only binary PGM (P5) is supported");
    GrayImage img;
    try {
        img.width = std::stoul(next_token(bytes, pos));
        img.height = std::stoul(next_token(bytes, pos));
        const unsigned long maxval = std::stoul(next_token(bytes, pos));
        if (maxval == 0 || maxval > 255) throw Error(path.string() + ": only 8-bit PGM is supported");
    } catch (const std::logic_error&) {
        throw Error(path.string() + ": malformed PGM header");
    }
    ++pos;  // single whitespace byte before the raster
    const std::size_t n = img.width * img.height;
    if (n == 0 || pos + n > bytes.size()) throw Error(path.string() + ": truncated PGM raster");
    img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + n));
    return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write PGM " + path.string());
    f << "P5\n" << image.width << " " << image.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
}

Tensor gray_to_tensor(const GrayImage& image) {
    Tensor t({1, image.height, image.width});
    for (std::size_t i = 0; i < image.pixels.size(); ++i) t[i] = image.pixels[i] / 127.5f - 1.0f;
    return t;
}

GrayImage tensor_to_gray(const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 1) throw ShapeError("tensor_to_gray expects [1,H,W]");
    GrayImage g{image.dim(2), image.dim(1), std::vector<std::uint8_t>(image.size())};
    for (std::size_t i = 0; i < image.size(); ++i) {
        const float v = std::clamp((image[i] + 1.0f) * 127.5f, 0.0f, 255.0f);
        g.pixels[i] = static_cast<std::uint8_t>(std::lround(v));
    }
    return g;
}

}  // namespace dmloc
