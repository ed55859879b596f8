#pragma once

// Private JSON helpers shared by the persistence code.

#include <filesystem>
#include <json.hpp>
#include <string>

#include "dmloc/affine.hpp"
#include "dmloc/synth.hpp"
#include "dmloc/util.hpp"

namespace dmloc {

using json = nlohmann::ordered_json;

inline json to_json(const AffineParams& p) {
    return json{{"sx", p.sx}, {"sy", p.sy}, {"tx", p.tx}, {"ty", p.ty}, {"theta", p.theta}};
}

inline AffineParams affine_from_json(const json& j) {
    return {j.at("sx").get<float>(), j.at("sy").get<float>(), j.at("tx").get<float>(), j.at("ty").get<float>(),
            j.at("theta").get<float>()};
}

inline json to_json(const GtBox& b) {
    return json{{"class", b.class_id}, {"x", b.x}, {"y", b.y}, {"w", b.w}, {"h", b.h}};
}

inline GtBox box_from_json(const json& j) {
    return {j.at("class").get<int>(), j.at("x").get<double>(), j.at("y").get<double>(), j.at("w").get<double>(),
            j.at("h").get<double>()};
}

inline json read_json(const std::filesystem::path& path) {
    try {
        return json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

}  // namespace dmloc
