#include "dmloc/loc_eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dmloc/ops.hpp"

namespace dmloc {

namespace {

// Two-pass 4-connected labelling with union-find over provisional labels.
struct Components {
    std::vector<int> parent;

    int make() {
        parent.push_back(static_cast<int>(parent.size()));
        return parent.back();
    }
    int find(int a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    }
    void unite(int a, int b) {
        a = find(a), b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    }
};

struct Extent {
    std::size_t area = 0;
    std::size_t first = 0;  // raster index of the first pixel
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

}  // namespace

std::optional<BBox> cam_to_bbox(const Tensor& map, std::size_t image_size, double binarize_fraction, int class_id) {
    if (!(binarize_fraction > 0.0 && binarize_fraction < 1.0)) {
        throw ConfigError("cam_to_bbox: binarize fraction must lie in (0,1)");
    }
    if (image_size == 0) throw ShapeError("cam_to_bbox: image size must be positive");
    Tensor m;
    if (map.rank() == 2) {
        m = map.reshaped({1, map.dim(0), map.dim(1)});
    } else if (map.rank() == 3 && map.dim(0) == 1) {
        m = map;
    } else {
        throw ShapeError("cam_to_bbox expects [p,p] or [1,p,p], got " + shape_string(map.shape()));
    }
    const Tensor up = bilinear_resample(minmax_normalize(m), image_size, image_size);
    const float peak = *std::max_element(up.values().begin(), up.values().end());
    if (!(peak > 0.0f)) return std::nullopt;
    const float thr = static_cast<float>(binarize_fraction * peak);

    const std::size_t n = image_size;
    std::vector<int> label(n * n, -1);
    Components uf;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t id = i * n + j;
            if (up[id] < thr) continue;
            const int up_l = i > 0 ? label[id - n] : -1;
            const int left_l = j > 0 ? label[id - 1] : -1;
            if (up_l < 0 && left_l < 0) {
                label[id] = uf.make();
            } else if (up_l >= 0 && left_l >= 0) {
                label[id] = std::min(up_l, left_l);
                uf.unite(up_l, left_l);
            } else {
                label[id] = std::max(up_l, left_l);
            }
        }
    }
    if (uf.parent.empty()) return std::nullopt;

    std::vector<Extent> ext(uf.parent.size());
    for (std::size_t id = 0; id < label.size(); ++id) {
        if (label[id] < 0) continue;
        auto& e = ext[static_cast<std::size_t>(uf.find(label[id]))];
        const std::size_t i = id / n, j = id % n;
        if (e.area == 0) {
            e.first = id;
            e.x0 = e.x1 = j;
            e.y0 = e.y1 = i;
        }
        ++e.area;
        e.x0 = std::min(e.x0, j), e.x1 = std::max(e.x1, j);
        e.y0 = std::min(e.y0, i), e.y1 = std::max(e.y1, i);
    }
    const Extent* best = nullptr;
    for (const auto& e : ext) {
        if (e.area == 0) continue;
        if (!best || e.area > best->area || (e.area == best->area && e.first < best->first)) best = &e;
    }
    return BBox{double(best->x0), double(best->y0), double(best->x1 - best->x0 + 1), double(best->y1 - best->y0 + 1),
                class_id};
}

double iou(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
    const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

LocalizationRecord make_record(std::size_t sample_id, const BBox& ground_truth, const std::optional<BBox>& predicted) {
    LocalizationRecord r;
    r.sample_id = sample_id;
    r.class_id = ground_truth.class_id;
    r.ground_truth = ground_truth;
    r.predicted = predicted;
    r.iou = predicted ? iou(*predicted, ground_truth) : 0.0;
    return r;
}

AccuracyTable accuracy_at_iou(const std::vector<LocalizationRecord>& records, const std::vector<double>& thresholds,
                              const std::vector<std::string>& class_names) {
    for (double t : thresholds) {
        if (!(t > 0.0 && t < 1.0)) throw ConfigError("IoU thresholds must lie in (0,1)");
    }
    const std::size_t k = class_names.size();
    AccuracyTable table;
    table.thresholds = thresholds;
    table.class_names = class_names;
    table.counts.assign(k, 0);
    std::vector<std::vector<std::size_t>> hits(thresholds.size(), std::vector<std::size_t>(k, 0));
    for (const auto& r : records) {
        if (r.class_id < 0 || static_cast<std::size_t>(r.class_id) >= k) {
            throw ConfigError("localization record has class " + std::to_string(r.class_id) + " outside the taxonomy");
        }
        const auto c = static_cast<std::size_t>(r.class_id);
        ++table.counts[c];
        for (std::size_t t = 0; t < thresholds.size(); ++t) hits[t][c] += r.predicted && r.iou >= thresholds[t];
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (table.counts[c] == 0) table.warnings.push_back("class " + class_names[c] + " has no records; reported as n/a");
    }
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        std::vector<std::optional<double>> row(k);
        double sum = 0.0;
        std::size_t avail = 0;
        for (std::size_t c = 0; c < k; ++c) {
            if (table.counts[c] == 0) continue;
            row[c] = double(hits[t][c]) / double(table.counts[c]);
            sum += *row[c];
            ++avail;
        }
        table.accuracy.push_back(std::move(row));
        table.mean.push_back(avail ? std::optional<double>(sum / double(avail)) : std::nullopt);
    }
    return table;
}

namespace {

std::string cell(const std::optional<double>& v) {
    if (!v) return " n/a";
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

}  // namespace

std::string format_accuracy_row(const AccuracyTable& table, std::size_t t) {
    std::string row;
    for (const auto& v : table.accuracy.at(t)) row += (row.empty() ? "" : " ") + cell(v);
    return row + " | " + cell(table.mean.at(t));
}

std::string format_accuracy_table(const AccuracyTable& table) {
    std::string out = "T(IoU)";
    for (const auto& name : table.class_names) out += " " + name.substr(0, 4) + std::string(4 - std::min<std::size_t>(4, name.size()), ' ');
    out += " | Mean\n";
    for (std::size_t t = 0; t < table.thresholds.size(); ++t) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%-6.1f", table.thresholds[t]);
        out += std::string(buf) + " " + format_accuracy_row(table, t) + "\n";
    }
    return out;
}

double roc_auc(std::span<const float> scores, std::span<const std::uint8_t> labels) {
    if (scores.size() != labels.size()) throw ShapeError("roc_auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::int64_t twice_wins = 0, neg_below = 0, pos = 0, neg = 0;
    for (std::size_t g = 0; g < order.size();) {
        std::size_t e = g;
        std::int64_t gp = 0, gn = 0;
        while (e < order.size() && scores[order[e]] == scores[order[g]]) {
            if (labels[order[e]]) ++gp; else ++gn;
            ++e;
        }
        twice_wins += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        pos += gp, neg += gn;
        g = e;
    }
    if (pos == 0 || neg == 0) throw Error("roc_auc: undefined without both positive and negative labels");
    return static_cast<double>(twice_wins) / static_cast<double>(2 * pos * neg);
}

}  // namespace dmloc
