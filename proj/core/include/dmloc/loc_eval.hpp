#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dmloc/tensor.hpp"

namespace dmloc {

/// Box in pixel-edge coordinates: covers [x, x+w) x [y, y+h).
struct BBox {
    double x = 0, y = 0, w = 0, h = 0;
    int class_id = 0;
    friend bool operator==(const BBox&, const BBox&) = default;
};

/// Normalizes the map to [0,1], upsamples it (align-corners bilinear) to
/// image_size, keeps pixels >= binarize_fraction * max, and returns the tight
/// box of the largest 4-connected component. Ties between equally large
/// components go to the one met first in raster order. Accepts [p,p] or
/// [1,p,p].
std::optional<BBox> cam_to_bbox(const Tensor& map, std::size_t image_size, double binarize_fraction,
                                int class_id = 0);

/// Continuous-coordinate intersection over union.
double iou(const BBox& a, const BBox& b);

struct LocalizationRecord {
    std::size_t sample_id = 0;
    int class_id = 0;
    std::optional<BBox> predicted;
    BBox ground_truth;
    double iou = 0.0;
};

/// Builds a record, computing the IoU (0 when there is no prediction).
LocalizationRecord make_record(std::size_t sample_id, const BBox& ground_truth, const std::optional<BBox>& predicted);

/// A hit is iou >= threshold.
struct AccuracyTable {
    std::vector<double> thresholds;
    std::vector<std::string> class_names;
    std::vector<std::size_t> counts;                          // ground-truth boxes per class
    std::vector<std::vector<std::optional<double>>> accuracy;  // [threshold][class]; nullopt = n/a
    std::vector<std::optional<double>> mean;                  // unweighted over available classes
    std::vector<std::string> warnings;
};

AccuracyTable accuracy_at_iou(const std::vector<LocalizationRecord>& records, const std::vector<double>& thresholds,
                              const std::vector<std::string>& class_names);

/// One row: per-class values with two decimals, then "| mean".
std::string format_accuracy_row(const AccuracyTable& table, std::size_t threshold_index);
/// Header plus one row per threshold.
std::string format_accuracy_table(const AccuracyTable& table);

/// Mann-Whitney AUC with half credit for ties. Exact: the pair count is
/// accumulated in integers and divided once. Needs both classes present.
double roc_auc(std::span<const float> scores, std::span<const std::uint8_t> labels);

}  // namespace dmloc
