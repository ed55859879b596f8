#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "dmloc/tensor.hpp"

namespace dmloc {

/// An operator viewed as a function of one tensor argument. `forward` is the
/// float training path (value plus analytic backward; backward()[0] must be
/// the gradient of that argument). `forward64` recomputes the value in double
/// precision for the finite-difference side.
struct DiffOp {
    std::string name;
    std::function<GradPair(const Tensor&)> forward;
    std::function<TensorD(const TensorD&)> forward64;
    /// Optional: false at points where the operator is not differentiable.
    std::function<bool(const TensorD&)> smooth_at;
};

struct GradCheckReport {
    enum class Status { passed, failed, skipped };

    Status status = Status::skipped;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t skipped = 0;  // coordinates sitting on a kink
    std::string note;

    bool passed() const { return status == Status::passed; }
};

const char* to_string(GradCheckReport::Status s);

/// Projects the operator output onto a seeded random direction r and compares
/// the analytic gradient of <r, op(x)> with central differences in double.
///
/// Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-3 * max|n|), so
/// coordinates that are tiny compared to the gradient scale are judged on an
/// absolute footing. A coordinate whose one-sided differences disagree by more
/// than the tolerance sits on a kink and is skipped.
GradCheckReport grad_check(const DiffOp& op, const Tensor& input, double epsilon, double tolerance,
                           std::uint64_t direction_seed = 0x5eed);

}  // namespace dmloc
