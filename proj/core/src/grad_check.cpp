#include "dmloc/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace dmloc {

const char* to_string(GradCheckReport::Status s) {
    switch (s) {
        case GradCheckReport::Status::passed: return "passed";
        case GradCheckReport::Status::failed: return "failed";
        case GradCheckReport::Status::skipped: return "skipped";
    }
    return "?";
}

GradCheckReport grad_check(const DiffOp& op, const Tensor& input, double epsilon, double tolerance,
                           std::uint64_t direction_seed) {
    if (!(epsilon > 0.0)) throw Error("grad_check: epsilon must be positive");
    GradCheckReport report;
    TensorD x = input.cast<double>();

    if (op.smooth_at && !op.smooth_at(x)) {
        report.note = op.name + ": input is a non-differentiable point";
        return report;
    }

    GradPair analytic = op.forward(input);
    std::mt19937_64 rng(direction_seed);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    Tensor direction(analytic.value.shape());
    for (std::size_t i = 0; i < direction.size(); ++i) direction[i] = static_cast<float>(unif(rng));
    const Tensor grad = analytic.backward(direction).at(0);
    if (grad.shape() != input.shape()) {
        throw ShapeError("grad_check(" + op.name + "): gradient shape " + shape_string(grad.shape()) +
                         " != input shape " + shape_string(input.shape()));
    }

    const TensorD dir64 = direction.cast<double>();
    auto objective = [&](const TensorD& at) {
        const TensorD y = op.forward64(at);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * dir64[i];
        return acc;
    };

    const double f0 = objective(x);
    std::vector<double> numeric(x.size());
    std::vector<bool> kink(x.size(), false);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + epsilon;
        const double fp = objective(x);
        x[i] = orig - epsilon;
        const double fm = objective(x);
        x[i] = orig;
        numeric[i] = (fp - fm) / (2.0 * epsilon);
        const double fwd = (fp - f0) / epsilon, bwd = (f0 - fm) / epsilon;
        const double scale = std::max({std::abs(fwd), std::abs(bwd), 1e-8});
        kink[i] = std::abs(fwd - bwd) / scale > tolerance && std::abs(fwd - bwd) > 1e-6;
    }

    double max_num = 0.0;
    for (double n : numeric) max_num = std::max(max_num, std::abs(n));
    const double floor = std::max(1e-3 * max_num, 1e-9);

    for (std::size_t i = 0; i < x.size(); ++i) {
        if (kink[i]) {
            ++report.skipped;
            continue;
        }
        const double a = grad[i], n = numeric[i];
        const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.checked;
    }

    if (report.checked == 0) {
        report.note = op.name + ": every coordinate sits on a kink";
        return report;
    }
    report.status = report.max_rel_error < tolerance ? GradCheckReport::Status::passed
                                                      : GradCheckReport::Status::failed;
    return report;
}

}  // namespace dmloc
