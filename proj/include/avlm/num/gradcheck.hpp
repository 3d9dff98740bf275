#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "avlm/num/tensor.hpp"

namespace avlm::num {

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t coords_checked = 0;
    bool pass = false;
    std::string worst;  // where the max error occurred
};

/// Relative-error metric with an absolute floor, so coordinates whose true
/// gradient is ~0 compare against finite-difference rounding noise sanely.
inline double rel_err(double a, double b, double floor = 1e-3) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central finite differences against reverse-mode gradients.
/// f must be deterministic: it is evaluated twice up front and the values
/// compared bit-for-bit. max_coords_per_param caps the sweep for large
/// parameter tensors; coordinates are then chosen by a seeded stride.
inline GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                                  double eps = 1e-5, double tol = 1e-4,
                                  size_t max_coords_per_param = std::numeric_limits<size_t>::max(),
                                  uint64_t coord_seed = 0) {
    if (eps < 1e-7 || eps > 1e-3) throw std::invalid_argument("grad_check: eps out of range");

    Tensor y1 = f();
    Tensor y2 = f();
    if (y1.data_vec() != y2.data_vec())
        throw std::runtime_error("grad_check: non-deterministic f detected");

    for (auto& p : params) p.zero_grad();
    Tensor loss = f();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params) analytic.push_back(p.grad_vec());

    GradCheckReport report;
    Rng pick(splitmix64(coord_seed ^ 0x9e3779b97f4a7c15ULL));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        size_t n = p.numel();
        std::vector<size_t> coords;
        if (n <= max_coords_per_param) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords = pick.sample_without_replacement(n, max_coords_per_param);
        }
        for (size_t ci : coords) {
            double saved = p.data()[ci];
            p.data()[ci] = saved + eps;
            double fp = f().item();
            p.data()[ci] = saved - eps;
            double fm = f().item();
            p.data()[ci] = saved;
            double fd = (fp - fm) / (2.0 * eps);
            double err = rel_err(fd, analytic[pi][ci]);
            ++report.coords_checked;
            if (err > report.max_rel_err) {
                report.max_rel_err = err;
                std::ostringstream ss;
                ss << "param " << pi << " coord " << ci << ": fd=" << fd
                   << " autodiff=" << analytic[pi][ci];
                report.worst = ss.str();
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace avlm::num
