#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "owps/tensor.hpp"

namespace owps {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;  // at worst_index
    double numeric = 0.0;
};

struct GradCheckOptions {
    double h = 1e-2;                 // rounded down to a power of two so x +/- h is exact
    double floor = 1e-6;             // denominator floor for all-zero gradients
    std::vector<std::size_t> coords; // empty: every coordinate
};

// Compares the tape gradient of a scalar function against central differences
// with one Richardson extrapolation step (steps h and h/2). In single
// precision, steps near 1e-2 balance truncation against rounding noise.
// The error of each coordinate is relative to the largest gradient magnitude
// among the checked coordinates.
//
// `f` must read `x` each time it is called; `x` is perturbed in place and
// restored afterwards. Clears the current tape before and after.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, Tensor x,
                                  const GradCheckOptions& options = {});

// Convenience form: `f` maps a tensor to a scalar.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h);

}  // namespace owps
