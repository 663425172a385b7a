#pragma once

#include <functional>

#include "bita/tensor.hpp"

namespace bita {

// Central finite-difference audit of the analytic gradient of a scalar-valued
// graph builder at `point`. Returns the max over coordinates of
// |analytic - central_difference| / max(1, |analytic|).
// Requires h in [1e-7, 1e-3] and f(point) scalar.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double h);

// Same audit restricted to `n_coords` deterministically sampled coordinates
// (for large parameter tensors where the full sweep is too expensive).
double finite_diff_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                                 const Tensor& point, double h,
                                 std::size_t n_coords, std::uint64_t seed);

}  // namespace bita
