#include "bita/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bita/rng.hpp"

namespace bita {

namespace {

void validate(const Tensor& loss, double h) {
  if (h < 1e-7 || h > 1e-3) {
    throw std::invalid_argument("finite_diff_check: h must be in [1e-7, 1e-3]");
  }
  if (loss->size() != 1) {
    throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
  }
}

double eval_scalar(const std::function<Tensor(const Tensor&)>& f,
                   const Tensor& point) {
  Tensor out = f(point);
  if (out->size() != 1) {
    throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
  }
  return out->value[0];
}

double check_coords(const std::function<Tensor(const Tensor&)>& f,
                    const Tensor& point, double h,
                    const std::vector<std::size_t>& coords) {
  point->requires_grad = true;
  point->needs_grad = true;
  point->zero_grad();
  Tensor loss = f(point);
  validate(loss, h);
  backward(loss);
  std::vector<double> analytic = point->grad;

  double worst = 0.0;
  for (std::size_t i : coords) {
    const double keep = point->value[i];
    point->value[i] = keep + h;
    const double up = eval_scalar(f, point);
    point->value[i] = keep - h;
    const double down = eval_scalar(f, point);
    point->value[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double err =
        std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  point->zero_grad();
  return worst;
}

}  // namespace

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                         const Tensor& point, double h) {
  std::vector<std::size_t> coords(point->size());
  std::iota(coords.begin(), coords.end(), 0);
  return check_coords(f, point, h, coords);
}

double finite_diff_check_sampled(const std::function<Tensor(const Tensor&)>& f,
                                 const Tensor& point, double h,
                                 std::size_t n_coords, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::size_t> coords;
  coords.reserve(n_coords);
  for (std::size_t i = 0; i < n_coords; ++i) {
    coords.push_back((std::size_t)rng.uniform_int(point->size()));
  }
  return check_coords(f, point, h, coords);
}

}  // namespace bita
