#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hourglass/tensor.hpp"

namespace hourglass {

struct GradCheckOptions {
  double epsilon = 1e-5;
  double tolerance = 1e-4;
  // 0 checks every coordinate; otherwise a deterministic subsample of at
  // most this many coordinates per tensor.
  int64_t max_coords_per_tensor = 0;
  uint64_t subsample_seed = 2024;
};

struct GradCheckFailure {
  size_t input_index;
  int64_t coordinate;
  double analytic;
  double numeric;
  double relative_error;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::vector<GradCheckFailure> failing_coordinates;
  int64_t coordinates_checked = 0;
  bool ok(double tolerance) const { return max_relative_error <= tolerance; }
};

// Central finite differences (f(x+eps e) - f(x-eps e)) / 2eps against the
// reverse-mode gradient of a scalar-valued function, per coordinate.
// Relative error is |a-n| / max(|a|,|n|,1e-8). `f` must be deterministic;
// it is re-evaluated with the inputs perturbed in place.
GradCheckReport check_gradient(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                               const GradCheckOptions& options = {});

}  // namespace hourglass
