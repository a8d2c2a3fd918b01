#include "hourglass/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "hourglass/rng.hpp"

namespace hourglass {

GradCheckReport check_gradient(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                               const GradCheckOptions& options) {
  check_config(options.epsilon > 0.0, "check_gradient: epsilon must be > 0");

  for (auto& in : inputs) in.zero_grad();
  Tensor out = f();
  check_contract(out.size() == 1, "check_gradient: f must return a scalar, got shape ",
                 shape_str(out.shape()));
  out.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) {
    auto g = in.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckReport report;
  RngStream pick(options.subsample_seed);
  for (size_t idx = 0; idx < inputs.size(); ++idx) {
    auto vals = inputs[idx].mutable_values();
    const int64_t n = static_cast<int64_t>(vals.size());
    std::vector<int64_t> coords;
    if (options.max_coords_per_tensor > 0 && n > options.max_coords_per_tensor) {
      // Deterministic sample without replacement.
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < options.max_coords_per_tensor; ++i) {
        const int64_t j = i + static_cast<int64_t>(pick.next_below(static_cast<uint64_t>(n - i)));
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
      }
      coords.assign(all.begin(), all.begin() + options.max_coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    } else {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    }

    for (int64_t c : coords) {
      const double saved = vals[static_cast<size_t>(c)];
      vals[static_cast<size_t>(c)] = saved + options.epsilon;
      const double f_plus = f().item();
      vals[static_cast<size_t>(c)] = saved - options.epsilon;
      const double f_minus = f().item();
      vals[static_cast<size_t>(c)] = saved;

      const double numeric = (f_plus - f_minus) / (2.0 * options.epsilon);
      const double a = analytic[idx][static_cast<size_t>(c)];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      report.max_relative_error = std::max(report.max_relative_error, rel);
      ++report.coordinates_checked;
      if (rel > options.tolerance)
        report.failing_coordinates.push_back({idx, c, a, numeric, rel});
    }
  }
  return report;
}

}  // namespace hourglass
