#pragma once

#include <harmonia/autodiff.hpp>

#include <cstdint>
#include <functional>
#include <map>
#include <string>

namespace harmonia {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::int64_t worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::int64_t checked = 0;
  std::map<std::string, double> per_parameter;
  bool passed = false;
};

using LossFn = std::function<ad::Var(ad::Tape&)>;

inline constexpr std::int64_t kGradCheckMaxParameters = 10000;

/// Compares analytic gradients of every parameter in `graph` against central
/// differences. Relative error is |a - n| / max(|a|, |n|, abs_floor).
/// Parameters of other stores touched by `loss` stay fixed.
GradCheckReport grad_check(ad::ModelGraph& graph, const LossFn& loss, double epsilon,
                           double tolerance, double abs_floor = 1e-7);

}  // namespace harmonia
