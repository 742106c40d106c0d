#include <harmonia/grad_check.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace harmonia {

GradCheckReport grad_check(ad::ModelGraph& graph, const LossFn& loss, double epsilon,
                           double tolerance, double abs_floor) {
  if (graph.parameters.total_size() > kGradCheckMaxParameters) {
    throw std::invalid_argument("grad_check: more than " + std::to_string(kGradCheckMaxParameters) +
                                " parameters");
  }
  auto& tape = graph.tape;
  tape.clear();
  graph.parameters.zero_grad();
  graph.backward(loss(tape));

  std::vector<ad::Array> analytic;
  for (const auto& p : graph.parameters) analytic.push_back(p.grad);

  auto evaluate = [&] {
    const double v = loss(tape).item();
    tape.clear();
    return v;
  };

  GradCheckReport report;
  std::size_t pi = 0;
  for (auto& p : graph.parameters) {
    double worst = 0.0;
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + epsilon;
      const double up = evaluate();
      p.value[i] = saved - epsilon;
      const double down = evaluate();
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
      const double rel = std::abs(a - numeric) / denom;
      worst = std::max(worst, rel);
      if (rel > report.max_relative_error || report.worst_index < 0) {
        report.max_relative_error = std::max(report.max_relative_error, rel);
        if (rel >= report.max_relative_error) {
          report.worst_parameter = p.name;
          report.worst_index = i;
          report.worst_analytic = a;
          report.worst_numeric = numeric;
        }
      }
      ++report.checked;
    }
    report.per_parameter[p.name] = worst;
    ++pi;
  }
  graph.parameters.zero_grad();
  report.passed = report.max_relative_error < tolerance;
  return report;
}

}  // namespace harmonia
