#include "ushl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ushl {

namespace {

struct Evaluation {
  double value;
  std::vector<std::int8_t> kinks;
};

Evaluation evaluate(const Objective& f, const std::vector<NamedTensor<double>>& params) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> leaves;
  leaves.reserve(params.size());
  for (const auto& p : params) leaves.push_back(tape.variable(p.value, p.name));
  const auto root = f(tape, leaves);
  return {root.value().item(), tape.kink_pattern()};
}

}  // namespace

GradCheckReport check_gradients(const Objective& f, std::vector<NamedTensor<double>> params,
                                const GradCheckOptions& opt) {
  std::vector<Tensor<double>> analytic;
  std::vector<std::int8_t> base_kinks;
  {
    ad::Tape<double> tape;
    std::vector<ad::Var<double>> leaves;
    for (const auto& p : params) leaves.push_back(tape.variable(p.value, p.name));
    const auto root = f(tape, leaves);
    const auto grads = tape.backward(root);
    for (const auto& leaf : leaves) analytic.push_back(grads[leaf]);
    base_kinks = tape.kink_pattern();
  }

  GradCheckReport report;
  for (std::size_t p = 0; p < params.size(); ++p) {
    ParamCheck check{params[p].name};
    auto& values = params[p].value;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opt.eps;
      const Evaluation plus = evaluate(f, params);
      values[i] = saved - opt.eps;
      const Evaluation minus = evaluate(f, params);
      values[i] = saved;
      if (plus.kinks != base_kinks || minus.kinks != base_kinks) {
        ++check.excluded;
        continue;
      }
      const double numeric = (plus.value - minus.value) / (2.0 * opt.eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opt.floor});
      check.max_rel_error = std::max(check.max_rel_error, std::abs(a - numeric) / denom);
      ++check.checked;
    }
    report.max_rel_error = std::max(report.max_rel_error, check.max_rel_error);
    report.checked += check.checked;
    report.excluded += check.excluded;
    report.params.push_back(std::move(check));
  }
  report.passed = report.max_rel_error <= opt.tol;
  return report;
}

}  // namespace ushl
