#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ushl/autodiff.hpp"

namespace ushl {

template <typename Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> value;
};

struct ParamCheck {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Elements whose finite-difference stencil crossed a relu/clamp kink.
  std::size_t excluded = 0;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  bool passed = true;
};

/// Builds a scalar objective on `tape` from leaf variables bound to the
/// parameters, in the order they were passed to check_gradients.
using Objective = std::function<ad::Var<double>(ad::Tape<double>& tape,
                                                std::span<const ad::Var<double>> params)>;

struct GradCheckOptions {
  double eps = 1e-4;
  double tol = 1e-5;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

/// Compares reverse-mode gradients of `f` against central differences,
/// element by element. Elements whose +/- eps evaluations land on a different
/// smooth piece (relu or clamp sign pattern changes) are excluded and counted.
GradCheckReport check_gradients(const Objective& f,
                                std::vector<NamedTensor<double>> params,
                                const GradCheckOptions& opt = {});

}  // namespace ushl
