#pragma once

#include <cstdint>
#include <span>

#include "ushl/autodiff.hpp"
#include "ushl/config.hpp"
#include "ushl/feature_io.hpp"

namespace ushl {

/// Loss components for one target video. `label` and `margin` are means over
/// valid frames; `sparsity` is the exact count of valid frames scored above
/// zeta and `sparsity_surrogate` its sigmoid relaxation, which is what the
/// total (and the gradient) uses.
struct LossBreakdown {
  double label = 0.0;
  double margin = 0.0;
  double sparsity = 0.0;
  double sparsity_surrogate = 0.0;
  double total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double f) const;
};

/// -w y log(s) - (1 - y) log(1 - s), with s clamped to [eps, 1 - eps].
double label_loss(double s, int y, double w, double eps = 1e-7);

/// max(0, y_signed (zeta - s)), y_signed = +1 for highlight frames, -1 otherwise.
double margin_loss(double s, int y_signed, double zeta);

struct SparsityLoss {
  double exact = 0.0;
  double surrogate = 0.0;
};

/// exact = sum over valid frames of max(0, sign(s - zeta));
/// surrogate = sum over valid frames of sigmoid(beta (s - zeta)).
SparsityLoss sparsity_loss(std::span<const double> s, double zeta,
                           std::span<const std::uint8_t> mask, double beta = 10.0);

/// (#valid negatives) / (#valid positives), clamped to [1, 20].
double auto_class_weight(const LabelTrack& labels);

template <typename S>
struct LossTerms {
  ad::Var<S> total;
  LossBreakdown breakdown;
};

/// Differentiable total loss for scores [T_t] aligned with `labels`.
template <typename S>
LossTerms<S> total_loss(const ad::Var<S>& scores, const LabelTrack& labels, const LossConfig& cfg);

}  // namespace ushl
