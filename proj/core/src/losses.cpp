#include "ushl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace ushl {

using ad::Var;

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  label += o.label;
  margin += o.margin;
  sparsity += o.sparsity;
  sparsity_surrogate += o.sparsity_surrogate;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double f) const {
  return {label * f, margin * f, sparsity * f, sparsity_surrogate * f, total * f};
}

double label_loss(double s, int y, double w, double eps) {
  const double c = std::clamp(s, eps, 1.0 - eps);
  return -w * y * std::log(c) - (1 - y) * std::log(1.0 - c);
}

double margin_loss(double s, int y_signed, double zeta) {
  return std::max(0.0, y_signed * (zeta - s));
}

SparsityLoss sparsity_loss(std::span<const double> s, double zeta,
                           std::span<const std::uint8_t> mask, double beta) {
  if (s.size() != mask.size()) throw ContractViolation("sparsity_loss: scores and mask differ in length");
  SparsityLoss out;
  for (std::size_t j = 0; j < s.size(); ++j) {
    if (!mask[j]) continue;
    const double d = s[j] - zeta;
    out.exact += d > 0 ? 1.0 : 0.0;
    out.surrogate += 1.0 / (1.0 + std::exp(-beta * d));
  }
  return out;
}

double auto_class_weight(const LabelTrack& labels) {
  const double pos = static_cast<double>(labels.positive_count());
  const double neg = static_cast<double>(labels.valid_count()) - pos;
  if (pos == 0) return 1.0;
  return std::clamp(neg / pos, 1.0, 20.0);
}

template <typename S>
LossTerms<S> total_loss(const Var<S>& scores, const LabelTrack& labels, const LossConfig& cfg) {
  if (scores.shape().size() != 1 || scores.shape()[0] != labels.size()) {
    throw ContractViolation("total_loss: scores " + to_string(scores.shape()) + " vs " +
                            std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = labels.valid_count();
  if (n == 0) throw ContractViolation("total_loss: no valid frames");
  auto* tape = scores.tape();
  const double w = cfg.class_weight > 0 ? cfg.class_weight : auto_class_weight(labels);

  Var<S> s = ad::masked_select(scores, std::span<const std::uint8_t>(labels.mask));
  Tensor<S> pos_coef({n}), neg_coef({n}), sign({n});
  for (std::size_t j = 0, k = 0; j < labels.size(); ++j) {
    if (!labels.mask[j]) continue;
    const bool hl = labels.y[j] != 0;
    pos_coef[k] = hl ? static_cast<S>(-w) : S(0);
    neg_coef[k] = hl ? S(0) : S(-1);
    sign[k] = hl ? S(1) : S(-1);
    ++k;
  }

  // Label: -w y log(s) - (1 - y) log(1 - s)
  const S eps = static_cast<S>(cfg.label_eps);
  Var<S> sc = ad::clamp(s, eps, S(1) - eps);
  Var<S> label = ad::add(ad::mul(ad::log(sc), tape->constant(pos_coef)),
                         ad::mul(ad::log(ad::add_scalar(ad::scale(sc, S(-1)), S(1))),
                                 tape->constant(neg_coef)));
  // Margin: max(0, y~ (zeta - s))
  const S zeta = static_cast<S>(cfg.zeta);
  Var<S> margin = ad::relu(ad::mul(ad::add_scalar(ad::scale(s, S(-1)), zeta), tape->constant(sign)));
  // Sparsity surrogate: sum sigmoid(beta (s - zeta))
  Var<S> surrogate =
      ad::sum(ad::sigmoid(ad::scale(ad::add_scalar(s, -zeta), static_cast<S>(cfg.beta))));

  LossTerms<S> out;
  {
    double acc = 0;
    for (S v : label.value().values()) acc += v;
    out.breakdown.label = acc / double(n);
    acc = 0;
    for (S v : margin.value().values()) acc += v;
    out.breakdown.margin = acc / double(n);
    std::vector<double> sd(s.value().values().begin(), s.value().values().end());
    std::vector<std::uint8_t> all(n, 1);
    out.breakdown.sparsity = sparsity_loss(sd, cfg.zeta, all, cfg.beta).exact;
    out.breakdown.sparsity_surrogate = static_cast<double>(surrogate.value().item());
  }

  Var<S> per_frame;
  if (cfg.use_label && cfg.use_margin) {
    per_frame = ad::add(label, margin);
  } else if (cfg.use_label) {
    per_frame = label;
  } else if (cfg.use_margin) {
    per_frame = margin;
  }
  if (per_frame.valid() && cfg.use_sparsity) {
    out.total = ad::add(ad::mean(per_frame), surrogate);
  } else if (per_frame.valid()) {
    out.total = ad::mean(per_frame);
  } else if (cfg.use_sparsity) {
    out.total = surrogate;
  } else {
    throw ContractViolation("total_loss: every loss term is disabled");
  }
  out.breakdown.total = static_cast<double>(out.total.value().item());
  return out;
}

template LossTerms<float> total_loss(const Var<float>&, const LabelTrack&, const LossConfig&);
template LossTerms<double> total_loss(const Var<double>&, const LabelTrack&, const LossConfig&);

}  // namespace ushl
