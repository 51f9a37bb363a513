#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "ushl/autodiff.hpp"
#include "ushl/config.hpp"

namespace ushl {

/// Every learnable tensor of the network plus batch-norm running statistics.
///
/// Parameter names are dotted paths. The clip side lives under `clip.`, the
/// target side under `target.`; the two share no tensors. Clip-level heads are
/// `clip_head.z` / `clip_head.y`, the predictor is `pred`.
template <typename S>
struct ModelParams {
  EngineConfig config;
  std::map<std::string, Tensor<S>> tensors;
  std::map<std::string, ad::BatchStats<S>> norms;

  /// He/Xavier weights, zero biases, unit batchnorm scales. The target
  /// priming starts as a copy of the clip priming, and the score head's output
  /// bias starts at -2 so initial scores sit below the highlight threshold.
  static ModelParams init(const EngineConfig& cfg, std::uint64_t seed);

  const Tensor<S>& at(const std::string& name) const;
  Tensor<S>& at(const std::string& name);
  std::size_t parameter_count() const;

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.config = config;
    for (const auto& [k, v] : tensors) out.tensors.emplace(k, v.template cast<T>());
    for (const auto& [k, v] : norms) {
      out.norms.emplace(k, ad::BatchStats<T>{v.mean.template cast<T>(), v.var.template cast<T>()});
    }
    return out;
  }
};

/// Per-forward state: the tape, lazily bound parameter leaves, the norm mode,
/// and batch statistics observed in train mode.
template <typename S>
class ForwardContext {
 public:
  ForwardContext(ad::Tape<S>& tape, const ModelParams<S>& params, ad::NormMode mode)
      : tape_(tape), params_(params), mode_(mode) {}

  ad::Tape<S>& tape() { return tape_; }
  const EngineConfig& config() const { return params_.config; }
  ad::NormMode mode() const { return mode_; }

  /// Leaf variable for a parameter; the same Var is returned on every call so
  /// all uses share one node.
  ad::Var<S> param(const std::string& name);
  const std::map<std::string, ad::Var<S>>& bound() const { return bound_; }
  /// Uses `v` for parameter `name` instead of a fresh leaf. Must precede the
  /// first param(name) call.
  void bind(const std::string& name, ad::Var<S> v);

  ad::Var<S> batchnorm(const std::string& name, const ad::Var<S>& x);
  const std::map<std::string, ad::BatchStats<S>>& observed() const { return observed_; }

  /// Test hook: temporal conv padding wraps around.
  bool circular_time = false;

 private:
  ad::Tape<S>& tape_;
  const ModelParams<S>& params_;
  ad::NormMode mode_;
  std::map<std::string, ad::Var<S>> bound_;
  std::map<std::string, ad::BatchStats<S>> observed_;
};

/// Folds observed batch statistics into running statistics with momentum m:
/// running = (1 - m) running + m observed.
template <typename S>
void update_running_stats(ModelParams<S>& params,
                          const std::map<std::string, ad::BatchStats<S>>& observed);

}  // namespace ushl
