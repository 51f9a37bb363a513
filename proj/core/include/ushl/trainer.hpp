#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ushl/config.hpp"
#include "ushl/feature_io.hpp"
#include "ushl/losses.hpp"
#include "ushl/model.hpp"

namespace ushl {

using GradMap = std::map<std::string, Tensor<float>>;

struct OptimState {
  std::map<std::string, Tensor<float>> m;
  std::map<std::string, Tensor<float>> v;
  std::uint64_t step = 0;
  double lr = 0.0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update with the weight-decay term lambda * theta
/// added to the gradient. Parameters without a gradient entry get a zero
/// gradient. Throws NumericFault (parameters untouched) on non-finite grads.
void adam_step(ModelParams<float>& params, const GradMap& grads, OptimState& state, double lr,
               double weight_decay, const AdamConfig& adam = {});

/// Forward + backward for one mini-batch of prepared users on a single tape.
/// The objective is the mean of the members' total losses; `loss` sums their
/// breakdowns.
struct BatchGradient {
  GradMap grads;
  std::map<std::string, ad::BatchStats<float>> observed;
  LossBreakdown loss;
};

BatchGradient batch_gradient(std::span<const UserSample* const> users, const ModelParams<float>& params,
                             const LossConfig& loss);

/// Eval-mode loss of one prepared user.
LossBreakdown sample_loss(const UserSample& user, const ModelParams<float>& params,
                          const LossConfig& loss);

inline double learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  double lr = cfg.lr;
  for (std::size_t e = 0; e < epoch; ++e) lr *= cfg.lr_decay;
  return lr;
}

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown train;
  std::optional<double> validation;
};

struct TrainResult {
  ModelParams<float> params;
  OptimState optim;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mini-batch training over prepared users. Batches come from a seeded
/// shuffle each epoch and each batch runs as one forward/backward pass, so
/// the trajectory does not depend on the worker count (workers only speed up
/// validation).
TrainResult train(const std::vector<UserSample>& corpus, ModelParams<float> init,
                  const TrainConfig& cfg, const LossConfig& loss,
                  const EpochCallback& on_epoch = {});

// Checkpoints ---------------------------------------------------------------

struct CheckpointInfo {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string rng_state;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes manifest.json (config echo, epoch, rng state, parameter list with
/// CRC32) and one PHLT tensor file per parameter and running statistic.
void save_checkpoint(const std::filesystem::path& dir, const ModelParams<float>& params,
                     const CheckpointInfo& info);
ModelParams<float> load_checkpoint(const std::filesystem::path& dir, CheckpointInfo* info = nullptr);

}  // namespace ushl
