#pragma once

// Glue shared by the command-line tool, the acceptance run and benchmarks:
// the run configuration file, scoring and evaluating whole splits, and the
// ablation variants.

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ushl/attention.hpp"
#include "ushl/config.hpp"
#include "ushl/gradcheck.hpp"
#include "ushl/metrics.hpp"
#include "ushl/synth.hpp"
#include "ushl/trainer.hpp"

namespace ushl {

/// Everything a run needs besides file paths. On disk this is one JSON object
/// with optional sections "synth", "engine", "loss", "train" and "eval";
/// missing keys keep their defaults and unknown keys are rejected.
struct RunConfig {
  SynthConfig synth;
  EngineConfig engine;
  LossConfig loss;
  TrainConfig train;
  EvalOptions eval;
  /// Seed of the parameter initialisation.
  std::uint64_t init_seed = 3;

  void validate() const;
};

void to_json(nlohmann::json& j, const EvalOptions& o);
void from_json(const nlohmann::json& j, EvalOptions& o);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);
/// Reads a config file on top of `base`.
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base = {});

/// Desk-scale defaults for the synthetic benchmark: small engine widths
/// matched to the corpus shapes and a short, fast training schedule.
RunConfig benchmark_config(const SynthConfig& synth = {});

/// `base` with input shapes and padded lengths taken from `users` (longest
/// clip, longest target); max_clips is capped at the largest clip count.
EngineConfig fit_engine(const std::vector<UserSample>& users, EngineConfig base);

std::vector<UserSample> prepare_users(const std::vector<UserSample>& users, const EngineConfig& cfg,
                                      std::size_t max_clips);

/// Eval-mode scores for raw users, keeping at most `max_clips` clips each.
std::vector<ScoreTrack> score_users(const std::vector<UserSample>& users, const ModelParams<float>& params,
                                    std::size_t max_clips, AttentionMode mode = AttentionMode::kLearned,
                                    std::size_t workers = 1);

EvalReport evaluate_model(const std::vector<UserSample>& users, const ModelParams<float>& params,
                          std::size_t max_clips, AttentionMode mode = AttentionMode::kLearned,
                          const EvalOptions& opt = {}, std::size_t workers = 1);

/// Prepares `train_users` with cfg.engine and trains from a fresh
/// initialisation.
TrainResult train_model(const std::vector<UserSample>& train_users, const RunConfig& cfg,
                        const EpochCallback& on_epoch = {});

/// Tiny network (2 clips of 4 frames, 6 target frames, d_z 8, d_y 4) for
/// finite-difference checks.
EngineConfig micro_engine();

/// Finite-difference check of the full training objective (scores and all
/// loss terms) with respect to every parameter, in 64-bit, on one random
/// micro-sized user drawn from `seed`. The 1e-5 floor keeps round-off in the
/// differences of near-zero gradients from dominating the relative error.
GradCheckReport end_to_end_gradcheck(std::uint64_t seed, const GradCheckOptions& opt = {1e-5, 1e-4, 1e-5});

enum class AblationAxis { kClips, kBackbone, kLoss, kAttention };

AblationAxis parse_axis(const std::string& name);
std::string axis_name(AblationAxis axis);
/// Values accepted on each axis: clip counts for kClips; "full", "no_objects",
/// "no_poses" for kBackbone; "full", "no_label", "no_margin", "no_sparsity" for
/// kLoss; "learned", "uniform" for kAttention.
void check_ablation_value(AblationAxis axis, const std::string& value);

/// The configuration that trains the model for one ablation value. Axes that
/// only change inference (clips, attention) return `base` unchanged.
RunConfig ablation_variant(const RunConfig& base, AblationAxis axis, const std::string& value);

struct AblationRow {
  std::string value;
  EvalReport report;
};

/// Trains one model per distinct training configuration and evaluates every
/// requested value on `test_users`.
std::vector<AblationRow> run_ablation(const RunConfig& base, AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const std::vector<UserSample>& train_users,
                                      const std::vector<UserSample>& test_users, std::size_t workers = 1,
                                      const EpochCallback& on_epoch = {});

}  // namespace ushl
