#pragma once

// Synthetic corpora with controllable user preferences.
//
// Each concept has an object-grid template and a pose template. Saliency is
// split by concept id: c % 3 == 0 shows in both channels, 1 only in objects,
// 2 only in poses; a non-salient channel shows a shared neutral pattern.
//
// A user prefers k concepts, drawn with skewed weights (the first concept is
// the most frequent). Every preferred clip holds one short "active" segment of
// a preferred concept; the remaining frames are idle footage of one foreign
// background concept. Object channel 0 and pose coordinate 2 carry an activity
// cue (1 active, 0 idle). Target videos interleave segments of the preferred
// concepts (label 1, cycling through all k) with foreign segments (label 0);
// every target frame is active.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ushl/attention.hpp"
#include "ushl/feature_io.hpp"

namespace ushl {

struct SynthConfig {
  std::size_t concepts = 8;  // C
  std::size_t per_user = 2;  // k
  /// Draw weight of a user's first concept; the rest share the remainder.
  double major_weight = 0.75;

  std::size_t clips = 15;
  std::size_t clip_len = 8;
  std::size_t active_min = 3;
  std::size_t active_max = 4;
  std::size_t target_min = 32;
  std::size_t target_max = 40;
  std::size_t segment_min = 3;
  std::size_t segment_max = 6;
  double highlight_fraction = 0.3;
  double noise = 0.1;  // sigma_n

  std::size_t obj_channels = 4;
  std::size_t obj_height = 4;
  std::size_t obj_width = 4;
  std::size_t joints = 17;
  std::size_t pose_dims = 3;

  std::size_t train_users = 200;
  std::size_t test_users = 40;
  std::uint64_t seed = 7;

  void validate() const;
  /// Engine config whose input shapes and padded lengths fit this corpus.
  EngineConfig engine_shape(EngineConfig base = {}) const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

enum class Saliency { kBoth, kObject, kPose };
Saliency concept_saliency(std::size_t concept_id);

/// Per-concept templates, a deterministic function of (seed, shapes, C).
struct ConceptLibrary {
  std::vector<Tensor<float>> obj;   // [C_o - 1, H, W] each
  std::vector<Tensor<float>> pose;  // [K, D - 1] each
  Tensor<float> neutral_obj;
  Tensor<float> neutral_pose;
  double min_distance = 0.0;  // smallest pairwise distance over salient channels

  static ConceptLibrary build(const SynthConfig& cfg);

  /// Noise-free features of one frame showing `concept`.
  void render_frame(std::size_t concept_id, bool active, std::span<float> obj_out,
                    std::span<float> pose_out) const;
};

/// One user, reproducible from (cfg, split, index) alone.
UserSample generate_user(const SynthConfig& cfg, const ConceptLibrary& lib, const std::string& split,
                         std::size_t index);
std::vector<UserSample> generate_split(const SynthConfig& cfg, const std::string& split,
                                       std::size_t workers = 1);

/// Writes `train/` and `test/` user directories plus `corpus.json` (the full
/// SynthConfig) under `dir`.
void generate_corpus(const SynthConfig& cfg, const std::filesystem::path& dir, std::size_t workers = 1);
SynthConfig read_corpus_config(const std::filesystem::path& dir);

/// Reference scorer with access to the generator's concept assignment: the
/// posterior mass of the user's preferred concepts given each target frame,
/// under Gaussian noise of level max(cfg.noise, 1e-3). At zero noise this is
/// 1 on preferred segments and 0 elsewhere.
ScoreTrack oracle_scorer(const UserSample& user, const ConceptLibrary& lib, const SynthConfig& cfg);

/// Independent uniform scores on valid frames.
ScoreTrack random_scorer(const UserSample& user, std::mt19937_64& rng);

}  // namespace ushl
