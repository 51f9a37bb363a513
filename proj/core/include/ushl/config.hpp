#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ushl {

/// How clip-side and target-side attention weights are produced.
enum class AttentionMode {
  kLearned,
  /// Frame and clip weights replaced by uniform weights (pooling baseline).
  kUniform,
};

/// Network shapes and architecture switches.
struct EngineConfig {
  std::size_t clip_len = 16;     // T
  std::size_t target_len = 96;   // T_tau after padding
  std::size_t max_clips = 15;    // N_max

  std::size_t obj_channels = 32;  // C_o
  std::size_t obj_height = 16;    // H_o
  std::size_t obj_width = 16;     // W_o
  std::size_t joints = 17;        // K
  std::size_t pose_dims = 3;      // D_p

  std::size_t d_z = 128;
  std::size_t d_y = 64;

  /// Output channels of the first two conv3d blocks; the third emits d_z.
  std::vector<std::size_t> conv_widths{16, 32};
  /// Channels of the two graph-conv blocks.
  std::vector<std::size_t> gcn_widths{32, 32};
  std::size_t frame_head_hidden = 16;
  std::size_t clip_head_hidden = 32;
  std::size_t pred_hidden = 16;

  double bn_momentum = 0.1;
  double bn_eps = 1e-5;

  bool use_objects = true;
  bool use_poses = true;
  /// Target side reuses the clip-side priming stacks (its frame-attention
  /// heads stay separate).
  bool share_priming = false;
  AttentionMode attention = AttentionMode::kLearned;

  void validate() const;
};

struct LossConfig {
  double zeta = 0.5;
  /// Highlight-class weight; <= 0 selects the per-video automatic weight.
  double class_weight = 0.0;
  double beta = 10.0;
  double label_eps = 1e-7;
  bool use_label = true;
  bool use_margin = true;
  bool use_sparsity = true;

  void validate() const;
};

struct TrainConfig {
  std::size_t batch_size = 36;
  double lr = 1e-4;
  double lr_decay = 0.999;
  double weight_decay = 3e-4;
  std::size_t epochs = 500;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  /// Stop when validation loss has not improved for this many epochs.
  bool early_stopping = false;
  std::size_t patience = 50;
  double validation_fraction = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, AttentionMode m);
void from_json(const nlohmann::json& j, AttentionMode& m);
void to_json(nlohmann::json& j, const EngineConfig& c);
void from_json(const nlohmann::json& j, EngineConfig& c);
void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

}  // namespace ushl
