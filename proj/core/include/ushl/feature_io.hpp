#pragma once

// Clip/user domain types and the on-disk corpus format.
//
// Corpus layout: one directory per user holding `manifest.json` and one raw
// tensor file per array. Tensor files carry a 16-byte header
//
//   offset 0   magic "PHLT"
//   offset 4   version   u16 LE (1)
//   offset 6   rank      u16 LE
//   offset 8   dtype     u8   (1 = f32)
//   offset 9   7 bytes of zero padding
//
// followed by `rank` u64 LE extents and the row-major f32 LE payload.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ushl/config.hpp"
#include "ushl/tensor.hpp"

namespace ushl {

inline constexpr std::uint16_t kTensorFileVersion = 1;
inline constexpr std::uint8_t kDtypeF32 = 1;
inline constexpr int kManifestSchemaVersion = 1;

/// Per-frame object-grid [T, C_o, H_o, W_o] and pose [T, K, D_p] features.
struct FeatureClip {
  std::string name;
  Tensor<float> obj;
  Tensor<float> pose;
  double fps = 30.0;
  std::size_t valid_len = 0;

  std::size_t frames() const { return obj.rank() ? obj.dim(0) : 0; }
  void validate() const;
};

struct LabelTrack {
  std::vector<std::uint8_t> y;
  std::vector<std::uint8_t> mask;

  std::size_t size() const { return y.size(); }
  std::size_t valid_count() const;
  std::size_t positive_count() const;
};

struct UserSample {
  std::string user_id;
  std::vector<FeatureClip> preferred;
  FeatureClip target;
  LabelTrack labels;
  /// Free-form manifest extras (generator truth, provenance).
  nlohmann::json annotations = nlohmann::json::object();
};

// Tensor files -------------------------------------------------------------

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t);
Tensor<float> decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin);
void write_tensor(const std::filesystem::path& path, const Tensor<float>& t);
Tensor<float> read_tensor(const std::filesystem::path& path);

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes);

// Labels --------------------------------------------------------------------

/// Run-length encoding as [[value, run], ...].
nlohmann::json encode_label_runs(std::span<const std::uint8_t> y);
std::vector<std::uint8_t> decode_label_runs(const nlohmann::json& runs);

LabelTrack make_labels(std::vector<std::uint8_t> y);

// Clips and users -----------------------------------------------------------

/// Loads one clip described by a manifest entry relative to `dir`, verifying
/// file presence, CRC32 and declared shapes.
FeatureClip load_clip(const std::filesystem::path& dir, const nlohmann::json& entry);
/// Writes the clip's tensors under `dir` and returns its manifest entry.
nlohmann::json save_clip(const std::filesystem::path& dir, const FeatureClip& clip);

UserSample load_user(const std::filesystem::path& dir);
void save_user(const std::filesystem::path& dir, const UserSample& user);

/// Loads every user directory (one containing manifest.json) below `dir`,
/// sorted by directory name.
std::vector<UserSample> load_corpus(const std::filesystem::path& dir);

// Padding -------------------------------------------------------------------

/// Zero-pads or truncates the temporal axis to exactly `length` frames.
FeatureClip pad_to(const FeatureClip& clip, std::size_t length);
/// 1 on the first valid_len frames, 0 on padding.
std::vector<std::uint8_t> frame_mask(const FeatureClip& clip);
LabelTrack pad_labels(const LabelTrack& labels, std::size_t length);

/// Pads every clip to cfg.clip_len, the target and labels to cfg.target_len,
/// and keeps at most `max_clips` preferred clips.
UserSample prepare_user(const UserSample& user, const EngineConfig& cfg, std::size_t max_clips);

}  // namespace ushl
