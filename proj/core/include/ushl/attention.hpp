#pragma once

// Frame- and clip-level attention, preference fusion, target encoding,
// similarity and score prediction.
//
// Shapes (N preferred clips of T frames, target of T_t frames):
//   z [N, T, d_z], y [N, T, d_y]
//   w, v [N, T]            softmax over T
//   sigma, rho [1, N]      softmax over N
//   psi [1, d_z], phi [1, d_y]
//   psi_t [T_t, d_z]       row j = gate_j * z_t[j]
//   h_z, h_y [T_t]
//   scores [T_t]           in [0, 1]
//
// Either branch may be disabled by config; its Vars are then left invalid.

#include <cstdint>
#include <span>
#include <vector>

#include "ushl/feature_io.hpp"
#include "ushl/model.hpp"

namespace ushl {

template <typename S>
struct FrameAttention {
  ad::Var<S> w;  // object branch
  ad::Var<S> v;  // pose branch
};

template <typename S>
struct ClipAttention {
  ad::Var<S> sigma;
  ad::Var<S> rho;
};

template <typename S>
struct FusedPreference {
  ad::Var<S> psi;
  ad::Var<S> phi;
};

template <typename S>
struct TargetEncoding {
  ad::Var<S> gate_z;  // [T_t]
  ad::Var<S> gate_y;
  ad::Var<S> psi_t;
  ad::Var<S> phi_t;
};

template <typename S>
struct SimilarityFeatures {
  ad::Var<S> h_z;
  ad::Var<S> h_y;
};

/// Every intermediate of one scoring pass, for inspection and testing.
template <typename S>
struct ScoreTrace {
  ad::Var<S> z, y;
  FrameAttention<S> frames;
  ad::Var<S> pooled_z, pooled_y;  // [N, d]
  ClipAttention<S> clips;
  FusedPreference<S> preference;
  ad::Var<S> z_t, y_t;  // [T_t, d]
  TargetEncoding<S> target;
  SimilarityFeatures<S> similarity;
  ad::Var<S> scores;
  bool fallback = false;
};

struct ScoreTrack {
  std::string user_id;
  std::vector<float> s;
  std::vector<std::uint8_t> mask;
  bool fallback = false;
};

/// Per-frame scalar head (d -> hidden -> 1) applied to x [N, T, d], then
/// softmax over T. `head` is the parameter prefix.
template <typename S>
ad::Var<S> frame_weights(ForwardContext<S>& ctx, const std::string& head, const ad::Var<S>& x);

template <typename S>
FrameAttention<S> frame_attention_clip(ForwardContext<S>& ctx, const ad::Var<S>& z,
                                       const ad::Var<S>& y);

/// zw [N, d_z], yv [N, d_y] -> sigma, rho [1, N].
template <typename S>
ClipAttention<S> clip_attention(ForwardContext<S>& ctx, const ad::Var<S>& zw,
                                const ad::Var<S>& yv);

/// psi = sum_i sigma_i z_i^T w_i, phi likewise. Fills the trace's
/// frame/pooled/clip fields. Throws ContractViolation for zero clips; callers
/// route those users through the fallback instead.
template <typename S>
FusedPreference<S> fuse_preferences(ForwardContext<S>& ctx, ScoreTrace<S>& trace);

/// z_t [T_t, d_z], y_t [T_t, d_y] -> gated per-frame target features.
template <typename S>
TargetEncoding<S> encode_target(ForwardContext<S>& ctx, const ad::Var<S>& z_t,
                                const ad::Var<S>& y_t);

/// h[j] = sum_k softmax(pref / sqrt(d))[k] * target[j, k].
/// pref [1, d], target [T_t, d] -> [T_t].
template <typename S>
ad::Var<S> similarity(const ad::Var<S>& pref, const ad::Var<S>& target);

/// h[j] = (1/d) sum_k target[j, k], evaluated as a product with the uniform
/// weight vector so it is bit-identical to similarity() with constant pref.
template <typename S>
ad::Var<S> similarity_fallback(const ad::Var<S>& target);

/// Per-frame predictor over [h_z, h_y] (fc, relu, fc, sigmoid) -> [T_t].
template <typename S>
ad::Var<S> predict_scores(ForwardContext<S>& ctx, const ad::Var<S>& h_z, const ad::Var<S>& h_y);

/// Full scoring pass on a prepared (padded) user.
template <typename S>
ScoreTrace<S> score_forward(ForwardContext<S>& ctx, const UserSample& user);

/// Scores several prepared users on one tape. The priming stacks see every
/// user's clips (and every target) as one batch, so train-mode batch norm
/// normalizes over the whole mini-batch. Targets must share a frame count.
template <typename S>
std::vector<ScoreTrace<S>> score_forward_batch(ForwardContext<S>& ctx,
                                               std::span<const UserSample* const> users);

/// Eval-mode scoring. The user must already be padded (prepare_user).
ScoreTrack score_target(const UserSample& user, const ModelParams<float>& params);

/// score_target with clip-side frame and clip attention replaced by uniform
/// weights.
ScoreTrack uniform_pooling_ablation(const UserSample& user, const ModelParams<float>& params);

}  // namespace ushl
