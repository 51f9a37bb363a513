#pragma once

// Attention priming: backbone features to low-dimensional per-frame features.
//
// Objects: three blocks of conv3d (k=3, stride 1 in time, 2 in space, pad 1),
// batchnorm3d and relu, then a spatial mean, giving [N, T, d_z].
// Poses: two blocks of graph conv over the skeleton, temporal conv (k=3),
// batchnorm and relu; joints are mean-pooled per kinematic chain, the five
// chain vectors are concatenated and linearly projected to [N, T, d_y].

#include <span>
#include <string>

#include "ushl/feature_io.hpp"
#include "ushl/model.hpp"

namespace ushl {

/// Stacks clip object grids [T, C, H, W] into conv layout [N, C, T, H, W].
template <typename S>
Tensor<S> stack_objects(std::span<const FeatureClip> clips);
/// Stacks clip poses [T, K, D] into [N, T, K, D].
template <typename S>
Tensor<S> stack_poses(std::span<const FeatureClip> clips);

/// obj [N, C_o, T, H_o, W_o] -> [N, T, d_z]. `side` is "clip" or "target".
template <typename S>
ad::Var<S> prime_objects(ForwardContext<S>& ctx, const std::string& side, const Tensor<S>& obj);

/// pose [N, T, K, D_p] -> [N, T, d_y].
template <typename S>
ad::Var<S> prime_poses(ForwardContext<S>& ctx, const std::string& side, const Tensor<S>& pose);

/// Graph convolutions + temporal convolutions, then per-chain mean pooling:
/// pose [N, T, K, D_p] -> [N * T, 5, C]. Exposed for tests.
template <typename S>
ad::Var<S> pose_chain_features(ForwardContext<S>& ctx, const std::string& side,
                               const Tensor<S>& pose);

/// Name prefix of the priming stack used by `side`.
std::string priming_owner(const EngineConfig& cfg, const std::string& side);

}  // namespace ushl
