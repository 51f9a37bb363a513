#pragma once

#include <array>
#include <cmath>
#include <string_view>
#include <utility>
#include <vector>

#include "ushl/tensor.hpp"

namespace ushl::skeleton {

/// COCO-17 keypoint order.
enum Joint : std::size_t {
  kNose, kLeftEye, kRightEye, kLeftEar, kRightEar,
  kLeftShoulder, kRightShoulder, kLeftElbow, kRightElbow, kLeftWrist, kRightWrist,
  kLeftHip, kRightHip, kLeftKnee, kRightKnee, kLeftAnkle, kRightAnkle,
};

inline constexpr std::size_t kJointCount = 17;
inline constexpr std::size_t kChainCount = 5;

/// Undirected COCO limb connections.
inline constexpr std::array<std::pair<std::size_t, std::size_t>, 19> kBones{{
    {kLeftAnkle, kLeftKnee}, {kLeftKnee, kLeftHip}, {kRightAnkle, kRightKnee},
    {kRightKnee, kRightHip}, {kLeftHip, kRightHip}, {kLeftShoulder, kLeftHip},
    {kRightShoulder, kRightHip}, {kLeftShoulder, kRightShoulder}, {kLeftShoulder, kLeftElbow},
    {kRightShoulder, kRightElbow}, {kLeftElbow, kLeftWrist}, {kRightElbow, kRightWrist},
    {kLeftEye, kRightEye}, {kNose, kLeftEye}, {kNose, kRightEye},
    {kLeftEye, kLeftEar}, {kRightEye, kRightEar}, {kLeftEar, kLeftShoulder},
    {kRightEar, kRightShoulder},
}};

/// Kinematic chains: trunk (head joints), left arm, right arm, left leg,
/// right leg. Together they partition all 17 joints.
inline const std::array<std::vector<std::size_t>, kChainCount>& chains() {
  static const std::array<std::vector<std::size_t>, kChainCount> kChains{{
      {kNose, kLeftEye, kRightEye, kLeftEar, kRightEar},
      {kLeftShoulder, kLeftElbow, kLeftWrist},
      {kRightShoulder, kRightElbow, kRightWrist},
      {kLeftHip, kLeftKnee, kLeftAnkle},
      {kRightHip, kRightKnee, kRightAnkle},
  }};
  return kChains;
}

inline constexpr std::array<std::string_view, kChainCount> kChainNames{
    "trunk", "left_arm", "right_arm", "left_leg", "right_leg"};

/// Joint index mirrored across the body's left/right axis.
inline std::size_t mirror(std::size_t j) {
  if (j == kNose) return j;
  return (j % 2 == 1) ? j + 1 : j - 1;
}

/// Symmetrically normalized adjacency with self loops, D^-1/2 (A + I) D^-1/2.
template <typename S>
Tensor<S> normalized_adjacency() {
  constexpr std::size_t K = kJointCount;
  std::vector<S> a(K * K, S(0));
  for (std::size_t i = 0; i < K; ++i) a[i * K + i] = 1;
  for (auto [u, v] : kBones) a[u * K + v] = a[v * K + u] = 1;
  std::vector<S> deg(K, S(0));
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) deg[i] += a[i * K + j];
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) a[i * K + j] /= std::sqrt(deg[i] * deg[j]);
  return Tensor<S>({K, K}, std::move(a));
}

/// [5, 17] matrix whose rows average the joints of each chain.
template <typename S>
Tensor<S> chain_pooling() {
  Tensor<S> p({kChainCount, kJointCount});
  for (std::size_t c = 0; c < kChainCount; ++c)
    for (std::size_t j : chains()[c]) p[c * kJointCount + j] = S(1) / S(chains()[c].size());
  return p;
}

}  // namespace ushl::skeleton
