#include "ushl/priming.hpp"

#include <array>

#include "ushl/skeleton.hpp"

namespace ushl {

using ad::Var;

std::string priming_owner(const EngineConfig& cfg, const std::string& side) {
  return cfg.share_priming ? std::string("clip") : side;
}

template <typename S>
Tensor<S> stack_objects(std::span<const FeatureClip> clips) {
  if (clips.empty()) throw ContractViolation("stack_objects: no clips");
  const Shape& first = clips[0].obj.shape();
  const std::size_t T = first[0], C = first[1], H = first[2], W = first[3];
  const std::size_t plane = H * W;
  Tensor<S> out({clips.size(), C, T, H, W});
  for (std::size_t n = 0; n < clips.size(); ++n) {
    const auto& obj = clips[n].obj;
    if (obj.shape() != first) {
      throw ContractViolation("stack_objects: clip shapes differ " + to_string(first) + " vs " +
                              to_string(obj.shape()));
    }
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = obj.data() + (t * C + c) * plane;
        S* dst = out.data() + ((n * C + c) * T + t) * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<S>(src[i]);
      }
  }
  return out;
}

template <typename S>
Tensor<S> stack_poses(std::span<const FeatureClip> clips) {
  if (clips.empty()) throw ContractViolation("stack_poses: no clips");
  const Shape& first = clips[0].pose.shape();
  Shape shape{clips.size(), first[0], first[1], first[2]};
  Tensor<S> out(shape);
  const std::size_t per = numel(first);
  for (std::size_t n = 0; n < clips.size(); ++n) {
    if (clips[n].pose.shape() != first) {
      throw ContractViolation("stack_poses: clip shapes differ " + to_string(first) + " vs " +
                              to_string(clips[n].pose.shape()));
    }
    for (std::size_t i = 0; i < per; ++i) out[n * per + i] = static_cast<S>(clips[n].pose[i]);
  }
  return out;
}

template <typename S>
Var<S> prime_objects(ForwardContext<S>& ctx, const std::string& side, const Tensor<S>& obj) {
  const auto& cfg = ctx.config();
  if (obj.rank() != 5 || obj.dim(1) != cfg.obj_channels || obj.dim(3) != cfg.obj_height ||
      obj.dim(4) != cfg.obj_width) {
    throw ContractViolation("prime_objects: got shape " + to_string(obj.shape()) +
                            ", expected [N, " + std::to_string(cfg.obj_channels) + ", T, " +
                            std::to_string(cfg.obj_height) + ", " +
                            std::to_string(cfg.obj_width) + "]");
  }
  const std::string owner = priming_owner(cfg, side);
  ad::Conv3dOptions opt;
  opt.stride = {1, 2, 2};
  opt.pad = {1, 1, 1};
  opt.circular_time = ctx.circular_time;
  Var<S> x = ctx.tape().constant(obj);
  for (int b = 0; b < 3; ++b) {
    const std::string idx = std::to_string(b);
    x = ad::conv3d(x, ctx.param(owner + ".obj.conv" + idx + ".w"), opt);
    x = ctx.batchnorm(owner + ".obj.bn" + idx, x);
    x = ad::relu(x);
  }
  const Shape s = x.shape();  // [N, d_z, T, H', W']
  const std::size_t N = s[0], D = s[1], T = s[2];
  x = ad::mean_axis(ad::reshape(x, Shape{N, D, T, s[3] * s[4]}), 3);
  static constexpr std::array<std::size_t, 3> kToFrames{0, 2, 1};
  return ad::permute(x, std::span<const std::size_t>(kToFrames));
}

template <typename S>
Var<S> pose_chain_features(ForwardContext<S>& ctx, const std::string& side,
                           const Tensor<S>& pose) {
  const auto& cfg = ctx.config();
  if (pose.rank() != 4 || pose.dim(2) != cfg.joints || pose.dim(3) != cfg.pose_dims) {
    throw ContractViolation("prime_poses: got shape " + to_string(pose.shape()) +
                            ", expected [N, T, " + std::to_string(cfg.joints) + ", " +
                            std::to_string(cfg.pose_dims) + "]");
  }
  static const Tensor<S> adjacency = skeleton::normalized_adjacency<S>();
  static const Tensor<S> pooling = skeleton::chain_pooling<S>();
  static constexpr std::array<std::size_t, 4> kToChannels{0, 3, 1, 2};
  static constexpr std::array<std::size_t, 4> kToJoints{0, 2, 3, 1};

  const std::string owner = priming_owner(cfg, side);
  const std::size_t N = pose.dim(0), T = pose.dim(1), K = pose.dim(2);
  ad::Conv3dOptions temporal;
  temporal.pad = {1, 0, 0};
  temporal.circular_time = ctx.circular_time;

  Var<S> x = ctx.tape().constant(pose.reshaped(Shape{N * T, K, pose.dim(3)}));
  for (int b = 0; b < 2; ++b) {
    const std::string idx = std::to_string(b);
    x = ad::graph_conv(x, adjacency, ctx.param(owner + ".pose.gcn" + idx + ".w"));
    const std::size_t C = x.shape()[2];
    x = ad::permute(ad::reshape(x, Shape{N, T, K, C}), std::span<const std::size_t>(kToChannels));
    x = ad::conv3d(ad::reshape(x, Shape{N, C, T, K, 1}),
                   ctx.param(owner + ".pose.tconv" + idx + ".w"), temporal);
    x = ad::relu(ctx.batchnorm(owner + ".pose.bn" + idx, x));
    x = ad::permute(ad::reshape(x, Shape{N, C, T, K}), std::span<const std::size_t>(kToJoints));
    x = ad::reshape(x, Shape{N * T, K, C});
  }
  return ad::graph_pool(x, pooling);
}

template <typename S>
Var<S> prime_poses(ForwardContext<S>& ctx, const std::string& side, const Tensor<S>& pose) {
  const std::string owner = priming_owner(ctx.config(), side);
  Var<S> chains = pose_chain_features(ctx, side, pose);
  const Shape s = chains.shape();  // [N*T, 5, C]
  Var<S> flat = ad::reshape(chains, Shape{s[0], s[1] * s[2]});
  Var<S> y = ad::linear(flat, ctx.param(owner + ".pose.proj.w"), ctx.param(owner + ".pose.proj.b"));
  return ad::reshape(y, Shape{pose.dim(0), pose.dim(1), ctx.config().d_y});
}

template Tensor<float> stack_objects(std::span<const FeatureClip>);
template Tensor<double> stack_objects(std::span<const FeatureClip>);
template Tensor<float> stack_poses(std::span<const FeatureClip>);
template Tensor<double> stack_poses(std::span<const FeatureClip>);
template Var<float> prime_objects(ForwardContext<float>&, const std::string&, const Tensor<float>&);
template Var<double> prime_objects(ForwardContext<double>&, const std::string&, const Tensor<double>&);
template Var<float> prime_poses(ForwardContext<float>&, const std::string&, const Tensor<float>&);
template Var<double> prime_poses(ForwardContext<double>&, const std::string&, const Tensor<double>&);
template Var<float> pose_chain_features(ForwardContext<float>&, const std::string&,
                                        const Tensor<float>&);
template Var<double> pose_chain_features(ForwardContext<double>&, const std::string&,
                                         const Tensor<double>&);

}  // namespace ushl
