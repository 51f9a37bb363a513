#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ushl/attention.hpp"
#include "ushl/feature_io.hpp"
#include "ushl/gradcheck.hpp"
#include "ushl/model.hpp"

namespace ushl::fixtures {

/// Small shapes that keep 64-bit finite differences fast.
inline EngineConfig micro_config() {
  EngineConfig c;
  c.clip_len = 4;
  c.target_len = 6;
  c.max_clips = 2;
  c.obj_channels = 2;
  c.obj_height = 4;
  c.obj_width = 4;
  c.d_z = 8;
  c.d_y = 4;
  c.conv_widths = {3, 4};
  c.gcn_widths = {3, 3};
  c.frame_head_hidden = 4;
  c.clip_head_hidden = 4;
  c.pred_hidden = 4;
  return c;
}

inline FeatureClip random_clip(const EngineConfig& c, std::size_t frames, std::mt19937_64& rng,
                               const std::string& name = "clip") {
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeatureClip clip;
  clip.name = name;
  clip.obj = Tensor<float>({frames, c.obj_channels, c.obj_height, c.obj_width});
  clip.pose = Tensor<float>({frames, c.joints, c.pose_dims});
  for (auto& v : clip.obj.values()) v = n(rng);
  for (auto& v : clip.pose.values()) v = n(rng);
  clip.valid_len = frames;
  return clip;
}

/// A prepared (padded) user with random features and at least one positive.
inline UserSample random_user(const EngineConfig& c, std::size_t clips, std::mt19937_64& rng,
                              std::size_t target_frames = 0) {
  UserSample u;
  u.user_id = "u" + std::to_string(rng() % 100000);
  for (std::size_t i = 0; i < clips; ++i) u.preferred.push_back(random_clip(c, c.clip_len, rng, "c" + std::to_string(i)));
  const std::size_t T = target_frames ? target_frames : c.target_len;
  u.target = random_clip(c, T, rng, "target");
  std::vector<std::uint8_t> y(T, 0);
  std::bernoulli_distribution b(0.4);
  for (auto& v : y) v = b(rng) ? 1 : 0;
  y[0] = 1;
  if (T > 1) y[T - 1] = 0;
  u.labels = make_labels(std::move(y));
  return prepare_user(u, c, c.max_clips);
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

/// Finite-difference check of `body` over every parameter whose name starts
/// with one of `prefixes` (all parameters when empty).
inline GradCheckReport gradcheck_model(const ModelParams<double>& params,
                                       const std::function<ad::Var<double>(ForwardContext<double>&)>& body,
                                       const std::vector<std::string>& prefixes = {},
                                       ad::NormMode mode = ad::NormMode::kTrain,
                                       GradCheckOptions opt = {1e-5, 1e-4, 1e-6}) {
  std::vector<NamedTensor<double>> named;
  for (const auto& [k, v] : params.tensors) {
    bool keep = prefixes.empty();
    for (const auto& p : prefixes) keep = keep || k.rfind(p, 0) == 0;
    if (keep) named.push_back({k, v});
  }
  auto objective = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> vars) {
    ForwardContext<double> ctx(tape, params, mode);
    for (std::size_t i = 0; i < named.size(); ++i) ctx.bind(named[i].name, vars[i]);
    return body(ctx);
  };
  return check_gradients(objective, named, opt);
}

}  // namespace ushl::fixtures
