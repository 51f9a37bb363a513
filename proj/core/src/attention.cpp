#include "ushl/attention.hpp"

#include <cmath>

#include "ushl/priming.hpp"

namespace ushl {

using ad::Var;

namespace {

template <typename S>
Var<S> mlp_scalar(ForwardContext<S>& ctx, const std::string& head, const Var<S>& x) {
  Var<S> h = ad::relu(ad::linear(x, ctx.param(head + ".fc0.w"), ctx.param(head + ".fc0.b")));
  return ad::linear(h, ctx.param(head + ".fc1.w"), ctx.param(head + ".fc1.b"));
}

template <typename S>
Var<S> uniform_weights(ForwardContext<S>& ctx, std::size_t rows, std::size_t cols) {
  return ctx.tape().constant(Tensor<S>({rows, cols}, S(1) / S(cols)));
}

bool uniform(const EngineConfig& cfg) { return cfg.attention == AttentionMode::kUniform; }

}  // namespace

template <typename S>
Var<S> frame_weights(ForwardContext<S>& ctx, const std::string& head, const Var<S>& x) {
  const Shape s = x.shape();
  if (s.size() != 3) throw ContractViolation("frame_weights: expected [N, T, d], got " + to_string(s));
  Var<S> logits = mlp_scalar(ctx, head, ad::reshape(x, Shape{s[0] * s[1], s[2]}));
  return ad::softmax(ad::reshape(logits, Shape{s[0], s[1]}), 1);
}

template <typename S>
FrameAttention<S> frame_attention_clip(ForwardContext<S>& ctx, const Var<S>& z, const Var<S>& y) {
  const auto& cfg = ctx.config();
  FrameAttention<S> out;
  if (z.valid()) {
    if (z.shape().size() != 3 || z.shape()[2] != cfg.d_z) {
      throw ContractViolation("frame_attention: z must be [N, T, d_z], got " + to_string(z.shape()));
    }
    out.w = uniform(cfg) ? uniform_weights(ctx, z.shape()[0], z.shape()[1])
                         : frame_weights(ctx, "clip.obj.frame_head", z);
  }
  if (y.valid()) {
    if (y.shape().size() != 3 || y.shape()[2] != cfg.d_y) {
      throw ContractViolation("frame_attention: y must be [N, T, d_y], got " + to_string(y.shape()));
    }
    if (z.valid() && z.shape()[1] != y.shape()[1]) {
      throw ContractViolation("frame_attention: z and y frame counts differ");
    }
    out.v = uniform(cfg) ? uniform_weights(ctx, y.shape()[0], y.shape()[1])
                         : frame_weights(ctx, "clip.pose.frame_head", y);
  }
  return out;
}

template <typename S>
ClipAttention<S> clip_attention(ForwardContext<S>& ctx, const Var<S>& zw, const Var<S>& yv) {
  const auto& cfg = ctx.config();
  ClipAttention<S> out;
  auto weights = [&](const Var<S>& pooled, const std::string& head) {
    const std::size_t n = pooled.shape()[0];
    if (n == 0) throw ContractViolation("clip_attention: no clips; use the fallback path");
    if (uniform(cfg)) return uniform_weights(ctx, 1, n);
    return ad::softmax(ad::reshape(mlp_scalar(ctx, head, pooled), Shape{1, n}), 1);
  };
  if (zw.valid()) out.sigma = weights(zw, "clip_head.z");
  if (yv.valid()) out.rho = weights(yv, "clip_head.y");
  return out;
}

template <typename S>
FusedPreference<S> fuse_preferences(ForwardContext<S>& ctx, ScoreTrace<S>& trace) {
  trace.frames = frame_attention_clip(ctx, trace.z, trace.y);
  if (trace.z.valid()) trace.pooled_z = ad::weighted_sum(trace.frames.w, trace.z);
  if (trace.y.valid()) trace.pooled_y = ad::weighted_sum(trace.frames.v, trace.y);
  trace.clips = clip_attention(ctx, trace.pooled_z, trace.pooled_y);
  FusedPreference<S> out;
  auto fuse = [](const Var<S>& weights, const Var<S>& pooled) {
    const Shape s = pooled.shape();
    return ad::weighted_sum(weights, ad::reshape(pooled, Shape{1, s[0], s[1]}));
  };
  if (trace.z.valid()) out.psi = fuse(trace.clips.sigma, trace.pooled_z);
  if (trace.y.valid()) out.phi = fuse(trace.clips.rho, trace.pooled_y);
  return out;
}

template <typename S>
TargetEncoding<S> encode_target(ForwardContext<S>& ctx, const Var<S>& z_t, const Var<S>& y_t) {
  TargetEncoding<S> out;
  auto encode = [&](const Var<S>& x, const std::string& head, Var<S>& gate, Var<S>& enc) {
    if (x.shape().size() != 2) {
      throw ContractViolation("encode_target: expected [T, d], got " + to_string(x.shape()));
    }
    gate = ad::reshape(ad::sigmoid(mlp_scalar(ctx, head, x)), Shape{x.shape()[0]});
    enc = ad::scale_rows(x, gate);
  };
  if (z_t.valid()) encode(z_t, "target.obj.frame_head", out.gate_z, out.psi_t);
  if (y_t.valid()) encode(y_t, "target.pose.frame_head", out.gate_y, out.phi_t);
  if (z_t.valid() && y_t.valid() && z_t.shape()[0] != y_t.shape()[0]) {
    throw ContractViolation("encode_target: z and y frame counts differ");
  }
  return out;
}

template <typename S>
Var<S> similarity(const Var<S>& pref, const Var<S>& target) {
  const Shape p = pref.shape();
  const Shape t = target.shape();
  if (p.size() != 2 || p[0] != 1 || t.size() != 2 || t[1] != p[1]) {
    throw ContractViolation("similarity: shape mismatch " + to_string(p) + " vs " + to_string(t));
  }
  const std::size_t d = p[1];
  Var<S> attn = ad::softmax(ad::scale(pref, S(1) / std::sqrt(S(d))), 1);
  return ad::reshape(ad::matmul(target, ad::reshape(attn, Shape{d, 1})), Shape{t[0]});
}

template <typename S>
Var<S> similarity_fallback(const Var<S>& target) {
  const Shape t = target.shape();
  if (t.size() != 2) throw ContractViolation("similarity_fallback: expected [T, d], got " + to_string(t));
  const std::size_t d = t[1];
  Var<S> attn = target.tape()->constant(Tensor<S>({d, 1}, S(1) / S(d)));
  return ad::reshape(ad::matmul(target, attn), Shape{t[0]});
}

template <typename S>
Var<S> predict_scores(ForwardContext<S>& ctx, const Var<S>& h_z, const Var<S>& h_y) {
  std::vector<Var<S>> columns;
  std::size_t frames = 0;
  for (const auto* h : {&h_z, &h_y}) {
    if (!h->valid()) continue;
    if (h->shape().size() != 1) throw ContractViolation("predict_scores: expected [T], got " + to_string(h->shape()));
    if (!columns.empty() && h->shape()[0] != frames) {
      throw ContractViolation("predict_scores: h_z and h_y lengths differ");
    }
    frames = h->shape()[0];
    columns.push_back(ad::reshape(*h, Shape{frames, 1}));
  }
  if (columns.empty()) throw ContractViolation("predict_scores: no branch enabled");
  Var<S> fused = columns.size() == 1 ? columns[0] : ad::concat(std::span<const Var<S>>(columns), 1);
  Var<S> logits = mlp_scalar(ctx, "pred", fused);
  return ad::reshape(ad::sigmoid(logits), Shape{frames});
}

template <typename S>
std::vector<ScoreTrace<S>> score_forward_batch(ForwardContext<S>& ctx,
                                               std::span<const UserSample* const> users) {
  const auto& cfg = ctx.config();
  if (users.empty()) throw ContractViolation("score_forward_batch: no users");
  std::vector<ScoreTrace<S>> traces(users.size());
  std::vector<FeatureClip> clips, targets;
  std::vector<std::size_t> offset{0};
  for (std::size_t i = 0; i < users.size(); ++i) {
    traces[i].fallback = users[i]->preferred.empty();
    clips.insert(clips.end(), users[i]->preferred.begin(), users[i]->preferred.end());
    offset.push_back(clips.size());
    targets.push_back(users[i]->target);
  }

  // One priming pass per stack over every user, so batch statistics span the
  // whole mini-batch.
  Var<S> z, y, z_t, y_t;
  if (!clips.empty()) {
    if (cfg.use_objects) z = prime_objects(ctx, "clip", stack_objects<S>(clips));
    if (cfg.use_poses) y = prime_poses(ctx, "clip", stack_poses<S>(clips));
  }
  if (cfg.use_objects) z_t = prime_objects(ctx, "target", stack_objects<S>(targets));
  if (cfg.use_poses) y_t = prime_poses(ctx, "target", stack_poses<S>(targets));

  const bool single = users.size() == 1;
  auto rows = [&](const Var<S>& x, std::size_t begin, std::size_t end) {
    return single ? x : ad::slice(x, 0, begin, end);
  };
  auto frames = [&](const Var<S>& x, std::size_t i) {
    const Shape s = x.shape();
    return ad::reshape(rows(x, i, i + 1), Shape{s[1], s[2]});
  };

  for (std::size_t i = 0; i < users.size(); ++i) {
    auto& trace = traces[i];
    if (!trace.fallback) {
      if (z.valid()) trace.z = rows(z, offset[i], offset[i + 1]);
      if (y.valid()) trace.y = rows(y, offset[i], offset[i + 1]);
      trace.preference = fuse_preferences(ctx, trace);
    }
    if (z_t.valid()) trace.z_t = frames(z_t, i);
    if (y_t.valid()) trace.y_t = frames(y_t, i);
    trace.target = encode_target(ctx, trace.z_t, trace.y_t);

    auto sim = [&](const Var<S>& pref, const Var<S>& tgt) {
      if (!tgt.valid()) return Var<S>();
      return trace.fallback ? similarity_fallback(tgt) : similarity(pref, tgt);
    };
    trace.similarity.h_z = sim(trace.preference.psi, trace.target.psi_t);
    trace.similarity.h_y = sim(trace.preference.phi, trace.target.phi_t);
    trace.scores = predict_scores(ctx, trace.similarity.h_z, trace.similarity.h_y);
  }
  return traces;
}

template <typename S>
ScoreTrace<S> score_forward(ForwardContext<S>& ctx, const UserSample& user) {
  const UserSample* one[] = {&user};
  return std::move(score_forward_batch<S>(ctx, one).front());
}

namespace {

ScoreTrack eval_scores(const UserSample& user, const ModelParams<float>& params) {
  ad::Tape<float> tape;
  ForwardContext<float> ctx(tape, params, ad::NormMode::kEval);
  const auto trace = score_forward(ctx, user);
  ScoreTrack track;
  track.user_id = user.user_id;
  const auto& s = trace.scores.value();
  track.s.assign(s.values().begin(), s.values().end());
  track.mask = user.labels.mask;
  if (track.mask.size() != track.s.size()) {
    track.mask.assign(track.s.size(), 0);
    for (std::size_t j = 0; j < std::min(user.target.valid_len, track.s.size()); ++j) track.mask[j] = 1;
  }
  track.fallback = trace.fallback;
  return track;
}

}  // namespace

ScoreTrack score_target(const UserSample& user, const ModelParams<float>& params) {
  return eval_scores(user, params);
}

ScoreTrack uniform_pooling_ablation(const UserSample& user, const ModelParams<float>& params) {
  ModelParams<float> uniform_params = params;
  uniform_params.config.attention = AttentionMode::kUniform;
  return eval_scores(user, uniform_params);
}

#define USHL_INSTANTIATE(S)                                                                        \
  template Var<S> frame_weights(ForwardContext<S>&, const std::string&, const Var<S>&);            \
  template FrameAttention<S> frame_attention_clip(ForwardContext<S>&, const Var<S>&,               \
                                                  const Var<S>&);                                  \
  template ClipAttention<S> clip_attention(ForwardContext<S>&, const Var<S>&, const Var<S>&);      \
  template FusedPreference<S> fuse_preferences(ForwardContext<S>&, ScoreTrace<S>&);                \
  template TargetEncoding<S> encode_target(ForwardContext<S>&, const Var<S>&, const Var<S>&);      \
  template Var<S> similarity(const Var<S>&, const Var<S>&);                                        \
  template Var<S> similarity_fallback(const Var<S>&);                                              \
  template Var<S> predict_scores(ForwardContext<S>&, const Var<S>&, const Var<S>&);                \
  template std::vector<ScoreTrace<S>> score_forward_batch(ForwardContext<S>&,                      \
                                                         std::span<const UserSample* const>);     \
  template ScoreTrace<S> score_forward(ForwardContext<S>&, const UserSample&);

USHL_INSTANTIATE(float)
USHL_INSTANTIATE(double)

#undef USHL_INSTANTIATE

}  // namespace ushl
