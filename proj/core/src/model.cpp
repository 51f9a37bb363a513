#include "ushl/model.hpp"

#include <cmath>
#include <random>

#include "ushl/skeleton.hpp"

namespace ushl {

namespace {

enum class Init { kHe, kXavier, kZero, kOne, kScoreBias };

// Initial output logit: scores start near sigmoid(-2) ~ 0.12, below the
// highlight threshold, so the sparsity term does not dominate the first steps.
constexpr double kScoreBiasInit = -2.0;

struct ParamSpec {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in;
};

void add_mlp(std::vector<ParamSpec>& out, const std::string& prefix, std::size_t in,
             std::size_t hidden) {
  out.push_back({prefix + ".fc0.w", {in, hidden}, Init::kHe, in});
  out.push_back({prefix + ".fc0.b", {hidden}, Init::kZero, in});
  out.push_back({prefix + ".fc1.w", {hidden, 1}, Init::kXavier, hidden});
  out.push_back({prefix + ".fc1.b", {1}, Init::kZero, hidden});
}

std::vector<ParamSpec> param_specs(const EngineConfig& cfg, std::vector<std::string>& norms) {
  std::vector<ParamSpec> specs;
  for (const std::string side : {"clip", "target"}) {
    const bool own_priming = side == "clip" || !cfg.share_priming;
    if (cfg.use_objects) {
      if (own_priming) {
        const std::size_t widths[3] = {cfg.conv_widths[0], cfg.conv_widths[1], cfg.d_z};
        std::size_t in = cfg.obj_channels;
        for (int b = 0; b < 3; ++b) {
          const std::string p = side + ".obj.conv" + std::to_string(b);
          specs.push_back({p + ".w", {widths[b], in, 3, 3, 3}, Init::kHe, in * 27});
          const std::string bn = side + ".obj.bn" + std::to_string(b);
          specs.push_back({bn + ".gamma", {widths[b]}, Init::kOne, 0});
          specs.push_back({bn + ".beta", {widths[b]}, Init::kZero, 0});
          norms.push_back(bn);
          in = widths[b];
        }
      }
      add_mlp(specs, side + ".obj.frame_head", cfg.d_z, cfg.frame_head_hidden);
    }
    if (cfg.use_poses) {
      if (own_priming) {
        std::size_t in = cfg.pose_dims;
        for (int b = 0; b < 2; ++b) {
          const std::size_t c = cfg.gcn_widths[b];
          const std::string p = side + ".pose";
          specs.push_back({p + ".gcn" + std::to_string(b) + ".w", {in, c}, Init::kHe, in});
          specs.push_back({p + ".tconv" + std::to_string(b) + ".w", {c, c, 3, 1, 1}, Init::kHe, c * 3});
          const std::string bn = p + ".bn" + std::to_string(b);
          specs.push_back({bn + ".gamma", {c}, Init::kOne, 0});
          specs.push_back({bn + ".beta", {c}, Init::kZero, 0});
          norms.push_back(bn);
          in = c;
        }
        const std::size_t pooled = skeleton::kChainCount * cfg.gcn_widths[1];
        specs.push_back({side + ".pose.proj.w", {pooled, cfg.d_y}, Init::kHe, pooled});
        specs.push_back({side + ".pose.proj.b", {cfg.d_y}, Init::kZero, pooled});
      }
      add_mlp(specs, side + ".pose.frame_head", cfg.d_y, cfg.frame_head_hidden);
    }
  }
  if (cfg.use_objects) add_mlp(specs, "clip_head.z", cfg.d_z, cfg.clip_head_hidden);
  if (cfg.use_poses) add_mlp(specs, "clip_head.y", cfg.d_y, cfg.clip_head_hidden);
  const std::size_t branches = (cfg.use_objects ? 1 : 0) + (cfg.use_poses ? 1 : 0);
  add_mlp(specs, "pred", branches, cfg.pred_hidden);
  specs.back().init = Init::kScoreBias;
  return specs;
}

}  // namespace

template <typename S>
ModelParams<S> ModelParams<S>::init(const EngineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<S> p;
  p.config = cfg;
  std::vector<std::string> norms;
  const auto specs = param_specs(cfg, norms);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const auto& spec : specs) {
    Tensor<S> t(spec.shape);
    double bound = 0.0;
    if (spec.init == Init::kHe) bound = std::sqrt(6.0 / double(spec.fan_in));
    if (spec.init == Init::kXavier) bound = std::sqrt(1.0 / double(spec.fan_in));
    for (auto& v : t.values()) {
      if (spec.init == Init::kOne) {
        v = S(1);
      } else if (spec.init == Init::kScoreBias) {
        v = S(kScoreBiasInit);
      } else if (spec.init != Init::kZero) {
        v = static_cast<S>(bound * unit(rng));
      }
    }
    p.tensors.emplace(spec.name, std::move(t));
  }
  // The target priming starts as a copy of the clip priming so both sides
  // embed frames in the same coordinates; the copies then train separately.
  for (auto& [name, t] : p.tensors) {
    if (name.rfind("target.", 0) != 0 || name.find(".frame_head.") != std::string::npos) continue;
    t = p.tensors.at("clip." + name.substr(7));
  }
  for (const auto& bn : norms) {
    const std::size_t c = p.tensors.at(bn + ".gamma").size();
    p.norms.emplace(bn, ad::BatchStats<S>{Tensor<S>({c}, S(0)), Tensor<S>({c}, S(1))});
  }
  return p;
}

template <typename S>
const Tensor<S>& ModelParams<S>::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractViolation("unknown parameter '" + name + "'");
  return it->second;
}

template <typename S>
Tensor<S>& ModelParams<S>::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractViolation("unknown parameter '" + name + "'");
  return it->second;
}

template <typename S>
std::size_t ModelParams<S>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

template <typename S>
ad::Var<S> ForwardContext<S>::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  auto v = tape_.variable(params_.at(name), name);
  bound_.emplace(name, v);
  return v;
}

template <typename S>
void ForwardContext<S>::bind(const std::string& name, ad::Var<S> v) {
  if (v.shape() != params_.at(name).shape()) throw ContractViolation("bind: shape mismatch for '" + name + "'");
  if (!bound_.emplace(name, v).second) throw ContractViolation("bind: '" + name + "' is already bound");
}

template <typename S>
ad::Var<S> ForwardContext<S>::batchnorm(const std::string& name, const ad::Var<S>& x) {
  auto it = params_.norms.find(name);
  if (it == params_.norms.end()) throw ContractViolation("unknown batchnorm '" + name + "'");
  ad::BatchStats<S> seen;
  auto out = ad::batchnorm3d(x, param(name + ".gamma"), param(name + ".beta"), mode_, it->second,
                             static_cast<S>(params_.config.bn_eps),
                             mode_ == ad::NormMode::kTrain ? &seen : nullptr);
  if (mode_ == ad::NormMode::kTrain) observed_[name] = std::move(seen);
  return out;
}

template <typename S>
void update_running_stats(ModelParams<S>& params,
                          const std::map<std::string, ad::BatchStats<S>>& observed) {
  const S m = static_cast<S>(params.config.bn_momentum);
  for (const auto& [name, stats] : observed) {
    auto& run = params.norms.at(name);
    for (std::size_t c = 0; c < run.mean.size(); ++c) {
      run.mean[c] = (S(1) - m) * run.mean[c] + m * stats.mean[c];
      run.var[c] = (S(1) - m) * run.var[c] + m * stats.var[c];
    }
  }
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template class ForwardContext<float>;
template class ForwardContext<double>;
template void update_running_stats(ModelParams<float>&,
                                   const std::map<std::string, ad::BatchStats<float>>&);
template void update_running_stats(ModelParams<double>&,
                                   const std::map<std::string, ad::BatchStats<double>>&);

}  // namespace ushl
