#include "ushl/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "ushl/errors.hpp"
#include "ushl/parallel.hpp"

namespace ushl {

namespace fs = std::filesystem;

namespace {

// Every key of `j` must also appear in the serialised defaults.
void reject_unknown(const nlohmann::json& j, const nlohmann::json& defaults, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Overrides only the keys present in the section.
template <typename T>
void read_section(const nlohmann::json& j, const char* name, T& out) {
  if (!j.contains(name)) return;
  reject_unknown(j.at(name), nlohmann::json(T{}), name);
  try {
    from_json(j.at(name), out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

void to_json(nlohmann::json& j, const EvalOptions& o) {
  j = {{"alpha", o.alpha},
       {"binarize", o.binarize == Binarize::kThreshold ? "threshold" : "top_budget"},
       {"zeta", o.zeta},
       {"budget", o.budget}};
}

void from_json(const nlohmann::json& j, EvalOptions& o) {
  if (j.contains("alpha")) o.alpha = j.at("alpha").get<double>();
  if (j.contains("zeta")) o.zeta = j.at("zeta").get<double>();
  if (j.contains("budget")) o.budget = j.at("budget").get<double>();
  if (j.contains("binarize")) {
    const auto b = j.at("binarize").get<std::string>();
    if (b == "threshold") {
      o.binarize = Binarize::kThreshold;
    } else if (b == "top_budget") {
      o.binarize = Binarize::kTopBudget;
    } else {
      throw ConfigError("eval.binarize must be \"threshold\" or \"top_budget\", got \"" + b + "\"");
    }
  }
}

void RunConfig::validate() const {
  synth.validate();
  engine.validate();
  loss.validate();
  train.validate();
  if (!(eval.alpha > 0 && eval.alpha <= 1)) throw ConfigError("invalid config: eval.alpha in (0, 1]");
  if (!(eval.budget > 0 && eval.budget <= 1)) throw ConfigError("invalid config: eval.budget in (0, 1]");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"synth", c.synth}, {"engine", c.engine}, {"loss", c.loss},
       {"train", c.train}, {"eval", c.eval},     {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  reject_unknown(j, nlohmann::json(RunConfig{}), "config");
  read_section(j, "synth", c.synth);
  read_section(j, "engine", c.engine);
  read_section(j, "loss", c.loss);
  read_section(j, "train", c.train);
  read_section(j, "eval", c.eval);
  if (j.contains("init_seed")) {
    if (!j.at("init_seed").is_number_unsigned()) throw ConfigError("init_seed: expected an unsigned integer");
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
  }
}

RunConfig load_run_config(const fs::path& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
  try {
    from_json(j, base);
    base.validate();
    return base;
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

RunConfig benchmark_config(const SynthConfig& synth) {
  RunConfig c;
  c.synth = synth;
  EngineConfig e;
  e.d_z = 16;
  e.d_y = 8;
  e.conv_widths = {8, 8};
  e.gcn_widths = {8, 8};
  c.engine = synth.engine_shape(e);
  c.train.batch_size = 8;
  c.train.lr = 3e-3;
  c.train.epochs = 60;
  c.train.seed = 1;
  return c;
}

EngineConfig fit_engine(const std::vector<UserSample>& users, EngineConfig base) {
  if (users.empty()) throw ContractViolation("fit_engine: no users");
  std::size_t clip_len = 1, target_len = 1, clips = 1;
  for (const auto& u : users) {
    for (const auto& c : u.preferred) clip_len = std::max(clip_len, c.frames());
    target_len = std::max(target_len, u.target.frames());
    clips = std::max(clips, u.preferred.size());
  }
  const auto& obj = users.front().target.obj;
  const auto& pose = users.front().target.pose;
  base.clip_len = clip_len;
  base.target_len = target_len;
  base.max_clips = std::min(base.max_clips, clips);
  base.obj_channels = obj.dim(1);
  base.obj_height = obj.dim(2);
  base.obj_width = obj.dim(3);
  base.joints = pose.dim(1);
  base.pose_dims = pose.dim(2);
  return base;
}

std::vector<UserSample> prepare_users(const std::vector<UserSample>& users, const EngineConfig& cfg,
                                      std::size_t max_clips) {
  std::vector<UserSample> out;
  out.reserve(users.size());
  for (const auto& u : users) out.push_back(prepare_user(u, cfg, max_clips));
  return out;
}

std::vector<ScoreTrack> score_users(const std::vector<UserSample>& users, const ModelParams<float>& params,
                                    std::size_t max_clips, AttentionMode mode, std::size_t workers) {
  std::vector<ScoreTrack> tracks(users.size());
  parallel_for(users.size(), workers, [&](std::size_t i) {
    const auto prepared = prepare_user(users[i], params.config, max_clips);
    tracks[i] = mode == AttentionMode::kUniform ? uniform_pooling_ablation(prepared, params)
                                                : score_target(prepared, params);
  });
  return tracks;
}

EvalReport evaluate_model(const std::vector<UserSample>& users, const ModelParams<float>& params,
                          std::size_t max_clips, AttentionMode mode, const EvalOptions& opt,
                          std::size_t workers) {
  const auto tracks = score_users(users, params, max_clips, mode, workers);
  std::vector<LabelTrack> labels;
  labels.reserve(users.size());
  for (const auto& u : users) labels.push_back(pad_labels(u.labels, params.config.target_len));
  return evaluate(tracks, labels, opt);
}

TrainResult train_model(const std::vector<UserSample>& train_users, const RunConfig& cfg,
                        const EpochCallback& on_epoch) {
  cfg.validate();
  const auto prepared = prepare_users(train_users, cfg.engine, cfg.engine.max_clips);
  return train(prepared, ModelParams<float>::init(cfg.engine, cfg.init_seed), cfg.train, cfg.loss, on_epoch);
}

EngineConfig micro_engine() {
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

GradCheckReport end_to_end_gradcheck(std::uint64_t seed, const GradCheckOptions& opt) {
  const EngineConfig cfg = micro_engine();
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  auto clip = [&](std::size_t frames) {
    FeatureClip c;
    c.obj = Tensor<float>({frames, cfg.obj_channels, cfg.obj_height, cfg.obj_width});
    c.pose = Tensor<float>({frames, cfg.joints, cfg.pose_dims});
    for (auto& v : c.obj.values()) v = noise(rng);
    for (auto& v : c.pose.values()) v = noise(rng);
    c.valid_len = frames;
    return c;
  };
  UserSample user;
  user.user_id = "gradcheck";
  for (std::size_t i = 0; i < cfg.max_clips; ++i) user.preferred.push_back(clip(cfg.clip_len));
  user.target = clip(cfg.target_len);
  user.labels = make_labels({1, 0, 0, 1, 1, 0});
  user = prepare_user(user, cfg, cfg.max_clips);

  const auto params = ModelParams<double>::init(cfg, seed);
  std::vector<NamedTensor<double>> named;
  for (const auto& [k, v] : params.tensors) named.push_back({k, v});
  const LossConfig loss;
  auto objective = [&](ad::Tape<double>& tape, std::span<const ad::Var<double>> vars) {
    ForwardContext<double> ctx(tape, params, ad::NormMode::kTrain);
    for (std::size_t i = 0; i < named.size(); ++i) ctx.bind(named[i].name, vars[i]);
    const auto trace = score_forward(ctx, user);
    return total_loss(trace.scores, user.labels, loss).total;
  };
  return check_gradients(objective, named, opt);
}

// Ablations -------------------------------------------------------------------

AblationAxis parse_axis(const std::string& name) {
  if (name == "clips") return AblationAxis::kClips;
  if (name == "backbone") return AblationAxis::kBackbone;
  if (name == "loss") return AblationAxis::kLoss;
  if (name == "attention") return AblationAxis::kAttention;
  throw ConfigError("unknown ablation axis '" + name + "' (clips, backbone, loss, attention)");
}

std::string axis_name(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::kClips: return "clips";
    case AblationAxis::kBackbone: return "backbone";
    case AblationAxis::kLoss: return "loss";
    case AblationAxis::kAttention: return "attention";
  }
  return "?";
}

void check_ablation_value(AblationAxis axis, const std::string& value) {
  static const std::map<AblationAxis, std::set<std::string>> kNamed{
      {AblationAxis::kBackbone, {"full", "no_objects", "no_poses"}},
      {AblationAxis::kLoss, {"full", "no_label", "no_margin", "no_sparsity"}},
      {AblationAxis::kAttention, {"learned", "uniform"}},
  };
  if (axis == AblationAxis::kClips) {
    if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("clips ablation values must be non-negative integers, got '" + value + "'");
    }
    return;
  }
  if (!kNamed.at(axis).count(value)) {
    throw ConfigError("unknown " + axis_name(axis) + " ablation value '" + value + "'");
  }
}

RunConfig ablation_variant(const RunConfig& base, AblationAxis axis, const std::string& value) {
  check_ablation_value(axis, value);
  RunConfig c = base;
  if (axis == AblationAxis::kBackbone) {
    c.engine.use_objects = value != "no_objects";
    c.engine.use_poses = value != "no_poses";
  } else if (axis == AblationAxis::kLoss) {
    c.loss.use_label = value != "no_label";
    c.loss.use_margin = value != "no_margin";
    c.loss.use_sparsity = value != "no_sparsity";
  }
  return c;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, AblationAxis axis,
                                      const std::vector<std::string>& values,
                                      const std::vector<UserSample>& train_users,
                                      const std::vector<UserSample>& test_users, std::size_t workers,
                                      const EpochCallback& on_epoch) {
  for (const auto& v : values) check_ablation_value(axis, v);
  const bool inference_only = axis == AblationAxis::kClips || axis == AblationAxis::kAttention;
  std::map<std::string, ModelParams<float>> trained;
  auto model_for = [&](const std::string& value) -> const ModelParams<float>& {
    const std::string key = inference_only ? std::string("shared") : value;
    auto it = trained.find(key);
    if (it == trained.end()) {
      it = trained.emplace(key, train_model(train_users, ablation_variant(base, axis, value), on_epoch).params).first;
    }
    return it->second;
  };

  std::vector<AblationRow> rows;
  for (const auto& value : values) {
    const auto& params = model_for(value);
    std::size_t clips = params.config.max_clips;
    AttentionMode mode = AttentionMode::kLearned;
    if (axis == AblationAxis::kClips) clips = std::stoul(value);
    if (axis == AblationAxis::kAttention && value == "uniform") mode = AttentionMode::kUniform;
    rows.push_back({value, evaluate_model(test_users, params, clips, mode, base.eval, workers)});
  }
  return rows;
}

}  // namespace ushl
