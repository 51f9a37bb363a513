#include "ushl/config.hpp"

#include "ushl/errors.hpp"

namespace ushl {

namespace {

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

}  // namespace

void to_json(nlohmann::json& j, AttentionMode m) { j = m == AttentionMode::kUniform ? "uniform" : "learned"; }

void from_json(const nlohmann::json& j, AttentionMode& m) {
  const auto s = j.get<std::string>();
  if (s == "learned") {
    m = AttentionMode::kLearned;
  } else if (s == "uniform") {
    m = AttentionMode::kUniform;
  } else {
    throw ConfigError("attention must be \"learned\" or \"uniform\", got \"" + s + "\"");
  }
}

void EngineConfig::validate() const {
  require(clip_len >= 1, "clip_len >= 1");
  require(target_len >= 1, "target_len >= 1");
  require(d_z >= 1 && d_y >= 1, "d_z, d_y >= 1");
  require(obj_channels >= 1 && obj_height >= 1 && obj_width >= 1, "object grid extents >= 1");
  require(joints == 17, "joints must be 17 (COCO skeleton)");
  require(pose_dims >= 1, "pose_dims >= 1");
  require(conv_widths.size() == 2, "conv_widths has two entries");
  require(gcn_widths.size() == 2, "gcn_widths has two entries");
  require(use_objects || use_poses, "at least one branch enabled");
  require(bn_momentum > 0 && bn_momentum <= 1, "bn_momentum in (0, 1]");
}

void LossConfig::validate() const {
  require(zeta > 0 && zeta < 1, "zeta in (0, 1)");
  require(beta > 0, "beta > 0");
  require(label_eps > 0 && label_eps < 0.5, "label_eps in (0, 0.5)");
}

void TrainConfig::validate() const {
  require(batch_size >= 1, "batch_size >= 1");
  require(lr >= 0, "lr >= 0");
  require(lr_decay > 0, "lr_decay > 0");
  require(weight_decay >= 0, "weight_decay >= 0");
  require(workers >= 1, "workers >= 1");
  require(validation_fraction >= 0 && validation_fraction < 1, "validation_fraction in [0, 1)");
}

void to_json(nlohmann::json& j, const EngineConfig& c) {
  j = {{"clip_len", c.clip_len},
       {"target_len", c.target_len},
       {"max_clips", c.max_clips},
       {"obj_channels", c.obj_channels},
       {"obj_height", c.obj_height},
       {"obj_width", c.obj_width},
       {"joints", c.joints},
       {"pose_dims", c.pose_dims},
       {"d_z", c.d_z},
       {"d_y", c.d_y},
       {"conv_widths", c.conv_widths},
       {"gcn_widths", c.gcn_widths},
       {"frame_head_hidden", c.frame_head_hidden},
       {"clip_head_hidden", c.clip_head_hidden},
       {"pred_hidden", c.pred_hidden},
       {"bn_momentum", c.bn_momentum},
       {"bn_eps", c.bn_eps},
       {"use_objects", c.use_objects},
       {"use_poses", c.use_poses},
       {"share_priming", c.share_priming},
       {"attention", c.attention}};
}

void from_json(const nlohmann::json& j, EngineConfig& c) {
  read_opt(j, "clip_len", c.clip_len);
  read_opt(j, "target_len", c.target_len);
  read_opt(j, "max_clips", c.max_clips);
  read_opt(j, "obj_channels", c.obj_channels);
  read_opt(j, "obj_height", c.obj_height);
  read_opt(j, "obj_width", c.obj_width);
  read_opt(j, "joints", c.joints);
  read_opt(j, "pose_dims", c.pose_dims);
  read_opt(j, "d_z", c.d_z);
  read_opt(j, "d_y", c.d_y);
  read_opt(j, "conv_widths", c.conv_widths);
  read_opt(j, "gcn_widths", c.gcn_widths);
  read_opt(j, "frame_head_hidden", c.frame_head_hidden);
  read_opt(j, "clip_head_hidden", c.clip_head_hidden);
  read_opt(j, "pred_hidden", c.pred_hidden);
  read_opt(j, "bn_momentum", c.bn_momentum);
  read_opt(j, "bn_eps", c.bn_eps);
  read_opt(j, "use_objects", c.use_objects);
  read_opt(j, "use_poses", c.use_poses);
  read_opt(j, "share_priming", c.share_priming);
  read_opt(j, "attention", c.attention);
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"zeta", c.zeta},           {"class_weight", c.class_weight},
       {"beta", c.beta},           {"label_eps", c.label_eps},
       {"use_label", c.use_label}, {"use_margin", c.use_margin},
       {"use_sparsity", c.use_sparsity}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  read_opt(j, "zeta", c.zeta);
  read_opt(j, "class_weight", c.class_weight);
  read_opt(j, "beta", c.beta);
  read_opt(j, "label_eps", c.label_eps);
  read_opt(j, "use_label", c.use_label);
  read_opt(j, "use_margin", c.use_margin);
  read_opt(j, "use_sparsity", c.use_sparsity);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"lr", c.lr},
       {"lr_decay", c.lr_decay},
       {"weight_decay", c.weight_decay},
       {"epochs", c.epochs},
       {"seed", c.seed},
       {"workers", c.workers},
       {"early_stopping", c.early_stopping},
       {"patience", c.patience},
       {"validation_fraction", c.validation_fraction}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  read_opt(j, "batch_size", c.batch_size);
  read_opt(j, "lr", c.lr);
  read_opt(j, "lr_decay", c.lr_decay);
  read_opt(j, "weight_decay", c.weight_decay);
  read_opt(j, "epochs", c.epochs);
  read_opt(j, "seed", c.seed);
  read_opt(j, "workers", c.workers);
  read_opt(j, "early_stopping", c.early_stopping);
  read_opt(j, "patience", c.patience);
  read_opt(j, "validation_fraction", c.validation_fraction);
}

}  // namespace ushl
