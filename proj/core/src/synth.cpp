#include "ushl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "ushl/errors.hpp"
#include "ushl/parallel.hpp"

namespace ushl {

namespace fs = std::filesystem;

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("synth config: " + what);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint32_t tag, std::uint64_t index) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), tag, std::uint32_t(index),
                    std::uint32_t(index >> 32)};
  return std::mt19937_64(seq);
}

std::uint32_t split_tag(const std::string& split) {
  if (split == "train") return 1;
  if (split == "test") return 2;
  throw ContractViolation("unknown split '" + split + "'");
}

std::size_t uniform_int(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

void fill_normal(Tensor<float>& t, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (auto& v : t.values()) v = n(rng);
}

double sq_distance(std::span<const float> a, std::span<const float> b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (double(a[i]) - b[i]) * (double(a[i]) - b[i]);
  return d;
}

}  // namespace

void SynthConfig::validate() const {
  require(concepts >= 2, "concepts >= 2");
  require(per_user >= 1 && per_user < concepts, "1 <= per_user < concepts");
  require(major_weight > 0 && major_weight <= 1, "major_weight in (0, 1]");
  require(clip_len >= 1, "clip_len >= 1");
  require(active_min >= 1 && active_min <= active_max && active_max <= clip_len,
          "1 <= active_min <= active_max <= clip_len");
  require(target_min >= 1 && target_min <= target_max, "1 <= target_min <= target_max");
  require(segment_min >= 1 && segment_min <= segment_max, "1 <= segment_min <= segment_max");
  require(highlight_fraction > 0 && highlight_fraction <= 0.5, "highlight_fraction in (0, 0.5]");
  require(noise >= 0, "noise >= 0");
  require(obj_channels >= 2 && obj_height >= 1 && obj_width >= 1, "object grid needs >= 2 channels");
  require(joints >= 1 && pose_dims >= 2, "pose needs >= 2 coordinates");
  require(train_users + test_users >= 1, "at least one user");
}

EngineConfig SynthConfig::engine_shape(EngineConfig base) const {
  base.clip_len = clip_len;
  base.target_len = target_max;
  base.max_clips = std::max<std::size_t>(clips, 1);
  base.obj_channels = obj_channels;
  base.obj_height = obj_height;
  base.obj_width = obj_width;
  base.joints = joints;
  base.pose_dims = pose_dims;
  return base;
}

void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"concepts", c.concepts},
       {"per_user", c.per_user},
       {"major_weight", c.major_weight},
       {"clips", c.clips},
       {"clip_len", c.clip_len},
       {"active_min", c.active_min},
       {"active_max", c.active_max},
       {"target_min", c.target_min},
       {"target_max", c.target_max},
       {"segment_min", c.segment_min},
       {"segment_max", c.segment_max},
       {"highlight_fraction", c.highlight_fraction},
       {"noise", c.noise},
       {"obj_channels", c.obj_channels},
       {"obj_height", c.obj_height},
       {"obj_width", c.obj_width},
       {"joints", c.joints},
       {"pose_dims", c.pose_dims},
       {"train_users", c.train_users},
       {"test_users", c.test_users},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SynthConfig& c) {
  if (!j.is_object()) throw ConfigError("synth config must be a JSON object");
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  opt("concepts", c.concepts);
  opt("per_user", c.per_user);
  opt("major_weight", c.major_weight);
  opt("clips", c.clips);
  opt("clip_len", c.clip_len);
  opt("active_min", c.active_min);
  opt("active_max", c.active_max);
  opt("target_min", c.target_min);
  opt("target_max", c.target_max);
  opt("segment_min", c.segment_min);
  opt("segment_max", c.segment_max);
  opt("highlight_fraction", c.highlight_fraction);
  opt("noise", c.noise);
  opt("obj_channels", c.obj_channels);
  opt("obj_height", c.obj_height);
  opt("obj_width", c.obj_width);
  opt("joints", c.joints);
  opt("pose_dims", c.pose_dims);
  opt("train_users", c.train_users);
  opt("test_users", c.test_users);
  opt("seed", c.seed);
}

Saliency concept_saliency(std::size_t concept_id) {
  switch (concept_id % 3) {
    case 0: return Saliency::kBoth;
    case 1: return Saliency::kObject;
    default: return Saliency::kPose;
  }
}

// Concept library -------------------------------------------------------------

ConceptLibrary ConceptLibrary::build(const SynthConfig& cfg) {
  cfg.validate();
  auto rng = stream(cfg.seed, 0, 0);
  ConceptLibrary lib;
  const Shape obj_shape{cfg.obj_channels - 1, cfg.obj_height, cfg.obj_width};
  const Shape pose_shape{cfg.joints, cfg.pose_dims - 1};
  lib.neutral_obj = Tensor<float>(obj_shape, 0.0f);
  lib.neutral_pose = Tensor<float>(pose_shape, 0.0f);

  // Expected distance between two independent N(0,1) templates is about
  // sqrt(2 n); demand at least half of that for the smaller channel.
  const double threshold = 0.5 * std::sqrt(2.0 * double(std::min(numel(obj_shape), numel(pose_shape))));
  auto rendered = [&](std::size_t c) {
    const auto s = concept_saliency(c);
    const auto& o = s == Saliency::kPose ? lib.neutral_obj : lib.obj[c];
    const auto& p = s == Saliency::kObject ? lib.neutral_pose : lib.pose[c];
    std::vector<float> v(o.values().begin(), o.values().end());
    v.insert(v.end(), p.values().begin(), p.values().end());
    return v;
  };

  lib.min_distance = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < cfg.concepts; ++c) {
    lib.obj.emplace_back(obj_shape);
    lib.pose.emplace_back(pose_shape);
    double nearest = 0;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) throw ConfigError("synth: cannot separate concept templates; use larger grids");
      fill_normal(lib.obj[c], rng);
      fill_normal(lib.pose[c], rng);
      const auto me = rendered(c);
      nearest = std::numeric_limits<double>::infinity();
      for (std::size_t o = 0; o < c; ++o) nearest = std::min(nearest, std::sqrt(sq_distance(me, rendered(o))));
      if (nearest >= threshold) break;
    }
    if (c > 0) lib.min_distance = std::min(lib.min_distance, nearest);
  }
  return lib;
}

void ConceptLibrary::render_frame(std::size_t concept_id, bool active, std::span<float> obj_out,
                                  std::span<float> pose_out) const {
  const auto s = concept_saliency(concept_id);
  const auto& o = s == Saliency::kPose ? neutral_obj : obj.at(concept_id);
  const auto& p = s == Saliency::kObject ? neutral_pose : pose.at(concept_id);
  const float cue = active ? 1.0f : 0.0f;
  const std::size_t plane = o.dim(1) * o.dim(2);
  if (obj_out.size() != plane * (o.dim(0) + 1) || pose_out.size() != p.dim(0) * (p.dim(1) + 1)) {
    throw ContractViolation("render_frame: output spans do not match the library shapes");
  }
  std::fill(obj_out.begin(), obj_out.begin() + std::ptrdiff_t(plane), cue);
  std::copy(o.values().begin(), o.values().end(), obj_out.begin() + std::ptrdiff_t(plane));
  const std::size_t d = p.dim(1);
  for (std::size_t k = 0; k < p.dim(0); ++k) {
    for (std::size_t i = 0; i < d; ++i) pose_out[k * (d + 1) + i] = p[k * d + i];
    pose_out[k * (d + 1) + d] = cue;
  }
}

// Users -------------------------------------------------------------------------

namespace {

struct FrameSpec {
  std::size_t concept_id;
  bool active;
};

FeatureClip render_clip(const SynthConfig& cfg, const ConceptLibrary& lib, const std::string& name,
                        const std::vector<FrameSpec>& frames, std::mt19937_64& rng) {
  const std::size_t T = frames.size();
  FeatureClip clip;
  clip.name = name;
  clip.obj = Tensor<float>({T, cfg.obj_channels, cfg.obj_height, cfg.obj_width}, 0.0f);
  clip.pose = Tensor<float>({T, cfg.joints, cfg.pose_dims}, 0.0f);
  clip.valid_len = T;
  const std::size_t on = cfg.obj_channels * cfg.obj_height * cfg.obj_width;
  const std::size_t pn = cfg.joints * cfg.pose_dims;
  for (std::size_t t = 0; t < T; ++t) {
    lib.render_frame(frames[t].concept_id, frames[t].active, clip.obj.values().subspan(t * on, on),
                     clip.pose.values().subspan(t * pn, pn));
  }
  if (cfg.noise > 0) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(cfg.noise));
    for (auto& v : clip.obj.values()) v += n(rng);
    for (auto& v : clip.pose.values()) v += n(rng);
  }
  return clip;
}

}  // namespace

UserSample generate_user(const SynthConfig& cfg, const ConceptLibrary& lib, const std::string& split,
                         std::size_t index) {
  auto rng = stream(cfg.seed, split_tag(split), index);
  UserSample user;
  char id[32];
  std::snprintf(id, sizeof id, "%s-%04zu", split.c_str(), index);
  user.user_id = id;

  std::vector<std::size_t> order(cfg.concepts);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  const std::vector<std::size_t> preferred(order.begin(), order.begin() + std::ptrdiff_t(cfg.per_user));
  const std::vector<std::size_t> foreign(order.begin() + std::ptrdiff_t(cfg.per_user), order.end());
  std::vector<double> weights(cfg.per_user, cfg.per_user == 1 ? 1.0 : (1.0 - cfg.major_weight) / double(cfg.per_user - 1));
  weights[0] = cfg.per_user == 1 ? 1.0 : cfg.major_weight;
  std::discrete_distribution<std::size_t> pick_pref(weights.begin(), weights.end());

  nlohmann::json clip_notes = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.clips; ++i) {
    const std::size_t c = preferred[pick_pref(rng)];
    const std::size_t background = foreign[uniform_int(rng, 0, foreign.size() - 1)];
    const std::size_t len = uniform_int(rng, cfg.active_min, cfg.active_max);
    const std::size_t start = uniform_int(rng, 0, cfg.clip_len - len);
    std::vector<FrameSpec> frames(cfg.clip_len, FrameSpec{background, false});
    for (std::size_t t = start; t < start + len; ++t) frames[t] = {c, true};
    char name[16];
    std::snprintf(name, sizeof name, "clip%02zu", i);
    user.preferred.push_back(render_clip(cfg, lib, name, frames, rng));
    clip_notes.push_back({{"concept", c}, {"background", background}, {"active_start", start}, {"active_len", len}});
  }

  // Target: cover the video with segments, then mark whole segments positive
  // until the highlight budget is met within one segment's rounding.
  const std::size_t L = uniform_int(rng, cfg.target_min, cfg.target_max);
  std::vector<std::pair<std::size_t, std::size_t>> segments;  // (start, len)
  for (std::size_t at = 0; at < L;) {
    const std::size_t len = std::min(uniform_int(rng, cfg.segment_min, cfg.segment_max), L - at);
    segments.emplace_back(at, len);
    at += len;
  }
  std::vector<std::size_t> seg_order(segments.size());
  std::iota(seg_order.begin(), seg_order.end(), std::size_t{0});
  std::shuffle(seg_order.begin(), seg_order.end(), rng);
  const double budget = cfg.highlight_fraction * double(L);
  std::vector<bool> positive(segments.size(), false);
  double pos = 0;
  for (std::size_t s : seg_order) {
    const double len = double(segments[s].second);
    if (pos == 0 || pos + len <= budget + len / 2) {
      positive[s] = true;
      pos += len;
    }
    if (pos >= budget) break;
  }

  std::vector<FrameSpec> frames(L);
  std::vector<std::uint8_t> y(L, 0);
  nlohmann::json seg_notes = nlohmann::json::array();
  std::size_t cycle = uniform_int(rng, 0, cfg.per_user - 1);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    const auto [start, len] = segments[s];
    const std::size_t c = positive[s] ? preferred[cycle++ % cfg.per_user]
                                      : foreign[uniform_int(rng, 0, foreign.size() - 1)];
    for (std::size_t t = start; t < start + len; ++t) {
      frames[t] = {c, true};
      y[t] = positive[s] ? 1 : 0;
    }
    seg_notes.push_back({{"start", start}, {"len", len}, {"concept", c}, {"label", positive[s] ? 1 : 0}});
  }
  user.target = render_clip(cfg, lib, "target", frames, rng);
  user.labels = make_labels(std::move(y));
  user.annotations = {{"generator", "synth"},
                      {"preferred_concepts", preferred},
                      {"concept_weights", weights},
                      {"clips", std::move(clip_notes)},
                      {"segments", std::move(seg_notes)}};
  return user;
}

std::vector<UserSample> generate_split(const SynthConfig& cfg, const std::string& split, std::size_t workers) {
  const auto lib = ConceptLibrary::build(cfg);
  const std::size_t n = split_tag(split) == 1 ? cfg.train_users : cfg.test_users;
  std::vector<UserSample> users(n);
  parallel_for(n, workers, [&](std::size_t i) { users[i] = generate_user(cfg, lib, split, i); });
  return users;
}

void generate_corpus(const SynthConfig& cfg, const fs::path& dir, std::size_t workers) {
  const auto lib = ConceptLibrary::build(cfg);
  fs::create_directories(dir);
  nlohmann::json splits = nlohmann::json::object();
  for (const std::string split : {"train", "test"}) {
    const std::size_t n = split == "train" ? cfg.train_users : cfg.test_users;
    fs::create_directories(dir / split);
    std::vector<std::string> ids(n);
    parallel_for(n, workers, [&](std::size_t i) {
      const auto user = generate_user(cfg, lib, split, i);
      save_user(dir / split / user.user_id, user);
      ids[i] = user.user_id;
    });
    splits[split] = ids;
  }
  std::ofstream os(dir / "corpus.json");
  if (!os) throw LoadError("cannot write " + (dir / "corpus.json").string());
  os << nlohmann::json{{"synth", cfg}, {"splits", splits}}.dump(1) << '\n';
}

SynthConfig read_corpus_config(const fs::path& dir) {
  const fs::path path = dir / "corpus.json";
  std::ifstream is(path);
  if (!is) throw MissingFileError("missing " + path.string());
  try {
    return nlohmann::json::parse(is).at("synth").get<SynthConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed " + path.string() + ": " + e.what());
  }
}

// Reference scorers --------------------------------------------------------------

ScoreTrack oracle_scorer(const UserSample& user, const ConceptLibrary& lib, const SynthConfig& cfg) {
  const auto preferred = user.annotations.at("preferred_concepts").get<std::vector<std::size_t>>();
  const double sigma = std::max(cfg.noise, 1e-3);
  const std::size_t on = cfg.obj_channels * cfg.obj_height * cfg.obj_width;
  const std::size_t pn = cfg.joints * cfg.pose_dims;
  std::vector<std::vector<float>> obj(cfg.concepts, std::vector<float>(on));
  std::vector<std::vector<float>> pose(cfg.concepts, std::vector<float>(pn));
  for (std::size_t c = 0; c < cfg.concepts; ++c) lib.render_frame(c, true, obj[c], pose[c]);

  ScoreTrack track;
  track.user_id = user.user_id;
  const std::size_t T = user.target.frames();
  track.s.assign(T, 0.0f);
  track.mask = user.labels.mask;
  std::vector<double> logp(cfg.concepts);
  for (std::size_t t = 0; t < std::min(T, user.target.valid_len); ++t) {
    const auto xo = user.target.obj.values().subspan(t * on, on);
    const auto xp = user.target.pose.values().subspan(t * pn, pn);
    for (std::size_t c = 0; c < cfg.concepts; ++c) {
      logp[c] = -(sq_distance(xo, obj[c]) + sq_distance(xp, pose[c])) / (2 * sigma * sigma);
    }
    const double top = *std::max_element(logp.begin(), logp.end());
    double total = 0, mass = 0;
    for (std::size_t c = 0; c < cfg.concepts; ++c) {
      const double p = std::exp(logp[c] - top);
      total += p;
      if (std::find(preferred.begin(), preferred.end(), c) != preferred.end()) mass += p;
    }
    track.s[t] = static_cast<float>(mass / total);
  }
  return track;
}

ScoreTrack random_scorer(const UserSample& user, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ScoreTrack track;
  track.user_id = user.user_id;
  track.mask = user.labels.mask;
  track.s.assign(user.labels.size(), 0.0f);
  for (std::size_t t = 0; t < track.s.size(); ++t) {
    if (track.mask[t]) track.s[t] = u(rng);
  }
  return track;
}

}  // namespace ushl
