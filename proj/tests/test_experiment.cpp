#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ushl/errors.hpp"
#include "ushl/experiment.hpp"

namespace fs = std::filesystem;
using namespace ushl;
using nlohmann::json;

namespace {

fs::path write_file(const std::string& name, const std::string& text) {
  const fs::path p = fs::temp_directory_path() / ("ushl_experiment_" + name);
  std::ofstream(p) << text;
  return p;
}

SynthConfig tiny_synth() {
  SynthConfig s;
  s.train_users = 6;
  s.test_users = 4;
  s.clips = 3;
  return s;
}

}  // namespace

TEST(RunConfig, JsonRoundTrip) {
  RunConfig c = benchmark_config();
  c.init_seed = 11;
  c.eval.binarize = Binarize::kTopBudget;
  c.loss.use_margin = false;
  EXPECT_EQ(json(json(c).get<RunConfig>()), json(c));
}

TEST(RunConfig, FileOverridesOnlyPresentKeys) {
  const auto p = write_file("partial.json", R"({
    // comments are allowed
    "train": {"epochs": 7},
    "eval": {"binarize": "top_budget"}
  })");
  const RunConfig base = benchmark_config();
  const RunConfig c = load_run_config(p, base);
  EXPECT_EQ(c.train.epochs, 7u);
  EXPECT_EQ(c.eval.binarize, Binarize::kTopBudget);
  EXPECT_DOUBLE_EQ(c.train.lr, base.train.lr);
  EXPECT_EQ(c.engine.d_z, base.engine.d_z);
}

TEST(RunConfig, UnknownKeysAreRejected) {
  EXPECT_THROW(load_run_config(write_file("top.json", R"({"trian": {}})")), ConfigError);
  EXPECT_THROW(load_run_config(write_file("inner.json", R"({"train": {"epoch": 3}})")), ConfigError);
  EXPECT_THROW(load_run_config(write_file("bin.json", R"({"eval": {"binarize": "median"}})")), ConfigError);
}

TEST(RunConfig, ErrorsNameTheFile) {
  const auto p = write_file("bad.json", R"({"train": {"lr": -1}})");
  try {
    load_run_config(p);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(p.string()), std::string::npos);
  }
  EXPECT_THROW(load_run_config(write_file("syntax.json", "{")), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/ushl.json"), ConfigError);
}

TEST(FitEngine, TakesShapesFromData) {
  auto s = tiny_synth();
  s.target_min = 20;
  s.target_max = 25;
  const auto users = generate_split(s, "train");
  EngineConfig base;
  base.max_clips = 15;
  const auto e = fit_engine(users, base);
  EXPECT_EQ(e.clip_len, s.clip_len);
  EXPECT_LE(e.target_len, 25u);
  EXPECT_GE(e.target_len, 20u);
  EXPECT_EQ(e.max_clips, 3u);
  EXPECT_EQ(e.obj_channels, s.obj_channels);
  EXPECT_EQ(e.joints, s.joints);
}

TEST(Ablation, AxisNamesRoundTrip) {
  for (auto a : {AblationAxis::kClips, AblationAxis::kBackbone, AblationAxis::kLoss, AblationAxis::kAttention}) {
    EXPECT_EQ(parse_axis(axis_name(a)), a);
  }
  EXPECT_THROW(parse_axis("depth"), ConfigError);
}

TEST(Ablation, ValuesAreChecked) {
  EXPECT_NO_THROW(check_ablation_value(AblationAxis::kClips, "0"));
  EXPECT_THROW(check_ablation_value(AblationAxis::kClips, "-1"), ConfigError);
  EXPECT_THROW(check_ablation_value(AblationAxis::kClips, "five"), ConfigError);
  EXPECT_THROW(check_ablation_value(AblationAxis::kLoss, "no_objects"), ConfigError);
  EXPECT_NO_THROW(check_ablation_value(AblationAxis::kBackbone, "no_poses"));
}

TEST(Ablation, VariantsToggleOneSwitch) {
  const RunConfig base = benchmark_config();
  const auto obj = ablation_variant(base, AblationAxis::kBackbone, "no_objects");
  EXPECT_FALSE(obj.engine.use_objects);
  EXPECT_TRUE(obj.engine.use_poses);
  const auto sp = ablation_variant(base, AblationAxis::kLoss, "no_sparsity");
  EXPECT_FALSE(sp.loss.use_sparsity);
  EXPECT_TRUE(sp.loss.use_label && sp.loss.use_margin);
  EXPECT_EQ(json(ablation_variant(base, AblationAxis::kClips, "5")), json(base));
  EXPECT_EQ(json(ablation_variant(base, AblationAxis::kAttention, "uniform")), json(base));
}

TEST(Ablation, InferenceAxesShareOneModel) {
  RunConfig cfg = benchmark_config(tiny_synth());
  cfg.train.epochs = 1;
  const auto train_users = generate_split(cfg.synth, "train");
  const auto test_users = generate_split(cfg.synth, "test");
  cfg.engine = fit_engine(train_users, cfg.engine);
  std::size_t epochs_run = 0;
  const auto rows = run_ablation(cfg, AblationAxis::kClips, {"3", "0", "3"}, train_users, test_users, 1,
                                 [&](const EpochRecord&) { ++epochs_run; });
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(epochs_run, 1u);
  EXPECT_EQ(rows[0].report.map, rows[2].report.map);
  for (const auto& r : rows) {
    EXPECT_GE(r.report.map, 0.0);
    EXPECT_LE(r.report.map, 1.0);
  }
}

TEST(EndToEnd, GradientCheckPasses) {
  const auto report = end_to_end_gradcheck(5);
  EXPECT_TRUE(report.passed) << report.max_rel_error;
  EXPECT_LE(report.max_rel_error, 1e-4);
  EXPECT_GT(report.checked, 1000u);
}
