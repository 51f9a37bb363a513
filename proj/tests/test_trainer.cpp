#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include "support.hpp"
#include "ushl/errors.hpp"
#include "ushl/trainer.hpp"

using namespace ushl;
namespace fs = std::filesystem;

namespace {

ModelParams<float> two_scalars(float a, float b) {
  ModelParams<float> p;
  p.tensors.emplace("a", Tensor<float>({1}, a));
  p.tensors.emplace("b", Tensor<float>({1}, b));
  return p;
}

std::vector<UserSample> tiny_corpus(const EngineConfig& cfg, std::size_t users, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<UserSample> out;
  for (std::size_t i = 0; i < users; ++i) out.push_back(fixtures::random_user(cfg, 2, rng));
  return out;
}

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("ushl_trainer_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST(Adam, ZeroGradientAndDecayLeaveParamsUnchanged) {
  auto p = two_scalars(0.5f, -2.0f);
  OptimState st;
  GradMap g;
  g.emplace("a", Tensor<float>({1}, 0.0f));
  for (int i = 0; i < 3; ++i) adam_step(p, g, st, 0.1, 0.0);
  EXPECT_EQ(p.at("a")[0], 0.5f);
  EXPECT_EQ(p.at("b")[0], -2.0f);
  EXPECT_EQ(st.step, 3u);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  // After bias correction m_hat = g and v_hat = g^2, so the step is
  // -lr g / (|g| + eps).
  for (float g0 : {3.0f, -0.25f, 1e-3f}) {
    auto p = two_scalars(1.0f, 0.0f);
    OptimState st;
    GradMap g;
    g.emplace("a", Tensor<float>({1}, g0));
    adam_step(p, g, st, 0.01, 0.0);
    const double expected = 1.0 - 0.01 * g0 / (std::abs(g0) + 1e-8);
    EXPECT_NEAR(p.at("a")[0], expected, 1e-6) << g0;
  }
}

TEST(Adam, ParametersUpdateIndependently) {
  auto p = two_scalars(1.0f, 1.0f);
  auto q = two_scalars(1.0f, 1.0f);
  OptimState sp, sq;
  GradMap both, only_a;
  both.emplace("a", Tensor<float>({1}, 0.7f));
  both.emplace("b", Tensor<float>({1}, -4.0f));
  only_a.emplace("a", Tensor<float>({1}, 0.7f));
  adam_step(p, both, sp, 0.05, 0.0);
  adam_step(q, only_a, sq, 0.05, 0.0);
  EXPECT_EQ(p.at("a")[0], q.at("a")[0]);
  EXPECT_NE(p.at("b")[0], q.at("b")[0]);
}

TEST(Adam, WeightDecayIsAddedToTheGradient) {
  auto p = two_scalars(2.0f, 0.0f);
  OptimState st;
  adam_step(p, {}, st, 0.1, 0.5);
  EXPECT_NEAR(p.at("a")[0], 2.0 - 0.1, 1e-6);  // g = 0.5 * 2 > 0, unit step
  EXPECT_EQ(p.at("b")[0], 0.0f);
}

TEST(Adam, NonFiniteGradientLeavesParamsUntouched) {
  auto p = two_scalars(1.0f, 2.0f);
  OptimState st;
  GradMap g;
  g.emplace("a", Tensor<float>({1}, 1.0f));
  g.emplace("b", Tensor<float>({1}, std::numeric_limits<float>::quiet_NaN()));
  EXPECT_THROW(adam_step(p, g, st, 0.1, 0.0), NumericFault);
  EXPECT_EQ(p.at("a")[0], 1.0f);
  EXPECT_EQ(st.step, 0u);
}

TEST(Adam, RejectsUnknownOrMisshapenGradients) {
  auto p = two_scalars(1.0f, 2.0f);
  OptimState st;
  GradMap unknown;
  unknown.emplace("c", Tensor<float>({1}, 1.0f));
  EXPECT_THROW(adam_step(p, unknown, st, 0.1, 0.0), ContractViolation);
  GradMap wrong;
  wrong.emplace("a", Tensor<float>({2}, 1.0f));
  EXPECT_THROW(adam_step(p, wrong, st, 0.1, 0.0), ContractViolation);
}

TEST(Schedule, DecaysGeometrically) {
  TrainConfig cfg;
  cfg.lr = 1e-4;
  EXPECT_DOUBLE_EQ(learning_rate(cfg, 0), 1e-4);
  EXPECT_NEAR(learning_rate(cfg, 100), 9.048e-5, 1e-8);
}

class Training : public ::testing::Test {
 protected:
  EngineConfig cfg = fixtures::micro_config();
  LossConfig loss;
  TrainConfig tc = [] {
    TrainConfig t;
    t.batch_size = 2;
    t.lr = 3e-3;
    t.epochs = 3;
    t.seed = 5;
    return t;
  }();
};

TEST_F(Training, OverfitsASingleUser) {
  const auto corpus = tiny_corpus(cfg, 1, 1);
  tc.epochs = 200;
  tc.batch_size = 1;
  tc.lr = 1e-3;
  const auto res = train(corpus, ModelParams<float>::init(cfg, 2), tc, loss);
  ASSERT_EQ(res.history.size(), 200u);
  for (std::size_t e = 20; e < res.history.size(); ++e) {
    EXPECT_LT(res.history[e].train.total, res.history[e - 20].train.total) << "epoch " << e;
  }
}

TEST_F(Training, HistoryCarriesEveryEpochAndComponent) {
  const auto corpus = tiny_corpus(cfg, 3, 2);
  std::size_t calls = 0;
  const auto res = train(corpus, ModelParams<float>::init(cfg, 2), tc, loss,
                         [&](const EpochRecord&) { ++calls; });
  ASSERT_EQ(res.history.size(), tc.epochs);
  EXPECT_EQ(calls, tc.epochs);
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    const auto& r = res.history[e];
    EXPECT_EQ(r.epoch, e);
    EXPECT_DOUBLE_EQ(r.lr, learning_rate(tc, e));
    EXPECT_GT(r.train.label, 0.0);
    EXPECT_GE(r.train.margin, 0.0);
    EXPECT_GE(r.train.sparsity, 0.0);
    EXPECT_GT(r.train.sparsity_surrogate, 0.0);
    EXPECT_FALSE(r.validation.has_value());
  }
}

TEST_F(Training, ZeroLearningRateKeepsParameters) {
  const auto corpus = tiny_corpus(cfg, 3, 3);
  const auto init = ModelParams<float>::init(cfg, 2);
  tc.lr = 0.0;
  const auto res = train(corpus, init, tc, loss);
  EXPECT_EQ(res.params.tensors, init.tensors);
}

TEST_F(Training, EqualSeedsGiveBitIdenticalTrajectories) {
  const auto corpus = tiny_corpus(cfg, 4, 4);
  const auto init = ModelParams<float>::init(cfg, 2);
  auto run = [&](std::size_t workers) {
    TrainConfig t = tc;
    t.workers = workers;
    std::vector<double> losses;
    auto res = train(corpus, init, t, loss, [&](const EpochRecord& r) { losses.push_back(r.train.total); });
    return std::make_pair(res.params, losses);
  };
  const auto [p1, l1] = run(1);
  const auto [p2, l2] = run(1);
  const auto [p3, l3] = run(3);
  EXPECT_EQ(l1, l2);
  EXPECT_EQ(p1.tensors, p2.tensors);
  EXPECT_EQ(l1, l3);
  EXPECT_EQ(p1.tensors, p3.tensors);
  for (const auto& [name, s] : p1.norms) {
    EXPECT_EQ(s.mean, p3.norms.at(name).mean) << name;
    EXPECT_EQ(s.var, p3.norms.at(name).var) << name;
  }
}

TEST_F(Training, EarlyStoppingRecordsValidationLoss) {
  const auto corpus = tiny_corpus(cfg, 5, 5);
  tc.early_stopping = true;
  tc.patience = 1;
  tc.epochs = 6;
  const auto res = train(corpus, ModelParams<float>::init(cfg, 2), tc, loss);
  ASSERT_FALSE(res.history.empty());
  for (const auto& r : res.history) EXPECT_TRUE(r.validation.has_value());
  EXPECT_LT(res.best_epoch, res.history.size());
}

TEST_F(Training, NonFiniteInputAbortsWithCoordinates) {
  auto corpus = tiny_corpus(cfg, 2, 6);
  corpus[1].target.obj[0] = std::numeric_limits<float>::infinity();
  tc.batch_size = 1;
  try {
    train(corpus, ModelParams<float>::init(cfg, 2), tc, loss);
    FAIL() << "expected NumericFault";
  } catch (const NumericFault& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

TEST_F(Training, RejectsEmptyCorpus) {
  EXPECT_THROW(train({}, ModelParams<float>::init(cfg, 2), tc, loss), ContractViolation);
}

TEST(Checkpoint, RoundTripsParametersAndStatistics) {
  TempDir dir;
  auto cfg = fixtures::micro_config();
  auto p = ModelParams<float>::init(cfg, 9);
  p.norms.begin()->second.mean[0] = 0.25f;
  CheckpointInfo info;
  info.epoch = 12;
  info.seed = 99;
  info.rng_state = "abc";
  info.extra = {{"note", "x"}};
  save_checkpoint(dir.path, p, info);
  CheckpointInfo back;
  const auto q = load_checkpoint(dir.path, &back);
  EXPECT_EQ(q.tensors, p.tensors);
  for (const auto& [name, s] : p.norms) {
    EXPECT_EQ(q.norms.at(name).mean, s.mean);
    EXPECT_EQ(q.norms.at(name).var, s.var);
  }
  EXPECT_EQ(back.epoch, 12u);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.rng_state, "abc");
  EXPECT_EQ(back.extra["note"], "x");
  EXPECT_EQ(nlohmann::json(q.config), nlohmann::json(cfg));
}

TEST(Checkpoint, DetectsCorruptionAndMissingFiles) {
  TempDir dir;
  const auto p = ModelParams<float>::init(fixtures::micro_config(), 9);
  save_checkpoint(dir.path, p, {});
  const auto victim = dir.path / "pred.fc0.w.phlt";
  {
    std::fstream f(victim, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  EXPECT_THROW(load_checkpoint(dir.path), ChecksumError);
  fs::remove(victim);
  EXPECT_THROW(load_checkpoint(dir.path), MissingFileError);
  EXPECT_THROW(load_checkpoint(dir.path / "nowhere"), MissingFileError);
}
