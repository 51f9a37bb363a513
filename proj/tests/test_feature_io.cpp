#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "support.hpp"
#include "ushl/errors.hpp"
#include "ushl/feature_io.hpp"

using namespace ushl;
namespace fs = std::filesystem;

namespace {

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir = fs::temp_directory_path() /
          ("ushl_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  void TearDown() override { fs::remove_all(dir); }

  std::vector<std::uint8_t> bytes_of(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
  }

  fs::path dir;
};

UserSample sample_user(std::mt19937_64& rng, std::vector<std::size_t> lens) {
  const auto cfg = fixtures::micro_config();
  UserSample u;
  u.user_id = "alice";
  for (std::size_t i = 0; i < lens.size(); ++i) u.preferred.push_back(fixtures::random_clip(cfg, lens[i], rng, "p" + std::to_string(i)));
  u.target = fixtures::random_clip(cfg, 7, rng, "target");
  u.labels = make_labels({0, 1, 1, 0, 0, 1, 0});
  u.annotations = {{"note", "test"}};
  return u;
}

}  // namespace

TEST(TensorFormat, HeaderLayout) {
  Tensor<float> t({2, 3}, 1.5f);
  const auto b = encode_tensor(t);
  ASSERT_EQ(b.size(), 16u + 2 * 8 + 6 * 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "PHLT");
  EXPECT_EQ(b[4], 1);  // version
  EXPECT_EQ(b[6], 2);  // rank
  EXPECT_EQ(b[8], 1);  // f32
  for (int i = 9; i < 16; ++i) EXPECT_EQ(b[i], 0);
  EXPECT_EQ(b[16], 2);
  EXPECT_EQ(b[24], 3);
  EXPECT_EQ(decode_tensor(b, "mem"), t);
}

TEST(TensorFormat, RejectsCorruptHeaders) {
  auto b = encode_tensor(Tensor<float>({2}, 1.0f));
  auto bad_magic = b;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_tensor(bad_magic, "mem"), FormatError);
  auto bad_dtype = b;
  bad_dtype[8] = 2;
  EXPECT_THROW(decode_tensor(bad_dtype, "mem"), FormatError);
  auto short_payload = b;
  short_payload.pop_back();
  EXPECT_THROW(decode_tensor(short_payload, "mem"), LoadError);
}

TEST(LabelRuns, RoundTrip) {
  const std::vector<std::uint8_t> y{0, 0, 1, 1, 1, 0, 1};
  const auto runs = encode_label_runs(y);
  EXPECT_EQ(runs.dump(), "[[0,2],[1,3],[0,1],[1,1]]");
  EXPECT_EQ(decode_label_runs(runs), y);
}

TEST_F(TempDir, UserRoundTripIsByteIdentical) {
  std::mt19937_64 rng(31);
  const auto u = sample_user(rng, {4, 3});
  save_user(dir / "a", u);
  const auto back = load_user(dir / "a");
  save_user(dir / "b", back);
  for (const auto& entry : fs::directory_iterator(dir / "a")) {
    EXPECT_EQ(bytes_of(entry.path()), bytes_of(dir / "b" / entry.path().filename())) << entry.path();
  }
  ASSERT_EQ(back.preferred.size(), 2u);
  EXPECT_EQ(back.preferred[0].obj, u.preferred[0].obj);
  EXPECT_EQ(back.preferred[1].pose, u.preferred[1].pose);
  EXPECT_EQ(back.target.obj, u.target.obj);
  EXPECT_EQ(back.labels.y, u.labels.y);
  EXPECT_EQ(back.annotations, u.annotations);
}

TEST_F(TempDir, DeclaredFramesDisagreeWithTensor) {
  std::mt19937_64 rng(32);
  const auto u = sample_user(rng, {9});
  save_user(dir, u);
  std::ifstream is(dir / "manifest.json");
  auto m = nlohmann::json::parse(is);
  is.close();
  m["preferred"][0]["valid_len"] = 10;
  m["preferred"][0]["obj"]["shape"][0] = 10;
  std::ofstream(dir / "manifest.json") << m.dump();
  EXPECT_THROW(load_user(dir), ShapeError);
}

TEST_F(TempDir, ChecksumAndMissingFileErrors) {
  std::mt19937_64 rng(33);
  save_user(dir, sample_user(rng, {3}));
  {
    std::fstream f(dir / "p0.obj.phlt", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(40);
    f.put('\x7f');
  }
  EXPECT_THROW(load_user(dir), ChecksumError);
  fs::remove(dir / "p0.obj.phlt");
  EXPECT_THROW(load_user(dir), MissingFileError);
  fs::remove(dir / "manifest.json");
  EXPECT_THROW(load_user(dir), MissingFileError);
}

TEST_F(TempDir, CorpusKeepsValidLengths) {
  std::mt19937_64 rng(34);
  save_user(dir / "u1", sample_user(rng, {5, 8, 12}));
  save_user(dir / "u0", sample_user(rng, {2}));
  const auto corpus = load_corpus(dir);
  ASSERT_EQ(corpus.size(), 2u);
  ASSERT_EQ(corpus[1].preferred.size(), 3u);
  EXPECT_EQ(corpus[1].preferred[0].valid_len, 5u);
  EXPECT_EQ(corpus[1].preferred[1].valid_len, 8u);
  EXPECT_EQ(corpus[1].preferred[2].valid_len, 12u);
}

TEST(PadTo, ShortClipIsZeroPadded) {
  std::mt19937_64 rng(35);
  const auto clip = fixtures::random_clip(fixtures::micro_config(), 3, rng);
  const auto p = pad_to(clip, 5);
  EXPECT_EQ(p.frames(), 5u);
  EXPECT_EQ(frame_mask(p), (std::vector<std::uint8_t>{1, 1, 1, 0, 0}));
  const std::size_t per = clip.obj.size() / 3;
  for (std::size_t i = 0; i < 3 * per; ++i) EXPECT_EQ(p.obj[i], clip.obj[i]);
  for (std::size_t i = 3 * per; i < 5 * per; ++i) EXPECT_EQ(p.obj[i], 0.0f);
  for (std::size_t i = 3 * 17 * 3; i < p.pose.size(); ++i) EXPECT_EQ(p.pose[i], 0.0f);
}

TEST(PadTo, ExactLengthIsIdentity) {
  std::mt19937_64 rng(36);
  const auto clip = fixtures::random_clip(fixtures::micro_config(), 5, rng);
  const auto p = pad_to(clip, 5);
  EXPECT_EQ(p.obj, clip.obj);
  EXPECT_EQ(p.pose, clip.pose);
  EXPECT_EQ(p.valid_len, 5u);
}

TEST(PadTo, LongClipKeepsFirstFrames) {
  std::mt19937_64 rng(37);
  const auto clip = fixtures::random_clip(fixtures::micro_config(), 7, rng);
  const auto p = pad_to(clip, 5);
  const std::size_t per = clip.obj.size() / 7;
  ASSERT_EQ(p.obj.size(), 5 * per);
  for (std::size_t i = 0; i < 5 * per; ++i) EXPECT_EQ(p.obj[i], clip.obj[i]);
  EXPECT_EQ(p.valid_len, 5u);
}

TEST(PadTo, Idempotent) {
  std::mt19937_64 rng(38);
  const auto clip = fixtures::random_clip(fixtures::micro_config(), 3, rng);
  const auto once = pad_to(clip, 6);
  const auto twice = pad_to(once, 6);
  EXPECT_EQ(once.obj, twice.obj);
  EXPECT_EQ(once.pose, twice.pose);
  EXPECT_EQ(once.valid_len, twice.valid_len);
}

TEST(PadTo, LabelsFollowTheMask) {
  const auto l = pad_labels(make_labels({1, 0, 1}), 5);
  EXPECT_EQ(l.y, (std::vector<std::uint8_t>{1, 0, 1, 0, 0}));
  EXPECT_EQ(l.mask, (std::vector<std::uint8_t>{1, 1, 1, 0, 0}));
}
