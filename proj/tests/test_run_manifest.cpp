#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "run_manifest.hpp"
#include "ushl/errors.hpp"

namespace fs = std::filesystem;
using namespace ushl::cli;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("ushl_manifest_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void put(const fs::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os << bytes;
}

}  // namespace

TEST(GitHash, EmptyBlob) { EXPECT_EQ(git_blob_hash(""), "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"); }

TEST(GitHash, TextBlob) { EXPECT_EQ(git_blob_hash("hello\n"), "ce013625030ba8dba906f756967f9e9ca394464a"); }

TEST(GitHash, TreeMatchesGitWriteTree) {
  const auto d = fresh_dir("tree");
  put(d / "a.txt", "hello\n");
  fs::create_directories(d / "sub");
  put(d / "sub" / "b.bin", "x");
  put(d / "sub" / "empty", "");
  EXPECT_EQ(git_tree_hash(d), "6ff81688a2f8e583c5afaa47ae64b521e86a98ee");
}

TEST(GitHash, TreeChangesWithContent) {
  const auto d = fresh_dir("edit");
  put(d / "w", "1");
  const auto before = git_tree_hash(d);
  put(d / "w", "2");
  EXPECT_NE(git_tree_hash(d), before);
}

TEST(GitHash, MissingDirectoryThrows) {
  EXPECT_THROW(git_tree_hash("/nonexistent/ushl/dir"), ushl::MissingFileError);
}

TEST(RunManifest, WritesStatusAndProvenance) {
  const auto d = fresh_dir("doc");
  RunManifest m("train", {"ushl", "train"});
  m.set_seed(42);
  m.set_config({{"epochs", 3}});
  m.add_input("corpus", d / "corpus");
  m.extra()["note"] = "x";
  m.write(d / "out" / "m.json", 4, "boom");

  std::ifstream is(d / "out" / "m.json");
  const auto j = nlohmann::json::parse(is);
  EXPECT_EQ(j["format"], "ushl-run-manifest");
  EXPECT_EQ(j["command"], "train");
  EXPECT_EQ(j["seed"], 42);
  EXPECT_EQ(j["config"]["epochs"], 3);
  EXPECT_EQ(j["exit_code"], 4);
  EXPECT_EQ(j["status"], "error");
  EXPECT_EQ(j["error"], "boom");
  EXPECT_EQ(j["extra"]["note"], "x");
  EXPECT_GE(j["wall_clock_seconds"].get<double>(), 0.0);
}
