#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ushl::cli {

/// Hex SHA-1 of `git hash-object` for a blob with these bytes.
std::string git_blob_hash(const std::string& bytes);

/// Hex SHA-1 git would give a tree object holding the regular files of `dir`
/// (recursing into subdirectories). Matches `git write-tree` for the same
/// content with mode 100644 files.
std::string git_tree_hash(const std::filesystem::path& dir);

/// Provenance record written once per command invocation.
class RunManifest {
 public:
  RunManifest(std::string command, std::vector<std::string> argv);

  void set_config(nlohmann::json config) { doc_["config"] = std::move(config); }
  void set_seed(std::uint64_t seed) { doc_["seed"] = seed; }
  void add_input(const std::string& role, const std::filesystem::path& p);
  void add_output(const std::string& role, const std::filesystem::path& p);
  void set_checkpoint_hash(const std::filesystem::path& checkpoint);
  nlohmann::json& extra() { return doc_["extra"]; }

  /// Stamps status and wall-clock time and writes the manifest to `path`.
  void write(const std::filesystem::path& path, int exit_code, const std::string& error = {});

  const nlohmann::json& json() const { return doc_; }

 private:
  nlohmann::json doc_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace ushl::cli
