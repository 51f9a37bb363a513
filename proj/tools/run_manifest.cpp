#include "run_manifest.hpp"

#include <algorithm>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "ushl/errors.hpp"

namespace ushl::cli {

namespace fs = std::filesystem;

namespace {

std::string sha1_raw(const std::string& bytes) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), out, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("sha1: digest failed");
  }
  return std::string(reinterpret_cast<const char*>(out), len);
}

std::string hex(const std::string& raw) {
  std::ostringstream os;
  for (unsigned char c : raw) os << std::hex << std::setw(2) << std::setfill('0') << int(c);
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw LoadError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::string object_hash_raw(const std::string& type, const std::string& body) {
  return sha1_raw(type + " " + std::to_string(body.size()) + '\0' + body);
}

std::string tree_raw(const fs::path& dir) {
  struct Entry {
    std::string name;
    bool is_dir;
    std::string hash;
  };
  std::vector<Entry> entries;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    if (e.is_directory()) {
      entries.push_back({name, true, tree_raw(e.path())});
    } else if (e.is_regular_file()) {
      entries.push_back({name, false, object_hash_raw("blob", slurp(e.path()))});
    }
  }
  // git orders tree entries as if directory names ended in '/'.
  auto key = [](const Entry& e) { return e.is_dir ? e.name + "/" : e.name; };
  std::sort(entries.begin(), entries.end(), [&](const Entry& a, const Entry& b) { return key(a) < key(b); });
  std::string body;
  for (const auto& e : entries) body += (e.is_dir ? "40000 " : "100644 ") + e.name + '\0' + e.hash;
  return object_hash_raw("tree", body);
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

std::string git_blob_hash(const std::string& bytes) { return hex(object_hash_raw("blob", bytes)); }

std::string git_tree_hash(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError("not a directory: " + dir.string());
  return hex(tree_raw(dir));
}

RunManifest::RunManifest(std::string command, std::vector<std::string> argv)
    : start_(std::chrono::steady_clock::now()) {
  doc_["format"] = "ushl-run-manifest";
  doc_["schema_version"] = 1;
  doc_["command"] = std::move(command);
  doc_["argv"] = std::move(argv);
  doc_["started_at"] = utc_now();
  doc_["inputs"] = nlohmann::json::object();
  doc_["outputs"] = nlohmann::json::object();
  doc_["extra"] = nlohmann::json::object();
}

void RunManifest::add_input(const std::string& role, const fs::path& p) { doc_["inputs"][role] = p.string(); }

void RunManifest::add_output(const std::string& role, const fs::path& p) { doc_["outputs"][role] = p.string(); }

void RunManifest::set_checkpoint_hash(const fs::path& checkpoint) {
  doc_["checkpoint_hash"] = git_tree_hash(checkpoint);
}

void RunManifest::write(const fs::path& path, int exit_code, const std::string& error) {
  doc_["exit_code"] = exit_code;
  doc_["status"] = exit_code == 0 ? "ok" : "error";
  if (!error.empty()) doc_["error"] = error;
  doc_["wall_clock_seconds"] =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw LoadError("cannot write manifest " + path.string());
  os << doc_.dump(2) << '\n';
}

}  // namespace ushl::cli
