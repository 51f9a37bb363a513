#include "ushl/feature_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include <zlib.h>

#include "ushl/errors.hpp"

namespace ushl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'H', 'L', 'T'};
constexpr std::size_t kHeaderSize = 16;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[offset + i]) << (8 * i);
  return v;
}

std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

Shape shape_from_json(const json& j, const std::string& where) {
  try {
    return j.get<Shape>();
  } catch (const json::exception& e) {
    throw FormatError(where + ": malformed shape: " + e.what());
  }
}

json tensor_entry(const fs::path& dir, const std::string& file, const Tensor<float>& t) {
  const auto bytes = encode_tensor(t);
  write_file(dir / file, bytes);
  return {{"file", file}, {"shape", t.shape()}, {"crc32", crc32_of(bytes)}};
}

Tensor<float> load_tensor_entry(const fs::path& dir, const json& entry, const std::string& where) {
  if (!entry.is_object() || !entry.contains("file") || !entry.contains("shape")) {
    throw FormatError(where + ": tensor entry needs 'file' and 'shape'");
  }
  const fs::path path = dir / entry.at("file").get<std::string>();
  if (!fs::exists(path)) throw MissingFileError(where + ": missing tensor file " + path.string());
  const auto bytes = read_file(path);
  if (entry.contains("crc32")) {
    const auto want = entry.at("crc32").get<std::uint32_t>();
    const auto got = crc32_of(bytes);
    if (want != got) {
      throw ChecksumError(where + ": CRC32 mismatch for " + path.string() + " (manifest " +
                          std::to_string(want) + ", file " + std::to_string(got) + ")");
    }
  }
  auto t = decode_tensor(bytes, path.string());
  const Shape declared = shape_from_json(entry.at("shape"), where);
  if (declared != t.shape()) {
    throw ShapeError(where + ": manifest declares " + to_string(declared) + " but " +
                     path.string() + " holds " + to_string(t.shape()));
  }
  return t;
}

}  // namespace

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

std::vector<std::uint8_t> encode_tensor(const Tensor<float>& t) {
  std::vector<std::uint8_t> out;
  out.reserve(kHeaderSize + 8 * t.rank() + 4 * t.size());
  out.insert(out.end(), kMagic, kMagic + 4);
  put_le<std::uint16_t>(out, kTensorFileVersion);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.rank()));
  out.push_back(kDtypeF32);
  out.resize(kHeaderSize, 0);
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (float v : t.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor<float> decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin) {
  if (bytes.size() < kHeaderSize || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(origin + ": not a PHLT tensor file");
  }
  const auto version = get_le<std::uint16_t>(bytes, 4);
  const auto rank = get_le<std::uint16_t>(bytes, 6);
  const auto dtype = bytes[8];
  if (version != kTensorFileVersion) {
    throw FormatError(origin + ": unsupported version " + std::to_string(version));
  }
  if (dtype != kDtypeF32) throw FormatError(origin + ": unsupported dtype " + std::to_string(dtype));
  if (bytes.size() < kHeaderSize + 8 * rank) throw FormatError(origin + ": truncated extents");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = static_cast<std::size_t>(get_le<std::uint64_t>(bytes, kHeaderSize + 8 * i));
  }
  const std::size_t payload = kHeaderSize + 8 * rank;
  const std::size_t count = numel(shape);
  if (bytes.size() != payload + 4 * count) {
    throw ShapeError(origin + ": payload of " + std::to_string(bytes.size() - payload) +
                     " bytes does not match extents " + to_string(shape));
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, payload + 4 * i));
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

void write_tensor(const fs::path& path, const Tensor<float>& t) { write_file(path, encode_tensor(t)); }

Tensor<float> read_tensor(const fs::path& path) { return decode_tensor(read_file(path), path.string()); }

// ---------------------------------------------------------------------------

void FeatureClip::validate() const {
  if (obj.rank() != 4) throw ContractViolation("clip " + name + ": obj must be rank 4, got " + to_string(obj.shape()));
  if (pose.rank() != 3) throw ContractViolation("clip " + name + ": pose must be rank 3, got " + to_string(pose.shape()));
  if (obj.dim(0) != pose.dim(0)) {
    throw ContractViolation("clip " + name + ": obj and pose frame counts differ " +
                            to_string(obj.shape()) + " vs " + to_string(pose.shape()));
  }
  if (valid_len > obj.dim(0)) throw ContractViolation("clip " + name + ": valid_len exceeds frames");
}

std::size_t LabelTrack::valid_count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

std::size_t LabelTrack::positive_count() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < y.size(); ++i) n += (mask[i] && y[i]) ? 1 : 0;
  return n;
}

json encode_label_runs(std::span<const std::uint8_t> y) {
  json runs = json::array();
  std::size_t i = 0;
  while (i < y.size()) {
    std::size_t j = i;
    while (j < y.size() && y[j] == y[i]) ++j;
    runs.push_back({static_cast<int>(y[i]), j - i});
    i = j;
  }
  return runs;
}

std::vector<std::uint8_t> decode_label_runs(const json& runs) {
  std::vector<std::uint8_t> y;
  if (!runs.is_array()) throw FormatError("labels: runs must be an array");
  for (const auto& r : runs) {
    if (!r.is_array() || r.size() != 2) throw FormatError("labels: run must be [value, length]");
    const int v = r[0].get<int>();
    if (v != 0 && v != 1) throw FormatError("labels: value must be 0 or 1");
    y.insert(y.end(), r[1].get<std::size_t>(), static_cast<std::uint8_t>(v));
  }
  return y;
}

LabelTrack make_labels(std::vector<std::uint8_t> y) {
  LabelTrack t;
  t.mask.assign(y.size(), 1);
  t.y = std::move(y);
  return t;
}

FeatureClip load_clip(const fs::path& dir, const json& entry) {
  FeatureClip clip;
  try {
    clip.name = entry.at("name").get<std::string>();
    clip.fps = entry.value("fps", 30.0);
    clip.valid_len = entry.at("valid_len").get<std::size_t>();
  } catch (const json::exception& e) {
    throw FormatError(dir.string() + ": malformed clip entry: " + e.what());
  }
  const std::string where = (dir / clip.name).string();
  clip.obj = load_tensor_entry(dir, entry.at("obj"), where + " (obj)");
  clip.pose = load_tensor_entry(dir, entry.at("pose"), where + " (pose)");
  if (clip.obj.rank() != 4 || clip.pose.rank() != 3) {
    throw ShapeError(where + ": obj must be rank 4 and pose rank 3");
  }
  if (clip.obj.dim(0) != clip.valid_len || clip.pose.dim(0) != clip.valid_len) {
    throw ShapeError(where + ": manifest declares valid_len=" + std::to_string(clip.valid_len) +
                     " but tensors hold " + std::to_string(clip.obj.dim(0)) + " / " +
                     std::to_string(clip.pose.dim(0)) + " frames");
  }
  return clip;
}

json save_clip(const fs::path& dir, const FeatureClip& clip) {
  clip.validate();
  return {{"name", clip.name},
          {"fps", clip.fps},
          {"valid_len", clip.valid_len},
          {"obj", tensor_entry(dir, clip.name + ".obj.phlt", clip.obj)},
          {"pose", tensor_entry(dir, clip.name + ".pose.phlt", clip.pose)}};
}

UserSample load_user(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw MissingFileError("missing " + manifest_path.string());
  json m;
  try {
    std::ifstream in(manifest_path);
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(manifest_path.string() + ": " + e.what());
  }
  if (m.value("schema_version", 0) != kManifestSchemaVersion) {
    throw FormatError(manifest_path.string() + ": unsupported schema_version");
  }
  UserSample user;
  user.user_id = m.at("user_id").get<std::string>();
  for (const auto& entry : m.at("preferred")) user.preferred.push_back(load_clip(dir, entry));
  user.target = load_clip(dir, m.at("target"));
  const auto& labels = m.at("labels");
  user.labels = make_labels(decode_label_runs(labels.at("runs")));
  if (user.labels.size() != user.target.valid_len) {
    throw ShapeError(manifest_path.string() + ": label length " +
                     std::to_string(user.labels.size()) + " != target valid_len " +
                     std::to_string(user.target.valid_len));
  }
  if (m.contains("annotations")) user.annotations = m.at("annotations");
  return user;
}

void save_user(const fs::path& dir, const UserSample& user) {
  fs::create_directories(dir);
  if (user.labels.size() != user.target.valid_len) {
    throw ContractViolation("user " + user.user_id + ": labels length != target valid_len");
  }
  json preferred = json::array();
  for (const auto& clip : user.preferred) preferred.push_back(save_clip(dir, clip));
  std::vector<std::uint8_t> y(user.labels.y.begin(),
                              user.labels.y.begin() + static_cast<long>(user.target.valid_len));
  json m = {{"schema_version", kManifestSchemaVersion},
            {"user_id", user.user_id},
            {"preferred", std::move(preferred)},
            {"target", save_clip(dir, user.target)},
            {"labels", {{"length", y.size()}, {"runs", encode_label_runs(y)}}},
            {"annotations", user.annotations}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << m.dump(1) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

std::vector<UserSample> load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw MissingFileError("corpus directory not found: " + dir.string());
  std::vector<fs::path> user_dirs;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) user_dirs.push_back(e.path());
  }
  std::sort(user_dirs.begin(), user_dirs.end());
  std::vector<UserSample> users;
  users.reserve(user_dirs.size());
  for (const auto& p : user_dirs) users.push_back(load_user(p));
  return users;
}

// ---------------------------------------------------------------------------

namespace {

Tensor<float> pad_frames(const Tensor<float>& t, std::size_t keep, std::size_t length) {
  Shape shape = t.shape();
  const std::size_t frame = t.size() / std::max<std::size_t>(shape[0], 1);
  shape[0] = length;
  Tensor<float> out(shape);
  std::copy_n(t.data(), keep * frame, out.data());
  return out;
}

}  // namespace

FeatureClip pad_to(const FeatureClip& clip, std::size_t length) {
  if (length == 0) throw ContractViolation("pad_to: length must be >= 1");
  clip.validate();
  FeatureClip out;
  out.name = clip.name;
  out.fps = clip.fps;
  out.valid_len = std::min(clip.valid_len, length);
  out.obj = pad_frames(clip.obj, out.valid_len, length);
  out.pose = pad_frames(clip.pose, out.valid_len, length);
  return out;
}

std::vector<std::uint8_t> frame_mask(const FeatureClip& clip) {
  std::vector<std::uint8_t> mask(clip.frames(), 0);
  std::fill(mask.begin(), mask.begin() + std::ptrdiff_t(std::min(clip.valid_len, mask.size())), 1);
  return mask;
}

LabelTrack pad_labels(const LabelTrack& labels, std::size_t length) {
  LabelTrack out;
  out.y.assign(length, 0);
  out.mask.assign(length, 0);
  const std::size_t keep = std::min(labels.size(), length);
  for (std::size_t i = 0; i < keep; ++i) {
    out.mask[i] = labels.mask[i];
    out.y[i] = labels.mask[i] ? labels.y[i] : 0;
  }
  return out;
}

UserSample prepare_user(const UserSample& user, const EngineConfig& cfg, std::size_t max_clips) {
  UserSample out;
  out.user_id = user.user_id;
  out.annotations = user.annotations;
  const std::size_t n = std::min({user.preferred.size(), max_clips, cfg.max_clips});
  for (std::size_t i = 0; i < n; ++i) out.preferred.push_back(pad_to(user.preferred[i], cfg.clip_len));
  out.target = pad_to(user.target, cfg.target_len);
  out.labels = pad_labels(user.labels, cfg.target_len);
  return out;
}

}  // namespace ushl
