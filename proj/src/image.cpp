#include "posekit/image.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "posekit/error.hpp"

namespace posekit {

using nlohmann::json;

const std::array<std::string, kPartCount>& part_names() {
  static const std::array<std::string, kPartCount> names = {
      "Head",          "Neck",       "UpperSpine", "MiddleSpine", "DownSpine",
      "RightShoulder", "RightElbow", "RightWrist", "RightHand",   "LeftShoulder",
      "LeftElbow",     "LeftWrist",  "LeftHand",   "RightHip",    "RightKnee",
      "RightFoot",     "LeftHip",    "LeftKnee",   "LeftFoot"};
  return names;
}

int part_index(const std::string& name) {
  const auto& names = part_names();
  for (int i = 0; i < kPartCount; ++i)
    if (names[i] == name) return i;
  throw ContractError("unknown part name: " + name);
}

std::vector<int> flip_partners(const std::vector<std::string>& names) {
  std::vector<int> partner(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) partner[i] = int(i);
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i].rfind("Right", 0) != 0) continue;
    std::string mirrored = "Left" + names[i].substr(5);
    for (std::size_t j = 0; j < names.size(); ++j) {
      if (names[j] == mirrored) {
        partner[i] = int(j);
        partner[j] = int(i);
      }
    }
  }
  return partner;
}

std::vector<int> default_flip_partners() {
  static const std::vector<int> partners = [] {
    std::vector<std::string> names(part_names().begin(), part_names().end());
    return flip_partners(names);
  }();
  return partners;
}

std::vector<int> DatasetManifest::split_indices(const std::string& split) const {
  std::vector<int> idx;
  for (int i = 0; i < int(entries.size()); ++i)
    if (entries[i].split == split) idx.push_back(i);
  return idx;
}

// --- KDEP -------------------------------------------------------------------

namespace {

void put_u32(std::string& out, uint32_t v) {
  out.push_back(char(v & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 24) & 0xff));
}

uint32_t get_u32(const std::string& buf, std::size_t off) {
  return uint32_t(uint8_t(buf[off])) | uint32_t(uint8_t(buf[off + 1])) << 8 |
         uint32_t(uint8_t(buf[off + 2])) << 16 | uint32_t(uint8_t(buf[off + 3])) << 24;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(data.data(), std::streamsize(data.size()));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace

void write_depth_image(const DepthImage& img, const std::string& path) {
  if (img.depth.size() != std::size_t(img.width) * img.height)
    throw ContractError("depth array length does not match dimensions");
  if (!(img.mm_per_pixel > 0)) throw ContractError("mm_per_pixel must be positive");

  std::string buf;
  buf.reserve(16 + img.depth.size() * 2);
  buf += "KDEP";
  put_u32(buf, uint32_t(img.width));
  put_u32(buf, uint32_t(img.height));
  put_u32(buf, uint32_t(std::lround(img.mm_per_pixel * 1000.0)));
  for (uint16_t d : img.depth) {
    buf.push_back(char(d & 0xff));
    buf.push_back(char((d >> 8) & 0xff));
  }
  write_file(path, buf);
}

DepthImage read_depth_image(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 16) throw FormatError(path + ": truncated header, expected 16 bytes, got " +
                                         std::to_string(buf.size()));
  if (buf.compare(0, 4, "KDEP") != 0) throw FormatError(path + ": bad magic");

  DepthImage img;
  img.width = int(get_u32(buf, 4));
  img.height = int(get_u32(buf, 8));
  img.mm_per_pixel = double(get_u32(buf, 12)) / 1000.0;
  if (img.width == 0 || img.height == 0) throw FormatError(path + ": zero dimensions");
  if (!(img.mm_per_pixel > 0)) throw FormatError(path + ": zero mm_per_pixel");

  const std::size_t n = std::size_t(img.width) * img.height;
  const std::size_t want = 16 + 2 * n;
  if (buf.size() != want)
    throw FormatError(path + ": truncated payload, expected " + std::to_string(want) +
                      " bytes, got " + std::to_string(buf.size()));
  img.depth.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    img.depth[i] = uint16_t(uint8_t(buf[16 + 2 * i])) | uint16_t(uint8_t(buf[16 + 2 * i + 1])) << 8;
  return img;
}

// --- annotation / manifest ----------------------------------------------------

void write_annotation(const PoseConfig& pose, const std::string& path) {
  json j;
  j["k"] = pose.part_count();
  json joints = json::array();
  const auto& names = part_names();
  for (int i = 0; i < pose.part_count(); ++i) {
    json jj;
    jj["name"] = i < kPartCount && pose.part_count() == kPartCount ? names[i]
                                                                   : "Part" + std::to_string(i);
    jj["x"] = pose.joints[i].x;
    jj["y"] = pose.joints[i].y;
    jj["z"] = pose.joints[i].z;
    joints.push_back(jj);
  }
  j["joints"] = joints;
  write_file(path, j.dump(2) + "\n");
}

PoseConfig read_annotation(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!j.contains("k") || !j.contains("joints")) throw FormatError(path + ": missing k/joints");
  PoseConfig pose;
  for (const auto& jj : j["joints"]) {
    Joint jt;
    jt.x = jj.at("x").get<double>();
    jt.y = jj.at("y").get<double>();
    jt.z = jj.at("z").get<double>();
    if (jt.z < 0) throw FormatError(path + ": negative joint depth");
    pose.joints.push_back(jt);
  }
  if (int(pose.joints.size()) != j["k"].get<int>())
    throw FormatError(path + ": joint count does not match declared k");
  return pose;
}

void write_manifest(const DatasetManifest& m, const std::string& path) {
  json j;
  j["k"] = m.k;
  j["mm_per_pixel"] = m.mm_per_pixel;
  j["width"] = m.width;
  j["height"] = m.height;
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"image", e.image}, {"annotation", e.annotation}, {"split", e.split}});
  }
  j["entries"] = entries;
  write_file(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const std::string& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  DatasetManifest m;
  m.k = j.at("k").get<int>();
  m.mm_per_pixel = j.at("mm_per_pixel").get<double>();
  m.width = j.value("width", 0);
  m.height = j.value("height", 0);
  m.root = std::filesystem::path(path).parent_path().string();
  for (const auto& je : j.at("entries")) {
    ManifestEntry e;
    e.image = je.at("image").get<std::string>();
    e.annotation = je.at("annotation").get<std::string>();
    e.split = je.at("split").get<std::string>();
    m.entries.push_back(e);
  }
  return m;
}

void load_sample(const DatasetManifest& m, int i, DepthImage& img, PoseConfig& pose) {
  if (i < 0 || i >= int(m.entries.size())) throw ContractError("sample index out of range");
  const auto& e = m.entries[i];
  const auto root = std::filesystem::path(m.root);
  img = read_depth_image((root / e.image).string());
  pose = read_annotation((root / e.annotation).string());
  if (pose.part_count() != m.k)
    throw FormatError(e.annotation + ": joint count " + std::to_string(pose.part_count()) +
                      " does not match manifest k=" + std::to_string(m.k));
  for (const auto& jt : pose.joints) {
    if (jt.x < 0 || jt.x >= img.width || jt.y < 0 || jt.y >= img.height)
      throw FormatError(e.annotation + ": joint outside image bounds");
  }
}

}  // namespace posekit
