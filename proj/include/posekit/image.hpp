#ifndef POSEKIT_IMAGE_HPP
#define POSEKIT_IMAGE_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace posekit {

// Single-channel depth raster. Values are millimeters, 0 = no reading.
// mm_per_pixel converts lateral pixel distance to metric distance at the
// subject plane.
struct DepthImage {
  int width = 0;
  int height = 0;
  double mm_per_pixel = 10.0;
  std::vector<uint16_t> depth;  // row-major, width*height entries

  DepthImage() = default;
  DepthImage(int w, int h, double mmpp = 10.0)
      : width(w), height(h), mm_per_pixel(mmpp), depth(std::size_t(w) * h, 0) {}

  bool in_bounds(int x, int y) const { return x >= 0 && x < width && y >= 0 && y < height; }
  uint16_t at(int x, int y) const { return depth[std::size_t(y) * width + x]; }
  uint16_t& at(int x, int y) { return depth[std::size_t(y) * width + x]; }
};

struct Joint {
  double x = 0;  // pixels
  double y = 0;  // pixels
  double z = 0;  // millimeters
};

// Ordered joint list; position in the list is the part id.
struct PoseConfig {
  std::vector<Joint> joints;

  int part_count() const { return int(joints.size()); }
};

inline constexpr int kPartCount = 19;

// Canonical 19-part order. Everything that indexes parts uses this order.
const std::array<std::string, kPartCount>& part_names();
int part_index(const std::string& name);

// Index of the Left/Right counterpart (or k itself for center parts), used by
// horizontal flips. Works for any name list following the Right*/Left* scheme.
std::vector<int> flip_partners(const std::vector<std::string>& names);
std::vector<int> default_flip_partners();

struct ManifestEntry {
  std::string image;       // path relative to manifest dir
  std::string annotation;  // path relative to manifest dir
  std::string split;       // "train" or "test"
};

struct DatasetManifest {
  int k = kPartCount;
  double mm_per_pixel = 10.0;
  int width = 0, height = 0;
  std::string root;  // directory the relative paths resolve against
  std::vector<ManifestEntry> entries;

  std::vector<int> split_indices(const std::string& split) const;
};

// --- KDEP raster format -----------------------------------------------------
// "KDEP" magic, u32 LE width, u32 LE height, u32 LE round(mm_per_pixel*1000),
// then width*height u16 LE depth samples, row-major.

void write_depth_image(const DepthImage& img, const std::string& path);
DepthImage read_depth_image(const std::string& path);

// --- annotation / manifest JSON ----------------------------------------------

void write_annotation(const PoseConfig& pose, const std::string& path);
PoseConfig read_annotation(const std::string& path);

void write_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest read_manifest(const std::string& path);

// Loads entry i's raster and annotation, validating joint count and bounds.
void load_sample(const DatasetManifest& m, int i, DepthImage& img, PoseConfig& pose);

}  // namespace posekit

#endif
