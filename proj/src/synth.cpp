#include "posekit/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "posekit/error.hpp"
#include "posekit/rng.hpp"

namespace posekit {

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr double kHalfPi = kPi / 2;

// Slope of the joint chain is checked against the rendered surface with this
// much slack; the torso capsule interpolates depth across three spine bones.
constexpr double kVisibleSlackMm = 60.0;
constexpr int kFrameMargin = 3;
constexpr int kMaxPoseAttempts = 300;

struct Skeleton {
  std::vector<Joint> joints;  // x, y in pixels; z in mm
};

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// Index of the bone ending at each node; -1 at the root.
std::vector<int> incoming_bone(const KinematicTree& tree) {
  std::vector<int> in(size_t(tree.part_count()), -1);
  for (int e = 0; e < tree.edge_count(); ++e) in[size_t(tree.edges[size_t(e)].second)] = e;
  return in;
}

Skeleton sample_skeleton(const SynthConfig& cfg, const std::vector<BoneSpec>& bones,
                         double subject_scale, Rng& rng) {
  const KinematicTree& tree = cfg.tree();
  const int k = tree.part_count();
  Skeleton s;
  s.joints.assign(size_t(k), {});

  Joint& root = s.joints[size_t(tree.root)];
  root.x = 0.5 * cfg.width + uniform(rng, -0.06, 0.06) * cfg.width;
  root.y = 0.16 * cfg.height + uniform(rng, -0.03, 0.03) * cfg.height;
  root.z = cfg.base_depth_mm + uniform(rng, -cfg.depth_jitter_mm, cfg.depth_jitter_mm);

  const std::vector<int> in_bone = incoming_bone(tree);
  std::vector<double> bone_dir(size_t(tree.edge_count()), 0.0);

  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto [p, c] = tree.edges[size_t(e)];
    const BoneSpec& b = bones[size_t(e)];
    const int pb = in_bone[size_t(p)];
    if (pb >= e)
      throw ContractError("bone table is not in parent-first order at edge " + std::to_string(e));

    double theta;
    if (pb < 0)
      theta = cfg.root_angle + uniform(rng, -cfg.root_angle_jitter, cfg.root_angle_jitter);
    else
      theta = bone_dir[size_t(pb)] + b.rel_angle + uniform(rng, -b.angle_jitter, b.angle_jitter);
    bone_dir[size_t(e)] = theta;

    const double elev = uniform(rng, b.elev_lo, b.elev_hi);
    const double len_mm = b.length_mm * cfg.bone_scale * subject_scale;
    const double len_px = len_mm * std::cos(elev) / cfg.mm_per_pixel;

    const Joint& pj = s.joints[size_t(p)];
    Joint& cj = s.joints[size_t(c)];
    cj.x = pj.x + std::cos(theta) * len_px;
    cj.y = pj.y + std::sin(theta) * len_px;
    cj.z = pj.z + len_mm * std::sin(elev);
  }
  return s;
}

bool in_frame(const Skeleton& s, int w, int h) {
  for (const Joint& j : s.joints) {
    if (j.x < kFrameMargin || j.x > w - 1 - kFrameMargin) return false;
    if (j.y < kFrameMargin || j.y > h - 1 - kFrameMargin) return false;
    if (j.z < 1 || j.z > 65000) return false;
  }
  return true;
}

// Depth z-buffer in mm; empty cells hold +inf.
using ZBuffer = std::vector<double>;

// Paint a capsule (segment with radius) whose surface depth is the axis depth
// interpolated between the endpoint depths. P1 == P2 paints a disc.
void paint_capsule(ZBuffer& zb, int w, int h, double x1, double y1, double z1, double x2,
                   double y2, double z2, double radius_px) {
  const double r2 = radius_px * radius_px;
  const int x_lo = std::max(0, int(std::floor(std::min(x1, x2) - radius_px)));
  const int x_hi = std::min(w - 1, int(std::ceil(std::max(x1, x2) + radius_px)));
  const int y_lo = std::max(0, int(std::floor(std::min(y1, y2) - radius_px)));
  const int y_hi = std::min(h - 1, int(std::ceil(std::max(y1, y2) + radius_px)));
  const double ax = x2 - x1, ay = y2 - y1;
  const double len2 = ax * ax + ay * ay;

  for (int py = y_lo; py <= y_hi; ++py) {
    for (int px = x_lo; px <= x_hi; ++px) {
      double t = 0;
      if (len2 > 0) t = std::clamp(((px - x1) * ax + (py - y1) * ay) / len2, 0.0, 1.0);
      const double cx = x1 + t * ax, cy = y1 + t * ay;
      const double dx = px - cx, dy = py - cy;
      if (dx * dx + dy * dy > r2) continue;
      const double z = z1 + t * (z2 - z1);
      double& cell = zb[size_t(py) * size_t(w) + size_t(px)];
      if (z < cell) cell = z;
    }
  }
}

ZBuffer render_body(const Skeleton& s, const SynthConfig& cfg,
                    const std::vector<BoneSpec>& bones) {
  const KinematicTree& tree = cfg.tree();
  ZBuffer zb(size_t(cfg.width) * size_t(cfg.height), std::numeric_limits<double>::infinity());

  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto [p, c] = tree.edges[size_t(e)];
    const Joint& a = s.joints[size_t(p)];
    const Joint& b = s.joints[size_t(c)];
    paint_capsule(zb, cfg.width, cfg.height, a.x, a.y, a.z, b.x, b.y, b.z,
                  bones[size_t(e)].radius_mm / cfg.mm_per_pixel);
  }
  // head ball and the torso hull from neck to the lower spine
  const Joint& head = s.joints[size_t(part_index("Head"))];
  paint_capsule(zb, cfg.width, cfg.height, head.x, head.y, head.z, head.x, head.y, head.z,
                cfg.head_radius_mm / cfg.mm_per_pixel);
  const Joint& neck = s.joints[size_t(part_index("Neck"))];
  const Joint& pelvis = s.joints[size_t(part_index("DownSpine"))];
  paint_capsule(zb, cfg.width, cfg.height, neck.x, neck.y, neck.z, pelvis.x, pelvis.y, pelvis.z,
                cfg.torso_radius_mm / cfg.mm_per_pixel);
  return zb;
}

bool joints_visible(const Skeleton& s, const ZBuffer& zb, int w) {
  for (const Joint& j : s.joints) {
    const int px = int(std::llround(j.x)), py = int(std::llround(j.y));
    const double z = zb[size_t(py) * size_t(w) + size_t(px)];
    if (!std::isfinite(z) || std::abs(z - j.z) > kVisibleSlackMm) return false;
  }
  return true;
}

uint16_t to_u16(double z) {
  return uint16_t(std::clamp<long long>(std::llround(z), 1, 65535));
}

void validate_config(const SynthConfig& cfg, const std::vector<BoneSpec>& bones) {
  if (cfg.subjects < 1 || cfg.poses_per_subject < 1)
    throw ConfigError("subjects and poses_per_subject must be at least 1");
  if (cfg.width < 16 || cfg.height < 16) throw ConfigError("frame smaller than 16x16");
  if (cfg.mm_per_pixel <= 0) throw ConfigError("mm_per_pixel must be positive");
  if (cfg.bone_scale <= 0) throw ConfigError("bone_scale must be positive");
  if (cfg.occluder_prob < 0 || cfg.occluder_prob > 1)
    throw ConfigError("occluder_prob outside [0,1]");
  if (cfg.noise_std_mm < 0) throw ConfigError("noise_std_mm must be non-negative");
  if (int(bones.size()) != cfg.tree().edge_count())
    throw ConfigError("bone table has " + std::to_string(bones.size()) + " entries, tree has " +
                      std::to_string(cfg.tree().edge_count()) + " edges");
  for (size_t e = 0; e < bones.size(); ++e) {
    const BoneSpec& b = bones[e];
    if (b.length_mm <= 0 || b.radius_mm <= 0)
      throw ConfigError("bone " + std::to_string(e) + " has non-positive length or radius");
    if (b.angle_jitter < 0 || b.elev_lo > b.elev_hi)
      throw ConfigError("bone " + std::to_string(e) + " has an unsatisfiable angle range");
  }
}

}  // namespace

std::vector<BoneSpec> default_bones() {
  // lengths/radii in mm at bone_scale 1; tuned to keep a frontal figure inside
  // a 128px frame at 10 mm/px
  return {
      // length, rel angle, jitter, elev lo, elev hi, radius
      {70, 0, 0, -0.15, 0.15, 40},            // Head->Neck (root bone)
      {60, 0, 0.10, -0.12, 0.12, 50},         // Neck->UpperSpine
      {80, 0, 0.10, -0.12, 0.12, 55},         // UpperSpine->MiddleSpine
      {80, 0, 0.10, -0.12, 0.12, 55},         // MiddleSpine->DownSpine
      {110, kHalfPi, 0.12, -0.25, 0.25, 30},  // Neck->RightShoulder
      {170, -kHalfPi, 1.0, -0.55, 0.55, 30},  // RightShoulder->RightElbow
      {150, 0, 1.2, -0.55, 0.55, 26},         // RightElbow->RightWrist
      {60, 0, 0.5, -0.50, 0.50, 24},          // RightWrist->RightHand
      {110, -kHalfPi, 0.12, -0.25, 0.25, 30}, // Neck->LeftShoulder
      {170, kHalfPi, 1.0, -0.55, 0.55, 30},   // LeftShoulder->LeftElbow
      {150, 0, 1.2, -0.55, 0.55, 26},         // LeftElbow->LeftWrist
      {60, 0, 0.5, -0.50, 0.50, 24},          // LeftWrist->LeftHand
      {60, kHalfPi, 0.10, -0.15, 0.15, 40},   // DownSpine->RightHip
      {250, -kHalfPi, 0.6, -0.35, 0.35, 36},  // RightHip->RightKnee
      {230, 0, 0.7, -0.35, 0.35, 32},         // RightKnee->RightFoot
      {60, -kHalfPi, 0.10, -0.15, 0.15, 40},  // DownSpine->LeftHip
      {250, kHalfPi, 0.6, -0.35, 0.35, 36},   // LeftHip->LeftKnee
      {230, 0, 0.7, -0.35, 0.35, 32},         // LeftKnee->LeftFoot
  };
}

SynthSample synthesize_sample(const SynthConfig& cfg, uint64_t index) {
  const std::vector<BoneSpec> bones = cfg.bones.empty() ? default_bones() : cfg.bones;
  validate_config(cfg, bones);

  const uint64_t subject = index / uint64_t(cfg.poses_per_subject);
  Rng subject_rng = make_rng(cfg.seed, 0xA0000000ull + subject);
  const double subject_scale =
      uniform(subject_rng, 1.0 - cfg.subject_scale_jitter, 1.0 + cfg.subject_scale_jitter);

  Rng rng = make_rng(cfg.seed, 0x100000ull + index);

  Skeleton skel;
  ZBuffer zb;
  bool placed = false;
  for (int attempt = 0; attempt < kMaxPoseAttempts && !placed; ++attempt) {
    skel = sample_skeleton(cfg, bones, subject_scale, rng);
    if (!in_frame(skel, cfg.width, cfg.height)) continue;
    zb = render_body(skel, cfg, bones);
    placed = joints_visible(skel, zb, cfg.width);
  }
  if (!placed)
    throw ConfigError("could not place a visible pose in a " + std::to_string(cfg.width) + "x" +
                      std::to_string(cfg.height) + " frame after " +
                      std::to_string(kMaxPoseAttempts) + " attempts");

  SynthSample out;
  out.image.width = cfg.width;
  out.image.height = cfg.height;
  out.image.mm_per_pixel = cfg.mm_per_pixel;
  out.image.depth.assign(zb.size(), 0);
  for (size_t i = 0; i < zb.size(); ++i)
    if (std::isfinite(zb[i])) out.image.depth[i] = to_u16(zb[i]);

  // annotations carry the clean rendered depth at the joint pixel, so the
  // depth label survives quantization exactly
  out.pose.joints.resize(skel.joints.size());
  double min_body_z = std::numeric_limits<double>::infinity();
  for (size_t k = 0; k < skel.joints.size(); ++k) {
    const Joint& j = skel.joints[k];
    const int px = int(std::llround(j.x)), py = int(std::llround(j.y));
    out.pose.joints[k] = {j.x, j.y, double(out.image.at(px, py))};
    min_body_z = std::min(min_body_z, j.z);
  }

  // foreground clutter: rectangles closer than the body, never over the head
  // or spine joints
  int occluders = 0;
  if (uniform(rng, 0.0, 1.0) < cfg.occluder_prob) ++occluders;
  if (uniform(rng, 0.0, 1.0) < 0.4 * cfg.occluder_prob) ++occluders;
  for (int o = 0; o < occluders; ++o) {
    const int ow = uniform_int(rng, 10, 30), oh = uniform_int(rng, 10, 30);
    const double oz = std::max(1.0, min_body_z - uniform(rng, 150.0, 500.0));
    if (ow >= cfg.width || oh >= cfg.height) continue;
    for (int attempt = 0; attempt < 40; ++attempt) {
      const int x0 = uniform_int(rng, 0, cfg.width - ow);
      const int y0 = uniform_int(rng, 0, cfg.height - oh);
      bool hits_core = false;
      for (int k = 0; k <= 4 && !hits_core; ++k) {  // Head through DownSpine
        const int jx = int(std::llround(skel.joints[size_t(k)].x));
        const int jy = int(std::llround(skel.joints[size_t(k)].y));
        hits_core = jx >= x0 && jx < x0 + ow && jy >= y0 && jy < y0 + oh;
      }
      if (hits_core) continue;
      const uint16_t ozq = to_u16(oz);
      for (int py = y0; py < y0 + oh; ++py)
        for (int px = x0; px < x0 + ow; ++px) {
          uint16_t& d = out.image.depth[size_t(py) * size_t(cfg.width) + size_t(px)];
          if (d == 0 || ozq < d) d = ozq;
        }
      break;
    }
  }

  if (cfg.noise_std_mm > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_std_mm);
    for (uint16_t& d : out.image.depth)
      if (d != 0) d = to_u16(double(d) + noise(rng));
  }
  return out;
}

DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::string& out_dir,
                                   double test_frac) {
  const std::vector<BoneSpec> bones = cfg.bones.empty() ? default_bones() : cfg.bones;
  validate_config(cfg, bones);
  if (test_frac < 0 || test_frac > 1) throw ConfigError("test_frac outside [0,1]");

  const long long count = (long long)cfg.subjects * cfg.poses_per_subject;
  const long long n_test = std::llround(double(count) * test_frac);

  std::filesystem::create_directories(out_dir);

  DatasetManifest mf;
  mf.k = kPartCount;
  mf.mm_per_pixel = cfg.mm_per_pixel;
  mf.width = cfg.width;
  mf.height = cfg.height;
  mf.root = out_dir;
  mf.entries.resize(size_t(count));

  std::string first_error;
  bool failed = false;
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < count; ++i) {
    try {
      const SynthSample s = synthesize_sample(cfg, uint64_t(i));
      char img_name[32], ann_name[32];
      std::snprintf(img_name, sizeof img_name, "img_%05lld.kdep", i);
      std::snprintf(ann_name, sizeof ann_name, "ann_%05lld.json", i);
      write_depth_image(s.image, out_dir + "/" + img_name);
      write_annotation(s.pose, out_dir + "/" + ann_name);
      ManifestEntry& e = mf.entries[size_t(i)];
      e.image = img_name;
      e.annotation = ann_name;
      e.split = (i < count - n_test) ? "train" : "test";
    } catch (const std::exception& ex) {
#pragma omp critical
      {
        if (!failed) first_error = ex.what();
        failed = true;
      }
    }
  }
  if (failed) throw ConfigError("dataset generation failed: " + first_error);

  write_manifest(mf, out_dir + "/manifest.json");
  return mf;
}

DepthImage flip_image(const DepthImage& img) {
  DepthImage out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.depth[size_t(y) * size_t(img.width) + size_t(x)] =
          img.depth[size_t(y) * size_t(img.width) + size_t(img.width - 1 - x)];
  return out;
}

PoseConfig flip_pose(const PoseConfig& pose, int width, const std::vector<int>& partners) {
  if (pose.joints.size() != partners.size())
    throw ContractError("flip partner table does not match pose size");
  PoseConfig out;
  out.joints.resize(pose.joints.size());
  for (size_t k = 0; k < pose.joints.size(); ++k) {
    Joint j = pose.joints[k];
    j.x = double(width - 1) - j.x;
    out.joints[size_t(partners[k])] = j;
  }
  return out;
}

DepthImage crop_image(const DepthImage& img, const CropRect& r) {
  if (r.w < 1 || r.h < 1 || r.x < 0 || r.y < 0 || r.x + r.w > img.width ||
      r.y + r.h > img.height)
    throw ContractError("crop rectangle outside the image");
  DepthImage out;
  out.width = r.w;
  out.height = r.h;
  out.mm_per_pixel = img.mm_per_pixel;
  out.depth.resize(size_t(r.w) * size_t(r.h));
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x)
      out.depth[size_t(y) * size_t(r.w) + size_t(x)] = img.at(r.x + x, r.y + y);
  return out;
}

PoseConfig crop_pose(const PoseConfig& pose, const CropRect& r) {
  PoseConfig out = pose;
  for (Joint& j : out.joints) {
    j.x -= r.x;
    j.y -= r.y;
  }
  return out;
}

AugmentResult augment(const DepthImage& img, const PoseConfig& pose, uint64_t seed) {
  if (pose.part_count() != kPartCount)
    throw ContractError("augment expects the " + std::to_string(kPartCount) + "-part layout");
  Rng rng = make_rng(seed, 0xF11Full);

  AugmentResult res;
  res.flipped = uniform(rng, 0.0, 1.0) < 0.5;
  const int mx = img.width / 10, my = img.height / 10;
  const int left = uniform_int(rng, 0, mx), right = uniform_int(rng, 0, mx);
  const int top = uniform_int(rng, 0, my), bottom = uniform_int(rng, 0, my);

  res.image = res.flipped ? flip_image(img) : img;
  res.pose = res.flipped ? flip_pose(pose, img.width, default_flip_partners()) : pose;

  const CropRect r{left, top, img.width - left - right, img.height - top - bottom};
  if (r.w == img.width && r.h == img.height) return res;

  for (const Joint& j : res.pose.joints) {
    if (j.x < r.x || j.x > r.x + r.w - 1 || j.y < r.y || j.y > r.y + r.h - 1) {
      res.crop_skipped = true;
      return res;
    }
  }
  res.image = crop_image(res.image, r);
  res.pose = crop_pose(res.pose, r);
  res.cropped = true;
  return res;
}

}  // namespace posekit
