#ifndef POSEKIT_SYNTH_HPP
#define POSEKIT_SYNTH_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "posekit/image.hpp"
#include "posekit/kinematics.hpp"

namespace posekit {

// Per-bone sampling parameters, indexed like the tree edge list.
struct BoneSpec {
  double length_mm = 0;     // parent-to-child distance
  double rel_angle = 0;     // image-plane direction relative to the parent bone, radians
  double angle_jitter = 0;  // uniform half-width around rel_angle
  double elev_lo = 0;       // out-of-plane slope range, radians
  double elev_hi = 0;
  double radius_mm = 0;     // capsule radius when rendering this bone
};

struct SynthConfig {
  int subjects = 10;
  int poses_per_subject = 10;
  int width = 128;
  int height = 128;
  double mm_per_pixel = 10.0;

  double base_depth_mm = 2500.0;  // nominal subject distance
  double depth_jitter_mm = 200.0;
  double bone_scale = 1.0;        // global multiplier on bone lengths
  double subject_scale_jitter = 0.08;
  double root_angle = 1.5707963267948966;  // spine points down the image
  double root_angle_jitter = 0.26;

  double head_radius_mm = 80.0;
  double torso_radius_mm = 90.0;

  double occluder_prob = 0.0;     // chance of a foreground rectangle
  double noise_std_mm = 0.0;      // Gaussian depth noise on body pixels

  uint64_t seed = 1;

  std::vector<BoneSpec> bones;    // empty selects the built-in rig

  const KinematicTree& tree() const { return default_tree(); }
};

std::vector<BoneSpec> default_bones();

struct SynthSample {
  DepthImage image;
  PoseConfig pose;
};

// Deterministic function of (config, index): same inputs, same sample,
// regardless of generation order or thread count.
SynthSample synthesize_sample(const SynthConfig& cfg, uint64_t index);

// Renders subjects * poses_per_subject samples into out_dir (KDEP images,
// JSON annotations, manifest.json). The last round(count * test_frac)
// samples form the test split.
DatasetManifest synthesize_dataset(const SynthConfig& cfg, const std::string& out_dir,
                                   double test_frac);

// Mirror the image and pose about the vertical axis, swapping left/right parts.
DepthImage flip_image(const DepthImage& img);
PoseConfig flip_pose(const PoseConfig& pose, int width, const std::vector<int>& partners);

struct CropRect {
  int x = 0, y = 0, w = 0, h = 0;
};

DepthImage crop_image(const DepthImage& img, const CropRect& r);
PoseConfig crop_pose(const PoseConfig& pose, const CropRect& r);

struct AugmentResult {
  DepthImage image;
  PoseConfig pose;
  bool flipped = false;
  bool cropped = false;
  bool crop_skipped = false;  // sampled crop would push a joint outside
};

// Random flip (p = 0.5) followed by a random boundary crop of up to 10% per
// side; the crop is skipped, not resampled, when it would lose a joint.
AugmentResult augment(const DepthImage& img, const PoseConfig& pose, uint64_t seed);

}  // namespace posekit

#endif
