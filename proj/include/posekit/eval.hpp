#ifndef POSEKIT_EVAL_HPP
#define POSEKIT_EVAL_HPP

#include <string>
#include <utility>
#include <vector>

#include "posekit/fcn.hpp"
#include "posekit/image.hpp"
#include "posekit/kinematics.hpp"
#include "posekit/matchnet.hpp"

namespace posekit {

// Joints whose 2D distance defines the torso diameter; defaults to
// UpperSpine and DownSpine.
struct TorsoEndpoints {
  int a = 2;
  int b = 4;
};

// Euclidean 2D pixel distance between the two torso endpoint joints.
// Coincident endpoints make every PDJ threshold degenerate and are rejected.
double torso_diameter(const PoseConfig& truth, const TorsoEndpoints& ends = {});

// Percentage of detected joints: a joint counts as correct when its 2D
// distance to the truth is at most threshold times that sample's torso
// diameter. Accuracies are derived from the integer hit counts.
struct PdjReport {
  std::vector<double> thresholds;
  std::vector<double> overall;                // per threshold
  std::vector<std::vector<double>> per_part;  // [threshold][part]
  std::vector<std::vector<int>> correct;      // [threshold][part] hit counts
  int samples = 0;

  int part_count() const { return per_part.empty() ? 0 : int(per_part.front().size()); }
};

PdjReport pdj(const std::vector<PoseConfig>& preds, const std::vector<PoseConfig>& truths,
              const std::vector<double>& thresholds, const TorsoEndpoints& ends = {});

// Thresholds 0.00 to 0.20 in steps of 0.01.
std::vector<double> pdj_thresholds();
PdjReport pdj_curve(const std::vector<PoseConfig>& preds,
                    const std::vector<PoseConfig>& truths, const TorsoEndpoints& ends = {});

// CSV columns: threshold,overall,part_0..part_{K-1}. The reader recovers the
// accuracy columns; hit counts and sample count are not stored.
void write_pdj_csv(const PdjReport& report, const std::string& path);
PdjReport read_pdj_csv(const std::string& path);

// Line plot of each named report's overall accuracy against threshold.
void write_pdj_svg(const std::vector<std::pair<std::string, PdjReport>>& curves,
                   const std::string& path);

// Pose overlay: joints as red dots connected by white bones on a dark field.
void write_overlay_svg(const PoseConfig& pose, const KinematicTree& tree, int width,
                       int height, const std::string& path);

// The three detector variants compared in the component analysis: raw
// heat-map peaks, matcher reranking of the proposals, and full tree
// inference.
struct ComponentReports {
  PdjReport fcn_only;
  PdjReport fcn_match;
  PdjReport full;
};

struct ComponentConfig {
  int window = 17;
  int box_w = 10, box_h = 10;
  double depth_scale = kDepthScale;
  std::vector<double> thresholds = pdj_thresholds();
  TorsoEndpoints ends;
};

ComponentReports component_analysis(const SampleSet& data, const FcnParams& fcn,
                                    const TemplateSet& templates,
                                    const MatcherParams& matcher, const StructParams& w,
                                    const KinematicTree& tree,
                                    const ComponentConfig& cfg = {});

void write_component_csv(const ComponentReports& reports, const std::string& path);

}  // namespace posekit

#endif
