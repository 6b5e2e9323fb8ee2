#ifndef POSEKIT_PROPOSALS_HPP
#define POSEKIT_PROPOSALS_HPP

#include <string>
#include <utility>
#include <vector>

#include "posekit/fcn.hpp"
#include "posekit/image.hpp"

namespace posekit {

// Box size scaling anchor: mean torso diameter (pixels) of the default
// synthetic rig, for which a 10x10 proposal box is the tuned size.
inline constexpr double kReferenceTorsoPx = 16.0;

// Candidate location for one part. (x, y) is the proposal center in image
// pixels, z its depth estimate in mm (0 when the box has no valid depth),
// score the raw heat-map value at the source cell.
struct PartProposal {
  double x = 0, y = 0, z = 0;
  int w = 0, h = 0;
  int part = 0;
  double score = 0;
};

struct ProposalSet {
  int n = 0;  // proposals per part
  std::vector<std::vector<PartProposal>> per_part;

  int part_count() const { return int(per_part.size()); }
};

// n-best extraction per part: the window x window neighborhood of cells
// around the heat-map peak, the window shifted to stay inside map bounds.
// Each cell back-maps to the image pixel at its block center; proposals are
// ordered by descending score, ties by row-major cell order. The depth z is
// the lower median of the non-zero depths inside the box.
ProposalSet extract_proposals(const HeatMapStack& maps, const DepthImage& img, int window,
                              int box_w = 10, int box_h = 10);

// Proposal box size proportional to pose scale, 10px at the reference torso.
std::pair<int, int> default_box_size(double torso_px = kReferenceTorsoPx);

// k,x,y,w,h,z,score rows.
void write_proposal_csv(const ProposalSet& props, const std::string& path);

// unaries[k][i]: matcher score for proposal i of part k.
using UnaryTable = std::vector<std::vector<double>>;

}  // namespace posekit

#endif
