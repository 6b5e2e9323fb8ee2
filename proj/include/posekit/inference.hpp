#ifndef POSEKIT_INFERENCE_HPP
#define POSEKIT_INFERENCE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "posekit/image.hpp"
#include "posekit/kinematics.hpp"
#include "posekit/proposals.hpp"

namespace posekit {

// Upward-pass state of the max-sum recursion, exposed so tests can compare
// the root message against the recomputed configuration score.
struct MessageTable {
  // mu[k][i]: best score of the subtree rooted at part k when k picks
  // proposal i, including k's own unary term
  std::vector<std::vector<double>> mu;
  // back[c][i]: the child proposal index that realises mu's inner maximum
  // at non-root part c when c's parent picks proposal i; empty at the root
  std::vector<std::vector<int>> back;
};

struct DpStats {
  uint64_t pair_ops = 0;  // inner-loop (parent choice, child choice) visits
};

struct InferResult {
  Configuration cfg;
  double score = 0;
};

// Exact maximiser of config_score over one proposal pick per part. Messages
// flow leaf to root; ties resolve to the smallest proposal index at every
// node, which makes the result the lexicographically smallest maximiser in
// any node order that lists parents before children. The returned score is
// config_score of the returned configuration.
InferResult dp_infer(const ProposalSet& props, const UnaryTable& unaries,
                     const StructParams& w, const KinematicTree& tree,
                     double mm_per_pixel, DpStats* stats = nullptr,
                     MessageTable* messages = nullptr);

// Same recursion with a per-part 0/1 miss penalty folded into the unary
// term: part k picking a proposal whose centre lies farther than radius_px
// (2D) from truth joint k adds loss_weight[k]. Maximising score plus loss
// surfaces the highest-scoring margin violations. The returned score is the
// augmented objective of the returned configuration.
InferResult dp_infer_loss_augmented(const ProposalSet& props, const UnaryTable& unaries,
                                    const StructParams& w, const KinematicTree& tree,
                                    double mm_per_pixel, const PoseConfig& truth,
                                    const std::vector<double>& loss_weight,
                                    double radius_px, DpStats* stats = nullptr);

// Exhaustive search over every configuration, the verification oracle for
// dp_infer. Ties resolve to the lexicographically smallest index vector in
// part order. Refuses search spaces above 10^6 configurations.
InferResult brute_force_infer(const ProposalSet& props, const UnaryTable& unaries,
                              const StructParams& w, const KinematicTree& tree,
                              double mm_per_pixel);

// One decoded pose: the chosen proposal index and its (x, y, z) per part,
// plus the configuration score.
struct InferenceRecord {
  Configuration cfg;
  double score = 0;
  std::vector<Joint> joints;
};

InferenceRecord make_record(const Configuration& cfg, double score, const ProposalSet& props);

void write_infer_json(const InferenceRecord& rec, const std::string& path);
InferenceRecord read_infer_json(const std::string& path);

}  // namespace posekit

#endif
