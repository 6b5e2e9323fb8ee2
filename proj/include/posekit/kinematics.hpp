#ifndef POSEKIT_KINEMATICS_HPP
#define POSEKIT_KINEMATICS_HPP

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "posekit/proposals.hpp"

namespace posekit {

// Rooted kinematic tree over body parts. Edges are stored (parent, child);
// neighbor sets are derived. Construction validates connectivity, acyclicity
// and the single root.
struct KinematicTree {
  std::vector<std::string> names;
  std::vector<std::pair<int, int>> edges;  // (parent, child)
  int root = 0;

  // derived on construction
  std::vector<int> parent;                 // -1 at root
  std::vector<std::vector<int>> children;  // by node
  std::vector<std::vector<int>> neighbors; // Ω_k

  int part_count() const { return int(names.size()); }
  int edge_count() const { return int(edges.size()); }

  // Index into edges for the undirected pair {k, m}; ContractError if no edge.
  int edge_index(int k, int m) const;
};

KinematicTree make_tree(std::vector<std::string> names, std::vector<std::pair<int, int>> edges);
const KinematicTree& default_tree();

void write_tree_json(const KinematicTree& tree, const std::string& path);
KinematicTree read_tree_json(const std::string& path);

// 3D displacement feature [dx, dx^2, dy, dy^2, dz, dz^2]; dx, dy in pixels,
// dz in pixel-equivalents (mm divided by mm_per_pixel).
using DeformFeature = std::array<double, 6>;

DeformFeature deform_feature(const PartProposal& parent, const PartProposal& child,
                             double mm_per_pixel);

// Inference weights: one scalar per part for the unary term, one 6-vector per
// tree edge (parent->child direction) for the pairwise term.
struct StructParams {
  std::vector<double> omega;                 // size K
  std::vector<std::array<double, 6>> gamma;  // size E, in tree edge order

  static StructParams zeros(const KinematicTree& tree);
  bool all_finite() const;
};

// KSTR checkpoint: "KSTR" magic, u32 K, u32 edge count, f32 omega, then f32
// gamma per edge in tree edge order.
void write_struct_params(const StructParams& w, const std::string& path);
StructParams read_struct_params(const std::string& path);

double pairwise_term(const KinematicTree& tree, const StructParams& w, int k, int m,
                     const PartProposal& prop_k, const PartProposal& prop_m,
                     double mm_per_pixel);

// One chosen proposal index per part.
struct Configuration {
  std::vector<int> pick;

  bool operator==(const Configuration& o) const { return pick == o.pick; }
};

// F(cfg) = sum_k omega_k * unary(k, pick(k)) + sum_edges gamma_e . psi(parent, child),
// each undirected edge counted once in its stored direction.
double config_score(const Configuration& cfg, const UnaryTable& unaries,
                    const ProposalSet& props, const StructParams& w,
                    const KinematicTree& tree, double mm_per_pixel);

}  // namespace posekit

#endif
