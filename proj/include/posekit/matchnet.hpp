#ifndef POSEKIT_MATCHNET_HPP
#define POSEKIT_MATCHNET_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "posekit/fcn.hpp"
#include "posekit/image.hpp"
#include "posekit/proposals.hpp"
#include "posekit/tensor.hpp"

namespace posekit {

inline constexpr int kPatchSize = 32;
inline constexpr double kDepthScale = 500.0;  // mm per unit of normalized depth

// Raw depth crop centered at (cx, cy), mirror padded at image borders.
Tensor extract_patch_raw(const DepthImage& img, double cx, double cy, int size = kPatchSize);

// Crop normalized by subtracting the center depth and dividing by depth_scale.
Tensor extract_patch(const DepthImage& img, double cx, double cy, int size = kPatchSize,
                     double depth_scale = kDepthScale);

// --- K-means ------------------------------------------------------------------

struct KMeansResult {
  std::vector<std::vector<double>> centers;
  std::vector<int> assign;
  std::vector<double> inertia;  // after each assignment step; non-increasing
};

// Lloyd's algorithm with k-means++ seeding; empty clusters reseed to the point
// farthest from its center.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                    int max_iters = 100, double tol = 1e-6);

// Per-part appearance templates: T cluster centers of normalized patches.
struct TemplateSet {
  int t_per_part = 0;
  int patch = kPatchSize;
  bool normalized = true;
  std::vector<std::vector<Tensor>> templates;  // [part][t]

  int part_count() const { return int(templates.size()); }
};

TemplateSet cluster_templates(const SampleSet& data, int k_parts, int t_per_part,
                              uint64_t seed, int patch = kPatchSize,
                              double depth_scale = kDepthScale);

// "KTPL" magic, u32 K, T, patch, patch, then f32 patch data.
void write_templates(const TemplateSet& t, const std::string& path);
TemplateSet read_templates(const std::string& path);

// --- two-tower matcher ---------------------------------------------------------

struct FcLayer {
  int out = 0, in = 0;
  std::vector<double> w;  // [out][in]
  std::vector<double> b;  // [out]
};

// Feature tower (conv 3x3 1->8, pool 2, conv 3x3 8->8, pool 2, flatten with
// L2 normalization), applied with shared weights to both patches of a pair.
struct TowerParams {
  FcnLayer conv1, conv2;
};

// Metric head over the symmetrized pair embedding [f1+f2, |f1-f2|].
struct HeadParams {
  FcLayer fc1, fc2;  // fc2 has a single logistic output
};

struct MatcherParams {
  int patch = kPatchSize;
  int feat_dim = 0;                 // flattened tower output length
  std::vector<TowerParams> towers;  // 1 = shared across parts, else K
  std::vector<HeadParams> heads;    // K

  bool shared_tower() const { return towers.size() == 1; }
  const TowerParams& tower(int part) const {
    return towers[shared_tower() ? 0 : size_t(part)];
  }
  TowerParams& tower(int part) { return towers[shared_tower() ? 0 : size_t(part)]; }
  int part_count() const { return int(heads.size()); }
  bool all_finite() const;
};

int tower_feature_dim(int patch);

MatcherParams init_matcher(int k_parts, uint64_t seed, int patch = kPatchSize,
                           int hidden = 32, bool shared_tower = true);

// Flattened tower features of one patch.
std::vector<double> tower_features(const Tensor& patch, const TowerParams& tower);

// Head probability from two precomputed feature vectors.
double head_prob(const std::vector<double>& fa, const std::vector<double>& fb,
                 const HeadParams& head);

// phi(a, b): symmetric match probability in (0, 1).
double match_prob(const Tensor& a, const Tensor& b, const MatcherParams& params, int part);

// One labeled training pair for a part's matcher.
struct MatchPair {
  Tensor patch;
  int template_idx = 0;
  int label = 0;  // 1 = same part location, 0 = mismatch
};

// Mean clamped cross-entropy over the pairs.
double matcher_loss(const std::vector<MatchPair>& pairs, const TemplateSet& templates,
                    const MatcherParams& params, int part);

// Gradient of matcher_loss with respect to the part's tower and head. Arrays
// mirror the parameter layout (conv1/conv2 weight and bias, fc1/fc2 ditto).
struct MatcherGrad {
  std::vector<double> tw1, tb1, tw2, tb2;
  std::vector<double> hw1, hb1, hw2, hb2;
};

MatcherGrad matcher_loss_grad(const std::vector<MatchPair>& pairs,
                              const TemplateSet& templates, const MatcherParams& params,
                              int part);

// Axis-aligned box given by center and size, the proposal geometry.
struct Box {
  double x = 0, y = 0;  // center, pixels
  double w = 0, h = 0;
};

double box_iou(const Box& a, const Box& b);

// 1 iff IoU(proposal box, truth box) > 0.5.
int label_pair(const PartProposal& prop, const Box& truth);

// Training pool: per (image, part), the best true-positive proposal and a few
// high-scoring negatives.
struct MatchEntry {
  int image = 0;
  int part = 0;
  PartProposal pos;
  std::vector<PartProposal> negs;
};

std::vector<MatchEntry> build_match_pool(const SampleSet& data,
                                         const std::vector<ProposalSet>& proposals,
                                         int box_w = 10, int box_h = 10);

struct MatcherTrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_pairs = 20;
  int epochs = 10;
  int window = 17;       // proposal window used when the pool is built internally
  int box_w = 10, box_h = 10;
  double depth_scale = kDepthScale;
  uint64_t seed = 1;
};

struct MatcherTrainLog {
  std::vector<double> epoch_loss;  // mean cross-entropy per pair
};

// SGD over (patch, template, label) pairs, positives and negatives 1:1 per
// batch; continues from params. Deterministic given cfg.seed.
void matcher_train(MatcherParams& params, const SampleSet& data,
                   const std::vector<MatchEntry>& pool, const TemplateSet& templates,
                   const MatcherTrainConfig& cfg, MatcherTrainLog* log = nullptr);

// Convenience wrapper: builds proposals with the given detector, then trains a
// fresh matcher on the manifest's train split.
MatcherParams matcher_train(const DatasetManifest& mf, const TemplateSet& templates,
                            const FcnParams& fcn, const MatcherTrainConfig& cfg,
                            MatcherTrainLog* log = nullptr);

// U(b|I) appearance score before the omega weighting: sum over the part's
// templates of match_prob(patch, template). Range (0, T).
double unary_score(const Tensor& patch, const TemplateSet& templates,
                   const MatcherParams& params, int part);

// Scores every proposal of every part; template tower features are computed
// once and reused.
UnaryTable build_unary_table(const DepthImage& img, const ProposalSet& props,
                             const TemplateSet& templates, const MatcherParams& params,
                             double depth_scale = kDepthScale);

// "KMAT" checkpoint: layer dims (u32 x4) and f32 weights/biases per layer,
// towers then heads.
void write_matcher(const MatcherParams& params, const std::string& path);
MatcherParams read_matcher(const std::string& path);

}  // namespace posekit

#endif
