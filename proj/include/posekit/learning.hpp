#ifndef POSEKIT_LEARNING_HPP
#define POSEKIT_LEARNING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "posekit/eval.hpp"
#include "posekit/fcn.hpp"
#include "posekit/kinematics.hpp"
#include "posekit/matchnet.hpp"
#include "posekit/proposals.hpp"

namespace posekit {

// Whole-configuration miss indicator: mean squared 2D joint distance,
// normalized by the squared torso diameter, thresholded at tau squared.
int config_loss_h(const PoseConfig& pred, const PoseConfig& truth, double tau,
                  const TorsoEndpoints& ends = {});

// The proposal configuration nearest the ground truth, per part by 2D
// distance, ties to the smallest index. Stands in for the exact truth
// coordinates, which are generally not among the proposals.
Configuration latent_completion(const ProposalSet& props, const PoseConfig& truth);

// Everything structural training needs for one image, precomputed once.
struct StructInstance {
  ProposalSet props;
  UnaryTable unaries;
  PoseConfig truth;
};

// Regularized structured hinge: 1/2 |w|^2 plus C times the sum over images
// of max_g [w.F(g) + L(g)] - w.F(completion), where L adds 1 per part whose
// pick is farther than tau * torso diameter from the truth joint.
double struct_objective(const StructParams& w, const std::vector<StructInstance>& data,
                        const KinematicTree& tree, double mm_per_pixel, double c,
                        double tau, const TorsoEndpoints& ends = {});

struct StructTrainConfig {
  double c = 0.001;
  double tau = 0.2;
  int outer_iters = 10;    // CCCP alternations
  int inner_epochs = 20;   // subgradient passes per alternation
  double step = 0.05;      // eta_t = step / (1 + step_decay * t)
  double step_decay = 0.02;
  int eval_cap = 0;        // images used for objective tracking, 0 = all
  uint64_t seed = 1;
  TorsoEndpoints ends;
};

struct CccpLog {
  std::vector<double> outer_objective;  // element 0 is the starting objective
};

// Latent-SSVM training: alternates latent completion with projected
// subgradient descent on the convexified objective. The projection keeps the
// squared-displacement components of every gamma non-positive. Tracks the
// best iterate, so the outer objective sequence never increases. Deterministic
// given cfg.seed.
StructParams cccp_train(const std::vector<StructInstance>& data, const KinematicTree& tree,
                        double mm_per_pixel, const StructTrainConfig& cfg,
                        StructParams init, CccpLog* log = nullptr);

// --- multi-task alternation ---------------------------------------------------

struct RoundLog {
  int round = 0;
  std::string stage;
  std::string metric;
  double value = 0;
};

struct JointTrainConfig {
  FcnArch arch = default_fcn_arch(kPartCount);
  FcnTrainConfig fcn;
  MatcherTrainConfig matcher;
  StructTrainConfig structure;
  int rounds = 5;
  double converge_rel = 1e-3;  // on the mean best-configuration score
  int t_per_part = 10;
  int patch = kPatchSize;
  int window = 17;
  int box_w = 10, box_h = 10;
  int eval_cap = 0;  // train images used for the convergence metric, 0 = all
  uint64_t seed = 1;
};

struct TrainState {
  FcnArch arch;
  FcnParams fcn;
  TemplateSet templates;
  MatcherParams matcher;
  StructParams w;
  std::vector<RoundLog> log;
  bool converged = false;
  int rounds_run = 0;
};

// Seed for one stage of one round; stage 0 = detector, 1 = matcher,
// 2 = structure. Round 0 seeds the initial detector / templates / matcher in
// that stage order. Exposed so tests can replay a round stage by stage.
uint64_t stage_seed(uint64_t seed, int round, int stage);

// Rounds every parameter to its checkpoint (f32) value in place. Stage
// boundaries are checkpoint boundaries: joint_train applies this after
// initialization and after every stage, so a stage resumed from disk
// continues bit-for-bit like one resumed from memory.
void quantize_state(TrainState& st);

// One round = detector epochs, fresh proposals, matcher epochs, structural
// CCCP, in that order; rounds repeat until the mean best-configuration score
// over the train split settles or the cap is reached.
TrainState joint_train(const DatasetManifest& mf, const JointTrainConfig& cfg);

void write_train_log_csv(const std::vector<RoundLog>& log, const std::string& path);

// Checkpoint bundle: fcn.kfcn, templates.ktpl, matcher.kmat, struct.kstr and
// meta.json (architecture, geometry, hyperparameters) in one directory.
void save_bundle(const TrainState& state, const JointTrainConfig& cfg,
                 const std::string& dir);
TrainState load_bundle(const std::string& dir);

}  // namespace posekit

#endif
