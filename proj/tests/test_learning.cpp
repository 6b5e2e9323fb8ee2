#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "posekit/error.hpp"
#include "posekit/eval.hpp"
#include "posekit/inference.hpp"
#include "posekit/learning.hpp"
#include "posekit/rng.hpp"
#include "posekit/synth.hpp"
#include "test_util.hpp"

using namespace posekit;

namespace {

PoseConfig pose_of(std::initializer_list<Joint> joints) {
  PoseConfig p;
  p.joints.assign(joints);
  return p;
}

// five-joint pose whose default torso endpoints (2 and 4) are 5px apart
PoseConfig torso5_truth() {
  return pose_of({{20, 20, 1000}, {30, 30, 1000}, {0, 0, 1000}, {40, 40, 1000},
                  {3, 4, 1000}});
}

PartProposal at(double x, double y, double z, int part) {
  PartProposal p;
  p.x = x;
  p.y = y;
  p.z = z;
  p.w = 10;
  p.h = 10;
  p.part = part;
  p.score = 0;
  return p;
}

const KinematicTree& chain5() {
  static const KinematicTree tree =
      make_tree({"a", "b", "c", "d", "e"}, {{0, 1}, {1, 2}, {2, 3}, {3, 4}});
  return tree;
}

// Each part has proposal 0 exactly on the truth joint and proposal 1 shifted
// by one shared offset far outside the loss radius. The shared offset keeps
// the deformation features of the all-0 and all-1 configurations identical,
// so the pairwise weights see no gradient and the parts decouple.
StructInstance separable_instance(double u_hi, double u_lo) {
  StructInstance in;
  in.truth = pose_of({{10, 10, 1000}, {20, 12, 1000}, {30, 14, 1000},
                      {40, 16, 1000}, {50, 18, 1000}});
  in.props.n = 2;
  in.props.per_part.resize(5);
  for (int k = 0; k < 5; ++k) {
    const Joint& j = in.truth.joints[size_t(k)];
    in.props.per_part[size_t(k)].push_back(at(j.x, j.y, j.z, k));
    in.props.per_part[size_t(k)].push_back(at(j.x, j.y + 12.0, j.z, k));
    in.unaries.push_back({u_hi, u_lo});
  }
  return in;
}

StructInstance random_instance(Rng& rng) {
  std::uniform_real_distribution<double> pos(0.0, 60.0);
  std::uniform_real_distribution<double> depth(900.0, 1100.0);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  std::uniform_real_distribution<double> jit(-3.0, 3.0);

  StructInstance in;
  in.props.n = 4;
  in.props.per_part.resize(5);
  for (int k = 0; k < 5; ++k) {
    for (int i = 0; i < 4; ++i)
      in.props.per_part[size_t(k)].push_back(at(pos(rng), pos(rng), depth(rng), k));
    in.unaries.push_back({score(rng), score(rng), score(rng), score(rng)});
    in.truth.joints.push_back({10.0 + 10.0 * k + jit(rng), 20.0 + jit(rng), 1000.0});
  }
  return in;
}

StructParams random_params(const KinematicTree& tree, uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> om(0.0, 0.3);
  std::normal_distribution<double> gm(0.0, 0.1);
  StructParams w = StructParams::zeros(tree);
  for (double& v : w.omega) v = om(rng);
  for (auto& g : w.gamma)
    for (double& v : g) v = gm(rng);
  return w;
}

double reg_term(const StructParams& w) {
  double s = 0;
  for (double v : w.omega) s += v * v;
  for (const auto& g : w.gamma)
    for (double v : g) s += v * v;
  return 0.5 * s;
}

}  // namespace

TEST_CASE("config loss gates on mean squared distance over squared torso") {
  const PoseConfig truth = torso5_truth();
  CHECK(config_loss_h(truth, truth, 0.2) == 0);

  // every joint off by 0.3 * torso: normalized MSE 0.09 > 0.04
  PoseConfig far = truth;
  for (Joint& j : far.joints) j.x += 1.5;
  CHECK(config_loss_h(far, truth, 0.2) == 1);

  // every joint off by 0.1 * torso: normalized MSE 0.01 <= 0.04
  PoseConfig near = truth;
  for (Joint& j : near.joints) j.x += 0.5;
  CHECK(config_loss_h(near, truth, 0.2) == 0);

  // depth displacement is not part of the 2D metric
  PoseConfig deep = truth;
  for (Joint& j : deep.joints) j.z += 500.0;
  CHECK(config_loss_h(deep, truth, 0.2) == 0);
}

TEST_CASE("config loss rejects malformed input") {
  const PoseConfig truth = torso5_truth();
  PoseConfig short_pred = truth;
  short_pred.joints.pop_back();
  CHECK_THROWS_AS(config_loss_h(short_pred, truth, 0.2), ContractError);
  CHECK_THROWS_AS(config_loss_h(truth, truth, 0.0), ContractError);

  PoseConfig degenerate = truth;
  degenerate.joints[4] = degenerate.joints[2];
  CHECK_THROWS_AS(config_loss_h(truth, degenerate, 0.2), ContractError);
}

TEST_CASE("latent completion picks the 2D-nearest proposal, ties to the smaller index") {
  StructInstance in = separable_instance(1.0, 0.0);

  Configuration cfg = latent_completion(in.props, in.truth);
  for (int k = 0; k < 5; ++k) CHECK(cfg.pick[size_t(k)] == 0);

  // a large depth error must not repel the completion
  in.props.per_part[0][0].z += 10000.0;
  CHECK(latent_completion(in.props, in.truth).pick[0] == 0);

  // equidistant pair: +1 and -1 in x
  const Joint& j = in.truth.joints[1];
  in.props.per_part[1][0] = at(j.x + 1.0, j.y, j.z, 1);
  in.props.per_part[1][1] = at(j.x - 1.0, j.y, j.z, 1);
  CHECK(latent_completion(in.props, in.truth).pick[1] == 0);

  in.props.per_part[3].clear();
  CHECK_THROWS_AS(latent_completion(in.props, in.truth), ContractError);

  in.truth.joints.pop_back();
  CHECK_THROWS_AS(latent_completion(in.props, in.truth), ContractError);
}

TEST_CASE("zero weights over loss-free proposals give an exactly zero objective") {
  // all proposals inside the loss radius (torso ~20.4px, tau 0.2 -> ~4px)
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) {
    StructInstance in = separable_instance(1.0, 0.0);
    for (auto& list : in.props.per_part)
      list[1].y = list[0].y + 0.5;  // pull the far proposal inside the radius
    data.push_back(std::move(in));
  }
  const StructParams w = StructParams::zeros(chain5());
  CHECK(struct_objective(w, data, chain5(), 10.0, 0.001, 0.2) == 0.0);
}

TEST_CASE("doubling the penalty doubles the data terms exactly") {
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) data.push_back(separable_instance(1.0, 0.0));
  const StructParams w = StructParams::zeros(chain5());

  const double base = struct_objective(w, data, chain5(), 10.0, 0.5, 0.2);
  CHECK(base > 0.0);  // the shifted proposals sit outside the radius
  CHECK(struct_objective(w, data, chain5(), 10.0, 1.0, 0.2) == 2.0 * base);
}

TEST_CASE("objective equals a naive per-image re-summation") {
  Rng rng = make_rng(810);
  std::vector<StructInstance> data;
  for (int i = 0; i < 6; ++i) data.push_back(random_instance(rng));
  const StructParams w = random_params(chain5(), 811);
  const double c = 0.01, tau = 0.3, mmpp = 10.0;

  const std::vector<double> ones(5, 1.0);
  double naive = reg_term(w);
  for (const StructInstance& in : data) {
    const double radius = tau * torso_diameter(in.truth);
    const InferResult aug = dp_infer_loss_augmented(in.props, in.unaries, w, chain5(),
                                                    mmpp, in.truth, ones, radius);
    const Configuration comp = latent_completion(in.props, in.truth);
    naive += c * (aug.score - config_score(comp, in.unaries, in.props, w, chain5(), mmpp));
  }

  CHECK(struct_objective(w, data, chain5(), mmpp, c, tau) ==
        doctest::Approx(naive).epsilon(1e-9));
}

TEST_CASE("a zero step size only projects the initial weights") {
  std::vector<StructInstance> data = {separable_instance(1.0, 0.0)};
  StructParams init = StructParams::zeros(chain5());
  for (size_t k = 0; k < init.omega.size(); ++k) init.omega[k] = 0.25 * double(k);
  for (auto& g : init.gamma) g = {0.5, 0.7, -0.2, 0.9, 0.1, -0.3};

  StructTrainConfig cfg;
  cfg.step = 0.0;
  cfg.outer_iters = 1;
  cfg.inner_epochs = 1;
  const StructParams w = cccp_train(data, chain5(), 10.0, cfg, init);

  CHECK(w.omega == init.omega);
  for (const auto& g : w.gamma) {
    CHECK(g[0] == 0.5);
    CHECK(g[1] == 0.0);  // positive squared components clamp to zero
    CHECK(g[2] == -0.2);
    CHECK(g[3] == 0.0);
    CHECK(g[4] == 0.1);
    CHECK(g[5] == -0.3);
  }
}

TEST_CASE("vanishing penalty drives the weights to the regularizer optimum") {
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) data.push_back(separable_instance(1.0, 0.0));

  StructParams init = StructParams::zeros(chain5());
  for (double& v : init.omega) v = 0.7;

  StructTrainConfig cfg;
  cfg.c = 1e-15;
  cfg.step = 0.5;
  cfg.step_decay = 0.0;
  cfg.inner_epochs = 20;
  cfg.outer_iters = 10;
  const StructParams w = cccp_train(data, chain5(), 10.0, cfg, init);

  for (double v : w.omega) CHECK(std::abs(v) <= 1e-8);
  for (const auto& g : w.gamma)
    for (double v : g) CHECK(std::abs(v) <= 1e-8);
}

TEST_CASE("training the separable set reaches zero surrogate loss") {
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) data.push_back(separable_instance(1.0, 0.0));

  // the first epoch overshoots the margin boundary, the fast decay then keeps
  // every later iterate inside the zero-hinge region
  StructTrainConfig cfg;
  cfg.c = 2.0;
  cfg.step = 0.2;
  cfg.step_decay = 2.0;
  cfg.inner_epochs = 2;
  cfg.outer_iters = 2;
  CccpLog log;
  const StructParams w =
      cccp_train(data, chain5(), 10.0, cfg, StructParams::zeros(chain5()), &log);

  // the hinge term of the final objective vanishes
  const double obj = struct_objective(w, data, chain5(), 10.0, cfg.c, cfg.tau);
  const double hinge = (obj - reg_term(w)) / cfg.c;
  CHECK(hinge >= 0.0);
  CHECK(hinge <= 1e-9);

  // the pairwise weights never saw a gradient on this construction
  for (const auto& g : w.gamma)
    for (double v : g) CHECK(v == 0.0);

  // plain inference now lands every part on the truth proposal
  for (const StructInstance& in : data) {
    const InferResult r = dp_infer(in.props, in.unaries, w, chain5(), 10.0);
    PoseConfig pred;
    for (int k = 0; k < 5; ++k) {
      const PartProposal& p = in.props.per_part[size_t(k)][size_t(r.cfg.pick[size_t(k)])];
      pred.joints.push_back({p.x, p.y, p.z});
    }
    CHECK(config_loss_h(pred, in.truth, cfg.tau) == 0);
  }
}

TEST_CASE("an unbounded loss radius keeps the zero-weight fixed point") {
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) data.push_back(separable_instance(1.0, 0.0));

  StructTrainConfig cfg;
  cfg.c = 2.0;
  cfg.tau = 1e9;  // every proposal is within radius, all losses vanish
  cfg.step = 0.05;
  cfg.inner_epochs = 5;
  cfg.outer_iters = 2;
  CccpLog log;
  const StructParams w =
      cccp_train(data, chain5(), 10.0, cfg, StructParams::zeros(chain5()), &log);

  for (double v : w.omega) CHECK(v == 0.0);
  for (const auto& g : w.gamma)
    for (double v : g) CHECK(v == 0.0);
  for (double obj : log.outer_objective) CHECK(obj == 0.0);
}

TEST_CASE("an unbounded loss radius decays a nonzero start toward zero") {
  std::vector<StructInstance> data;
  for (int i = 0; i < 3; ++i) data.push_back(separable_instance(1.0, 0.0));

  StructParams init = StructParams::zeros(chain5());
  for (double& v : init.omega) v = 0.5;

  StructTrainConfig cfg;
  cfg.c = 2.0;
  cfg.tau = 1e9;
  cfg.step = 0.05;
  cfg.inner_epochs = 5;
  cfg.outer_iters = 3;
  const StructParams w = cccp_train(data, chain5(), 10.0, cfg, init);

  // truth picks stay dominant, so the only force left is the regularizer
  const double obj = struct_objective(w, data, chain5(), 10.0, cfg.c, cfg.tau);
  CHECK(obj == reg_term(w));
  for (double v : w.omega) {
    CHECK(v > 0.0);
    CHECK(v < 0.5);
  }
}

TEST_CASE("outer objective log never increases, across seeds") {
  Rng rng = make_rng(820);
  std::vector<StructInstance> data;
  for (int i = 0; i < 5; ++i) data.push_back(random_instance(rng));

  for (uint64_t seed : {11ull, 12ull, 13ull}) {
    StructTrainConfig cfg;
    cfg.c = 0.01;
    cfg.tau = 0.3;
    cfg.step = 0.02;
    cfg.step_decay = 0.05;
    cfg.inner_epochs = 3;
    cfg.outer_iters = 4;
    cfg.seed = seed;
    CccpLog log;
    const StructParams w =
        cccp_train(data, chain5(), 10.0, cfg, random_params(chain5(), seed * 7), &log);

    REQUIRE(log.outer_objective.size() >= 2);
    for (size_t i = 0; i + 1 < log.outer_objective.size(); ++i) {
      CHECK(std::isfinite(log.outer_objective[i]));
      CHECK(log.outer_objective[i + 1] <= log.outer_objective[i]);
    }
    // projection keeps the squared components non-positive
    for (const auto& g : w.gamma) {
      CHECK(g[1] <= 0.0);
      CHECK(g[3] <= 0.0);
      CHECK(g[5] <= 0.0);
    }
  }
}

TEST_CASE("the logged starting objective matches the standalone evaluation") {
  Rng rng = make_rng(830);
  std::vector<StructInstance> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_instance(rng));

  StructParams init = random_params(chain5(), 831);
  StructTrainConfig cfg;
  cfg.c = 0.01;
  cfg.tau = 0.3;
  cfg.inner_epochs = 1;
  cfg.outer_iters = 1;
  CccpLog log;
  cccp_train(data, chain5(), 10.0, cfg, init, &log);

  // the trainer projects the start before measuring it
  StructParams projected = init;
  for (auto& g : projected.gamma)
    for (int i : {1, 3, 5}) g[size_t(i)] = std::min(0.0, g[size_t(i)]);
  REQUIRE(!log.outer_objective.empty());
  CHECK(log.outer_objective.front() ==
        struct_objective(projected, data, chain5(), 10.0, cfg.c, cfg.tau));
}

TEST_CASE("structural training is deterministic for a fixed seed") {
  Rng rng = make_rng(840);
  std::vector<StructInstance> data;
  for (int i = 0; i < 4; ++i) data.push_back(random_instance(rng));

  StructTrainConfig cfg;
  cfg.c = 0.01;
  cfg.tau = 0.3;
  cfg.step = 0.02;
  cfg.inner_epochs = 2;
  cfg.outer_iters = 2;
  cfg.seed = 99;
  const StructParams a = cccp_train(data, chain5(), 10.0, cfg, random_params(chain5(), 841));
  const StructParams b = cccp_train(data, chain5(), 10.0, cfg, random_params(chain5(), 841));
  CHECK(a.omega == b.omega);
  CHECK(a.gamma == b.gamma);
}

TEST_CASE("structural training rejects bad configuration") {
  std::vector<StructInstance> data = {separable_instance(1.0, 0.0)};
  const StructParams init = StructParams::zeros(chain5());

  StructTrainConfig cfg;
  cfg.c = 0.0;
  CHECK_THROWS_AS(cccp_train(data, chain5(), 10.0, cfg, init), ConfigError);
  cfg = {};
  cfg.tau = -0.1;
  CHECK_THROWS_AS(cccp_train(data, chain5(), 10.0, cfg, init), ConfigError);
  cfg = {};
  cfg.outer_iters = 0;
  CHECK_THROWS_AS(cccp_train(data, chain5(), 10.0, cfg, init), ConfigError);
  cfg = {};
  cfg.step = -1.0;
  CHECK_THROWS_AS(cccp_train(data, chain5(), 10.0, cfg, init), ConfigError);

  cfg = {};
  CHECK_THROWS_AS(cccp_train({}, chain5(), 10.0, cfg, init), ContractError);
  StructParams wrong = StructParams::zeros(chain5());
  wrong.omega.pop_back();
  CHECK_THROWS_AS(cccp_train(data, chain5(), 10.0, cfg, wrong), ContractError);
}

TEST_CASE("stage seeds are distinct across rounds, stages and base seeds") {
  std::set<uint64_t> seen;
  for (int round = 0; round <= 5; ++round)
    for (int stage = 0; stage < 3; ++stage) seen.insert(stage_seed(42, round, stage));
  CHECK(seen.size() == 18);
  CHECK(stage_seed(42, 1, 0) != stage_seed(43, 1, 0));
}

// ---------------------------------------------------------------------------
// joint alternation over a small on-disk dataset

namespace {

bool same(const FcnLayer& a, const FcnLayer& b) {
  return a.weight == b.weight && a.bias == b.bias;
}

bool same(const FcnParams& a, const FcnParams& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (!same(a.layers[i], b.layers[i])) return false;
  return true;
}

bool same(const TemplateSet& a, const TemplateSet& b) {
  if (a.patch != b.patch || a.t_per_part != b.t_per_part ||
      a.templates.size() != b.templates.size())
    return false;
  for (size_t k = 0; k < a.templates.size(); ++k) {
    if (a.templates[k].size() != b.templates[k].size()) return false;
    for (size_t t = 0; t < a.templates[k].size(); ++t)
      if (a.templates[k][t].v != b.templates[k][t].v) return false;
  }
  return true;
}

bool same(const FcLayer& a, const FcLayer& b) { return a.w == b.w && a.b == b.b; }

bool same(const MatcherParams& a, const MatcherParams& b) {
  if (a.patch != b.patch || a.feat_dim != b.feat_dim ||
      a.towers.size() != b.towers.size() || a.heads.size() != b.heads.size())
    return false;
  for (size_t t = 0; t < a.towers.size(); ++t)
    if (!same(a.towers[t].conv1, b.towers[t].conv1) ||
        !same(a.towers[t].conv2, b.towers[t].conv2))
      return false;
  for (size_t h = 0; h < a.heads.size(); ++h)
    if (!same(a.heads[h].fc1, b.heads[h].fc1) || !same(a.heads[h].fc2, b.heads[h].fc2))
      return false;
  return true;
}

JointTrainConfig small_joint_config() {
  JointTrainConfig cfg;
  cfg.fcn.epochs = 2;
  cfg.matcher.epochs = 2;
  cfg.structure.inner_epochs = 2;
  cfg.structure.outer_iters = 1;
  cfg.structure.step = 0.02;
  cfg.rounds = 1;
  cfg.window = 5;
  cfg.t_per_part = 2;
  cfg.seed = 702;
  return cfg;
}

struct JointFixture {
  TempDir dir{"jointset"};
  DatasetManifest mf;
  JointTrainConfig cfg = small_joint_config();
  TrainState state;
};

const JointFixture& joint_fixture() {
  static const JointFixture fx = [] {
    JointFixture f;
    SynthConfig s;
    s.subjects = 3;
    s.poses_per_subject = 2;
    s.width = 64;
    s.height = 64;
    s.bone_scale = 0.5;
    s.head_radius_mm = 40;
    s.torso_radius_mm = 45;
    s.seed = 701;
    f.mf = synthesize_dataset(s, f.dir.file("data"), 0.34);
    f.state = joint_train(f.mf, f.cfg);
    return f;
  }();
  return fx;
}

}  // namespace

TEST_CASE("one round of joint training equals the three stage trainers in sequence") {
  const JointFixture& fx = joint_fixture();
  const JointTrainConfig& cfg = fx.cfg;
  const KinematicTree& tree = default_tree();

  const SampleSet data = load_split(fx.mf, "train");
  REQUIRE(data.size() == 4);

  // every stage hand-off rounds through checkpoint precision, exactly as a
  // run that saved and reloaded the bundle between stages would see it
  TrainState manual;
  manual.arch = cfg.arch;
  manual.fcn = init_fcn(cfg.arch, stage_seed(cfg.seed, 0, 0));
  manual.templates =
      cluster_templates(data, kPartCount, cfg.t_per_part, stage_seed(cfg.seed, 0, 1),
                        cfg.patch, cfg.matcher.depth_scale);
  manual.matcher = init_matcher(kPartCount, stage_seed(cfg.seed, 0, 2), cfg.patch);
  manual.w = StructParams::zeros(tree);
  quantize_state(manual);

  FcnTrainConfig fc = cfg.fcn;
  fc.seed = stage_seed(cfg.seed, 1, 0);
  fcn_train(manual.fcn, data, fc);
  quantize_state(manual);

  std::vector<ProposalSet> proposals(data.size());
  for (size_t i = 0; i < data.size(); ++i)
    proposals[i] = extract_proposals(fcn_forward(data.images[i], manual.fcn), data.images[i],
                                     cfg.window, cfg.box_w, cfg.box_h);

  MatcherTrainConfig mc = cfg.matcher;
  mc.seed = stage_seed(cfg.seed, 1, 1);
  mc.box_w = cfg.box_w;
  mc.box_h = cfg.box_h;
  matcher_train(manual.matcher, data,
                build_match_pool(data, proposals, cfg.box_w, cfg.box_h), manual.templates,
                mc);
  quantize_state(manual);

  std::vector<StructInstance> instances(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    instances[i].props = proposals[i];
    instances[i].unaries = build_unary_table(data.images[i], instances[i].props,
                                             manual.templates, manual.matcher, mc.depth_scale);
    instances[i].truth = data.poses[i];
  }
  StructTrainConfig sc = cfg.structure;
  sc.seed = stage_seed(cfg.seed, 1, 2);
  manual.w = cccp_train(instances, tree, data.mm_per_pixel, sc, std::move(manual.w));
  quantize_state(manual);

  CHECK(same(fx.state.fcn, manual.fcn));
  CHECK(same(fx.state.templates, manual.templates));
  CHECK(same(fx.state.matcher, manual.matcher));
  CHECK(fx.state.w.omega == manual.w.omega);
  CHECK(fx.state.w.gamma == manual.w.gamma);
  CHECK(fx.state.rounds_run == 1);
  CHECK(!fx.state.converged);
}

TEST_CASE("joint training logs one row per stage plus the round metrics") {
  const TrainState& st = joint_fixture().state;
  REQUIRE(st.log.size() == 5);
  CHECK(st.log[0].stage == "fcn");
  CHECK(st.log[0].metric == "loss");
  CHECK(st.log[1].stage == "matcher");
  CHECK(st.log[2].stage == "struct");
  CHECK(st.log[2].metric == "objective");
  CHECK(st.log[3].metric == "fstar");
  CHECK(st.log[4].metric == "pdj020");
  for (const RoundLog& row : st.log) {
    CHECK(row.round == 1);
    CHECK(std::isfinite(row.value));
  }
  CHECK(st.log[4].value >= 0.0);
  CHECK(st.log[4].value <= 1.0);
}

TEST_CASE("zero learning rates leave the state at its initialization") {
  const JointFixture& fx = joint_fixture();
  JointTrainConfig cfg = fx.cfg;
  cfg.fcn.lr = 0.0;
  cfg.fcn.epochs = 1;
  cfg.matcher.lr = 0.0;
  cfg.matcher.epochs = 1;
  cfg.structure.step = 0.0;
  cfg.structure.inner_epochs = 1;
  cfg.rounds = 4;

  const TrainState st = joint_train(fx.mf, cfg);

  TrainState init;
  init.fcn = init_fcn(cfg.arch, stage_seed(cfg.seed, 0, 0));
  init.matcher = init_matcher(kPartCount, stage_seed(cfg.seed, 0, 2), cfg.patch);
  init.w = StructParams::zeros(default_tree());
  quantize_state(init);

  CHECK(st.converged);
  CHECK(st.rounds_run == 2);  // identical rounds settle at the first comparison
  CHECK(same(st.fcn, init.fcn));
  CHECK(same(st.matcher, init.matcher));
  CHECK(st.w.omega == init.w.omega);
  CHECK(st.w.gamma == init.w.gamma);
}

TEST_CASE("joint training validates its inputs up front") {
  DatasetManifest wrong;
  wrong.k = 5;
  CHECK_THROWS_AS(joint_train(wrong, small_joint_config()), ContractError);

  DatasetManifest empty;
  empty.k = kPartCount;
  JointTrainConfig cfg = small_joint_config();
  CHECK_THROWS_AS(joint_train(empty, cfg), ContractError);

  cfg.rounds = 0;
  CHECK_THROWS_AS(joint_train(empty, cfg), ConfigError);
  cfg = small_joint_config();
  cfg.converge_rel = 0.0;
  CHECK_THROWS_AS(joint_train(empty, cfg), ConfigError);
}

TEST_CASE("a bundle round-trips through its directory") {
  const JointFixture& fx = joint_fixture();
  TempDir out("bundle");

  save_bundle(fx.state, fx.cfg, out.file("model"));
  const TrainState loaded = load_bundle(out.file("model"));

  REQUIRE(loaded.arch.layers.size() == fx.cfg.arch.layers.size());
  for (size_t i = 0; i < loaded.arch.layers.size(); ++i) {
    CHECK(loaded.arch.layers[i].out_ch == fx.cfg.arch.layers[i].out_ch);
    CHECK(loaded.arch.layers[i].kernel == fx.cfg.arch.layers[i].kernel);
    CHECK(loaded.arch.layers[i].stride == fx.cfg.arch.layers[i].stride);
    CHECK(loaded.arch.layers[i].relu == fx.cfg.arch.layers[i].relu);
  }
  CHECK(loaded.rounds_run == fx.state.rounds_run);
  CHECK(loaded.converged == fx.state.converged);

  // weights are stored single-precision; the load is that rounding exactly
  for (size_t k = 0; k < loaded.w.omega.size(); ++k)
    CHECK(loaded.w.omega[k] == double(float(fx.state.w.omega[k])));

  // the trained state is already checkpoint-exact, so the round trip is lossless
  CHECK(same(loaded.fcn, fx.state.fcn));
  CHECK(same(loaded.templates, fx.state.templates));
  CHECK(same(loaded.matcher, fx.state.matcher));
  CHECK(loaded.w.omega == fx.state.w.omega);
  CHECK(loaded.w.gamma == fx.state.w.gamma);

  // a second save of the loaded state reproduces the files byte for byte
  save_bundle(loaded, fx.cfg, out.file("again"));
  for (const char* name : {"fcn.kfcn", "templates.ktpl", "matcher.kmat", "struct.kstr"}) {
    std::ifstream a(out.file("model") + "/" + name, std::ios::binary);
    std::ifstream b(out.file("again") + "/" + name, std::ios::binary);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    CHECK(sa.str() == sb.str());
    CHECK(!sa.str().empty());
  }

  CHECK_THROWS_AS(load_bundle(out.file("missing")), IoError);
}

TEST_CASE("the training log CSV carries round, stage, metric and value") {
  const std::vector<RoundLog> log = {
      {1, "fcn", "loss", 0.5},
      {1, "round", "fstar", -2.25},
      {2, "struct", "objective", 1e-3},
  };
  TempDir dir("trainlog");
  write_train_log_csv(log, dir.file("log.csv"));

  std::ifstream is(dir.file("log.csv"));
  std::string line;
  std::getline(is, line);
  CHECK(line == "round,stage,metric,value");
  std::getline(is, line);
  CHECK(line == "1,fcn,loss,0.5");
  std::getline(is, line);
  CHECK(line == "1,round,fstar,-2.25");
  std::getline(is, line);
  CHECK(line.rfind("2,struct,objective,", 0) == 0);
  CHECK(std::stod(line.substr(line.rfind(',') + 1)) == 1e-3);
  CHECK(!std::getline(is, line));
}
