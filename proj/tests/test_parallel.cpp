#include <random>
#include <vector>

#include "doctest.h"
#include "posekit/conv.hpp"
#include "posekit/eval.hpp"
#include "posekit/inference.hpp"
#include "posekit/learning.hpp"
#include "posekit/parallel.hpp"
#include "posekit/rng.hpp"
#include "posekit/synth.hpp"
#include "test_util.hpp"

using namespace posekit;

namespace {

Tensor random_tensor(int c, int h, int w, uint64_t seed) {
  Tensor t(c, h, w);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.v) v = dist(rng);
  return t;
}

FcnLayer random_layer(int oc, int ic, int k, int stride, bool relu, uint64_t seed) {
  FcnLayer L;
  L.out_ch = oc;
  L.in_ch = ic;
  L.kh = L.kw = k;
  L.stride = stride;
  L.pad = (k - 1) / 2;
  L.relu = relu;
  L.weight.resize(size_t(oc) * size_t(ic) * size_t(k) * size_t(k));
  L.bias.resize(size_t(oc));
  Rng rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 0.2);
  for (double& w : L.weight) w = dist(rng);
  for (double& b : L.bias) b = dist(rng);
  return L;
}

SampleSet synth_set(int count, int first_index, uint64_t seed) {
  SynthConfig cfg;
  cfg.width = 64;
  cfg.height = 64;
  cfg.bone_scale = 0.5;
  cfg.head_radius_mm = 40;
  cfg.torso_radius_mm = 45;
  cfg.seed = seed;
  SampleSet data;
  for (int i = 0; i < count; ++i) {
    SynthSample s = synthesize_sample(cfg, first_index + i);
    data.images.push_back(std::move(s.image));
    data.poses.push_back(std::move(s.pose));
  }
  data.mm_per_pixel = cfg.mm_per_pixel;
  return data;
}

bool same(const FcnParams& a, const FcnParams& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (size_t i = 0; i < a.layers.size(); ++i)
    if (a.layers[i].weight != b.layers[i].weight || a.layers[i].bias != b.layers[i].bias)
      return false;
  return true;
}

bool same(const MatcherParams& a, const MatcherParams& b) {
  if (a.towers.size() != b.towers.size() || a.heads.size() != b.heads.size()) return false;
  for (size_t t = 0; t < a.towers.size(); ++t)
    if (a.towers[t].conv1.weight != b.towers[t].conv1.weight ||
        a.towers[t].conv1.bias != b.towers[t].conv1.bias ||
        a.towers[t].conv2.weight != b.towers[t].conv2.weight ||
        a.towers[t].conv2.bias != b.towers[t].conv2.bias)
      return false;
  for (size_t h = 0; h < a.heads.size(); ++h)
    if (a.heads[h].fc1.w != b.heads[h].fc1.w || a.heads[h].fc1.b != b.heads[h].fc1.b ||
        a.heads[h].fc2.w != b.heads[h].fc2.w || a.heads[h].fc2.b != b.heads[h].fc2.b)
      return false;
  return true;
}

}  // namespace

TEST_CASE("worker count setter clamps to at least one") {
  set_num_threads(0);
  CHECK(num_threads() == 1);
  set_num_threads(-3);
  CHECK(num_threads() == 1);
  set_num_threads(3);
  CHECK(num_threads() == 3);
  set_num_threads(1);
}

TEST_CASE("omp conv kernels match the serial reference bit for bit") {
  struct Shape {
    int ic, oc, h, w, k, stride;
    bool relu;
  };
  const Shape shapes[] = {
      {1, 8, 33, 47, 3, 1, true},
      {8, 16, 64, 64, 3, 2, true},
      {16, 32, 17, 29, 5, 1, false},
      {4, 7, 21, 21, 1, 1, true},
  };

  set_num_threads(4);
  uint64_t seed = 910;
  for (const Shape& s : shapes) {
    const Tensor in = random_tensor(s.ic, s.h, s.w, seed++);
    const FcnLayer L = random_layer(s.oc, s.ic, s.k, s.stride, s.relu, seed++);
    const int oh = conv_out_extent(s.h, s.k, s.stride, L.pad);
    const int ow = conv_out_extent(s.w, s.k, s.stride, L.pad);

    Tensor out_omp(s.oc, oh, ow), out_ref(s.oc, oh, ow);
    conv2d_forward(in, L, out_omp);
    ref::conv2d_forward(in, L, out_ref);
    CHECK(out_omp.v == out_ref.v);

    const Tensor d_pre = random_tensor(s.oc, oh, ow, seed++);
    Tensor di_omp(s.ic, s.h, s.w), di_ref(s.ic, s.h, s.w);
    conv2d_backward_input(L, d_pre, di_omp);
    ref::conv2d_backward_input(L, d_pre, di_ref);
    CHECK(di_omp.v == di_ref.v);

    // the param kernels accumulate, so both start from the same nonzero state
    std::vector<double> dw_omp(L.weight.size(), 0.25), db_omp(L.bias.size(), -1.5);
    std::vector<double> dw_ref = dw_omp, db_ref = db_omp;
    conv2d_backward_params(in, L, d_pre, dw_omp, db_omp);
    ref::conv2d_backward_params(in, L, d_pre, dw_ref, db_ref);
    CHECK(dw_omp == dw_ref);
    CHECK(db_omp == db_ref);
  }
  set_num_threads(1);
}

namespace {

// everything the pipeline computes, captured for cross-thread-count comparison
struct PipelineOut {
  FcnParams fcn;
  MatcherParams matcher;
  StructParams w = StructParams::zeros(default_tree());
  UnaryTable unary;
  std::vector<int> picks;
  double score = 0;
  double objective = 0;
  std::uint64_t pair_ops = 0;
  PdjReport report;
};

PipelineOut run_pipeline(const SampleSet& data) {
  const KinematicTree& tree = default_tree();
  PipelineOut o;

  o.fcn = init_fcn(default_fcn_arch(kPartCount), 902);
  FcnTrainConfig fc;
  fc.epochs = 1;
  fc.seed = 903;
  fcn_train(o.fcn, data, fc);

  std::vector<ProposalSet> proposals(data.size());
  for (size_t i = 0; i < data.size(); ++i)
    proposals[i] = extract_proposals(fcn_forward(data.images[i], o.fcn), data.images[i], 5);

  const TemplateSet templates = cluster_templates(data, kPartCount, 2, 904, 16);
  o.matcher = init_matcher(kPartCount, 905, 16);
  MatcherTrainConfig mc;
  mc.epochs = 1;
  mc.seed = 906;
  matcher_train(o.matcher, data, build_match_pool(data, proposals), templates, mc);

  std::vector<StructInstance> instances(data.size());
  for (size_t i = 0; i < data.size(); ++i) {
    instances[i].props = proposals[i];
    instances[i].unaries =
        build_unary_table(data.images[i], proposals[i], templates, o.matcher);
    instances[i].truth = data.poses[i];
  }
  o.unary = instances[0].unaries;

  StructTrainConfig sc;
  sc.inner_epochs = 1;
  sc.outer_iters = 1;
  sc.step = 0.02;
  sc.seed = 907;
  o.w = cccp_train(instances, tree, data.mm_per_pixel, sc, StructParams::zeros(tree));
  o.objective = struct_objective(o.w, instances, tree, data.mm_per_pixel, 0.001, 0.2);

  DpStats stats;
  const InferResult r =
      dp_infer(instances[0].props, instances[0].unaries, o.w, tree, data.mm_per_pixel, &stats);
  o.picks = r.cfg.pick;
  o.score = r.score;
  o.pair_ops = stats.pair_ops;

  std::vector<PoseConfig> preds;
  for (const StructInstance& in : instances) {
    const InferResult ri = dp_infer(in.props, in.unaries, o.w, tree, data.mm_per_pixel);
    PoseConfig p;
    for (int k = 0; k < kPartCount; ++k) {
      const PartProposal& pp = in.props.per_part[size_t(k)][size_t(ri.cfg.pick[size_t(k)])];
      p.joints.push_back({pp.x, pp.y, pp.z});
    }
    preds.push_back(std::move(p));
  }
  o.report = pdj_curve(preds, data.poses);
  return o;
}

}  // namespace

TEST_CASE("the full pipeline is invariant to the worker count") {
  const SampleSet data = synth_set(4, 0, 901);

  set_num_threads(1);
  const PipelineOut serial = run_pipeline(data);

  for (int threads : {2, 4}) {
    set_num_threads(threads);
    const PipelineOut par = run_pipeline(data);

    CHECK(same(serial.fcn, par.fcn));
    CHECK(same(serial.matcher, par.matcher));
    CHECK(serial.w.omega == par.w.omega);
    CHECK(serial.w.gamma == par.w.gamma);
    CHECK(serial.unary == par.unary);
    CHECK(serial.picks == par.picks);
    CHECK(serial.score == par.score);
    CHECK(serial.objective == par.objective);
    CHECK(serial.pair_ops == par.pair_ops);
    CHECK(serial.report.correct == par.report.correct);
    CHECK(serial.report.overall == par.report.overall);
  }
  set_num_threads(1);
}
