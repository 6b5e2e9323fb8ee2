#include "posekit/learning.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>

#include "json.hpp"
#include "posekit/error.hpp"
#include "posekit/inference.hpp"
#include "posekit/rng.hpp"

namespace posekit {

namespace {

// feature vector paired with StructParams: dot(w, features) == config_score
struct FeatureVec {
  std::vector<double> omega;
  std::vector<std::array<double, 6>> gamma;
};

FeatureVec config_features(const Configuration& cfg, const UnaryTable& unaries,
                           const ProposalSet& props, const KinematicTree& tree,
                           double mm_per_pixel) {
  FeatureVec f;
  f.omega.resize(size_t(tree.part_count()));
  for (int k = 0; k < tree.part_count(); ++k)
    f.omega[size_t(k)] = unaries[size_t(k)][size_t(cfg.pick[size_t(k)])];
  f.gamma.resize(size_t(tree.edge_count()));
  for (int e = 0; e < tree.edge_count(); ++e) {
    const auto [p, c] = tree.edges[size_t(e)];
    const PartProposal& pp = props.per_part[size_t(p)][size_t(cfg.pick[size_t(p)])];
    const PartProposal& pc = props.per_part[size_t(c)][size_t(cfg.pick[size_t(c)])];
    f.gamma[size_t(e)] = deform_feature(pp, pc, mm_per_pixel);
  }
  return f;
}

void project_gamma(StructParams& w) {
  for (auto& g : w.gamma)
    for (int i : {1, 3, 5}) g[size_t(i)] = std::min(0.0, g[size_t(i)]);
}

double weight_norm_sq(const StructParams& w) {
  double s = 0;
  for (double v : w.omega) s += v * v;
  for (const auto& g : w.gamma)
    for (double v : g) s += v * v;
  return s;
}

void check_struct_config(const StructTrainConfig& cfg) {
  if (cfg.c <= 0) throw ConfigError("penalty C must be positive");
  if (cfg.tau <= 0) throw ConfigError("threshold tau must be positive");
  if (cfg.outer_iters < 1 || cfg.inner_epochs < 1)
    throw ConfigError("iteration caps must be at least 1");
  if (cfg.step < 0 || cfg.step_decay < 0)
    throw ConfigError("step size and decay must be non-negative");
}

}  // namespace

int config_loss_h(const PoseConfig& pred, const PoseConfig& truth, double tau,
                  const TorsoEndpoints& ends) {
  if (pred.joints.size() != truth.joints.size())
    throw ContractError("prediction / truth joint counts differ");
  if (pred.joints.empty()) throw ContractError("empty pose");
  if (tau <= 0) throw ContractError("threshold tau must be positive");
  const double torso = torso_diameter(truth, ends);
  double mse = 0;
  for (size_t j = 0; j < truth.joints.size(); ++j) {
    const double dx = pred.joints[j].x - truth.joints[j].x;
    const double dy = pred.joints[j].y - truth.joints[j].y;
    mse += dx * dx + dy * dy;
  }
  mse /= double(truth.joints.size());
  return mse / (torso * torso) <= tau * tau ? 0 : 1;
}

Configuration latent_completion(const ProposalSet& props, const PoseConfig& truth) {
  if (size_t(props.part_count()) != truth.joints.size())
    throw ContractError("proposal set / truth part counts differ");
  Configuration cfg;
  cfg.pick.resize(truth.joints.size());
  for (size_t k = 0; k < truth.joints.size(); ++k) {
    const auto& list = props.per_part[k];
    if (list.empty()) throw ContractError("part " + std::to_string(k) + " has no proposals");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < list.size(); ++i) {
      const double d =
          std::hypot(list[i].x - truth.joints[k].x, list[i].y - truth.joints[k].y);
      if (d < best_d) {  // strict: the smallest index wins a tie
        best_d = d;
        best = int(i);
      }
    }
    cfg.pick[k] = best;
  }
  return cfg;
}

double struct_objective(const StructParams& w, const std::vector<StructInstance>& data,
                        const KinematicTree& tree, double mm_per_pixel, double c,
                        double tau, const TorsoEndpoints& ends) {
  if (tau <= 0) throw ContractError("threshold tau must be positive");
  const std::vector<double> ones(size_t(tree.part_count()), 1.0);
  std::vector<double> terms(data.size(), 0.0);
  std::string error;

#pragma omp parallel for schedule(dynamic)
  for (int l = 0; l < int(data.size()); ++l) {
    try {
      const StructInstance& in = data[size_t(l)];
      const double radius = tau * torso_diameter(in.truth, ends);
      const InferResult aug = dp_infer_loss_augmented(in.props, in.unaries, w, tree,
                                                      mm_per_pixel, in.truth, ones, radius);
      const Configuration comp = latent_completion(in.props, in.truth);
      terms[size_t(l)] =
          aug.score - config_score(comp, in.unaries, in.props, w, tree, mm_per_pixel);
    } catch (const std::exception& ex) {
#pragma omp critical
      if (error.empty()) error = ex.what();
    }
  }
  if (!error.empty()) throw NumericError("structured objective: " + error);

  double data_sum = 0;
  for (double t : terms) data_sum += t;
  return 0.5 * weight_norm_sq(w) + c * data_sum;
}

StructParams cccp_train(const std::vector<StructInstance>& data, const KinematicTree& tree,
                        double mm_per_pixel, const StructTrainConfig& cfg,
                        StructParams init, CccpLog* log) {
  check_struct_config(cfg);
  if (data.empty()) throw ContractError("structural training needs at least one image");
  const int k = tree.part_count();
  if (int(init.omega.size()) != k || int(init.gamma.size()) != tree.edge_count())
    throw ContractError("initial weights / tree size mismatch");
  const size_t n = data.size();

  // latent completions depend only on geometry, so one pass fixes them for
  // every alternation; their features form the truth side of each subgradient
  std::vector<FeatureVec> comp_feat(n);
  std::vector<Configuration> comp(n);
  std::vector<double> radius(n);
  for (size_t l = 0; l < n; ++l) {
    comp[l] = latent_completion(data[l].props, data[l].truth);
    comp_feat[l] =
        config_features(comp[l], data[l].unaries, data[l].props, tree, mm_per_pixel);
    radius[l] = cfg.tau * torso_diameter(data[l].truth, cfg.ends);
  }
  const std::vector<double> ones(size_t(k), 1.0);

  // objective bookkeeping runs on a fixed subset so iterations compare like
  // with like even when eval_cap trims the full set
  std::vector<size_t> eval_idx(n);
  std::iota(eval_idx.begin(), eval_idx.end(), size_t(0));
  if (cfg.eval_cap > 0 && size_t(cfg.eval_cap) < n) {
    Rng rng = make_rng(cfg.seed, 0xE7A1);
    std::shuffle(eval_idx.begin(), eval_idx.end(), rng);
    eval_idx.resize(size_t(cfg.eval_cap));
  }
  const auto eval_obj = [&](const StructParams& w) {
    std::vector<double> terms(eval_idx.size(), 0.0);
    std::string error;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(eval_idx.size()); ++i) {
      try {
        const size_t l = eval_idx[size_t(i)];
        const InferResult aug =
            dp_infer_loss_augmented(data[l].props, data[l].unaries, w, tree, mm_per_pixel,
                                    data[l].truth, ones, radius[l]);
        terms[size_t(i)] = aug.score - config_score(comp[l], data[l].unaries, data[l].props,
                                                    w, tree, mm_per_pixel);
      } catch (const std::exception& ex) {
#pragma omp critical
        if (error.empty()) error = ex.what();
      }
    }
    if (!error.empty()) throw NumericError("objective evaluation: " + error);
    double s = 0;
    for (double t : terms) s += t;
    return 0.5 * weight_norm_sq(w) + cfg.c * s;
  };

  StructParams w = std::move(init);
  project_gamma(w);
  StructParams best_w = w;
  double best_obj = eval_obj(w);
  if (log) log->outer_objective.push_back(best_obj);

  double prev_outer = best_obj;
  int global_t = 0;
  for (int outer = 0; outer < cfg.outer_iters; ++outer) {
    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
      Rng rng = make_rng(cfg.seed, 0xCC70000ull + uint64_t(outer) * 1024 + uint64_t(epoch));
      std::vector<size_t> order(n);
      std::iota(order.begin(), order.end(), size_t(0));
      std::shuffle(order.begin(), order.end(), rng);
      const double eta = cfg.step / (1.0 + cfg.step_decay * double(global_t));
      ++global_t;

      for (size_t l : order) {
        const InferResult aug =
            dp_infer_loss_augmented(data[l].props, data[l].unaries, w, tree, mm_per_pixel,
                                    data[l].truth, ones, radius[l]);
        const FeatureVec hat =
            config_features(aug.cfg, data[l].unaries, data[l].props, tree, mm_per_pixel);
        // one-image subgradient of the regularized hinge
        for (int p = 0; p < k; ++p)
          w.omega[size_t(p)] -=
              eta * (w.omega[size_t(p)] / double(n) +
                     cfg.c * (hat.omega[size_t(p)] - comp_feat[l].omega[size_t(p)]));
        for (int e = 0; e < tree.edge_count(); ++e)
          for (int i = 0; i < 6; ++i)
            w.gamma[size_t(e)][size_t(i)] -=
                eta * (w.gamma[size_t(e)][size_t(i)] / double(n) +
                       cfg.c * (hat.gamma[size_t(e)][size_t(i)] -
                                comp_feat[l].gamma[size_t(e)][size_t(i)]));
        project_gamma(w);
      }
      const double obj = eval_obj(w);
      if (!std::isfinite(obj))
        throw NumericError("structural training diverged at alternation " +
                           std::to_string(outer));
      if (obj < best_obj) {
        best_obj = obj;
        best_w = w;
      }
    }

    if (best_obj > prev_outer + 1e-9)
      throw NumericError("CCCP objective rose from " + std::to_string(prev_outer) + " to " +
                         std::to_string(best_obj) + " at alternation " +
                         std::to_string(outer) + "; the descent step is broken");
    if (log) log->outer_objective.push_back(best_obj);
    const bool settled =
        std::abs(prev_outer - best_obj) <= 1e-6 * std::max(std::abs(prev_outer), 1e-12);
    prev_outer = best_obj;
    if (settled) break;
  }
  return best_w;
}

uint64_t stage_seed(uint64_t seed, int round, int stage) {
  return derive_seed(seed, 0xA17000ull + uint64_t(round) * 8 + uint64_t(stage));
}

namespace {

void round_f32(std::vector<double>& v) {
  for (double& x : v) x = double(float(x));
}

void round_f32(FcnLayer& l) {
  round_f32(l.weight);
  round_f32(l.bias);
}

}  // namespace

void quantize_state(TrainState& st) {
  for (FcnLayer& l : st.fcn.layers) round_f32(l);
  for (std::vector<Tensor>& part : st.templates.templates)
    for (Tensor& t : part) round_f32(t.v);
  for (TowerParams& t : st.matcher.towers) {
    round_f32(t.conv1);
    round_f32(t.conv2);
  }
  for (HeadParams& h : st.matcher.heads) {
    round_f32(h.fc1.w);
    round_f32(h.fc1.b);
    round_f32(h.fc2.w);
    round_f32(h.fc2.b);
  }
  round_f32(st.w.omega);
  for (std::array<double, 6>& g : st.w.gamma)
    for (double& x : g) x = double(float(x));
}

TrainState joint_train(const DatasetManifest& mf, const JointTrainConfig& cfg) {
  if (mf.k != kPartCount)
    throw ContractError("joint training expects the " + std::to_string(kPartCount) +
                        "-part scheme, manifest has " + std::to_string(mf.k));
  if (cfg.rounds < 1) throw ConfigError("round cap must be at least 1");
  if (cfg.converge_rel <= 0) throw ConfigError("convergence threshold must be positive");

  const SampleSet data = load_split(mf, "train");
  if (data.size() == 0) throw ContractError("train split is empty");
  const KinematicTree& tree = default_tree();

  // round 0 is initialization; rounds 1.. are the alternation proper
  TrainState st;
  st.arch = cfg.arch;
  st.fcn = init_fcn(cfg.arch, stage_seed(cfg.seed, 0, 0));
  st.templates = cluster_templates(data, kPartCount, cfg.t_per_part,
                                   stage_seed(cfg.seed, 0, 1), cfg.patch,
                                   cfg.matcher.depth_scale);
  st.matcher = init_matcher(kPartCount, stage_seed(cfg.seed, 0, 2), cfg.patch);
  st.w = StructParams::zeros(tree);
  quantize_state(st);

  // convergence bookkeeping uses one fixed subset across rounds
  std::vector<size_t> eval_idx(data.size());
  std::iota(eval_idx.begin(), eval_idx.end(), size_t(0));
  if (cfg.eval_cap > 0 && size_t(cfg.eval_cap) < data.size()) {
    Rng rng = make_rng(cfg.seed, 0xEA7);
    std::shuffle(eval_idx.begin(), eval_idx.end(), rng);
    eval_idx.resize(size_t(cfg.eval_cap));
  }

  double prev_fstar = 0;
  for (int round = 1; round <= cfg.rounds; ++round) {
    st.rounds_run = round;

    FcnTrainConfig fc = cfg.fcn;
    fc.seed = stage_seed(cfg.seed, round, 0);
    FcnTrainLog flog;
    try {
      fcn_train(st.fcn, data, fc, &flog);
    } catch (const std::exception& ex) {
      throw NumericError("round " + std::to_string(round) + " detector stage: " + ex.what());
    }
    st.log.push_back(
        {round, "fcn", "loss", flog.epoch_loss.empty() ? 0.0 : flog.epoch_loss.back()});
    quantize_state(st);

    // fresh proposals from the updated detector feed both later stages
    std::vector<ProposalSet> proposals(data.size());
    {
      std::string error;
#pragma omp parallel for schedule(dynamic)
      for (int i = 0; i < int(data.size()); ++i) {
        try {
          const HeatMapStack maps = fcn_forward(data.images[size_t(i)], st.fcn);
          proposals[size_t(i)] = extract_proposals(maps, data.images[size_t(i)], cfg.window,
                                                   cfg.box_w, cfg.box_h);
        } catch (const std::exception& ex) {
#pragma omp critical
          if (error.empty()) error = ex.what();
        }
      }
      if (!error.empty())
        throw NumericError("round " + std::to_string(round) + " proposal stage: " + error);
    }

    MatcherTrainConfig mc = cfg.matcher;
    mc.seed = stage_seed(cfg.seed, round, 1);
    mc.box_w = cfg.box_w;
    mc.box_h = cfg.box_h;
    MatcherTrainLog mlog;
    try {
      const std::vector<MatchEntry> pool =
          build_match_pool(data, proposals, cfg.box_w, cfg.box_h);
      matcher_train(st.matcher, data, pool, st.templates, mc, &mlog);
    } catch (const std::exception& ex) {
      throw NumericError("round " + std::to_string(round) + " matcher stage: " + ex.what());
    }
    st.log.push_back(
        {round, "matcher", "loss", mlog.epoch_loss.empty() ? 0.0 : mlog.epoch_loss.back()});
    quantize_state(st);

    std::vector<StructInstance> instances(data.size());
    {
      std::string error;
#pragma omp parallel for schedule(dynamic)
      for (int i = 0; i < int(data.size()); ++i) {
        try {
          StructInstance& in = instances[size_t(i)];
          in.props = std::move(proposals[size_t(i)]);
          in.unaries = build_unary_table(data.images[size_t(i)], in.props, st.templates,
                                         st.matcher, mc.depth_scale);
          in.truth = data.poses[size_t(i)];
        } catch (const std::exception& ex) {
#pragma omp critical
          if (error.empty()) error = ex.what();
        }
      }
      if (!error.empty())
        throw NumericError("round " + std::to_string(round) + " unary stage: " + error);
    }

    StructTrainConfig sc = cfg.structure;
    sc.seed = stage_seed(cfg.seed, round, 2);
    CccpLog clog;
    try {
      st.w = cccp_train(instances, tree, data.mm_per_pixel, sc, std::move(st.w), &clog);
    } catch (const std::exception& ex) {
      throw NumericError("round " + std::to_string(round) + " structure stage: " + ex.what());
    }
    st.log.push_back({round, "struct", "objective", clog.outer_objective.back()});
    quantize_state(st);

    // round metric: mean best-configuration score and PDJ(0.2) on the subset
    double fstar = 0;
    std::vector<PoseConfig> preds(eval_idx.size()), truths(eval_idx.size());
    {
      std::vector<double> scores(eval_idx.size(), 0.0);
      std::string error;
#pragma omp parallel for schedule(dynamic)
      for (int i = 0; i < int(eval_idx.size()); ++i) {
        try {
          const StructInstance& in = instances[eval_idx[size_t(i)]];
          const InferResult r = dp_infer(in.props, in.unaries, st.w, tree, data.mm_per_pixel);
          scores[size_t(i)] = r.score;
          PoseConfig p;
          for (int v = 0; v < kPartCount; ++v) {
            const PartProposal& pr =
                in.props.per_part[size_t(v)][size_t(r.cfg.pick[size_t(v)])];
            p.joints.push_back({pr.x, pr.y, pr.z});
          }
          preds[size_t(i)] = std::move(p);
          truths[size_t(i)] = in.truth;
        } catch (const std::exception& ex) {
#pragma omp critical
          if (error.empty()) error = ex.what();
        }
      }
      if (!error.empty())
        throw NumericError("round " + std::to_string(round) + " metric stage: " + error);
      for (double s : scores) fstar += s;
      fstar /= double(eval_idx.size());
    }
    st.log.push_back({round, "round", "fstar", fstar});
    st.log.push_back(
        {round, "round", "pdj020", pdj(preds, truths, {0.2}, sc.ends).overall[0]});

    if (round >= 2) {
      const double rel = std::abs(fstar - prev_fstar) / std::max(std::abs(prev_fstar), 1e-12);
      if (rel < cfg.converge_rel) {
        st.converged = true;
        break;
      }
    }
    prev_fstar = fstar;
  }
  return st;
}

void write_train_log_csv(const std::vector<RoundLog>& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "round,stage,metric,value\n";
  char buf[40];
  for (const RoundLog& row : log) {
    std::snprintf(buf, sizeof buf, "%.17g", row.value);
    os << row.round << "," << row.stage << "," << row.metric << "," << buf << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

void save_bundle(const TrainState& state, const JointTrainConfig& cfg,
                 const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  write_fcn_params(state.fcn, dir + "/fcn.kfcn");
  write_templates(state.templates, dir + "/templates.ktpl");
  write_matcher(state.matcher, dir + "/matcher.kmat");
  write_struct_params(state.w, dir + "/struct.kstr");

  nlohmann::json j;
  j["parts"] = kPartCount;
  auto& arch = j["arch"] = nlohmann::json::array();
  for (const LayerSpec& l : state.arch.layers)
    arch.push_back({{"out", l.out_ch}, {"kernel", l.kernel}, {"stride", l.stride},
                    {"relu", l.relu}});
  j["patch"] = cfg.patch;
  j["t_per_part"] = cfg.t_per_part;
  j["window"] = cfg.window;
  j["box_w"] = cfg.box_w;
  j["box_h"] = cfg.box_h;
  j["c"] = cfg.structure.c;
  j["tau"] = cfg.structure.tau;
  j["seed"] = cfg.seed;
  j["rounds_run"] = state.rounds_run;
  j["converged"] = state.converged;

  std::ofstream os(dir + "/meta.json");
  if (!os) throw IoError("cannot open " + dir + "/meta.json for writing");
  os << j.dump(2) << "\n";
  if (!os) throw IoError("write failed: " + dir + "/meta.json");
}

TrainState load_bundle(const std::string& dir) {
  std::ifstream is(dir + "/meta.json");
  if (!is) throw IoError("cannot open " + dir + "/meta.json");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + "/meta.json: " + e.what());
  }

  TrainState st;
  try {
    for (const auto& l : j.at("arch"))
      st.arch.layers.push_back({l.at("out").get<int>(), l.at("kernel").get<int>(),
                                l.at("stride").get<int>(), l.at("relu").get<bool>()});
    st.rounds_run = j.value("rounds_run", 0);
    st.converged = j.value("converged", false);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir + "/meta.json: " + e.what());
  }
  st.fcn = read_fcn_params(dir + "/fcn.kfcn", st.arch);
  st.templates = read_templates(dir + "/templates.ktpl");
  st.matcher = read_matcher(dir + "/matcher.kmat");
  st.w = read_struct_params(dir + "/struct.kstr");
  return st;
}

}  // namespace posekit
