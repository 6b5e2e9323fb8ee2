// Command-line front end: dataset synthesis, staged and joint training,
// per-image inference, and PDJ evaluation with plots.

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "posekit/error.hpp"
#include "posekit/eval.hpp"
#include "posekit/inference.hpp"
#include "posekit/learning.hpp"
#include "posekit/parallel.hpp"
#include "posekit/synth.hpp"

using namespace posekit;
using Clock = std::chrono::steady_clock;

namespace {

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

// accept either a manifest file or the dataset directory that holds it
std::string manifest_path(const std::string& data) {
  if (std::filesystem::is_directory(data))
    return (std::filesystem::path(data) / "manifest.json").string();
  return data;
}

// bundle settings that load_bundle does not surface as parameters
struct BundleMeta {
  int window = 17;
  int box_w = 10, box_h = 10;
};

BundleMeta read_bundle_meta(const std::string& dir) {
  std::ifstream is(dir + "/meta.json");
  if (!is) throw IoError("cannot open " + dir + "/meta.json");
  nlohmann::json j;
  is >> j;
  BundleMeta m;
  m.window = j.value("window", 17);
  m.box_w = j.value("box_w", 10);
  m.box_h = j.value("box_h", 10);
  return m;
}

void apply_threads(int threads) {
  if (threads > 0) set_num_threads(threads);
}

// ---------------------------------------------------------------------------

struct GenFlags {
  std::string out;
  int count = 100;
  double test_frac = 0.2;
  int threads = 0;
  SynthConfig synth;
};

int cmd_gen(const GenFlags& g) {
  apply_threads(g.threads);
  SynthConfig cfg = g.synth;
  cfg.subjects = g.count;
  cfg.poses_per_subject = 1;

  const DatasetManifest mf = synthesize_dataset(cfg, g.out, g.test_frac);
  const size_t train = mf.split_indices("train").size();
  const size_t test = mf.split_indices("test").size();
  std::printf("wrote %zu samples (%zu train, %zu test), %dx%d px at %.1f mm/px -> %s\n",
              mf.entries.size(), train, test, mf.width, mf.height, mf.mm_per_pixel,
              g.out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::string data;
  std::string model;
  std::string stage = "all";
  int threads = 0;
  JointTrainConfig cfg;
};

TrainState load_or_init(const std::string& model, const SampleSet& data,
                        const JointTrainConfig& cfg) {
  if (std::filesystem::exists(model + "/meta.json")) return load_bundle(model);

  TrainState st;
  st.arch = cfg.arch;
  st.fcn = init_fcn(cfg.arch, stage_seed(cfg.seed, 0, 0));
  st.templates = cluster_templates(data, kPartCount, cfg.t_per_part,
                                   stage_seed(cfg.seed, 0, 1), cfg.patch,
                                   cfg.matcher.depth_scale);
  st.matcher = init_matcher(kPartCount, stage_seed(cfg.seed, 0, 2), cfg.patch);
  st.w = StructParams::zeros(default_tree());
  return st;
}

std::vector<ProposalSet> detect_all(const SampleSet& data, const FcnParams& fcn,
                                    const JointTrainConfig& cfg) {
  std::vector<ProposalSet> proposals(data.size());
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (int i = 0; i < int(data.size()); ++i) {
    try {
      proposals[size_t(i)] =
          extract_proposals(fcn_forward(data.images[size_t(i)], fcn), data.images[size_t(i)],
                            cfg.window, cfg.box_w, cfg.box_h);
    } catch (const std::exception& ex) {
#pragma omp critical
      if (error.empty()) error = ex.what();
    }
  }
  if (!error.empty()) throw NumericError("proposal extraction: " + error);
  return proposals;
}

int cmd_train(const TrainFlags& t) {
  apply_threads(t.threads);
  const DatasetManifest mf = read_manifest(manifest_path(t.data));

  if (t.stage == "all") {
    TrainState st = joint_train(mf, t.cfg);
    st.rounds_run = std::max(st.rounds_run, 1);
    save_bundle(st, t.cfg, t.model);
    write_train_log_csv(st.log, t.model + "/train_log.csv");
    double pdj020 = -1;
    for (const RoundLog& row : st.log)
      if (row.metric == "pdj020") pdj020 = row.value;
    std::printf("trained %d round(s)%s, train PDJ(0.20)=%.6f -> %s\n", st.rounds_run,
                st.converged ? " (converged)" : "", pdj020, t.model.c_str());
    return 0;
  }

  // single-stage run: round 1 of the alternation for that stage only
  const SampleSet data = load_split(mf, "train");
  if (data.size() == 0) throw ContractError("train split is empty");
  const KinematicTree& tree = default_tree();
  const bool fresh = !std::filesystem::exists(t.model + "/meta.json");
  TrainState st = load_or_init(t.model, data, t.cfg);
  quantize_state(st);
  st.rounds_run = 1;
  st.converged = false;
  std::vector<RoundLog> log;

  if (t.stage == "fcn") {
    FcnTrainConfig fc = t.cfg.fcn;
    fc.seed = stage_seed(t.cfg.seed, 1, 0);
    FcnTrainLog flog;
    fcn_train(st.fcn, data, fc, &flog);
    log.push_back({1, "fcn", "loss", flog.epoch_loss.empty() ? 0.0 : flog.epoch_loss.back()});
  } else if (t.stage == "matcher") {
    const std::vector<ProposalSet> proposals = detect_all(data, st.fcn, t.cfg);
    MatcherTrainConfig mc = t.cfg.matcher;
    mc.seed = stage_seed(t.cfg.seed, 1, 1);
    mc.box_w = t.cfg.box_w;
    mc.box_h = t.cfg.box_h;
    MatcherTrainLog mlog;
    matcher_train(st.matcher, data, build_match_pool(data, proposals, t.cfg.box_w, t.cfg.box_h),
                  st.templates, mc, &mlog);
    log.push_back(
        {1, "matcher", "loss", mlog.epoch_loss.empty() ? 0.0 : mlog.epoch_loss.back()});
  } else {  // struct
    const std::vector<ProposalSet> proposals = detect_all(data, st.fcn, t.cfg);
    std::vector<StructInstance> instances(data.size());
    std::string error;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(data.size()); ++i) {
      try {
        instances[size_t(i)].props = proposals[size_t(i)];
        instances[size_t(i)].unaries =
            build_unary_table(data.images[size_t(i)], instances[size_t(i)].props,
                              st.templates, st.matcher, t.cfg.matcher.depth_scale);
        instances[size_t(i)].truth = data.poses[size_t(i)];
      } catch (const std::exception& ex) {
#pragma omp critical
        if (error.empty()) error = ex.what();
      }
    }
    if (!error.empty()) throw NumericError("unary tables: " + error);

    StructTrainConfig sc = t.cfg.structure;
    sc.seed = stage_seed(t.cfg.seed, 1, 2);
    CccpLog clog;
    st.w = cccp_train(instances, tree, data.mm_per_pixel, sc, std::move(st.w), &clog);
    log.push_back({1, "struct", "objective", clog.outer_objective.back()});
  }

  // a run over an existing bundle touches only its own stage's checkpoint
  if (fresh) {
    save_bundle(st, t.cfg, t.model);
  } else if (t.stage == "fcn") {
    write_fcn_params(st.fcn, t.model + "/fcn.kfcn");
  } else if (t.stage == "matcher") {
    write_matcher(st.matcher, t.model + "/matcher.kmat");
  } else {
    write_struct_params(st.w, t.model + "/struct.kstr");
  }
  write_train_log_csv(log, t.model + "/train_log.csv");
  std::printf("stage %s done, %s=%.6g -> %s\n", t.stage.c_str(), log.back().metric.c_str(),
              log.back().value, t.model.c_str());
  return 0;
}

// ---------------------------------------------------------------------------

struct InferFlags {
  std::string model;
  std::string out = ".";
  std::vector<std::string> images;
  bool overlay = false;
  int window = 0;  // 0 = the model's training window
  int threads = 0;
};

int cmd_infer(const InferFlags& f) {
  apply_threads(f.threads);
  const TrainState st = load_bundle(f.model);
  const BundleMeta meta = read_bundle_meta(f.model);
  const int window = f.window > 0 ? f.window : meta.window;
  const KinematicTree& tree = default_tree();

  std::error_code ec;
  std::filesystem::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create " + f.out + ": " + ec.message());

  for (const std::string& path : f.images) {
    const auto t0 = Clock::now();
    const DepthImage img = read_depth_image(path);
    const HeatMapStack maps = fcn_forward(img, st.fcn);
    const ProposalSet props = extract_proposals(maps, img, window, meta.box_w, meta.box_h);
    const UnaryTable unaries = build_unary_table(img, props, st.templates, st.matcher);

    const auto t1 = Clock::now();
    DpStats stats;
    const InferResult r = dp_infer(props, unaries, st.w, tree, img.mm_per_pixel, &stats);
    const auto t2 = Clock::now();

    const InferenceRecord rec = make_record(r.cfg, r.score, props);
    const std::string stem = std::filesystem::path(path).stem().string();
    write_infer_json(rec, (std::filesystem::path(f.out) / (stem + ".json")).string());
    if (f.overlay) {
      PoseConfig pose;
      pose.joints = rec.joints;
      write_overlay_svg(pose, tree, img.width, img.height,
                        (std::filesystem::path(f.out) / (stem + ".svg")).string());
    }
    std::printf("%s: total %.1f ms (dp %.2f ms, %" PRIu64 " pair ops), score %.4f\n",
                path.c_str(), ms_between(t0, t2), ms_between(t1, t2), stats.pair_ops,
                r.score);
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string model;
  std::string data;
  std::string split = "test";
  std::string out = ".";
  bool components = false;
  int threads = 0;
};

int cmd_eval(const EvalFlags& f) {
  apply_threads(f.threads);
  const TrainState st = load_bundle(f.model);
  const BundleMeta meta = read_bundle_meta(f.model);
  const DatasetManifest mf = read_manifest(manifest_path(f.data));
  const SampleSet data = load_split(mf, f.split);
  if (data.size() == 0) throw ContractError("split '" + f.split + "' is empty");
  const KinematicTree& tree = default_tree();

  std::error_code ec;
  std::filesystem::create_directories(f.out, ec);
  if (ec) throw IoError("cannot create " + f.out + ": " + ec.message());

  ComponentConfig cc;
  cc.window = meta.window;
  cc.box_w = meta.box_w;
  cc.box_h = meta.box_h;

  PdjReport full;
  if (f.components) {
    const ComponentReports reports =
        component_analysis(data, st.fcn, st.templates, st.matcher, st.w, tree, cc);
    write_component_csv(reports, f.out + "/components.csv");
    write_pdj_csv(reports.full, f.out + "/pdj.csv");
    write_pdj_svg({{"heat-map peak", reports.fcn_only},
                   {"matcher rerank", reports.fcn_match},
                   {"full model", reports.full}},
                  f.out + "/pdj.svg");
    full = reports.full;
  } else {
    std::vector<PoseConfig> preds(data.size());
    std::string error;
#pragma omp parallel for schedule(dynamic)
    for (int i = 0; i < int(data.size()); ++i) {
      try {
        const DepthImage& img = data.images[size_t(i)];
        const ProposalSet props = extract_proposals(fcn_forward(img, st.fcn), img, cc.window,
                                                    cc.box_w, cc.box_h);
        const UnaryTable unaries = build_unary_table(img, props, st.templates, st.matcher);
        const InferResult r = dp_infer(props, unaries, st.w, tree, data.mm_per_pixel);
        PoseConfig p;
        for (int k = 0; k < kPartCount; ++k) {
          const PartProposal& pp = props.per_part[size_t(k)][size_t(r.cfg.pick[size_t(k)])];
          p.joints.push_back({pp.x, pp.y, pp.z});
        }
        preds[size_t(i)] = std::move(p);
      } catch (const std::exception& ex) {
#pragma omp critical
        if (error.empty()) error = ex.what();
      }
    }
    if (!error.empty()) throw NumericError("evaluation: " + error);

    full = pdj_curve(preds, data.poses);
    write_pdj_csv(full, f.out + "/pdj.csv");
    write_pdj_svg({{"full model", full}}, f.out + "/pdj.svg");
  }

  std::printf("PDJ(0.20)=%.6f\n", full.overall.back());
  return 0;
}

// ---------------------------------------------------------------------------

template <typename Fn>
int run_guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ContractError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pose estimation from depth images"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  GenFlags g;
  CLI::App* gen = app.add_subcommand("gen", "synthesize a labeled depth dataset");
  gen->add_option("--out", g.out, "output directory")->required();
  gen->add_option("--count", g.count, "number of samples")->check(CLI::Range(1, 1 << 30));
  gen->add_option("--test-frac", g.test_frac, "fraction held out as the test split")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--width", g.synth.width, "image width, px")->check(CLI::Range(1, 1 << 30));
  gen->add_option("--height", g.synth.height, "image height, px")->check(CLI::Range(1, 1 << 30));
  gen->add_option("--mm-per-pixel", g.synth.mm_per_pixel, "lateral scale at the subject");
  gen->add_option("--base-depth", g.synth.base_depth_mm, "nominal subject distance, mm");
  gen->add_option("--depth-jitter", g.synth.depth_jitter_mm, "distance jitter, mm");
  gen->add_option("--bone-scale", g.synth.bone_scale, "global bone length multiplier");
  gen->add_option("--scale-jitter", g.synth.subject_scale_jitter, "per-subject size jitter");
  gen->add_option("--angle-jitter", g.synth.root_angle_jitter, "root orientation jitter, rad");
  gen->add_option("--head-radius", g.synth.head_radius_mm, "head sphere radius, mm");
  gen->add_option("--torso-radius", g.synth.torso_radius_mm, "torso capsule radius, mm");
  gen->add_option("--occluder-prob", g.synth.occluder_prob,
                  "chance of a foreground occluder per image")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--noise-std", g.synth.noise_std_mm, "depth noise sigma, mm");
  gen->add_option("--seed", g.synth.seed, "generation seed");
  gen->add_option("--threads", g.threads, "worker threads (0 = library default)")
      ->envname("POSEKIT_THREADS");

  TrainFlags t;
  CLI::App* train = app.add_subcommand("train", "train the detector, matcher and tree model");
  train->add_option("--data", t.data, "dataset directory or manifest path")
      ->required()
      ->check(CLI::ExistingPath);
  train->add_option("--model", t.model, "checkpoint bundle directory")->required();
  train->add_option("--stage", t.stage, "fcn|matcher|struct|all")
      ->check(CLI::IsMember({"fcn", "matcher", "struct", "all"}));
  train->add_option("--rounds", t.cfg.rounds, "alternation round cap")
      ->check(CLI::Range(1, 1 << 30));
  train->add_option("--converge-rel", t.cfg.converge_rel,
                    "relative change of the mean best score that stops the alternation");
  train->add_option("--fcn-lr", t.cfg.fcn.lr, "detector learning rate");
  train->add_option("--fcn-epochs", t.cfg.fcn.epochs, "detector epochs per round");
  train->add_option("--fcn-batch", t.cfg.fcn.batch_size, "detector batch size");
  train->add_option("--fcn-sigma", t.cfg.fcn.sigma, "target heat-map sigma, cells");
  train->add_option("--matcher-lr", t.cfg.matcher.lr, "matcher learning rate");
  train->add_option("--matcher-epochs", t.cfg.matcher.epochs, "matcher epochs per round");
  train->add_option("--matcher-batch", t.cfg.matcher.batch_pairs, "matcher pairs per batch");
  train->add_option("--c", t.cfg.structure.c, "structural hinge penalty");
  train->add_option("--tau", t.cfg.structure.tau, "loss threshold, fraction of torso");
  train->add_option("--outer", t.cfg.structure.outer_iters, "CCCP alternation cap");
  train->add_option("--inner", t.cfg.structure.inner_epochs, "subgradient epochs per alternation");
  train->add_option("--step", t.cfg.structure.step, "subgradient step size");
  train->add_option("--step-decay", t.cfg.structure.step_decay, "step decay rate");
  train->add_option("--struct-eval-cap", t.cfg.structure.eval_cap,
                    "images for objective tracking (0 = all)");
  train->add_option("--window", t.cfg.window, "proposal window side (n = window^2)")
      ->check(CLI::Range(1, 1 << 30));
  train->add_option("--patch", t.cfg.patch, "matcher patch side, px")
      ->check(CLI::Range(1, 1 << 30));
  train->add_option("--templates", t.cfg.t_per_part, "templates per part")
      ->check(CLI::Range(1, 1 << 30));
  train->add_option("--box-w", t.cfg.box_w, "proposal box width, px");
  train->add_option("--box-h", t.cfg.box_h, "proposal box height, px");
  train->add_option("--eval-cap", t.cfg.eval_cap,
                    "train images for the convergence metric (0 = all)");
  train->add_option("--seed", t.cfg.seed, "training seed");
  train->add_option("--threads", t.threads, "worker threads (0 = library default)")
      ->envname("POSEKIT_THREADS");

  InferFlags inf;
  CLI::App* infer = app.add_subcommand("infer", "estimate poses for depth images");
  infer->add_option("--model", inf.model, "checkpoint bundle directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  infer->add_option("--out", inf.out, "output directory for JSON/SVG");
  infer->add_option("--window", inf.window, "proposal window override (0 = model's)");
  infer->add_flag("--overlay", inf.overlay, "also write a pose overlay SVG per image");
  infer->add_option("--threads", inf.threads, "worker threads (0 = library default)")
      ->envname("POSEKIT_THREADS");
  infer->add_option("images", inf.images, "KDEP depth images")
      ->required()
      ->check(CLI::ExistingFile);

  EvalFlags e;
  CLI::App* eval = app.add_subcommand("eval", "PDJ curves and component analysis");
  eval->add_option("--model", e.model, "checkpoint bundle directory")
      ->required()
      ->check(CLI::ExistingDirectory);
  eval->add_option("--data", e.data, "dataset directory or manifest path")
      ->required()
      ->check(CLI::ExistingPath);
  eval->add_option("--split", e.split, "manifest split to evaluate");
  eval->add_option("--out", e.out, "output directory for CSV/SVG");
  eval->add_flag("--components", e.components,
                 "also evaluate heat-map-only and matcher-rerank variants");
  eval->add_option("--threads", e.threads, "worker threads (0 = library default)")
      ->envname("POSEKIT_THREADS");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : 2;
  }

  if (gen->parsed()) return run_guarded([&] { return cmd_gen(g); });
  if (train->parsed()) return run_guarded([&] { return cmd_train(t); });
  if (infer->parsed()) return run_guarded([&] { return cmd_infer(inf); });
  if (eval->parsed()) return run_guarded([&] { return cmd_eval(e); });
  return 2;
}
