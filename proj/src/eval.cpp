#include "posekit/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>

#include "posekit/error.hpp"
#include "posekit/inference.hpp"
#include "posekit/proposals.hpp"

namespace posekit {

namespace {

void check_endpoint(int idx, const PoseConfig& truth) {
  if (idx < 0 || idx >= int(truth.joints.size()))
    throw ContractError("torso endpoint " + std::to_string(idx) + " outside the " +
                        std::to_string(truth.joints.size()) + "-joint pose");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

double torso_diameter(const PoseConfig& truth, const TorsoEndpoints& ends) {
  check_endpoint(ends.a, truth);
  check_endpoint(ends.b, truth);
  const Joint& a = truth.joints[size_t(ends.a)];
  const Joint& b = truth.joints[size_t(ends.b)];
  const double d = std::hypot(a.x - b.x, a.y - b.y);
  if (d == 0.0) throw ContractError("degenerate torso: endpoint joints coincide");
  return d;
}

PdjReport pdj(const std::vector<PoseConfig>& preds, const std::vector<PoseConfig>& truths,
              const std::vector<double>& thresholds, const TorsoEndpoints& ends) {
  if (preds.size() != truths.size())
    throw ContractError("prediction/truth sample counts differ");
  if (preds.empty()) throw ContractError("PDJ of an empty sample list");
  if (thresholds.empty()) throw ContractError("PDJ needs at least one threshold");
  const size_t k = truths.front().joints.size();

  PdjReport rep;
  rep.thresholds = thresholds;
  rep.samples = int(preds.size());
  rep.correct.assign(thresholds.size(), std::vector<int>(k, 0));

  for (size_t s = 0; s < preds.size(); ++s) {
    if (preds[s].joints.size() != k || truths[s].joints.size() != k)
      throw ContractError("sample " + std::to_string(s) + " has a mismatched joint count");
    const double torso = torso_diameter(truths[s], ends);
    for (size_t j = 0; j < k; ++j) {
      const double d = std::hypot(preds[s].joints[j].x - truths[s].joints[j].x,
                                  preds[s].joints[j].y - truths[s].joints[j].y);
      for (size_t t = 0; t < thresholds.size(); ++t)
        if (d <= thresholds[t] * torso) ++rep.correct[t][j];
    }
  }

  rep.per_part.assign(thresholds.size(), std::vector<double>(k, 0.0));
  rep.overall.assign(thresholds.size(), 0.0);
  for (size_t t = 0; t < thresholds.size(); ++t) {
    long total = 0;
    for (size_t j = 0; j < k; ++j) {
      rep.per_part[t][j] = double(rep.correct[t][j]) / double(rep.samples);
      total += rep.correct[t][j];
    }
    rep.overall[t] = double(total) / double(rep.samples * int(k));
  }
  return rep;
}

std::vector<double> pdj_thresholds() {
  std::vector<double> t;
  for (int i = 0; i <= 20; ++i) t.push_back(double(i) / 100.0);
  return t;
}

PdjReport pdj_curve(const std::vector<PoseConfig>& preds,
                    const std::vector<PoseConfig>& truths, const TorsoEndpoints& ends) {
  return pdj(preds, truths, pdj_thresholds(), ends);
}

void write_pdj_csv(const PdjReport& report, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "threshold,overall";
  for (int j = 0; j < report.part_count(); ++j) os << ",part_" << j;
  os << "\n";
  for (size_t t = 0; t < report.thresholds.size(); ++t) {
    os << fmt(report.thresholds[t]) << "," << fmt(report.overall[t]);
    for (double v : report.per_part[t]) os << "," << fmt(v);
    os << "\n";
  }
  if (!os) throw IoError("write failed: " + path);
}

PdjReport read_pdj_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(is, line) || line.rfind("threshold,overall", 0) != 0)
    throw FormatError(path + ": missing PDJ header");

  PdjReport rep;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(row, cell, ',')) {
      size_t used = 0;
      vals.push_back(std::stod(cell, &used));
      if (used != cell.size()) throw FormatError(path + ": bad number '" + cell + "'");
    }
    if (vals.size() < 2) throw FormatError(path + ": short row");
    rep.thresholds.push_back(vals[0]);
    rep.overall.push_back(vals[1]);
    rep.per_part.emplace_back(vals.begin() + 2, vals.end());
  }
  if (rep.thresholds.empty()) throw FormatError(path + ": no data rows");
  return rep;
}

void write_pdj_svg(const std::vector<std::pair<std::string, PdjReport>>& curves,
                   const std::string& path) {
  if (curves.empty()) throw ContractError("nothing to plot");
  const double width = 640, height = 440;
  const double left = 60, right = width - 170, top = 20, bottom = height - 50;
  const double t_max = curves.front().second.thresholds.back();
  static const char* palette[] = {"#d62728", "#1f77b4", "#2ca02c",
                                  "#9467bd", "#ff7f0e", "#8c564b"};

  const auto sx = [&](double t) { return left + (right - left) * (t / t_max); };
  const auto sy = [&](double a) { return bottom - (bottom - top) * a; };

  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";

  char buf[160];
  for (int i = 0; i <= 5; ++i) {  // horizontal grid every 0.2
    const double y = sy(0.2 * i);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                  "stroke=\"#dddddd\"/>\n",
                  left, y, right, y);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"end\" "
                  "fill=\"#333333\">%.1f</text>\n",
                  left - 6, y + 4, 0.2 * i);
    os << buf;
  }
  for (int i = 0; i <= 4; ++i) {  // vertical grid every quarter of the range
    const double t = t_max * i / 4.0;
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" "
                  "stroke=\"#dddddd\"/>\n",
                  sx(t), top, sx(t), bottom);
    os << buf;
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%.1f\" y=\"%.1f\" font-size=\"12\" text-anchor=\"middle\" "
                  "fill=\"#333333\">%.2f</text>\n",
                  sx(t), bottom + 18, t);
    os << buf;
  }
  os << "<text x=\"" << (left + right) / 2
     << "\" y=\"" << height - 12
     << "\" font-size=\"13\" text-anchor=\"middle\" fill=\"#111111\">"
        "threshold (fraction of torso diameter)</text>\n";

  for (size_t c = 0; c < curves.size(); ++c) {
    const PdjReport& rep = curves[c].second;
    const char* color = palette[c % 6];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t t = 0; t < rep.thresholds.size(); ++t) {
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", sx(rep.thresholds[t]), sy(rep.overall[t]));
      os << buf;
    }
    os << "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"14\" height=\"3\" fill=\"%s\"/>\n",
                  right + 12, top + 18 + 20.0 * double(c), color);
    os << buf;
    os << "<text x=\"" << right + 32 << "\" y=\"" << top + 24 + 20.0 * double(c)
       << "\" font-size=\"12\" fill=\"#111111\">" << curves[c].first << "</text>\n";
  }
  os << "</svg>\n";
  if (!os) throw IoError("write failed: " + path);
}

void write_overlay_svg(const PoseConfig& pose, const KinematicTree& tree, int width,
                       int height, const std::string& path) {
  if (int(pose.joints.size()) != tree.part_count())
    throw ContractError("pose / tree part count mismatch");
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width * 3 << "\" height=\""
     << height * 3 << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"#15151a\"/>\n";
  char buf[160];
  for (auto [p, c] : tree.edges) {
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" "
                  "stroke=\"#ffffff\" stroke-width=\"0.8\"/>\n",
                  pose.joints[size_t(p)].x, pose.joints[size_t(p)].y,
                  pose.joints[size_t(c)].x, pose.joints[size_t(c)].y);
    os << buf;
  }
  for (const Joint& j : pose.joints) {
    std::snprintf(buf, sizeof buf,
                  "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"1.6\" fill=\"#d62728\"/>\n", j.x, j.y);
    os << buf;
  }
  os << "</svg>\n";
  if (!os) throw IoError("write failed: " + path);
}

ComponentReports component_analysis(const SampleSet& data, const FcnParams& fcn,
                                    const TemplateSet& templates,
                                    const MatcherParams& matcher, const StructParams& w,
                                    const KinematicTree& tree, const ComponentConfig& cfg) {
  const size_t n = data.size();
  if (n == 0) throw ContractError("component analysis over an empty sample set");
  std::vector<PoseConfig> peak(n), rerank(n), full(n);
  std::string error;

#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < int(n); ++s) {
    try {
      const DepthImage& img = data.images[size_t(s)];
      const HeatMapStack maps = fcn_forward(img, fcn);
      const ProposalSet props =
          extract_proposals(maps, img, cfg.window, cfg.box_w, cfg.box_h);
      const UnaryTable unaries =
          build_unary_table(img, props, templates, matcher, cfg.depth_scale);

      const int k = props.part_count();
      Configuration by_peak, by_unary;
      by_peak.pick.assign(size_t(k), 0);  // proposals are sorted, 0 is the peak
      by_unary.pick.assign(size_t(k), 0);
      for (int v = 0; v < k; ++v) {
        const auto& u = unaries[size_t(v)];
        int best = 0;
        for (int i = 1; i < int(u.size()); ++i)
          if (u[size_t(i)] > u[size_t(best)]) best = i;
        by_unary.pick[size_t(v)] = best;
      }
      const Configuration by_tree =
          dp_infer(props, unaries, w, tree, data.mm_per_pixel).cfg;

      const auto to_pose = [&](const Configuration& cfg_pick) {
        PoseConfig p;
        for (int v = 0; v < k; ++v) {
          const PartProposal& pr =
              props.per_part[size_t(v)][size_t(cfg_pick.pick[size_t(v)])];
          p.joints.push_back({pr.x, pr.y, pr.z});
        }
        return p;
      };
      peak[size_t(s)] = to_pose(by_peak);
      rerank[size_t(s)] = to_pose(by_unary);
      full[size_t(s)] = to_pose(by_tree);
    } catch (const std::exception& ex) {
#pragma omp critical
      if (error.empty()) error = ex.what();
    }
  }
  if (!error.empty()) throw NumericError("component analysis: " + error);

  ComponentReports out;
  out.fcn_only = pdj(peak, data.poses, cfg.thresholds, cfg.ends);
  out.fcn_match = pdj(rerank, data.poses, cfg.thresholds, cfg.ends);
  out.full = pdj(full, data.poses, cfg.thresholds, cfg.ends);
  return out;
}

void write_component_csv(const ComponentReports& reports, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "threshold,fcn,fcn_match,full\n";
  for (size_t t = 0; t < reports.fcn_only.thresholds.size(); ++t)
    os << fmt(reports.fcn_only.thresholds[t]) << "," << fmt(reports.fcn_only.overall[t])
       << "," << fmt(reports.fcn_match.overall[t]) << "," << fmt(reports.full.overall[t])
       << "\n";
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace posekit
