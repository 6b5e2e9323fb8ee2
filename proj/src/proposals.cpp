#include "posekit/proposals.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "posekit/error.hpp"

namespace posekit {

ProposalSet extract_proposals(const HeatMapStack& maps, const DepthImage& img, int window,
                              int box_w, int box_h) {
  if (window < 1 || window % 2 == 0) throw ContractError("window must be odd and positive");
  if (window > maps.w || window > maps.h)
    throw ContractError("window " + std::to_string(window) + " exceeds the " +
                        std::to_string(maps.w) + "x" + std::to_string(maps.h) + " map");
  if (box_w < 1 || box_h < 1) throw ContractError("box size must be positive");
  if (maps.k < 1) throw ContractError("empty heat-map stack");

  const int r = window / 2;
  ProposalSet out;
  out.n = window * window;
  out.per_part.assign(size_t(maps.k), {});

  int bad_part = -1;  // exceptions cannot cross the parallel region
#pragma omp parallel for schedule(static)
  for (int k = 0; k < maps.k; ++k) {
    // peak cell, ties to the first in row-major order
    int best_x = 0, best_y = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (int y = 0; y < maps.h; ++y)
      for (int x = 0; x < maps.w; ++x) {
        const double v = maps.at(k, y, x);
        if (v > best) {
          best = v;
          best_x = x;
          best_y = y;
        }
      }
    if (!std::isfinite(best)) {
#pragma omp critical
      bad_part = k;
      continue;
    }

    // shift the window to lie inside the map, keeping the peak covered
    const int cx = std::clamp(best_x, r, maps.w - 1 - r);
    const int cy = std::clamp(best_y, r, maps.h - 1 - r);

    std::vector<PartProposal>& props = out.per_part[size_t(k)];
    props.reserve(size_t(out.n));
    for (int my = cy - r; my <= cy + r; ++my)
      for (int mx = cx - r; mx <= cx + r; ++mx) {
        PartProposal p;
        p.part = k;
        p.x = double(mx * maps.s + maps.s / 2);
        p.y = double(my * maps.s + maps.s / 2);
        p.w = box_w;
        p.h = box_h;
        p.score = maps.at(k, my, mx);

        // lower median of the non-zero depths inside the box
        std::vector<uint16_t> depths;
        depths.reserve(size_t(box_w) * size_t(box_h));
        const int x0 = int(std::llround(p.x)) - box_w / 2;
        const int y0 = int(std::llround(p.y)) - box_h / 2;
        for (int by = y0; by < y0 + box_h; ++by)
          for (int bx = x0; bx < x0 + box_w; ++bx)
            if (img.in_bounds(bx, by) && img.at(bx, by) != 0) depths.push_back(img.at(bx, by));
        if (!depths.empty()) {
          const size_t mid = (depths.size() - 1) / 2;
          std::nth_element(depths.begin(), depths.begin() + long(mid), depths.end());
          p.z = double(depths[mid]);
        }
        props.push_back(p);
      }

    // descending score; equal scores stay in row-major cell order
    std::stable_sort(props.begin(), props.end(),
                     [](const PartProposal& a, const PartProposal& b) { return a.score > b.score; });
  }
  if (bad_part >= 0)
    throw NumericError("part " + std::to_string(bad_part) + ": heat map has no finite peak");
  return out;
}

std::pair<int, int> default_box_size(double torso_px) {
  if (torso_px <= 0) throw ContractError("torso size must be positive");
  const int side = std::max(1, int(std::llround(10.0 * torso_px / kReferenceTorsoPx)));
  return {side, side};
}

void write_proposal_csv(const ProposalSet& props, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "k,x,y,w,h,z,score\n";
  char buf[256];
  for (size_t k = 0; k < props.per_part.size(); ++k)
    for (const PartProposal& p : props.per_part[k]) {
      std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%d,%d,%.17g,%.17g\n", k, p.x, p.y, p.w,
                    p.h, p.z, p.score);
      os << buf;
    }
}

}  // namespace posekit
