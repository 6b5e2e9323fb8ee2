#include "posekit/kinematics.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <queue>
#include <sstream>

#include "json.hpp"
#include "posekit/error.hpp"
#include "posekit/wire.hpp"

namespace posekit {

int KinematicTree::edge_index(int k, int m) const {
  for (int e = 0; e < edge_count(); ++e) {
    auto [p, c] = edges[e];
    if ((p == k && c == m) || (p == m && c == k)) return e;
  }
  throw ContractError("no edge between parts " + std::to_string(k) + " and " + std::to_string(m));
}

KinematicTree make_tree(std::vector<std::string> names, std::vector<std::pair<int, int>> edges) {
  const int k = int(names.size());
  if (k < 1) throw ContractError("tree needs at least one part");
  if (int(edges.size()) != k - 1)
    throw ContractError("tree over " + std::to_string(k) + " parts needs " + std::to_string(k - 1) +
                        " edges, got " + std::to_string(edges.size()));

  KinematicTree t;
  t.names = std::move(names);
  t.edges = std::move(edges);
  t.parent.assign(size_t(k), -1);
  t.children.assign(size_t(k), {});
  t.neighbors.assign(size_t(k), {});

  for (auto [p, c] : t.edges) {
    if (p < 0 || p >= k || c < 0 || c >= k)
      throw ContractError("edge (" + std::to_string(p) + "," + std::to_string(c) +
                          ") references a part outside 0.." + std::to_string(k - 1));
    if (p == c) throw ContractError("self edge at part " + std::to_string(p));
    if (t.parent[size_t(c)] != -1)
      throw ContractError("part " + std::to_string(c) + " has two parents");
    t.parent[size_t(c)] = p;
    t.children[size_t(p)].push_back(c);
    t.neighbors[size_t(p)].push_back(c);
    t.neighbors[size_t(c)].push_back(p);
  }

  t.root = -1;
  for (int v = 0; v < k; ++v)
    if (t.parent[size_t(v)] == -1) {
      if (t.root != -1) throw ContractError("disconnected tree: multiple roots");
      t.root = v;
    }
  if (t.root == -1) throw ContractError("cyclic part graph: no root");

  // reachability from the root; |E| = K-1 plus connected implies acyclic
  std::vector<char> seen(size_t(k), 0);
  std::queue<int> q;
  q.push(t.root);
  seen[size_t(t.root)] = 1;
  int reached = 0;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    ++reached;
    for (int c : t.children[size_t(v)])
      if (!seen[size_t(c)]) {
        seen[size_t(c)] = 1;
        q.push(c);
      }
  }
  if (reached != k) throw ContractError("disconnected tree: cycle among non-root parts");
  return t;
}

const KinematicTree& default_tree() {
  static const KinematicTree t = [] {
    std::vector<std::pair<int, int>> edges = {
        {0, 1},                              // Head - Neck
        {1, 2},  {2, 3},  {3, 4},            // spine chain
        {1, 5},  {5, 6},  {6, 7},  {7, 8},   // right arm
        {1, 9},  {9, 10}, {10, 11}, {11, 12},// left arm
        {4, 13}, {13, 14}, {14, 15},         // right leg
        {4, 16}, {16, 17}, {17, 18},         // left leg
    };
    const auto& names = part_names();
    return make_tree({names.begin(), names.end()}, std::move(edges));
  }();
  return t;
}

void write_tree_json(const KinematicTree& tree, const std::string& path) {
  nlohmann::json j;
  j["parts"] = tree.names;
  auto& je = j["edges"] = nlohmann::json::array();
  for (auto [p, c] : tree.edges) je.push_back({p, c});
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

KinematicTree read_tree_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  try {
    std::vector<std::string> names = j.at("parts").get<std::vector<std::string>>();
    std::vector<std::pair<int, int>> edges;
    for (const auto& e : j.at("edges")) edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    return make_tree(std::move(names), std::move(edges));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

DeformFeature deform_feature(const PartProposal& parent, const PartProposal& child,
                             double mm_per_pixel) {
  if (mm_per_pixel <= 0) throw ContractError("mm_per_pixel must be positive");
  const double dx = child.x - parent.x;
  const double dy = child.y - parent.y;
  const double dz = (child.z - parent.z) / mm_per_pixel;
  return {dx, dx * dx, dy, dy * dy, dz, dz * dz};
}

StructParams StructParams::zeros(const KinematicTree& tree) {
  StructParams w;
  w.omega.assign(size_t(tree.part_count()), 0.0);
  w.gamma.assign(size_t(tree.edge_count()), {0, 0, 0, 0, 0, 0});
  return w;
}

bool StructParams::all_finite() const {
  for (double v : omega)
    if (!std::isfinite(v)) return false;
  for (const auto& g : gamma)
    for (double v : g)
      if (!std::isfinite(v)) return false;
  return true;
}

void write_struct_params(const StructParams& w, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("KSTR", 4);
  wire::put_u32(os, uint32_t(w.omega.size()));
  wire::put_u32(os, uint32_t(w.gamma.size()));
  for (double v : w.omega) wire::put_f32(os, v);
  for (const auto& g : w.gamma)
    for (double v : g) wire::put_f32(os, v);
  if (!os) throw IoError("write failed: " + path);
}

StructParams read_struct_params(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  wire::expect_magic(is, "KSTR", path);
  StructParams w;
  const uint32_t k = wire::get_u32(is, path + " header");
  const uint32_t e = wire::get_u32(is, path + " header");
  w.omega.resize(k);
  w.gamma.resize(e);
  for (auto& v : w.omega) v = wire::get_f32(is, path + " payload");
  for (auto& g : w.gamma)
    for (auto& v : g) v = wire::get_f32(is, path + " payload");
  return w;
}

double pairwise_term(const KinematicTree& tree, const StructParams& w, int k, int m,
                     const PartProposal& prop_k, const PartProposal& prop_m,
                     double mm_per_pixel) {
  const int e = tree.edge_index(k, m);
  // evaluate in the stored parent->child direction
  const bool k_is_parent = tree.edges[size_t(e)].first == k;
  const DeformFeature psi = k_is_parent ? deform_feature(prop_k, prop_m, mm_per_pixel)
                                        : deform_feature(prop_m, prop_k, mm_per_pixel);
  const auto& g = w.gamma[size_t(e)];
  double s = 0;
  for (int i = 0; i < 6; ++i) s += g[size_t(i)] * psi[size_t(i)];
  return s;
}

double config_score(const Configuration& cfg, const UnaryTable& unaries,
                    const ProposalSet& props, const StructParams& w,
                    const KinematicTree& tree, double mm_per_pixel) {
  const int k = tree.part_count();
  if (int(cfg.pick.size()) != k) throw ContractError("configuration size mismatch");
  if (int(unaries.size()) != k || props.part_count() != k)
    throw ContractError("unary table / proposal set size mismatch");

  double f = 0;
  for (int v = 0; v < k; ++v) {
    const int i = cfg.pick[size_t(v)];
    if (i < 0 || i >= int(props.per_part[size_t(v)].size()))
      throw ContractError("configuration picks proposal " + std::to_string(i) +
                          " outside part " + std::to_string(v));
    f += w.omega[size_t(v)] * unaries[size_t(v)][size_t(i)];
  }
  for (size_t e = 0; e < tree.edges.size(); ++e) {
    auto [p, c] = tree.edges[e];
    const auto& pp = props.per_part[size_t(p)][size_t(cfg.pick[size_t(p)])];
    const auto& pc = props.per_part[size_t(c)][size_t(cfg.pick[size_t(c)])];
    const DeformFeature psi = deform_feature(pp, pc, mm_per_pixel);
    const auto& g = w.gamma[e];
    for (int i = 0; i < 6; ++i) f += g[size_t(i)] * psi[size_t(i)];
  }
  return f;
}

}  // namespace posekit
