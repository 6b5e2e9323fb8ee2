#include "posekit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <queue>
#include <string>

#include "json.hpp"
#include "posekit/error.hpp"

namespace posekit {

namespace {

void validate_instance(const ProposalSet& props, const UnaryTable& unaries,
                       const StructParams& w, const KinematicTree& tree) {
  const int k = tree.part_count();
  if (props.part_count() != k)
    throw ContractError("proposal set covers " + std::to_string(props.part_count()) +
                        " parts, tree has " + std::to_string(k));
  if (int(unaries.size()) != k) throw ContractError("unary table / tree size mismatch");
  if (int(w.omega.size()) != k || int(w.gamma.size()) != tree.edge_count())
    throw ContractError("struct params / tree size mismatch");
  for (int v = 0; v < k; ++v) {
    if (props.per_part[size_t(v)].empty())
      throw ContractError("part " + std::to_string(v) + " has no proposals");
    if (unaries[size_t(v)].size() != props.per_part[size_t(v)].size())
      throw ContractError("unary table / proposal count mismatch at part " + std::to_string(v));
  }
}

// breadth-first order from the root; reversing it lists children before parents
std::vector<int> bfs_order(const KinematicTree& tree) {
  std::vector<int> order;
  order.reserve(size_t(tree.part_count()));
  std::queue<int> q;
  q.push(tree.root);
  while (!q.empty()) {
    const int v = q.front();
    q.pop();
    order.push_back(v);
    for (int c : tree.children[size_t(v)]) q.push(c);
  }
  return order;
}

struct AugmentedLoss {
  const PoseConfig* truth;
  const std::vector<double>* weight;
  double radius_px;
};

double miss_penalty(const AugmentedLoss& aug, int part, const PartProposal& p) {
  const Joint& t = aug.truth->joints[size_t(part)];
  const double d = std::hypot(p.x - t.x, p.y - t.y);
  return d > aug.radius_px ? (*aug.weight)[size_t(part)] : 0.0;
}

Configuration dp_decode(const ProposalSet& props, const UnaryTable& unaries,
                        const StructParams& w, const KinematicTree& tree,
                        double mm_per_pixel, const AugmentedLoss* aug, DpStats* stats,
                        MessageTable* messages) {
  validate_instance(props, unaries, w, tree);
  const int k = tree.part_count();

  // edge id feeding each non-root part from its parent
  std::vector<int> edge_of(size_t(k), -1);
  for (int e = 0; e < tree.edge_count(); ++e) edge_of[size_t(tree.edges[size_t(e)].second)] = e;

  MessageTable local;
  MessageTable& mt = messages ? *messages : local;
  mt.mu.assign(size_t(k), {});
  mt.back.assign(size_t(k), {});
  for (int v = 0; v < k; ++v) {
    const auto& plist = props.per_part[size_t(v)];
    mt.mu[size_t(v)].resize(plist.size());
    for (size_t i = 0; i < plist.size(); ++i) {
      double base = w.omega[size_t(v)] * unaries[size_t(v)][i];
      if (aug) base += miss_penalty(*aug, v, plist[i]);
      mt.mu[size_t(v)][i] = base;
    }
  }

  const std::vector<int> order = bfs_order(tree);
  uint64_t ops = 0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int node = *it;
    const auto& pp = props.per_part[size_t(node)];
    for (int child : tree.children[size_t(node)]) {
      const auto& pc = props.per_part[size_t(child)];
      const auto& g = w.gamma[size_t(edge_of[size_t(child)])];
      const std::vector<double>& mu_c = mt.mu[size_t(child)];
      std::vector<int>& bk = mt.back[size_t(child)];
      bk.assign(pp.size(), 0);
      std::vector<double>& mu_n = mt.mu[size_t(node)];

#pragma omp parallel for schedule(static) reduction(+ : ops)
      for (int i = 0; i < int(pp.size()); ++i) {
        double best = -std::numeric_limits<double>::infinity();
        int best_j = 0;
        for (int j = 0; j < int(pc.size()); ++j) {
          const DeformFeature psi = deform_feature(pp[size_t(i)], pc[size_t(j)], mm_per_pixel);
          double s = mu_c[size_t(j)];
          for (int t = 0; t < 6; ++t) s += g[size_t(t)] * psi[size_t(t)];
          if (s > best) {  // strict: the smallest j wins a tie
            best = s;
            best_j = j;
          }
          ++ops;
        }
        mu_n[size_t(i)] += best;
        bk[size_t(i)] = best_j;
      }
    }
  }
  if (stats) stats->pair_ops += ops;

  Configuration cfg;
  cfg.pick.assign(size_t(k), 0);
  const std::vector<double>& mu_root = mt.mu[size_t(tree.root)];
  int root_pick = 0;
  for (int i = 1; i < int(mu_root.size()); ++i)
    if (mu_root[size_t(i)] > mu_root[size_t(root_pick)]) root_pick = i;
  cfg.pick[size_t(tree.root)] = root_pick;
  for (int node : order)
    for (int child : tree.children[size_t(node)])
      cfg.pick[size_t(child)] = mt.back[size_t(child)][size_t(cfg.pick[size_t(node)])];

  if (!mu_root.empty() && !std::isfinite(mu_root[size_t(root_pick)]))
    throw NumericError("non-finite configuration score at the root");
  return cfg;
}

}  // namespace

InferResult dp_infer(const ProposalSet& props, const UnaryTable& unaries,
                     const StructParams& w, const KinematicTree& tree,
                     double mm_per_pixel, DpStats* stats, MessageTable* messages) {
  InferResult r;
  r.cfg = dp_decode(props, unaries, w, tree, mm_per_pixel, nullptr, stats, messages);
  r.score = config_score(r.cfg, unaries, props, w, tree, mm_per_pixel);
  return r;
}

InferResult dp_infer_loss_augmented(const ProposalSet& props, const UnaryTable& unaries,
                                    const StructParams& w, const KinematicTree& tree,
                                    double mm_per_pixel, const PoseConfig& truth,
                                    const std::vector<double>& loss_weight,
                                    double radius_px, DpStats* stats) {
  if (int(truth.joints.size()) != tree.part_count())
    throw ContractError("truth pose / tree size mismatch");
  if (int(loss_weight.size()) != tree.part_count())
    throw ContractError("loss weights / tree size mismatch");
  if (!(radius_px >= 0)) throw ContractError("loss radius must be non-negative");

  AugmentedLoss aug{&truth, &loss_weight, radius_px};
  InferResult r;
  r.cfg = dp_decode(props, unaries, w, tree, mm_per_pixel, &aug, stats, nullptr);
  r.score = config_score(r.cfg, unaries, props, w, tree, mm_per_pixel);
  for (int v = 0; v < tree.part_count(); ++v)
    r.score += miss_penalty(aug, v, props.per_part[size_t(v)][size_t(r.cfg.pick[size_t(v)])]);
  return r;
}

InferResult brute_force_infer(const ProposalSet& props, const UnaryTable& unaries,
                              const StructParams& w, const KinematicTree& tree,
                              double mm_per_pixel) {
  validate_instance(props, unaries, w, tree);
  const int k = tree.part_count();

  double space = 1;
  for (int v = 0; v < k; ++v) space *= double(props.per_part[size_t(v)].size());
  if (space > 1e6)
    throw ContractError("exhaustive search over " + std::to_string(space) +
                        " configurations exceeds the 1e6 guard");

  Configuration cur;
  cur.pick.assign(size_t(k), 0);
  InferResult best;
  best.cfg = cur;
  best.score = -std::numeric_limits<double>::infinity();

  // odometer over index vectors, last part fastest, visits configurations in
  // lexicographic order; strict comparison keeps the first maximiser
  for (;;) {
    const double s = config_score(cur, unaries, props, w, tree, mm_per_pixel);
    if (s > best.score) {
      best.score = s;
      best.cfg = cur;
    }
    int v = k - 1;
    while (v >= 0 && cur.pick[size_t(v)] + 1 >= int(props.per_part[size_t(v)].size())) {
      cur.pick[size_t(v)] = 0;
      --v;
    }
    if (v < 0) break;
    ++cur.pick[size_t(v)];
  }
  return best;
}

InferenceRecord make_record(const Configuration& cfg, double score, const ProposalSet& props) {
  if (int(cfg.pick.size()) != props.part_count())
    throw ContractError("configuration / proposal set size mismatch");
  InferenceRecord rec;
  rec.cfg = cfg;
  rec.score = score;
  rec.joints.reserve(cfg.pick.size());
  for (size_t v = 0; v < cfg.pick.size(); ++v) {
    const int i = cfg.pick[v];
    if (i < 0 || i >= int(props.per_part[v].size()))
      throw ContractError("configuration picks proposal " + std::to_string(i) +
                          " outside part " + std::to_string(v));
    const PartProposal& p = props.per_part[v][size_t(i)];
    rec.joints.push_back({p.x, p.y, p.z});
  }
  return rec;
}

void write_infer_json(const InferenceRecord& rec, const std::string& path) {
  if (rec.cfg.pick.size() != rec.joints.size())
    throw ContractError("record pick / joint count mismatch");
  nlohmann::json j;
  j["score"] = rec.score;
  auto& parts = j["parts"] = nlohmann::json::array();
  for (size_t v = 0; v < rec.joints.size(); ++v) {
    parts.push_back({{"proposal", rec.cfg.pick[v]},
                     {"x", rec.joints[v].x},
                     {"y", rec.joints[v].y},
                     {"z", rec.joints[v].z}});
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << j.dump(2) << "\n";
}

InferenceRecord read_infer_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  try {
    InferenceRecord rec;
    rec.score = j.at("score").get<double>();
    for (const auto& p : j.at("parts")) {
      rec.cfg.pick.push_back(p.at("proposal").get<int>());
      rec.joints.push_back({p.at("x").get<double>(), p.at("y").get<double>(),
                            p.at("z").get<double>()});
    }
    return rec;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace posekit
