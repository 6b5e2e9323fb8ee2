#include "posekit/matchnet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "posekit/conv.hpp"
#include "posekit/error.hpp"
#include "posekit/rng.hpp"
#include "posekit/wire.hpp"

namespace posekit {

namespace {

constexpr double kProbClamp = 1e-7;

// reflect-101 fold of coordinate c into [0, n)
int reflect(int c, int n) {
  if (n == 1) return 0;
  while (c < 0 || c >= n) {
    if (c < 0) c = -c;
    if (c >= n) c = 2 * (n - 1) - c;
  }
  return c;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double c = a[i] - b[i];
    d += c * c;
  }
  return d;
}

// 2x2 stride-2 max pool; argmax index (into the input channel plane, first
// occurrence in row-major order) kept for the backward pass.
void maxpool2(const Tensor& in, Tensor& out, std::vector<int>& argmax) {
  const int oh = in.h / 2, ow = in.w / 2;
  out = Tensor(in.c, oh, ow);
  argmax.assign(size_t(in.c) * oh * ow, 0);
  for (int c = 0; c < in.c; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double best = -std::numeric_limits<double>::infinity();
        int best_i = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * y + dy, ix = 2 * x + dx;
            const double v = in.at(c, iy, ix);
            if (v > best) {
              best = v;
              best_i = iy * in.w + ix;
            }
          }
        out.at(c, y, x) = best;
        argmax[(size_t(c) * oh + y) * ow + size_t(x)] = best_i;
      }
}

struct TowerTrace {
  Tensor in;
  Tensor act1, pool1;
  std::vector<int> idx1;
  Tensor act2, pool2;
  std::vector<int> idx2;
  double norm = 0;
  std::vector<double> feat;
};

void forward_tower(const Tensor& patch, const TowerParams& t, TowerTrace& tr) {
  tr.in = patch;
  Tensor pre1(t.conv1.out_ch, patch.h, patch.w);
  conv2d_forward(patch, t.conv1, pre1);
  for (double& v : pre1.v) v = v > 0 ? v : 0;
  tr.act1 = std::move(pre1);
  maxpool2(tr.act1, tr.pool1, tr.idx1);

  Tensor pre2(t.conv2.out_ch, tr.pool1.h, tr.pool1.w);
  conv2d_forward(tr.pool1, t.conv2, pre2);
  for (double& v : pre2.v) v = v > 0 ? v : 0;
  tr.act2 = std::move(pre2);
  maxpool2(tr.act2, tr.pool2, tr.idx2);

  // L2-normalized flatten: keeps the head's input bounded no matter how far
  // the background depth sits from the patch center
  double sq = 0;
  for (double v : tr.pool2.v) sq += v * v;
  tr.norm = std::sqrt(sq);
  tr.feat = tr.pool2.v;
  if (tr.norm > 1e-12)
    for (double& v : tr.feat) v /= tr.norm;
}

struct TowerGrad {
  std::vector<double> w1, b1, w2, b2;

  static TowerGrad zeros(const TowerParams& t) {
    return {std::vector<double>(t.conv1.weight.size(), 0.0),
            std::vector<double>(t.conv1.bias.size(), 0.0),
            std::vector<double>(t.conv2.weight.size(), 0.0),
            std::vector<double>(t.conv2.bias.size(), 0.0)};
  }
  void add(const TowerGrad& o) {
    for (size_t i = 0; i < w1.size(); ++i) w1[i] += o.w1[i];
    for (size_t i = 0; i < b1.size(); ++i) b1[i] += o.b1[i];
    for (size_t i = 0; i < w2.size(); ++i) w2[i] += o.w2[i];
    for (size_t i = 0; i < b2.size(); ++i) b2[i] += o.b2[i];
  }
};

struct HeadGrad {
  std::vector<double> w1, b1, w2, b2;

  static HeadGrad zeros(const HeadParams& h) {
    return {std::vector<double>(h.fc1.w.size(), 0.0), std::vector<double>(h.fc1.b.size(), 0.0),
            std::vector<double>(h.fc2.w.size(), 0.0), std::vector<double>(h.fc2.b.size(), 0.0)};
  }
  void add(const HeadGrad& o) {
    for (size_t i = 0; i < w1.size(); ++i) w1[i] += o.w1[i];
    for (size_t i = 0; i < b1.size(); ++i) b1[i] += o.b1[i];
    for (size_t i = 0; i < w2.size(); ++i) w2[i] += o.w2[i];
    for (size_t i = 0; i < b2.size(); ++i) b2[i] += o.b2[i];
  }
};

// d_feat -> parameter gradients of one tower pass (input gradient discarded).
void backward_tower(const TowerTrace& tr, const TowerParams& t,
                    const std::vector<double>& d_feat, TowerGrad& g) {
  // through the L2 normalization: d_g = (d_f - f (f . d_f)) / |g|
  std::vector<double> d_flat(d_feat.size(), 0.0);
  if (tr.norm > 1e-12) {
    double dot = 0;
    for (size_t i = 0; i < d_feat.size(); ++i) dot += tr.feat[i] * d_feat[i];
    for (size_t i = 0; i < d_feat.size(); ++i)
      d_flat[i] = (d_feat[i] - tr.feat[i] * dot) / tr.norm;
  }

  // unpool 2
  Tensor d_act2(tr.act2.c, tr.act2.h, tr.act2.w);
  for (size_t i = 0; i < d_flat.size(); ++i) {
    const int c = int(i / (size_t(tr.pool2.h) * tr.pool2.w));
    d_act2.v[size_t(c) * tr.act2.h * tr.act2.w + size_t(tr.idx2[i])] += d_flat[i];
  }
  for (size_t i = 0; i < d_act2.v.size(); ++i)
    if (tr.act2.v[i] <= 0) d_act2.v[i] = 0;

  conv2d_backward_params(tr.pool1, t.conv2, d_act2, g.w2, g.b2);
  Tensor d_pool1(tr.pool1.c, tr.pool1.h, tr.pool1.w);
  conv2d_backward_input(t.conv2, d_act2, d_pool1);

  // unpool 1
  Tensor d_act1(tr.act1.c, tr.act1.h, tr.act1.w);
  for (size_t i = 0; i < d_pool1.v.size(); ++i) {
    const int c = int(i / (size_t(tr.pool1.h) * tr.pool1.w));
    d_act1.v[size_t(c) * tr.act1.h * tr.act1.w + size_t(tr.idx1[i])] += d_pool1.v[i];
  }
  for (size_t i = 0; i < d_act1.v.size(); ++i)
    if (tr.act1.v[i] <= 0) d_act1.v[i] = 0;

  conv2d_backward_params(tr.in, t.conv1, d_act1, g.w1, g.b1);
}

struct HeadTrace {
  std::vector<double> u;   // [fa+fb, |fa-fb|]
  std::vector<double> sgn; // sign(fa - fb)
  std::vector<double> h1;  // post-relu hidden
  double logit = 0;
  double prob = 0;
};

void forward_head(const std::vector<double>& fa, const std::vector<double>& fb,
                  const HeadParams& head, HeadTrace& tr) {
  const size_t f = fa.size();
  if (head.fc1.in != int(2 * f)) throw ContractError("head input size mismatch");
  tr.u.resize(2 * f);
  tr.sgn.resize(f);
  for (size_t i = 0; i < f; ++i) {
    const double d = fa[i] - fb[i];
    tr.u[i] = fa[i] + fb[i];
    tr.u[f + i] = std::abs(d);
    tr.sgn[i] = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
  }
  tr.h1.assign(size_t(head.fc1.out), 0.0);
  for (int o = 0; o < head.fc1.out; ++o) {
    double acc = head.fc1.b[size_t(o)];
    const double* w = &head.fc1.w[size_t(o) * tr.u.size()];
    for (size_t i = 0; i < tr.u.size(); ++i) acc += w[i] * tr.u[i];
    tr.h1[size_t(o)] = acc > 0 ? acc : 0;
  }
  double logit = head.fc2.b[0];
  for (int i = 0; i < head.fc2.in; ++i) logit += head.fc2.w[size_t(i)] * tr.h1[size_t(i)];
  tr.logit = logit;
  tr.prob = stable_sigmoid(logit);
  if (!std::isfinite(tr.prob)) throw NumericError("matcher produced a non-finite probability");
}

// d_logit -> head parameter gradients plus gradients w.r.t. both feature vectors.
void backward_head(const HeadTrace& tr, const HeadParams& head, double d_logit, HeadGrad& g,
                   std::vector<double>& d_fa, std::vector<double>& d_fb) {
  const size_t f = tr.sgn.size();
  std::vector<double> d_h1(size_t(head.fc2.in), 0.0);
  for (int i = 0; i < head.fc2.in; ++i) {
    g.w2[size_t(i)] += d_logit * tr.h1[size_t(i)];
    d_h1[size_t(i)] = d_logit * head.fc2.w[size_t(i)];
  }
  g.b2[0] += d_logit;

  std::vector<double> d_u(tr.u.size(), 0.0);
  for (int o = 0; o < head.fc1.out; ++o) {
    if (tr.h1[size_t(o)] <= 0) continue;
    const double d = d_h1[size_t(o)];
    double* gw = &g.w1[size_t(o) * tr.u.size()];
    const double* w = &head.fc1.w[size_t(o) * tr.u.size()];
    for (size_t i = 0; i < tr.u.size(); ++i) {
      gw[i] += d * tr.u[i];
      d_u[i] += d * w[i];
    }
    g.b1[size_t(o)] += d;
  }

  d_fa.assign(f, 0.0);
  d_fb.assign(f, 0.0);
  for (size_t i = 0; i < f; ++i) {
    d_fa[i] = d_u[i] + tr.sgn[i] * d_u[f + i];
    d_fb[i] = d_u[i] - tr.sgn[i] * d_u[f + i];
  }
}

// Loss and full gradient for one (patch, template, label) pair.
double pair_loss_grad(const Tensor& patch, const Tensor& tmpl, int label,
                      const TowerParams& tower, const HeadParams& head, TowerGrad& tg,
                      HeadGrad& hg) {
  TowerTrace ta, tb;
  forward_tower(patch, tower, ta);
  forward_tower(tmpl, tower, tb);
  HeadTrace ht;
  forward_head(ta.feat, tb.feat, head, ht);

  const double phi = ht.prob;
  const double phic = std::clamp(phi, kProbClamp, 1.0 - kProbClamp);
  const double y = double(label);
  const double loss = -(y * std::log(phic) + (1.0 - y) * std::log(1.0 - phic));
  // clamped region contributes no gradient
  const double d_logit = (phi == phic) ? (phi - y) : 0.0;

  std::vector<double> d_fa, d_fb;
  backward_head(ht, head, d_logit, hg, d_fa, d_fb);
  backward_tower(ta, tower, d_fa, tg);
  backward_tower(tb, tower, d_fb, tg);
  return loss;
}

void sgd_update(std::vector<double>& theta, std::vector<double>& vel,
                const std::vector<double>& grad, double lr, double momentum, double wd) {
  for (size_t i = 0; i < theta.size(); ++i) {
    vel[i] = momentum * vel[i] - lr * (grad[i] + wd * theta[i]);
    theta[i] += vel[i];
  }
}

FcnLayer make_conv(int out_ch, int in_ch) {
  FcnLayer L;
  L.out_ch = out_ch;
  L.in_ch = in_ch;
  L.kh = L.kw = 3;
  L.stride = 1;
  L.pad = 1;
  L.relu = true;
  L.weight.resize(size_t(out_ch) * in_ch * 9);
  L.bias.assign(size_t(out_ch), 0.0);
  return L;
}

void he_fill(std::vector<double>& w, double fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : w) v = dist(rng);
}

}  // namespace

Tensor extract_patch_raw(const DepthImage& img, double cx, double cy, int size) {
  if (size < 1) throw ContractError("patch size must be positive");
  const int x0 = int(std::llround(cx)) - size / 2;
  const int y0 = int(std::llround(cy)) - size / 2;
  Tensor t(1, size, size);
  for (int y = 0; y < size; ++y) {
    const int iy = reflect(y0 + y, img.height);
    for (int x = 0; x < size; ++x)
      t.at(0, y, x) = double(img.at(reflect(x0 + x, img.width), iy));
  }
  return t;
}

Tensor extract_patch(const DepthImage& img, double cx, double cy, int size, double depth_scale) {
  if (depth_scale <= 0) throw ContractError("depth scale must be positive");
  Tensor t = extract_patch_raw(img, cx, cy, size);
  const int px = reflect(int(std::llround(cx)), img.width);
  const int py = reflect(int(std::llround(cy)), img.height);
  const double center = double(img.at(px, py));
  for (double& v : t.v) v = (v - center) / depth_scale;
  return t;
}

KMeansResult kmeans(const std::vector<std::vector<double>>& points, int k, uint64_t seed,
                    int max_iters, double tol) {
  const int n = int(points.size());
  if (k < 1) throw ContractError("cluster count must be positive");
  if (n < k)
    throw ContractError("k-means needs at least " + std::to_string(k) + " points, got " +
                        std::to_string(n));

  Rng rng = make_rng(seed, 0x4B4Dull);
  KMeansResult res;
  res.assign.assign(size_t(n), 0);

  // k-means++ seeding
  std::vector<double> d2(size_t(n), std::numeric_limits<double>::infinity());
  const int first = std::uniform_int_distribution<int>(0, n - 1)(rng);
  res.centers.push_back(points[size_t(first)]);
  while (int(res.centers.size()) < k) {
    double total = 0;
    for (int i = 0; i < n; ++i) {
      d2[size_t(i)] = std::min(d2[size_t(i)], sq_dist(points[size_t(i)], res.centers.back()));
      total += d2[size_t(i)];
    }
    int pick = -1;
    if (total > 0) {
      const double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      double cum = 0;
      for (int i = 0; i < n && pick < 0; ++i) {
        cum += d2[size_t(i)];
        if (cum > r && d2[size_t(i)] > 0) pick = i;
      }
      if (pick < 0)  // numeric edge: fall back to the farthest point
        pick = int(std::max_element(d2.begin(), d2.end()) - d2.begin());
    } else {
      pick = std::uniform_int_distribution<int>(0, n - 1)(rng);  // all duplicates
    }
    res.centers.push_back(points[size_t(pick)]);
  }

  std::vector<int> count(size_t(k), 0);
  double prev_inertia = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < max_iters; ++iter) {
    // assignment
    double inertia = 0;
#pragma omp parallel for schedule(static) reduction(+ : inertia)
    for (int i = 0; i < n; ++i) {
      int best_c = 0;
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = sq_dist(points[size_t(i)], res.centers[size_t(c)]);
        if (d < best) {
          best = d;
          best_c = c;
        }
      }
      res.assign[size_t(i)] = best_c;
      d2[size_t(i)] = best;
      inertia += best;
    }

    std::fill(count.begin(), count.end(), 0);
    for (int i = 0; i < n; ++i) ++count[size_t(res.assign[size_t(i)])];

    // reseed empty clusters to the farthest point from its center
    for (int c = 0; c < k; ++c) {
      if (count[size_t(c)] != 0) continue;
      int far = 0;
      for (int i = 1; i < n; ++i)
        if (d2[size_t(i)] > d2[size_t(far)]) far = i;
      --count[size_t(res.assign[size_t(far)])];
      inertia -= d2[size_t(far)];
      res.centers[size_t(c)] = points[size_t(far)];
      res.assign[size_t(far)] = c;
      d2[size_t(far)] = 0;
      count[size_t(c)] = 1;
    }
    res.inertia.push_back(inertia);

    // update
    const size_t dim = points[0].size();
    for (auto& c : res.centers) std::fill(c.begin(), c.end(), 0.0);
    for (int i = 0; i < n; ++i) {
      auto& c = res.centers[size_t(res.assign[size_t(i)])];
      const auto& p = points[size_t(i)];
      for (size_t j = 0; j < dim; ++j) c[j] += p[j];
    }
    for (int c = 0; c < k; ++c)
      for (size_t j = 0; j < dim; ++j) res.centers[size_t(c)][j] /= double(count[size_t(c)]);

    if (std::abs(prev_inertia - inertia) <= tol * std::max(prev_inertia, 1e-30)) break;
    prev_inertia = inertia;
  }
  return res;
}

TemplateSet cluster_templates(const SampleSet& data, int k_parts, int t_per_part, uint64_t seed,
                              int patch, double depth_scale) {
  if (t_per_part < 1) throw ContractError("template count must be positive");
  TemplateSet out;
  out.t_per_part = t_per_part;
  out.patch = patch;
  out.normalized = true;
  out.templates.resize(size_t(k_parts));

  for (int k = 0; k < k_parts; ++k) {
    std::vector<std::vector<double>> pts;
    pts.reserve(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
      const Joint& j = data.poses[i].joints[size_t(k)];
      pts.push_back(extract_patch(data.images[i], j.x, j.y, patch, depth_scale).v);
    }
    if (int(pts.size()) < t_per_part)
      throw ContractError("part " + std::to_string(k) + " has " + std::to_string(pts.size()) +
                          " ground-truth patches, need at least " + std::to_string(t_per_part));

    const KMeansResult km = kmeans(pts, t_per_part, derive_seed(seed, 0xC10ull + uint64_t(k)));
    for (const auto& center : km.centers) {
      Tensor t(1, patch, patch);
      t.v = center;
      out.templates[size_t(k)].push_back(std::move(t));
    }
  }
  return out;
}

void write_templates(const TemplateSet& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("KTPL", 4);
  wire::put_u32(os, uint32_t(t.part_count()));
  wire::put_u32(os, uint32_t(t.t_per_part));
  wire::put_u32(os, uint32_t(t.patch));
  wire::put_u32(os, uint32_t(t.patch));
  for (const auto& part : t.templates) {
    if (int(part.size()) != t.t_per_part) throw ContractError("ragged template set");
    for (const Tensor& p : part)
      for (double v : p.v) wire::put_f32(os, v);
  }
  if (!os) throw IoError("write failed: " + path);
}

TemplateSet read_templates(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  wire::expect_magic(is, "KTPL", path);
  const uint32_t k = wire::get_u32(is, path + " header");
  const uint32_t t = wire::get_u32(is, path + " header");
  const uint32_t ph = wire::get_u32(is, path + " header");
  const uint32_t pw = wire::get_u32(is, path + " header");
  if (ph != pw || ph == 0) throw FormatError(path + ": bad patch dimensions");

  TemplateSet out;
  out.t_per_part = int(t);
  out.patch = int(ph);
  out.normalized = true;
  out.templates.resize(k);
  for (auto& part : out.templates)
    for (uint32_t i = 0; i < t; ++i) {
      Tensor p(1, int(ph), int(ph));
      for (double& v : p.v) v = wire::get_f32(is, path + " payload");
      part.push_back(std::move(p));
    }
  return out;
}

bool MatcherParams::all_finite() const {
  auto vec_ok = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  for (const TowerParams& t : towers)
    if (!vec_ok(t.conv1.weight) || !vec_ok(t.conv1.bias) || !vec_ok(t.conv2.weight) ||
        !vec_ok(t.conv2.bias))
      return false;
  for (const HeadParams& h : heads)
    if (!vec_ok(h.fc1.w) || !vec_ok(h.fc1.b) || !vec_ok(h.fc2.w) || !vec_ok(h.fc2.b))
      return false;
  return true;
}

int tower_feature_dim(int patch) {
  if (patch < 4) throw ContractError("patch too small for two pooling stages");
  const int p1 = patch / 2, p2 = p1 / 2;
  return 8 * p2 * p2;
}

MatcherParams init_matcher(int k_parts, uint64_t seed, int patch, int hidden,
                           bool shared_tower) {
  if (k_parts < 1 || hidden < 1) throw ContractError("bad matcher configuration");
  MatcherParams p;
  p.patch = patch;
  p.feat_dim = tower_feature_dim(patch);

  const int tower_count = shared_tower ? 1 : k_parts;
  for (int i = 0; i < tower_count; ++i) {
    TowerParams t;
    t.conv1 = make_conv(8, 1);
    t.conv2 = make_conv(8, 8);
    Rng rng = make_rng(seed, 0x3A0ull + uint64_t(i));
    he_fill(t.conv1.weight, 9.0, rng);
    he_fill(t.conv2.weight, 72.0, rng);
    p.towers.push_back(std::move(t));
  }
  for (int k = 0; k < k_parts; ++k) {
    HeadParams h;
    h.fc1.out = hidden;
    h.fc1.in = 2 * p.feat_dim;
    h.fc1.w.resize(size_t(hidden) * size_t(2 * p.feat_dim));
    h.fc1.b.assign(size_t(hidden), 0.0);
    h.fc2.out = 1;
    h.fc2.in = hidden;
    h.fc2.w.resize(size_t(hidden));
    h.fc2.b.assign(1, 0.0);
    Rng rng = make_rng(seed, 0x8EAull + uint64_t(k));
    he_fill(h.fc1.w, double(2 * p.feat_dim), rng);
    he_fill(h.fc2.w, double(hidden), rng);
    p.heads.push_back(std::move(h));
  }
  return p;
}

std::vector<double> tower_features(const Tensor& patch, const TowerParams& tower) {
  TowerTrace tr;
  forward_tower(patch, tower, tr);
  return tr.feat;
}

double head_prob(const std::vector<double>& fa, const std::vector<double>& fb,
                 const HeadParams& head) {
  HeadTrace tr;
  forward_head(fa, fb, head, tr);
  return tr.prob;
}

double match_prob(const Tensor& a, const Tensor& b, const MatcherParams& params, int part) {
  if (part < 0 || part >= params.part_count()) throw ContractError("part index out of range");
  if (a.h != params.patch || a.w != params.patch || b.h != params.patch || b.w != params.patch)
    throw ContractError("patch size does not match the matcher");
  const TowerParams& tower = params.tower(part);
  return head_prob(tower_features(a, tower), tower_features(b, tower),
                   params.heads[size_t(part)]);
}

double matcher_loss(const std::vector<MatchPair>& pairs, const TemplateSet& templates,
                    const MatcherParams& params, int part) {
  if (pairs.empty()) throw ContractError("empty pair list");
  double loss = 0;
  for (const MatchPair& pr : pairs) {
    const double phi = match_prob(pr.patch, templates.templates[size_t(part)][size_t(pr.template_idx)],
                                  params, part);
    const double phic = std::clamp(phi, kProbClamp, 1.0 - kProbClamp);
    loss += -(pr.label * std::log(phic) + (1 - pr.label) * std::log(1.0 - phic));
  }
  return loss / double(pairs.size());
}

MatcherGrad matcher_loss_grad(const std::vector<MatchPair>& pairs,
                              const TemplateSet& templates, const MatcherParams& params,
                              int part) {
  if (pairs.empty()) throw ContractError("empty pair list");
  const TowerParams& tower = params.tower(part);
  const HeadParams& head = params.heads[size_t(part)];
  TowerGrad tg = TowerGrad::zeros(tower);
  HeadGrad hg = HeadGrad::zeros(head);
  for (const MatchPair& pr : pairs)
    pair_loss_grad(pr.patch, templates.templates[size_t(part)][size_t(pr.template_idx)],
                   pr.label, tower, head, tg, hg);

  const double inv = 1.0 / double(pairs.size());
  MatcherGrad g{std::move(tg.w1), std::move(tg.b1), std::move(tg.w2), std::move(tg.b2),
                std::move(hg.w1), std::move(hg.b1), std::move(hg.w2), std::move(hg.b2)};
  for (auto* a : {&g.tw1, &g.tb1, &g.tw2, &g.tb2, &g.hw1, &g.hb1, &g.hw2, &g.hb2})
    for (double& v : *a) v *= inv;
  return g;
}

double box_iou(const Box& a, const Box& b) {
  if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0)
    throw ContractError("zero-area box in IoU");
  const double ix = std::max(0.0, std::min(a.x + a.w / 2, b.x + b.w / 2) -
                                      std::max(a.x - a.w / 2, b.x - b.w / 2));
  const double iy = std::max(0.0, std::min(a.y + a.h / 2, b.y + b.h / 2) -
                                      std::max(a.y - a.h / 2, b.y - b.h / 2));
  const double inter = ix * iy;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

int label_pair(const PartProposal& prop, const Box& truth) {
  const Box b{prop.x, prop.y, double(prop.w), double(prop.h)};
  return box_iou(b, truth) > 0.5 ? 1 : 0;
}

std::vector<MatchEntry> build_match_pool(const SampleSet& data,
                                         const std::vector<ProposalSet>& proposals,
                                         int box_w, int box_h) {
  if (data.size() != proposals.size())
    throw ContractError("image and proposal counts differ");
  std::vector<MatchEntry> pool;
  std::vector<char> part_has_pos;

  for (size_t i = 0; i < data.size(); ++i) {
    const ProposalSet& ps = proposals[i];
    if (part_has_pos.empty()) part_has_pos.assign(size_t(ps.part_count()), 0);
    for (int k = 0; k < ps.part_count(); ++k) {
      const Joint& j = data.poses[i].joints[size_t(k)];
      const Box truth{j.x, j.y, double(box_w), double(box_h)};

      MatchEntry e;
      e.image = int(i);
      e.part = k;
      double best_iou = 0.5;  // positives need IoU strictly above 0.5
      bool has_pos = false;
      for (const PartProposal& p : ps.per_part[size_t(k)]) {
        const double iou = box_iou(Box{p.x, p.y, double(p.w), double(p.h)}, truth);
        if (iou > best_iou) {
          best_iou = iou;
          e.pos = p;
          has_pos = true;
        } else if (iou <= 0.5 && int(e.negs.size()) < 6) {
          e.negs.push_back(p);  // score order, so these are the hardest negatives
        }
      }
      if (has_pos && !e.negs.empty()) {
        part_has_pos[size_t(k)] = 1;
        pool.push_back(std::move(e));
      }
    }
  }
  for (size_t k = 0; k < part_has_pos.size(); ++k)
    if (!part_has_pos[k])
      std::fprintf(stderr, "matchnet: part %zu has no positive proposals; skipped this round\n",
                   k);
  return pool;
}

void matcher_train(MatcherParams& params, const SampleSet& data,
                   const std::vector<MatchEntry>& pool, const TemplateSet& templates,
                   const MatcherTrainConfig& cfg, MatcherTrainLog* log) {
  if (pool.empty()) throw ContractError("empty training pool");
  if (templates.patch != params.patch) throw ContractError("template/matcher patch mismatch");
  if (cfg.batch_pairs < 2) throw ConfigError("batch must hold at least one pos/neg pair");

  // momentum state, one buffer per parameter array
  std::vector<TowerGrad> tower_vel;
  for (const TowerParams& t : params.towers) tower_vel.push_back(TowerGrad::zeros(t));
  std::vector<HeadGrad> head_vel;
  for (const HeadParams& h : params.heads) head_vel.push_back(HeadGrad::zeros(h));

  std::vector<int> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  const int entries_per_batch = cfg.batch_pairs / 2;

  struct PairJob {
    const Tensor* patch;
    int tmpl, label, part;
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng = make_rng(cfg.seed, 0x3E0ull + uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0;
    size_t epoch_pairs = 0;
    std::vector<Tensor> patch_store;
    std::vector<PairJob> jobs;

    for (size_t start = 0; start < order.size(); start += size_t(entries_per_batch)) {
      const size_t stop = std::min(order.size(), start + size_t(entries_per_batch));
      patch_store.clear();
      jobs.clear();

      // pair selection is drawn serially so thread count cannot affect it
      for (size_t oi = start; oi < stop; ++oi) {
        const MatchEntry& e = pool[size_t(order[oi])];
        const DepthImage& img = data.images[size_t(e.image)];
        const int t_pos =
            std::uniform_int_distribution<int>(0, templates.t_per_part - 1)(rng);
        const int neg_i =
            std::uniform_int_distribution<int>(0, int(e.negs.size()) - 1)(rng);
        const int t_neg =
            std::uniform_int_distribution<int>(0, templates.t_per_part - 1)(rng);
        const bool self_pos =
            std::uniform_int_distribution<int>(0, 3)(rng) == 0;

        // a quarter of the positives pair a template with an exact copy of
        // itself; without them the head never sees a zero difference channel
        // and scores identical patches below ordinary matches
        if (self_pos) {
          patch_store.push_back(
              templates.templates[size_t(e.part)][size_t(t_pos)]);
        } else {
          patch_store.push_back(
              extract_patch(img, e.pos.x, e.pos.y, params.patch, cfg.depth_scale));
        }
        jobs.push_back({nullptr, t_pos, 1, e.part});
        patch_store.push_back(extract_patch(img, e.negs[size_t(neg_i)].x,
                                            e.negs[size_t(neg_i)].y, params.patch,
                                            cfg.depth_scale));
        jobs.push_back({nullptr, t_neg, 0, e.part});
      }
      for (size_t j = 0; j < jobs.size(); ++j) jobs[j].patch = &patch_store[j];

      const int npairs = int(jobs.size());
      std::vector<TowerGrad> tgrads;
      std::vector<HeadGrad> hgrads;
      tgrads.reserve(size_t(npairs));
      hgrads.reserve(size_t(npairs));
      for (const PairJob& j : jobs) {
        tgrads.push_back(TowerGrad::zeros(params.tower(j.part)));
        hgrads.push_back(HeadGrad::zeros(params.heads[size_t(j.part)]));
      }
      std::vector<double> losses(size_t(npairs), 0.0);
      std::string error;

#pragma omp parallel for schedule(dynamic)
      for (int j = 0; j < npairs; ++j) {
        try {
          const PairJob& job = jobs[size_t(j)];
          losses[size_t(j)] = pair_loss_grad(
              *job.patch, templates.templates[size_t(job.part)][size_t(job.tmpl)], job.label,
              params.tower(job.part), params.heads[size_t(job.part)], tgrads[size_t(j)],
              hgrads[size_t(j)]);
        } catch (const std::exception& ex) {
#pragma omp critical
          if (error.empty()) error = ex.what();
        }
      }
      if (!error.empty())
        throw NumericError("epoch " + std::to_string(epoch) + ": " + error);

      // fixed-order reduction per tower / head
      std::vector<TowerGrad> tower_acc;
      for (const TowerParams& t : params.towers) tower_acc.push_back(TowerGrad::zeros(t));
      std::vector<HeadGrad> head_acc;
      for (const HeadParams& h : params.heads) head_acc.push_back(HeadGrad::zeros(h));
      for (int j = 0; j < npairs; ++j) {
        const int part = jobs[size_t(j)].part;
        const size_t ti = params.shared_tower() ? 0 : size_t(part);
        tower_acc[ti].add(tgrads[size_t(j)]);
        head_acc[size_t(part)].add(hgrads[size_t(j)]);
        epoch_loss += losses[size_t(j)];
      }
      epoch_pairs += size_t(npairs);

      const double inv = 1.0 / double(npairs);
      for (auto& acc : tower_acc) {
        for (double& v : acc.w1) v *= inv;
        for (double& v : acc.b1) v *= inv;
        for (double& v : acc.w2) v *= inv;
        for (double& v : acc.b2) v *= inv;
      }
      for (auto& acc : head_acc) {
        for (double& v : acc.w1) v *= inv;
        for (double& v : acc.b1) v *= inv;
        for (double& v : acc.w2) v *= inv;
        for (double& v : acc.b2) v *= inv;
      }

      for (size_t t = 0; t < params.towers.size(); ++t) {
        sgd_update(params.towers[t].conv1.weight, tower_vel[t].w1, tower_acc[t].w1, cfg.lr,
                   cfg.momentum, cfg.weight_decay);
        sgd_update(params.towers[t].conv1.bias, tower_vel[t].b1, tower_acc[t].b1, cfg.lr,
                   cfg.momentum, cfg.weight_decay);
        sgd_update(params.towers[t].conv2.weight, tower_vel[t].w2, tower_acc[t].w2, cfg.lr,
                   cfg.momentum, cfg.weight_decay);
        sgd_update(params.towers[t].conv2.bias, tower_vel[t].b2, tower_acc[t].b2, cfg.lr,
                   cfg.momentum, cfg.weight_decay);
      }
      for (size_t h = 0; h < params.heads.size(); ++h) {
        sgd_update(params.heads[h].fc1.w, head_vel[h].w1, head_acc[h].w1, cfg.lr, cfg.momentum,
                   cfg.weight_decay);
        sgd_update(params.heads[h].fc1.b, head_vel[h].b1, head_acc[h].b1, cfg.lr, cfg.momentum,
                   cfg.weight_decay);
        sgd_update(params.heads[h].fc2.w, head_vel[h].w2, head_acc[h].w2, cfg.lr, cfg.momentum,
                   cfg.weight_decay);
        sgd_update(params.heads[h].fc2.b, head_vel[h].b2, head_acc[h].b2, cfg.lr, cfg.momentum,
                   cfg.weight_decay);
      }
    }

    epoch_loss /= double(std::max<size_t>(1, epoch_pairs));
    if (!std::isfinite(epoch_loss) || !params.all_finite())
      throw NumericError("matcher training diverged at epoch " + std::to_string(epoch));
    if (log) log->epoch_loss.push_back(epoch_loss);
  }
}

MatcherParams matcher_train(const DatasetManifest& mf, const TemplateSet& templates,
                            const FcnParams& fcn, const MatcherTrainConfig& cfg,
                            MatcherTrainLog* log) {
  const SampleSet data = load_split(mf, "train");
  if (data.size() == 0) throw ContractError("empty training set");

  std::vector<ProposalSet> proposals(data.size());
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < (long long)data.size(); ++i) {
    try {
      const HeatMapStack maps = fcn_forward(data.images[size_t(i)], fcn);
      proposals[size_t(i)] =
          extract_proposals(maps, data.images[size_t(i)], cfg.window, cfg.box_w, cfg.box_h);
    } catch (const std::exception& ex) {
#pragma omp critical
      if (error.empty()) error = ex.what();
    }
  }
  if (!error.empty()) throw NumericError(error);

  const std::vector<MatchEntry> pool =
      build_match_pool(data, proposals, cfg.box_w, cfg.box_h);
  MatcherParams params =
      init_matcher(int(templates.templates.size()), cfg.seed, templates.patch);
  matcher_train(params, data, pool, templates, cfg, log);
  return params;
}

double unary_score(const Tensor& patch, const TemplateSet& templates,
                   const MatcherParams& params, int part) {
  if (part < 0 || part >= params.part_count() || part >= templates.part_count())
    throw ContractError("part index out of range");
  const TowerParams& tower = params.tower(part);
  const std::vector<double> fp = tower_features(patch, tower);
  double score = 0;
  for (const Tensor& t : templates.templates[size_t(part)])
    score += head_prob(fp, tower_features(t, tower), params.heads[size_t(part)]);
  return score;
}

UnaryTable build_unary_table(const DepthImage& img, const ProposalSet& props,
                             const TemplateSet& templates, const MatcherParams& params,
                             double depth_scale) {
  const int k_parts = props.part_count();
  if (k_parts != params.part_count() || k_parts != templates.part_count())
    throw ContractError("part count mismatch between proposals, templates and matcher");

  UnaryTable table(static_cast<size_t>(k_parts));
  std::string error;
  for (int k = 0; k < k_parts; ++k) {
    const TowerParams& tower = params.tower(k);
    const HeadParams& head = params.heads[size_t(k)];

    // template features are fixed for the whole table
    std::vector<std::vector<double>> tfeat;
    tfeat.reserve(size_t(templates.t_per_part));
    for (const Tensor& t : templates.templates[size_t(k)])
      tfeat.push_back(tower_features(t, tower));

    const auto& plist = props.per_part[size_t(k)];
    table[size_t(k)].assign(plist.size(), 0.0);
#pragma omp parallel for schedule(dynamic)
    for (long long i = 0; i < (long long)plist.size(); ++i) {
      try {
        const Tensor patch =
            extract_patch(img, plist[size_t(i)].x, plist[size_t(i)].y, params.patch, depth_scale);
        const std::vector<double> fp = tower_features(patch, tower);
        double s = 0;
        for (const auto& tf : tfeat) s += head_prob(fp, tf, head);
        table[size_t(k)][size_t(i)] = s;
      } catch (const std::exception& ex) {
#pragma omp critical
        if (error.empty()) error = ex.what();
      }
    }
    if (!error.empty()) throw NumericError(error);
  }
  return table;
}

namespace {

void write_conv(std::ostream& os, const FcnLayer& L) {
  wire::put_u32(os, uint32_t(L.out_ch));
  wire::put_u32(os, uint32_t(L.in_ch));
  wire::put_u32(os, uint32_t(L.kh));
  wire::put_u32(os, uint32_t(L.kw));
  for (double v : L.weight) wire::put_f32(os, v);
  for (double v : L.bias) wire::put_f32(os, v);
}

FcnLayer read_conv(std::istream& is, const std::string& path) {
  FcnLayer L;
  L.out_ch = int(wire::get_u32(is, path));
  L.in_ch = int(wire::get_u32(is, path));
  L.kh = int(wire::get_u32(is, path));
  L.kw = int(wire::get_u32(is, path));
  if (L.out_ch < 1 || L.in_ch < 1 || L.kh != 3 || L.kw != 3)
    throw FormatError(path + ": unexpected tower layer shape");
  L.stride = 1;
  L.pad = 1;
  L.relu = true;
  L.weight.resize(size_t(L.out_ch) * L.in_ch * L.kh * L.kw);
  L.bias.resize(size_t(L.out_ch));
  for (double& v : L.weight) v = wire::get_f32(is, path);
  for (double& v : L.bias) v = wire::get_f32(is, path);
  return L;
}

void write_fc(std::ostream& os, const FcLayer& L) {
  wire::put_u32(os, uint32_t(L.out));
  wire::put_u32(os, uint32_t(L.in));
  wire::put_u32(os, 1);
  wire::put_u32(os, 1);
  for (double v : L.w) wire::put_f32(os, v);
  for (double v : L.b) wire::put_f32(os, v);
}

FcLayer read_fc(std::istream& is, const std::string& path) {
  FcLayer L;
  L.out = int(wire::get_u32(is, path));
  L.in = int(wire::get_u32(is, path));
  const uint32_t one_a = wire::get_u32(is, path);
  const uint32_t one_b = wire::get_u32(is, path);
  if (L.out < 1 || L.in < 1 || one_a != 1 || one_b != 1)
    throw FormatError(path + ": unexpected head layer shape");
  L.w.resize(size_t(L.out) * size_t(L.in));
  L.b.resize(size_t(L.out));
  for (double& v : L.w) v = wire::get_f32(is, path);
  for (double& v : L.b) v = wire::get_f32(is, path);
  return L;
}

}  // namespace

void write_matcher(const MatcherParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("KMAT", 4);
  wire::put_u32(os, uint32_t(params.towers.size()));
  wire::put_u32(os, uint32_t(params.heads.size()));
  wire::put_u32(os, uint32_t(params.patch));
  wire::put_u32(os, uint32_t(params.heads.empty() ? 0 : params.heads[0].fc1.out));
  for (const TowerParams& t : params.towers) {
    write_conv(os, t.conv1);
    write_conv(os, t.conv2);
  }
  for (const HeadParams& h : params.heads) {
    write_fc(os, h.fc1);
    write_fc(os, h.fc2);
  }
  if (!os) throw IoError("write failed: " + path);
}

MatcherParams read_matcher(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  wire::expect_magic(is, "KMAT", path);
  const uint32_t towers = wire::get_u32(is, path + " header");
  const uint32_t heads = wire::get_u32(is, path + " header");
  const uint32_t patch = wire::get_u32(is, path + " header");
  wire::get_u32(is, path + " header");  // hidden width, implied by fc1 dims

  MatcherParams p;
  p.patch = int(patch);
  p.feat_dim = tower_feature_dim(int(patch));
  for (uint32_t t = 0; t < towers; ++t) {
    TowerParams tp;
    tp.conv1 = read_conv(is, path);
    tp.conv2 = read_conv(is, path);
    p.towers.push_back(std::move(tp));
  }
  for (uint32_t h = 0; h < heads; ++h) {
    HeadParams hp;
    hp.fc1 = read_fc(is, path);
    hp.fc2 = read_fc(is, path);
    if (hp.fc1.in != 2 * p.feat_dim)
      throw FormatError(path + ": head input does not match the patch size");
    p.heads.push_back(std::move(hp));
  }
  return p;
}

}  // namespace posekit
