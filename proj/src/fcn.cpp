#include "posekit/fcn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "posekit/conv.hpp"
#include "posekit/error.hpp"
#include "posekit/rng.hpp"
#include "posekit/wire.hpp"

namespace posekit {

namespace {

void validate_arch(const FcnArch& arch) {
  if (arch.layers.empty()) throw ContractError("empty architecture");
  for (size_t i = 0; i < arch.layers.size(); ++i) {
    const LayerSpec& l = arch.layers[i];
    if (l.out_ch < 1) throw ContractError("layer " + std::to_string(i) + ": out_ch < 1");
    if (l.kernel < 1 || l.kernel % 2 == 0)
      throw ContractError("layer " + std::to_string(i) + ": kernel must be odd");
    if (l.stride < 1) throw ContractError("layer " + std::to_string(i) + ": stride < 1");
  }
}

// Forward pass keeping every post-activation map; acts[0] is the input.
std::vector<Tensor> forward_all(const Tensor& input, const FcnParams& params) {
  std::vector<Tensor> acts;
  acts.reserve(params.layers.size() + 1);
  acts.push_back(input);
  for (size_t li = 0; li < params.layers.size(); ++li) {
    const FcnLayer& L = params.layers[li];
    const Tensor& in = acts.back();
    Tensor out(L.out_ch, conv_out_extent(in.h, L.kh, L.stride, L.pad),
               conv_out_extent(in.w, L.kw, L.stride, L.pad));
    conv2d_forward(in, L, out);
    if (L.relu)
      for (double& v : out.v) v = v > 0 ? v : 0;
    if (!out.all_finite())
      throw NumericError("layer " + std::to_string(li) + " produced non-finite values");
    acts.push_back(std::move(out));
  }
  return acts;
}

}  // namespace

int FcnArch::downsample() const {
  int s = 1;
  for (const LayerSpec& l : layers) s *= l.stride;
  return s;
}

int FcnArch::out_channels() const { return layers.empty() ? 0 : layers.back().out_ch; }

FcnArch default_fcn_arch(int k_parts) {
  if (k_parts < 1) throw ContractError("part count < 1");
  FcnArch a;
  a.layers = {
      {8, 3, 1, true},  {16, 3, 2, true}, {16, 3, 1, true},
      {32, 3, 1, true}, {32, 3, 1, true}, {k_parts, 3, 1, false},
  };
  return a;
}

int FcnParams::downsample() const {
  int s = 1;
  for (const FcnLayer& l : layers) s *= l.stride;
  return s;
}

bool FcnParams::all_finite() const {
  for (const FcnLayer& l : layers) {
    for (double v : l.weight)
      if (!std::isfinite(v)) return false;
    for (double v : l.bias)
      if (!std::isfinite(v)) return false;
  }
  return true;
}

FcnParams init_fcn(const FcnArch& arch, uint64_t seed) {
  validate_arch(arch);
  FcnParams p;
  int in_ch = 1;
  for (size_t li = 0; li < arch.layers.size(); ++li) {
    const LayerSpec& spec = arch.layers[li];
    FcnLayer L;
    L.out_ch = spec.out_ch;
    L.in_ch = in_ch;
    L.kh = L.kw = spec.kernel;
    L.stride = spec.stride;
    L.pad = (spec.kernel - 1) / 2;
    L.relu = spec.relu;
    L.weight.resize(size_t(L.out_ch) * L.in_ch * L.kh * L.kw);
    L.bias.assign(size_t(L.out_ch), 0.0);

    Rng rng = make_rng(seed, 0xFC0ull + li);
    const double stddev = std::sqrt(2.0 / (double(L.in_ch) * L.kh * L.kw));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& w : L.weight) w = dist(rng);

    in_ch = L.out_ch;
    p.layers.push_back(std::move(L));
  }
  return p;
}

Tensor normalize_input(const DepthImage& img) {
  if (img.width < 1 || img.height < 1) throw ContractError("empty image");
  const size_t n = img.depth.size();
  double mean = 0;
  for (uint16_t d : img.depth) mean += double(d);
  mean /= double(n);
  double var = 0;
  for (uint16_t d : img.depth) {
    const double c = double(d) - mean;
    var += c * c;
  }
  const double stddev = std::sqrt(var / double(n));

  Tensor t(1, img.height, img.width);
  if (stddev < 1e-12) return t;  // constant image normalizes to zeros
  for (size_t i = 0; i < n; ++i) t.v[i] = (double(img.depth[i]) - mean) / stddev;
  return t;
}

HeatMapStack fcn_forward(const DepthImage& img, const FcnParams& params) {
  if (params.layers.empty()) throw ContractError("empty network");
  const std::vector<Tensor> acts = forward_all(normalize_input(img), params);
  const Tensor& top = acts.back();
  HeatMapStack hm;
  hm.k = top.c;
  hm.h = top.h;
  hm.w = top.w;
  hm.s = params.downsample();
  hm.v = top.v;
  return hm;
}

Tensor gaussian_target(const PoseConfig& pose, int part, int map_h, int map_w, int s,
                       double sigma) {
  if (part < 0 || part >= pose.part_count()) throw ContractError("part index out of range");
  if (sigma <= 0) throw ContractError("sigma must be positive");
  const Joint& j = pose.joints[size_t(part)];
  const int mx = std::clamp(int(std::floor(j.x / s)), 0, map_w - 1);
  const int my = std::clamp(int(std::floor(j.y / s)), 0, map_h - 1);

  Tensor t(1, map_h, map_w);
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (int y = 0; y < map_h; ++y)
    for (int x = 0; x < map_w; ++x) {
      const double d2 = double(x - mx) * (x - mx) + double(y - my) * (y - my);
      t.at(0, y, x) = std::exp(-d2 * inv);
    }
  return t;
}

HeatMapStack build_targets(const PoseConfig& pose, int k_parts, int map_h, int map_w, int s,
                           double sigma) {
  if (pose.part_count() != k_parts) throw ContractError("pose part count mismatch");
  HeatMapStack hm;
  hm.k = k_parts;
  hm.h = map_h;
  hm.w = map_w;
  hm.s = s;
  hm.v.resize(size_t(k_parts) * map_h * map_w);
  for (int k = 0; k < k_parts; ++k) {
    const Tensor t = gaussian_target(pose, k, map_h, map_w, s, sigma);
    std::copy(t.v.begin(), t.v.end(), hm.v.begin() + size_t(k) * map_h * map_w);
  }
  return hm;
}

double fcn_loss(const HeatMapStack& pred, const HeatMapStack& target) {
  if (pred.k != target.k || pred.h != target.h || pred.w != target.w)
    throw ContractError("prediction / target shape mismatch");
  double loss = 0;
  for (size_t i = 0; i < pred.v.size(); ++i) {
    const double d = pred.v[i] - target.v[i];
    loss += d * d;
  }
  return loss;
}

FcnGrad FcnGrad::zeros_like(const FcnParams& p) {
  FcnGrad g;
  g.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    g.layers[i].weight.assign(p.layers[i].weight.size(), 0.0);
    g.layers[i].bias.assign(p.layers[i].bias.size(), 0.0);
  }
  return g;
}

void FcnGrad::add(const FcnGrad& other) {
  if (layers.size() != other.layers.size()) throw ContractError("gradient shape mismatch");
  for (size_t i = 0; i < layers.size(); ++i) {
    for (size_t j = 0; j < layers[i].weight.size(); ++j)
      layers[i].weight[j] += other.layers[i].weight[j];
    for (size_t j = 0; j < layers[i].bias.size(); ++j)
      layers[i].bias[j] += other.layers[i].bias[j];
  }
}

void FcnGrad::scale(double a) {
  for (auto& l : layers) {
    for (double& v : l.weight) v *= a;
    for (double& v : l.bias) v *= a;
  }
}

double fcn_loss_grad(const Tensor& input, const FcnParams& params, const HeatMapStack& target,
                     FcnGrad& grad) {
  const std::vector<Tensor> acts = forward_all(input, params);
  const Tensor& top = acts.back();
  if (top.c != target.k || top.h != target.h || top.w != target.w)
    throw ContractError("prediction / target shape mismatch");

  double loss = 0;
  Tensor d_act(top.c, top.h, top.w);
  for (size_t i = 0; i < top.v.size(); ++i) {
    const double d = top.v[i] - target.v[i];
    loss += d * d;
    d_act.v[i] = 2.0 * d;
  }

  for (int li = int(params.layers.size()) - 1; li >= 0; --li) {
    const FcnLayer& L = params.layers[size_t(li)];
    const Tensor& out = acts[size_t(li) + 1];
    const Tensor& in = acts[size_t(li)];

    Tensor d_pre = std::move(d_act);
    if (L.relu)
      for (size_t i = 0; i < d_pre.v.size(); ++i)
        if (out.v[i] <= 0) d_pre.v[i] = 0;

    conv2d_backward_params(in, L, d_pre, grad.layers[size_t(li)].weight,
                           grad.layers[size_t(li)].bias);
    if (li > 0) {
      d_act = Tensor(in.c, in.h, in.w);
      conv2d_backward_input(L, d_pre, d_act);
    }
  }
  return loss;
}

FcnGrad fcn_backward(const DepthImage& img, const FcnParams& params, const HeatMapStack& target) {
  FcnGrad g = FcnGrad::zeros_like(params);
  fcn_loss_grad(normalize_input(img), params, target, g);
  return g;
}

SampleSet load_split(const DatasetManifest& mf, const std::string& split) {
  SampleSet s;
  s.mm_per_pixel = mf.mm_per_pixel;
  for (int i : mf.split_indices(split)) {
    DepthImage img;
    PoseConfig pose;
    load_sample(mf, i, img, pose);
    s.images.push_back(std::move(img));
    s.poses.push_back(std::move(pose));
  }
  return s;
}

void fcn_train(FcnParams& params, const SampleSet& data, const FcnTrainConfig& cfg,
               FcnTrainLog* log) {
  if (data.size() == 0) throw ContractError("empty training set");
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw ConfigError("bad batch size or epoch count");

  const int n = int(data.size());
  FcnGrad vel = FcnGrad::zeros_like(params);

  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);

  // per-image gradients land in separate buffers and are reduced in index
  // order, so the update is identical at any thread count
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = make_rng(cfg.seed, 0xE90ull + uint64_t(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0;
    for (int start = 0; start < n; start += cfg.batch_size) {
      const int bsz = std::min(cfg.batch_size, n - start);
      std::vector<FcnGrad> grads(static_cast<size_t>(bsz));
      std::vector<double> losses(static_cast<size_t>(bsz), 0.0);
      std::string batch_error;

#pragma omp parallel for schedule(dynamic)
      for (int b = 0; b < bsz; ++b) {
        try {
          const int idx = order[size_t(start + b)];
          const DepthImage& img = data.images[size_t(idx)];
          const Tensor input = normalize_input(img);
          const int s = params.downsample();
          const int mh = (img.height + s - 1) / s, mw = (img.width + s - 1) / s;
          const HeatMapStack target = build_targets(data.poses[size_t(idx)],
                                                    params.out_channels(), mh, mw, s, cfg.sigma);
          grads[size_t(b)] = FcnGrad::zeros_like(params);
          losses[size_t(b)] = fcn_loss_grad(input, params, target, grads[size_t(b)]);
          // step on the per-cell mean gradient so the default learning rate
          // is stable regardless of map resolution; the logged loss keeps
          // the per-image sum form
          grads[size_t(b)].scale(1.0 / (double(target.k) * target.h * target.w));
        } catch (const std::exception& e) {
#pragma omp critical
          if (batch_error.empty()) batch_error = e.what();
        }
      }
      if (!batch_error.empty())
        throw NumericError("epoch " + std::to_string(epoch) + ": " + batch_error);

      FcnGrad total = std::move(grads[0]);
      for (int b = 1; b < bsz; ++b) total.add(grads[size_t(b)]);
      total.scale(1.0 / bsz);
      for (double l : losses) epoch_loss += l;

      for (size_t li = 0; li < params.layers.size(); ++li) {
        FcnLayer& L = params.layers[li];
        auto& gw = total.layers[li].weight;
        auto& gb = total.layers[li].bias;
        auto& vw = vel.layers[li].weight;
        auto& vb = vel.layers[li].bias;
        for (size_t j = 0; j < L.weight.size(); ++j) {
          vw[j] = cfg.momentum * vw[j] - cfg.lr * (gw[j] + cfg.weight_decay * L.weight[j]);
          L.weight[j] += vw[j];
        }
        for (size_t j = 0; j < L.bias.size(); ++j) {
          vb[j] = cfg.momentum * vb[j] - cfg.lr * (gb[j] + cfg.weight_decay * L.bias[j]);
          L.bias[j] += vb[j];
        }
      }
    }

    epoch_loss /= double(n);
    if (!std::isfinite(epoch_loss) || !params.all_finite())
      throw NumericError("training diverged at epoch " + std::to_string(epoch));
    if (log) log->epoch_loss.push_back(epoch_loss);
  }
}

FcnParams fcn_train(const DatasetManifest& mf, const FcnArch& arch, const FcnTrainConfig& cfg,
                    FcnTrainLog* log) {
  FcnParams params = init_fcn(arch, cfg.seed);
  const SampleSet data = load_split(mf, "train");
  fcn_train(params, data, cfg, log);
  return params;
}

void write_fcn_params(const FcnParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write("KFCN", 4);
  wire::put_u32(os, uint32_t(params.layers.size()));
  for (const FcnLayer& L : params.layers) {
    wire::put_u32(os, uint32_t(L.out_ch));
    wire::put_u32(os, uint32_t(L.in_ch));
    wire::put_u32(os, uint32_t(L.kh));
    wire::put_u32(os, uint32_t(L.kw));
    for (double w : L.weight) wire::put_f32(os, w);
    for (double b : L.bias) wire::put_f32(os, b);
  }
  if (!os) throw IoError("write failed: " + path);
}

FcnParams read_fcn_params(const std::string& path, const FcnArch& arch) {
  validate_arch(arch);
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  wire::expect_magic(is, "KFCN", path);

  const uint32_t n_layers = wire::get_u32(is, path + " header");
  if (n_layers != arch.layers.size())
    throw FormatError(path + ": has " + std::to_string(n_layers) + " layers, architecture has " +
                      std::to_string(arch.layers.size()));

  FcnParams p;
  int in_ch = 1;
  for (size_t li = 0; li < arch.layers.size(); ++li) {
    const LayerSpec& spec = arch.layers[li];
    FcnLayer L;
    L.out_ch = int(wire::get_u32(is, path + " layer header"));
    L.in_ch = int(wire::get_u32(is, path + " layer header"));
    L.kh = int(wire::get_u32(is, path + " layer header"));
    L.kw = int(wire::get_u32(is, path + " layer header"));
    if (L.out_ch != spec.out_ch || L.in_ch != in_ch || L.kh != spec.kernel || L.kw != spec.kernel)
      throw FormatError(path + ": layer " + std::to_string(li) +
                        " dimensions do not match the architecture");
    L.stride = spec.stride;
    L.pad = (spec.kernel - 1) / 2;
    L.relu = spec.relu;
    L.weight.resize(size_t(L.out_ch) * L.in_ch * L.kh * L.kw);
    L.bias.resize(size_t(L.out_ch));
    for (double& w : L.weight) w = wire::get_f32(is, path + " payload");
    for (double& b : L.bias) b = wire::get_f32(is, path + " payload");
    in_ch = L.out_ch;
    p.layers.push_back(std::move(L));
  }
  return p;
}

void write_loss_csv(const FcnTrainLog& log, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "epoch,mean_loss\n";
  char buf[64];
  for (size_t i = 0; i < log.epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", i, log.epoch_loss[i]);
    os << buf;
  }
}

}  // namespace posekit
