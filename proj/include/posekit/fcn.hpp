#ifndef POSEKIT_FCN_HPP
#define POSEKIT_FCN_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "posekit/image.hpp"
#include "posekit/tensor.hpp"

namespace posekit {

// One conv layer description: square odd kernel, pad (k-1)/2, so spatial size
// maps H -> ceil(H / stride).
struct LayerSpec {
  int out_ch = 0;
  int kernel = 3;
  int stride = 1;
  bool relu = true;
};

struct FcnArch {
  std::vector<LayerSpec> layers;  // input channel count is 1, then chained

  int downsample() const;  // product of strides
  int out_channels() const;
};

// Small part-detector net: stack of 3x3 convs, one stride-2 layer, linear
// last layer with one output channel per part.
FcnArch default_fcn_arch(int k_parts);

struct FcnLayer {
  int out_ch = 0, in_ch = 0, kh = 0, kw = 0;
  int stride = 1, pad = 0;
  bool relu = true;
  std::vector<double> weight;  // [out][in][ky][kx]
  std::vector<double> bias;    // [out]

  double& w_at(int oc, int ic, int ky, int kx) {
    return weight[size_t(((oc * in_ch + ic) * kh + ky) * kw + kx)];
  }
  double w_at(int oc, int ic, int ky, int kx) const {
    return weight[size_t(((oc * in_ch + ic) * kh + ky) * kw + kx)];
  }
};

struct FcnParams {
  std::vector<FcnLayer> layers;

  int downsample() const;
  int out_channels() const { return layers.empty() ? 0 : layers.back().out_ch; }
  bool all_finite() const;
};

FcnParams init_fcn(const FcnArch& arch, uint64_t seed);

// Per-part score maps at 1/s image resolution. Map cell (mx, my) covers the
// image pixel block starting at (mx*s, my*s); its center back-maps to
// (mx*s + s/2, my*s + s/2).
struct HeatMapStack {
  int k = 0, h = 0, w = 0;
  int s = 1;  // downsample factor
  std::vector<double> v;

  double at(int ki, int y, int x) const { return v[size_t((ki * h + y) * w + x)]; }
  double& at(int ki, int y, int x) { return v[size_t((ki * h + y) * w + x)]; }
};

// Zero-mean, unit-variance normalization of the raw depth values (computed in
// double precision over all pixels; a constant image maps to all zeros).
Tensor normalize_input(const DepthImage& img);

HeatMapStack fcn_forward(const DepthImage& img, const FcnParams& params);

// Target map for one part: unnormalized Gaussian with peak 1.0 at the map cell
// containing the joint, sigma in map cells.
Tensor gaussian_target(const PoseConfig& pose, int part, int map_h, int map_w, int s,
                       double sigma);
HeatMapStack build_targets(const PoseConfig& pose, int k_parts, int map_h, int map_w, int s,
                           double sigma);

// Sum of squared differences over all parts and cells.
double fcn_loss(const HeatMapStack& pred, const HeatMapStack& target);

struct FcnGrad {
  struct Layer {
    std::vector<double> weight;
    std::vector<double> bias;
  };
  std::vector<Layer> layers;

  static FcnGrad zeros_like(const FcnParams& p);
  void add(const FcnGrad& other);   // element-wise, fixed order
  void scale(double a);
};

// Forward + backward for one image; returns the loss and accumulates
// parameter gradients into grad (which must be zeros_like(params) shaped).
double fcn_loss_grad(const Tensor& input, const FcnParams& params, const HeatMapStack& target,
                     FcnGrad& grad);

// Gradient of fcn_loss with respect to every parameter.
FcnGrad fcn_backward(const DepthImage& img, const FcnParams& params, const HeatMapStack& target);

struct FcnTrainConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int batch_size = 20;
  int epochs = 10;
  double sigma = 2.0;  // target Gaussian width, map cells
  uint64_t seed = 1;
};

struct FcnTrainLog {
  std::vector<double> epoch_loss;  // mean per-image loss
};

// In-memory training set; decoded once, reused across stages.
struct SampleSet {
  std::vector<DepthImage> images;
  std::vector<PoseConfig> poses;
  double mm_per_pixel = 10.0;

  size_t size() const { return images.size(); }
};

SampleSet load_split(const DatasetManifest& mf, const std::string& split);

// Mini-batch SGD with momentum and weight decay; continues from params.
// Throws NumericError naming the epoch if the loss goes non-finite.
void fcn_train(FcnParams& params, const SampleSet& data, const FcnTrainConfig& cfg,
               FcnTrainLog* log = nullptr);

// Fresh parameters trained on the manifest's train split.
FcnParams fcn_train(const DatasetManifest& mf, const FcnArch& arch, const FcnTrainConfig& cfg,
                    FcnTrainLog* log = nullptr);

// KFCN checkpoint: "KFCN" magic, u32 layer count, per layer u32 dims
// (out, in, kh, kw) and f32 weights then biases. Strides and activation
// flags are not stored; the reader takes them from arch.
void write_fcn_params(const FcnParams& params, const std::string& path);
FcnParams read_fcn_params(const std::string& path, const FcnArch& arch);

void write_loss_csv(const FcnTrainLog& log, const std::string& path);

}  // namespace posekit

#endif
