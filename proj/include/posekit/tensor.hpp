#ifndef POSEKIT_TENSOR_HPP
#define POSEKIT_TENSOR_HPP

#include <cmath>
#include <cstddef>
#include <vector>

namespace posekit {

// Dense CHW tensor of doubles. All network activations and parameters use
// this; file formats quantize to f32 on disk.
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(std::size_t(c_) * h_ * w_, 0.0) {}

  double& at(int ci, int y, int x) { return v[(std::size_t(ci) * h + y) * w + x]; }
  double at(int ci, int y, int x) const { return v[(std::size_t(ci) * h + y) * w + x]; }

  std::size_t size() const { return v.size(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

}  // namespace posekit

#endif
