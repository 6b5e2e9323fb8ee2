#ifndef POSEKIT_CONV_HPP
#define POSEKIT_CONV_HPP

#include <vector>

#include "posekit/fcn.hpp"
#include "posekit/tensor.hpp"

// 2D convolution kernels shared by the part detector and the patch matcher.
// The omp variants parallelize over output (or input) channels; every element
// accumulates its terms in the same (ic, ky, kx) order as the reference
// kernels, so results match them bit for bit at any thread count.

namespace posekit {

int conv_out_extent(int in, int kernel, int stride, int pad);

// out must be pre-sized to (L.out_ch, oh, ow); overwritten.
void conv2d_forward(const Tensor& in, const FcnLayer& L, Tensor& out);

// d_in must be pre-sized to the input shape; overwritten.
void conv2d_backward_input(const FcnLayer& L, const Tensor& d_pre, Tensor& d_in);

// Accumulates (+=) into d_w / d_b, which must be pre-sized to match L.
void conv2d_backward_params(const Tensor& in, const FcnLayer& L, const Tensor& d_pre,
                            std::vector<double>& d_w, std::vector<double>& d_b);

// Plain per-element gather loops, single-threaded. Kept as the comparison
// oracle for the omp kernels and as the benchmark baseline.
namespace ref {
void conv2d_forward(const Tensor& in, const FcnLayer& L, Tensor& out);
void conv2d_backward_input(const FcnLayer& L, const Tensor& d_pre, Tensor& d_in);
void conv2d_backward_params(const Tensor& in, const FcnLayer& L, const Tensor& d_pre,
                            std::vector<double>& d_w, std::vector<double>& d_b);
}  // namespace ref

}  // namespace posekit

#endif
