// Times the omp kernels against their serial reference implementations.
// Usage: bench_kernels [threads]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <vector>

#include "posekit/conv.hpp"
#include "posekit/fcn.hpp"
#include "posekit/image.hpp"
#include "posekit/parallel.hpp"
#include "posekit/rng.hpp"
#include "posekit/synth.hpp"

using namespace posekit;
using Clock = std::chrono::steady_clock;

namespace {

double time_ms(int reps, const std::function<void()>& fn) {
  std::vector<double> times;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = Clock::now();
    fn();
    const auto t1 = Clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

Tensor random_tensor(int c, int h, int w, uint64_t seed) {
  Tensor t(c, h, w);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (double& v : t.v) v = dist(rng);
  return t;
}

FcnLayer random_layer(int oc, int ic, int k, uint64_t seed) {
  FcnLayer L;
  L.out_ch = oc;
  L.in_ch = ic;
  L.kh = L.kw = k;
  L.stride = 1;
  L.pad = (k - 1) / 2;
  L.relu = true;
  L.weight.resize(size_t(oc) * ic * k * k);
  L.bias.assign(size_t(oc), 0.1);
  Rng rng = make_rng(seed);
  std::normal_distribution<double> dist(0.0, 0.1);
  for (double& w : L.weight) w = dist(rng);
  return L;
}

}  // namespace

int main(int argc, char** argv) {
  const int threads = argc > 1 ? std::atoi(argv[1]) : 0;
  if (threads > 0) set_num_threads(threads);

  std::printf("%-34s %10s %10s %8s\n", "kernel", "serial ms", "omp ms", "speedup");

  {
    const Tensor in = random_tensor(16, 64, 64, 1);
    const FcnLayer L = random_layer(32, 16, 3, 2);
    Tensor out(32, 64, 64), out_ref(32, 64, 64);
    const double ms_ref = time_ms(9, [&] { ref::conv2d_forward(in, L, out_ref); });
    const double ms_omp = time_ms(9, [&] { conv2d_forward(in, L, out); });
    const double flops = 2.0 * 32 * 16 * 9 * 64 * 64;
    std::printf("%-34s %10.3f %10.3f %7.2fx   (%.2f GFLOP/s omp)\n",
                "conv 3x3 16->32 ch, 64x64", ms_ref, ms_omp, ms_ref / ms_omp,
                flops / (ms_omp * 1e6));
  }

  {
    const Tensor in = random_tensor(16, 64, 64, 3);
    const FcnLayer L = random_layer(32, 16, 3, 4);
    const Tensor d_pre = random_tensor(32, 64, 64, 5);
    Tensor d_in(16, 64, 64), d_in_ref(16, 64, 64);
    std::vector<double> dw(L.weight.size(), 0.0), db(L.bias.size(), 0.0);
    const double ms_ref = time_ms(9, [&] { ref::conv2d_backward_input(L, d_pre, d_in_ref); });
    const double ms_omp = time_ms(9, [&] { conv2d_backward_input(L, d_pre, d_in); });
    std::printf("%-34s %10.3f %10.3f %7.2fx\n", "conv backward input", ms_ref, ms_omp,
                ms_ref / ms_omp);
    const double msw_ref =
        time_ms(9, [&] { ref::conv2d_backward_params(in, L, d_pre, dw, db); });
    const double msw_omp = time_ms(9, [&] { conv2d_backward_params(in, L, d_pre, dw, db); });
    std::printf("%-34s %10.3f %10.3f %7.2fx\n", "conv backward params", msw_ref, msw_omp,
                msw_ref / msw_omp);
  }

  {
    SynthConfig scfg;
    scfg.subjects = 1;
    scfg.poses_per_subject = 1;
    scfg.seed = 33;
    const SynthSample sample = synthesize_sample(scfg, 0);
    const FcnParams params = init_fcn(default_fcn_arch(kPartCount), 77);

    HeatMapStack hm;
    const double ms = time_ms(5, [&] { hm = fcn_forward(sample.image, params); });
    std::printf("%-34s %10s %10.3f\n", "default net forward 128x128", "-", ms);

    const HeatMapStack targets =
        build_targets(sample.pose, kPartCount, hm.h, hm.w, hm.s, 2.0);
    FcnGrad grad = FcnGrad::zeros_like(params);
    const Tensor input = normalize_input(sample.image);
    const double msb =
        time_ms(5, [&] { fcn_loss_grad(input, params, targets, grad); });
    std::printf("%-34s %10s %10.3f\n", "default net forward+backward", "-", msb);
  }

  return 0;
}
