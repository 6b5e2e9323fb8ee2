#include "posekit/conv.hpp"

#include <algorithm>

#include "posekit/error.hpp"

namespace posekit {

namespace {

int ceil_div(int a, int b) { return a >= 0 ? (a + b - 1) / b : -((-a) / b); }
int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

void check_shapes(const Tensor& in, const FcnLayer& L, const Tensor& out) {
  if (in.c != L.in_ch) throw ContractError("conv input channel mismatch");
  if (out.c != L.out_ch) throw ContractError("conv output channel mismatch");
  if (out.h != conv_out_extent(in.h, L.kh, L.stride, L.pad) ||
      out.w != conv_out_extent(in.w, L.kw, L.stride, L.pad))
    throw ContractError("conv output extent mismatch");
}

}  // namespace

int conv_out_extent(int in, int kernel, int stride, int pad) {
  if (in < 1 || kernel < 1 || stride < 1 || pad < 0)
    throw ContractError("bad conv geometry");
  const int span = in + 2 * pad - kernel;
  if (span < 0) throw ContractError("kernel larger than padded input");
  return span / stride + 1;
}

void conv2d_forward(const Tensor& in, const FcnLayer& L, Tensor& out) {
  check_shapes(in, L, out);
  const int st = L.stride, p = L.pad;

#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < L.out_ch; ++oc) {
    double* out_c = &out.v[size_t(oc) * size_t(out.h) * size_t(out.w)];
    const double b = L.bias[size_t(oc)];
    for (int i = 0; i < out.h * out.w; ++i) out_c[i] = b;

    for (int ic = 0; ic < L.in_ch; ++ic) {
      const double* in_c = &in.v[size_t(ic) * size_t(in.h) * size_t(in.w)];
      for (int ky = 0; ky < L.kh; ++ky) {
        const int oy_lo = std::max(0, ceil_div(p - ky, st));
        const int oy_hi = std::min(out.h - 1, floor_div(in.h - 1 + p - ky, st));
        for (int kx = 0; kx < L.kw; ++kx) {
          const double w = L.w_at(oc, ic, ky, kx);
          const int ox_lo = std::max(0, ceil_div(p - kx, st));
          const int ox_hi = std::min(out.w - 1, floor_div(in.w - 1 + p - kx, st));
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const double* in_row = in_c + size_t(oy * st + ky - p) * size_t(in.w);
            double* out_row = out_c + size_t(oy) * size_t(out.w);
            for (int ox = ox_lo; ox <= ox_hi; ++ox)
              out_row[ox] += w * in_row[ox * st + kx - p];
          }
        }
      }
    }
  }
}

void conv2d_backward_input(const FcnLayer& L, const Tensor& d_pre, Tensor& d_in) {
  const int st = L.stride, p = L.pad;
  if (d_in.c != L.in_ch || d_pre.c != L.out_ch)
    throw ContractError("conv backward channel mismatch");

#pragma omp parallel for schedule(static)
  for (int ic = 0; ic < L.in_ch; ++ic) {
    double* din_c = &d_in.v[size_t(ic) * size_t(d_in.h) * size_t(d_in.w)];
    for (int i = 0; i < d_in.h * d_in.w; ++i) din_c[i] = 0;

    for (int oc = 0; oc < L.out_ch; ++oc) {
      const double* dp_c = &d_pre.v[size_t(oc) * size_t(d_pre.h) * size_t(d_pre.w)];
      for (int ky = 0; ky < L.kh; ++ky) {
        const int oy_lo = std::max(0, ceil_div(p - ky, st));
        const int oy_hi = std::min(d_pre.h - 1, floor_div(d_in.h - 1 + p - ky, st));
        for (int kx = 0; kx < L.kw; ++kx) {
          const double w = L.w_at(oc, ic, ky, kx);
          const int ox_lo = std::max(0, ceil_div(p - kx, st));
          const int ox_hi = std::min(d_pre.w - 1, floor_div(d_in.w - 1 + p - kx, st));
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            double* din_row = din_c + size_t(oy * st + ky - p) * size_t(d_in.w);
            const double* dp_row = dp_c + size_t(oy) * size_t(d_pre.w);
            for (int ox = ox_lo; ox <= ox_hi; ++ox)
              din_row[ox * st + kx - p] += w * dp_row[ox];
          }
        }
      }
    }
  }
}

void conv2d_backward_params(const Tensor& in, const FcnLayer& L, const Tensor& d_pre,
                            std::vector<double>& d_w, std::vector<double>& d_b) {
  const int st = L.stride, p = L.pad;
  if (d_w.size() != L.weight.size() || d_b.size() != L.bias.size())
    throw ContractError("conv gradient buffer size mismatch");

#pragma omp parallel for schedule(static)
  for (int oc = 0; oc < L.out_ch; ++oc) {
    const double* dp_c = &d_pre.v[size_t(oc) * size_t(d_pre.h) * size_t(d_pre.w)];
    double acc_b = 0;
    for (int i = 0; i < d_pre.h * d_pre.w; ++i) acc_b += dp_c[i];
    d_b[size_t(oc)] += acc_b;

    for (int ic = 0; ic < L.in_ch; ++ic) {
      const double* in_c = &in.v[size_t(ic) * size_t(in.h) * size_t(in.w)];
      for (int ky = 0; ky < L.kh; ++ky) {
        const int oy_lo = std::max(0, ceil_div(p - ky, st));
        const int oy_hi = std::min(d_pre.h - 1, floor_div(in.h - 1 + p - ky, st));
        for (int kx = 0; kx < L.kw; ++kx) {
          const int ox_lo = std::max(0, ceil_div(p - kx, st));
          const int ox_hi = std::min(d_pre.w - 1, floor_div(in.w - 1 + p - kx, st));
          double acc = 0;
          for (int oy = oy_lo; oy <= oy_hi; ++oy) {
            const double* in_row = in_c + size_t(oy * st + ky - p) * size_t(in.w);
            const double* dp_row = dp_c + size_t(oy) * size_t(d_pre.w);
            for (int ox = ox_lo; ox <= ox_hi; ++ox)
              acc += dp_row[ox] * in_row[ox * st + kx - p];
          }
          d_w[size_t(((oc * L.in_ch + ic) * L.kh + ky) * L.kw + kx)] += acc;
        }
      }
    }
  }
}

namespace ref {

void conv2d_forward(const Tensor& in, const FcnLayer& L, Tensor& out) {
  check_shapes(in, L, out);
  for (int oc = 0; oc < L.out_ch; ++oc)
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        double acc = L.bias[size_t(oc)];
        for (int ic = 0; ic < L.in_ch; ++ic)
          for (int ky = 0; ky < L.kh; ++ky) {
            const int iy = oy * L.stride + ky - L.pad;
            if (iy < 0 || iy >= in.h) continue;
            for (int kx = 0; kx < L.kw; ++kx) {
              const int ix = ox * L.stride + kx - L.pad;
              if (ix < 0 || ix >= in.w) continue;
              acc += L.w_at(oc, ic, ky, kx) * in.at(ic, iy, ix);
            }
          }
        out.at(oc, oy, ox) = acc;
      }
}

void conv2d_backward_input(const FcnLayer& L, const Tensor& d_pre, Tensor& d_in) {
  for (int ic = 0; ic < L.in_ch; ++ic)
    for (int iy = 0; iy < d_in.h; ++iy)
      for (int ix = 0; ix < d_in.w; ++ix) {
        double acc = 0;
        for (int oc = 0; oc < L.out_ch; ++oc)
          for (int ky = 0; ky < L.kh; ++ky) {
            const int ny = iy - ky + L.pad;
            if (ny % L.stride != 0) continue;
            const int oy = ny / L.stride;
            if (ny < 0 || oy >= d_pre.h) continue;
            for (int kx = 0; kx < L.kw; ++kx) {
              const int nx = ix - kx + L.pad;
              if (nx % L.stride != 0) continue;
              const int ox = nx / L.stride;
              if (nx < 0 || ox >= d_pre.w) continue;
              acc += L.w_at(oc, ic, ky, kx) * d_pre.at(oc, oy, ox);
            }
          }
        d_in.at(ic, iy, ix) = acc;
      }
}

void conv2d_backward_params(const Tensor& in, const FcnLayer& L, const Tensor& d_pre,
                            std::vector<double>& d_w, std::vector<double>& d_b) {
  for (int oc = 0; oc < L.out_ch; ++oc) {
    double acc_b = 0;
    for (int oy = 0; oy < d_pre.h; ++oy)
      for (int ox = 0; ox < d_pre.w; ++ox) acc_b += d_pre.at(oc, oy, ox);
    d_b[size_t(oc)] += acc_b;

    for (int ic = 0; ic < L.in_ch; ++ic)
      for (int ky = 0; ky < L.kh; ++ky)
        for (int kx = 0; kx < L.kw; ++kx) {
          double acc = 0;
          for (int oy = 0; oy < d_pre.h; ++oy) {
            const int iy = oy * L.stride + ky - L.pad;
            if (iy < 0 || iy >= in.h) continue;
            for (int ox = 0; ox < d_pre.w; ++ox) {
              const int ix = ox * L.stride + kx - L.pad;
              if (ix < 0 || ix >= in.w) continue;
              acc += d_pre.at(oc, oy, ox) * in.at(ic, iy, ix);
            }
          }
          d_w[size_t(((oc * L.in_ch + ic) * L.kh + ky) * L.kw + kx)] += acc;
        }
  }
}

}  // namespace ref

}  // namespace posekit
