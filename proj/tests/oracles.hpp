#pragma once

// Independent reference implementations used only by tests. These stay
// deliberately naive (straight loops over the definitions) so they cannot
// share bugs with the library kernels.

#include <cmath>
#include <vector>

#include "im/ssm.hpp"
#include "im/tensor.hpp"

namespace oracle {

// Plain quadruple-loop direct convolution over the definition.
inline im::Tensor conv2d_direct(const im::Tensor& x, const im::Tensor& w, const im::Tensor* bias,
                                const im::Conv2dSpec& spec) {
  const int64_t n = x.dim(0), cin = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const bool dw = spec.grouping == im::Grouping::depthwise;
  const int64_t oh = (ih + 2 * spec.pad_h - kh) / spec.stride_h + 1;
  const int64_t ow = (iw + 2 * spec.pad_w - kw) / spec.stride_w + 1;
  im::Tensor y = im::Tensor::zeros({n, cout, oh, ow}, x.dtype());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t yo = 0; yo < oh; ++yo)
        for (int64_t xo = 0; xo < ow; ++xo) {
          double acc = bias ? bias->at(co) : 0.0;
          for (int64_t ci = 0; ci < cin; ++ci) {
            if (dw && ci != co) continue;
            for (int64_t r = 0; r < kh; ++r)
              for (int64_t c = 0; c < kw; ++c) {
                const int64_t hy = yo * spec.stride_h - spec.pad_h + r;
                const int64_t wx = xo * spec.stride_w - spec.pad_w + c;
                if (hy < 0 || hy >= ih || wx < 0 || wx >= iw) continue;
                const int64_t wi = dw ? (co * kh + r) * kw + c : ((co * cin + ci) * kh + r) * kw + c;
                acc += w.at(wi) * x.at(((b * cin + ci) * ih + hy) * iw + wx);
              }
          }
          y.set(((b * cout + co) * oh + yo) * ow + xo, acc);
        }
  return y;
}

// Per-pixel matrix product for 1x1 dense convolution.
inline im::Tensor pointwise_matmul(const im::Tensor& x, const im::Tensor& w, const im::Tensor* bias) {
  const int64_t n = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3), cout = w.dim(0);
  im::Tensor y = im::Tensor::zeros({n, cout, x.dim(2), x.dim(3)}, x.dtype());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t s = 0; s < hw; ++s)
      for (int64_t co = 0; co < cout; ++co) {
        double acc = bias ? bias->at(co) : 0.0;
        for (int64_t ci = 0; ci < cin; ++ci) acc += w.at(co * cin + ci) * x.at((b * cin + ci) * hw + s);
        y.set((b * cout + co) * hw + s, acc);
      }
  return y;
}

// Naive per-step selective scan over the recurrence definition, written
// against the generator weights directly.
inline im::Tensor selective_scan_naive(const im::ssm::SelectiveScanParams& p, const im::Tensor& u) {
  const bool batched = u.rank() == 3;
  const int64_t nb = batched ? u.dim(0) : 1;
  const int64_t ch = batched ? u.dim(1) : u.dim(0);
  const int64_t len = batched ? u.dim(2) : u.dim(1);
  const int64_t nst = p.state_dim, r = p.dt_rank;
  im::Tensor y = im::Tensor::zeros(u.shape(), u.dtype());
  for (int64_t b = 0; b < nb; ++b) {
    std::vector<double> h(ch * nst, 0.0);
    for (int64_t t = 0; t < len; ++t) {
      std::vector<double> coeff(r + 2 * nst, 0.0);
      for (int64_t j = 0; j < r + 2 * nst; ++j)
        for (int64_t c = 0; c < ch; ++c) coeff[j] += p.x_proj_w.at(j * ch + c) * u.at((b * ch + c) * len + t);
      for (int64_t c = 0; c < ch; ++c) {
        double draw = p.dt_proj_b.at(c);
        for (int64_t k = 0; k < r; ++k) draw += p.dt_proj_w.at(c * r + k) * coeff[k];
        const double delta = draw > 30.0 ? draw : std::log1p(std::exp(draw));
        const double uv = u.at((b * ch + c) * len + t);
        double yv = 0;
        for (int64_t n = 0; n < nst; ++n) {
          const double a = -std::exp(p.a_log.at(c * nst + n));
          double& hv = h[c * nst + n];
          hv = std::exp(delta * a) * hv + delta * coeff[r + n] * uv;
          yv += coeff[r + nst + n] * hv;
        }
        y.set((b * ch + c) * len + t, yv + p.d_skip.at(c) * uv);
      }
    }
  }
  return y;
}

inline double max_abs_diff(const im::Tensor& a, const im::Tensor& b) {
  double m = 0;
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace oracle
