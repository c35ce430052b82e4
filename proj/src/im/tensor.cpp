#include "im/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

namespace im {

std::string Shape::str() const {
  std::ostringstream os;
  os << '[';
  for (int i = 0; i < rank; ++i) os << (i ? "," : "") << d[i];
  os << ']';
  return os.str();
}

int thread_budget() {
  static int cached = [] {
    const char* env = std::getenv("IM_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v < 1 ? 1 : v;
  }();
  return cached;
}

namespace {

void check_conv_args(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2dSpec& spec) {
  if (x.rank() != 4) fail(ErrKind::shape, "conv2d input must be rank 4, got " + x.shape().str());
  if (w.rank() != 4) fail(ErrKind::shape, "conv2d weights must be rank 4, got " + w.shape().str());
  if (spec.pad_h < 0 || spec.pad_w < 0 || spec.stride_h < 1 || spec.stride_w < 1)
    fail(ErrKind::config, "conv2d padding must be >= 0 and stride >= 1");
  const int64_t cin = x.dim(1);
  if (spec.grouping == Grouping::depthwise) {
    if (w.dim(0) != cin || w.dim(1) != 1)
      fail(ErrKind::config, "depthwise conv2d channel mismatch: input " + x.shape().str() + " vs weights " + w.shape().str());
  } else {
    if (w.dim(1) != cin)
      fail(ErrKind::config, "conv2d channel mismatch: input " + x.shape().str() + " vs weights " + w.shape().str());
  }
  if (bias && bias->numel() != w.dim(0))
    fail(ErrKind::config, "conv2d bias length " + bias->shape().str() + " != output channels " + std::to_string(w.dim(0)));
  const int64_t oh = conv_out_extent(x.dim(2), spec.pad_h, w.dim(2), spec.stride_h);
  const int64_t ow = conv_out_extent(x.dim(3), spec.pad_w, w.dim(3), spec.stride_w);
  if (oh < 1 || ow < 1)
    fail(ErrKind::shape, "conv2d output extent <= 0 for input " + x.shape().str() + " and weights " + w.shape().str());
  if (x.dtype() != w.dtype() || (bias && bias->dtype() != x.dtype()))
    fail(ErrKind::config, "conv2d dtype mismatch between input, weights and bias");
}

template <class T>
void conv2d_pointwise_dense(const Tensor& x, const Tensor& w, const Tensor* bias, Tensor& y) {
  const int64_t n = x.dim(0), cin = x.dim(1), hw = x.dim(2) * x.dim(3), cout = w.dim(0);
  auto xd = x.data<T>();
  auto wd = w.data<T>();
  auto yd = y.data<T>();
  parallel_for(n, [&](int64_t b) {
    const T* xb = xd.data() + b * cin * hw;
    T* yb = yd.data() + b * cout * hw;
    for (int64_t co = 0; co < cout; ++co) {
      T* __restrict yr = yb + co * hw;
      if (bias) {
        const T bv = bias->data<T>()[co];
        for (int64_t i = 0; i < hw; ++i) yr[i] = bv;
      }
      for (int64_t ci = 0; ci < cin; ++ci) {
        const T wv = wd[co * cin + ci];
        const T* __restrict xr = xb + ci * hw;
        for (int64_t i = 0; i < hw; ++i) yr[i] += wv * xr[i];
      }
    }
  });
}

template <class T>
void conv2d_generic(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2dSpec& spec, Tensor& y) {
  const int64_t n = x.dim(0), cin = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  const int64_t cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int64_t oh = y.dim(2), ow = y.dim(3);
  const bool dw = spec.grouping == Grouping::depthwise;
  auto xd = x.data<T>();
  auto wd = w.data<T>();
  auto yd = y.data<T>();
  parallel_for(n, [&](int64_t b) {
    for (int64_t co = 0; co < cout; ++co) {
      const T bv = bias ? bias->data<T>()[co] : T(0);
      const int64_t ci0 = dw ? co : 0;
      const int64_t ci1 = dw ? co + 1 : cin;
      for (int64_t y0 = 0; y0 < oh; ++y0) {
        const int64_t hbase = y0 * spec.stride_h - spec.pad_h;
        const int64_t r0 = std::max<int64_t>(0, -hbase);
        const int64_t r1 = std::min<int64_t>(kh, ih - hbase);
        for (int64_t x0 = 0; x0 < ow; ++x0) {
          const int64_t wbase = x0 * spec.stride_w - spec.pad_w;
          const int64_t c0 = std::max<int64_t>(0, -wbase);
          const int64_t c1 = std::min<int64_t>(kw, iw - wbase);
          T acc = bv;
          for (int64_t ci = ci0; ci < ci1; ++ci) {
            const T* wplane = wd.data() + ((co * cpg + (ci - ci0)) * kh) * kw;
            const T* xplane = xd.data() + (b * cin + ci) * ih * iw;
            for (int64_t r = r0; r < r1; ++r) {
              const T* __restrict xrow = xplane + (hbase + r) * iw + wbase;
              const T* __restrict wr = wplane + r * kw;
              for (int64_t c = c0; c < c1; ++c) acc += wr[c] * xrow[c];
            }
          }
          yd[((b * cout + co) * oh + y0) * ow + x0] = acc;
        }
      }
    }
  });
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weights, const Tensor* bias, const Conv2dSpec& spec) {
  check_conv_args(x, weights, bias, spec);
  const int64_t oh = conv_out_extent(x.dim(2), spec.pad_h, weights.dim(2), spec.stride_h);
  const int64_t ow = conv_out_extent(x.dim(3), spec.pad_w, weights.dim(3), spec.stride_w);
  Tensor y = Tensor::zeros({x.dim(0), weights.dim(0), oh, ow}, x.dtype());
  const bool pw = spec.grouping == Grouping::dense && weights.dim(2) == 1 && weights.dim(3) == 1 &&
                  spec.stride_h == 1 && spec.stride_w == 1 && spec.pad_h == 0 && spec.pad_w == 0;
  if (x.dtype() == DType::f32) {
    pw ? conv2d_pointwise_dense<float>(x, weights, bias, y) : conv2d_generic<float>(x, weights, bias, spec, y);
  } else {
    pw ? conv2d_pointwise_dense<double>(x, weights, bias, y) : conv2d_generic<double>(x, weights, bias, spec, y);
  }
  return y;
}

Tensor conv2d(const Tensor& x, const ConvKernel& k) {
  return conv2d(x, k.weights, k.bias ? &*k.bias : nullptr, k.spec);
}

Tensor pointwise_conv(const Tensor& x, const ConvKernel& k) {
  if (k.weights.dim(2) != 1 || k.weights.dim(3) != 1)
    fail(ErrKind::config, "pointwise_conv requires a 1x1 kernel, got " + k.weights.shape().str());
  if (k.spec.grouping != Grouping::dense) fail(ErrKind::config, "pointwise_conv requires dense grouping");
  return conv2d(x, k);
}

std::vector<int64_t> split_sizes(int64_t channels, std::span<const double> ratios) {
  if (ratios.empty()) fail(ErrKind::config, "split_channels needs at least one ratio");
  double sum = 0;
  for (double r : ratios) sum += r;
  if (std::abs(sum - 1.0) > 1e-9)
    fail(ErrKind::config, "split ratios must sum to 1, got " + std::to_string(sum));
  // floor for all groups but the last; the last takes the remainder.
  std::vector<int64_t> sizes(ratios.size());
  int64_t used = 0;
  for (size_t i = 0; i + 1 < ratios.size(); ++i) {
    sizes[i] = static_cast<int64_t>(std::floor(ratios[i] * static_cast<double>(channels) + 1e-9));
    used += sizes[i];
  }
  sizes.back() = channels - used;
  for (int64_t s : sizes)
    if (s < 1) fail(ErrKind::config, "split group size < 1 for C=" + std::to_string(channels));
  return sizes;
}

std::vector<Tensor> split_channels(const Tensor& x, std::span<const double> ratios) {
  if (x.rank() != 4) fail(ErrKind::shape, "split_channels input must be rank 4, got " + x.shape().str());
  auto sizes = split_sizes(x.dim(1), ratios);
  const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3), plane = h * w;
  std::vector<Tensor> out;
  int64_t c0 = 0;
  for (int64_t sz : sizes) {
    Tensor part = Tensor::zeros({n, sz, h, w}, x.dtype());
    const size_t row = static_cast<size_t>(sz * plane) * dtype_size(x.dtype());
    for (int64_t b = 0; b < n; ++b) {
      const std::byte* src = x.raw() + static_cast<size_t>(x.idx4(b, c0, 0, 0)) * dtype_size(x.dtype());
      std::byte* dst = part.raw() + static_cast<size_t>(part.idx4(b, 0, 0, 0)) * dtype_size(x.dtype());
      std::memcpy(dst, src, row);
    }
    c0 += sz;
    out.push_back(std::move(part));
  }
  return out;
}

Tensor concat_channels(std::span<const Tensor> parts) {
  if (parts.empty()) fail(ErrKind::config, "concat_channels needs at least one part");
  const Tensor& p0 = parts[0];
  int64_t ctotal = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != 4) fail(ErrKind::shape, "concat_channels parts must be rank 4");
    if (p.dim(0) != p0.dim(0) || p.dim(2) != p0.dim(2) || p.dim(3) != p0.dim(3) || p.dtype() != p0.dtype())
      fail(ErrKind::shape, "concat_channels extent mismatch: " + p0.shape().str() + " vs " + p.shape().str());
    ctotal += p.dim(1);
  }
  const int64_t n = p0.dim(0), h = p0.dim(2), w = p0.dim(3), plane = h * w;
  Tensor y = Tensor::zeros({n, ctotal, h, w}, p0.dtype());
  int64_t c0 = 0;
  for (const Tensor& p : parts) {
    const size_t row = static_cast<size_t>(p.dim(1) * plane) * dtype_size(p.dtype());
    for (int64_t b = 0; b < n; ++b) {
      const std::byte* src = p.raw() + static_cast<size_t>(p.idx4(b, 0, 0, 0)) * dtype_size(p.dtype());
      std::byte* dst = y.raw() + static_cast<size_t>(y.idx4(b, c0, 0, 0)) * dtype_size(p.dtype());
      std::memcpy(dst, src, row);
    }
    c0 += p.dim(1);
  }
  return y;
}

namespace {

template <class T>
void layer_norm_impl(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, Tensor& y,
                     Tensor* save_xhat, Tensor* save_invstd) {
  const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  auto xd = x.data<T>();
  auto yd = y.data<T>();
  auto gd = gamma.data<T>();
  auto bd = beta.data<T>();
  T* xh = save_xhat ? save_xhat->data<T>().data() : nullptr;
  T* is = save_invstd ? save_invstd->data<T>().data() : nullptr;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t s = 0; s < plane; ++s) {
      const int64_t base = b * c * plane + s;
      double mean = 0;
      for (int64_t ch = 0; ch < c; ++ch) mean += static_cast<double>(xd[base + ch * plane]);
      mean /= static_cast<double>(c);
      double var = 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double d = static_cast<double>(xd[base + ch * plane]) - mean;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double invstd = 1.0 / std::sqrt(var + eps);
      if (is) is[b * plane + s] = static_cast<T>(invstd);
      for (int64_t ch = 0; ch < c; ++ch) {
        const double xhat = (static_cast<double>(xd[base + ch * plane]) - mean) * invstd;
        if (xh) xh[base + ch * plane] = static_cast<T>(xhat);
        yd[base + ch * plane] = static_cast<T>(xhat * static_cast<double>(gd[ch]) + static_cast<double>(bd[ch]));
      }
    }
  }
}

}  // namespace

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                           Tensor* save_xhat, Tensor* save_invstd) {
  if (x.rank() != 4) fail(ErrKind::shape, "layer_norm_channels input must be rank 4, got " + x.shape().str());
  if (gamma.numel() != x.dim(1) || beta.numel() != x.dim(1))
    fail(ErrKind::shape, "layer_norm affine length must equal channel count " + std::to_string(x.dim(1)));
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  if (save_xhat) *save_xhat = Tensor::zeros(x.shape(), x.dtype());
  if (save_invstd) *save_invstd = Tensor::zeros({x.dim(0), x.dim(2) * x.dim(3)}, x.dtype());
  if (x.dtype() == DType::f32)
    layer_norm_impl<float>(x, gamma, beta, eps, y, save_xhat, save_invstd);
  else
    layer_norm_impl<double>(x, gamma, beta, eps, y, save_xhat, save_invstd);
  return y;
}

// tanh form of GELU; constants 0.7978845608028654 = sqrt(2/pi) and 0.044715.
double gelu_scalar(double x) {
  constexpr double k0 = 0.7978845608028654;
  constexpr double k1 = 0.044715;
  return 0.5 * x * (1.0 + std::tanh(k0 * (x + k1 * x * x * x)));
}
double dgelu_scalar(double x) {
  constexpr double k0 = 0.7978845608028654;
  constexpr double k1 = 0.044715;
  const double u = k0 * (x + k1 * x * x * x);
  const double t = std::tanh(u);
  const double sech2 = 1.0 - t * t;
  return 0.5 * (1.0 + t) + 0.5 * x * sech2 * k0 * (1.0 + 3.0 * k1 * x * x);
}
double silu_scalar(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return x * s;
}
double dsilu_scalar(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}
double softplus_scalar(double x) {
  // log1p(exp(x)) with the large-x branch to avoid overflow.
  return x > 30.0 ? x : std::log1p(std::exp(x));
}

namespace {
template <class F>
Tensor map_tensor(const Tensor& x, F f) {
  Tensor y = Tensor::zeros(x.shape(), x.dtype());
  if (x.dtype() == DType::f32) {
    auto xd = x.data<float>();
    auto yd = y.data<float>();
    for (int64_t i = 0; i < x.numel(); ++i) yd[i] = static_cast<float>(f(static_cast<double>(xd[i])));
  } else {
    auto xd = x.data<double>();
    auto yd = y.data<double>();
    for (int64_t i = 0; i < x.numel(); ++i) yd[i] = f(xd[i]);
  }
  return y;
}
}  // namespace

Tensor gelu(const Tensor& x) { return map_tensor(x, gelu_scalar); }
Tensor silu(const Tensor& x) { return map_tensor(x, silu_scalar); }
Tensor softplus(const Tensor& x) { return map_tensor(x, softplus_scalar); }

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) fail(ErrKind::shape, "global_avg_pool input must be rank 4, got " + x.shape().str());
  const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor y = Tensor::zeros({n, c}, x.dtype());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      double acc = 0;
      const int64_t base = (b * c + ch) * plane;
      for (int64_t s = 0; s < plane; ++s) acc += x.at(base + s);
      y.set(b * c + ch, acc / static_cast<double>(plane));
    }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias) {
  if (x.rank() != 2 || w.rank() != 2) fail(ErrKind::shape, "linear expects rank-2 input and weights");
  if (x.dim(1) != w.dim(1))
    fail(ErrKind::shape, "linear input width " + x.shape().str() + " != weight width " + w.shape().str());
  const int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor y = Tensor::zeros({n, out}, x.dtype());
  for (int64_t b = 0; b < n; ++b)
    for (int64_t o = 0; o < out; ++o) {
      double acc = bias ? bias->at(o) : 0.0;
      for (int64_t i = 0; i < in; ++i) acc += x.at(b * in + i) * w.at(o * in + i);
      y.set(b * out + o, acc);
    }
  return y;
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
  if (logits.rank() != 2) fail(ErrKind::shape, "softmax_cross_entropy expects [N,K] logits");
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    fail(ErrKind::shape, "label count != batch size");
  if (dlogits) *dlogits = Tensor::zeros(logits.shape(), logits.dtype());
  double total = 0;
  for (int64_t b = 0; b < n; ++b) {
    if (labels[b] < 0 || labels[b] >= k) fail(ErrKind::config, "label out of range");
    double mx = logits.at(b * k);
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.at(b * k + j));
    double lse = 0;
    for (int64_t j = 0; j < k; ++j) lse += std::exp(logits.at(b * k + j) - mx);
    lse = mx + std::log(lse);
    total += lse - logits.at(b * k + labels[b]);
    if (dlogits) {
      for (int64_t j = 0; j < k; ++j) {
        const double p = std::exp(logits.at(b * k + j) - lse);
        dlogits->set(b * k + j, (p - (j == labels[b] ? 1.0 : 0.0)) / static_cast<double>(n));
      }
    }
  }
  return total / static_cast<double>(n);
}

namespace {
void check_same(const Tensor& a, const Tensor& b, const char* what) {
  if (!(a.shape() == b.shape()) || a.dtype() != b.dtype())
    fail(ErrKind::shape, std::string(what) + " shape/dtype mismatch: " + a.shape().str() + " vs " + b.shape().str());
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same(a, b, "add");
  Tensor y = Tensor::zeros(a.shape(), a.dtype());
  if (a.dtype() == DType::f32) {
    auto av = a.data<float>(); auto bv = b.data<float>(); auto yv = y.data<float>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] + bv[i];
  } else {
    auto av = a.data<double>(); auto bv = b.data<double>(); auto yv = y.data<double>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] + bv[i];
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same(a, b, "mul");
  Tensor y = Tensor::zeros(a.shape(), a.dtype());
  if (a.dtype() == DType::f32) {
    auto av = a.data<float>(); auto bv = b.data<float>(); auto yv = y.data<float>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * bv[i];
  } else {
    auto av = a.data<double>(); auto bv = b.data<double>(); auto yv = y.data<double>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * bv[i];
  }
  return y;
}

Tensor scale(const Tensor& a, double s) {
  Tensor y = Tensor::zeros(a.shape(), a.dtype());
  if (a.dtype() == DType::f32) {
    auto av = a.data<float>(); auto yv = y.data<float>();
    const float sf = static_cast<float>(s);
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * sf;
  } else {
    auto av = a.data<double>(); auto yv = y.data<double>();
    for (int64_t i = 0; i < a.numel(); ++i) yv[i] = av[i] * s;
  }
  return y;
}

}  // namespace im
