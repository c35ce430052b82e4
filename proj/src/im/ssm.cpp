#include "im/ssm.hpp"

#include <cmath>

namespace im::ssm {

namespace {
constexpr double kSeriesSwitch = 1e-4;

double phi1(double z) {
  // (e^z - 1)/z with a short series below the switch point.
  if (std::abs(z) < kSeriesSwitch) return 1.0 + z / 2.0 + z * z / 6.0;
  return std::expm1(z) / z;
}

// exp at the working precision; the f32 scan path stays on the float libm
// kernel which is considerably cheaper.
template <class T>
double exp_t(double x) {
  if constexpr (std::is_same_v<T, float>)
    return static_cast<double>(::expf(static_cast<float>(x)));
  else
    return std::exp(x);
}
}  // namespace

void discretize_scalar(double a, double b, double delta, double* abar, double* bbar) {
  if (!(delta > 0)) fail(ErrKind::config, "discretize requires delta > 0, got " + std::to_string(delta));
  const double z = delta * a;
  *abar = std::exp(z);
  *bbar = phi1(z) * delta * b;
}

std::pair<Tensor, Tensor> discretize(const Tensor& a, const Tensor& b, double delta) {
  if (!(a.shape() == b.shape())) fail(ErrKind::shape, "discretize: a and b must match, got " + a.shape().str() + " vs " + b.shape().str());
  Tensor abar = Tensor::zeros(a.shape(), a.dtype());
  Tensor bbar = Tensor::zeros(a.shape(), a.dtype());
  for (int64_t i = 0; i < a.numel(); ++i) {
    double av, bv;
    discretize_scalar(a.at(i), b.at(i), delta, &av, &bv);
    abar.set(i, av);
    bbar.set(i, bv);
  }
  return {std::move(abar), std::move(bbar)};
}

DiscreteSsm discretize(const SsmParams& p) {
  auto [abar, bbar] = discretize(p.a, p.b, p.delta);
  return DiscreteSsm{std::move(abar), std::move(bbar), p.c};
}

Tensor scan_recurrent(const DiscreteSsm& d, const Tensor& x, Tensor* trace) {
  const int64_t n = d.abar.numel(), len = x.numel();
  if (d.bbar.numel() != n || d.c.numel() != n) fail(ErrKind::shape, "scan_recurrent: parameter lengths differ");
  Tensor y = Tensor::zeros({len}, x.dtype());
  if (trace) *trace = Tensor::zeros({len, n}, x.dtype());
  std::vector<double> h(n, 0.0);
  for (int64_t t = 0; t < len; ++t) {
    const double xt = x.at(t);
    double yt = 0;
    for (int64_t i = 0; i < n; ++i) {
      h[i] = d.abar.at(i) * h[i] + d.bbar.at(i) * xt;
      yt += d.c.at(i) * h[i];
      if (trace) trace->set(t * n + i, h[i]);
    }
    y.set(t, yt);
  }
  return y;
}

Tensor scan_recurrent_steps(const Tensor& abar, const Tensor& bbar, const Tensor& c, const Tensor& x) {
  const int64_t len = x.numel();
  if (abar.rank() != 2 || !(abar.shape() == bbar.shape()))
    fail(ErrKind::shape, "scan_recurrent_steps: abar/bbar must be [L,N]");
  if (abar.dim(0) != len)
    fail(ErrKind::shape, "scan_recurrent_steps: " + std::to_string(len) + " inputs vs " +
                             std::to_string(abar.dim(0)) + " per-step parameters");
  const int64_t n = abar.dim(1);
  const bool per_step_c = c.rank() == 2;
  if (per_step_c && c.dim(0) != len) fail(ErrKind::shape, "scan_recurrent_steps: per-step c length mismatch");
  Tensor y = Tensor::zeros({len}, x.dtype());
  std::vector<double> h(n, 0.0);
  for (int64_t t = 0; t < len; ++t) {
    const double xt = x.at(t);
    double yt = 0;
    for (int64_t i = 0; i < n; ++i) {
      h[i] = abar.at(t * n + i) * h[i] + bbar.at(t * n + i) * xt;
      yt += (per_step_c ? c.at(t * n + i) : c.at(i)) * h[i];
    }
    y.set(t, yt);
  }
  return y;
}

Tensor ssm_kernel(const DiscreteSsm& d, int64_t len) {
  const int64_t n = d.abar.numel();
  Tensor k = Tensor::zeros({len}, d.abar.dtype());
  std::vector<double> pw(n);
  for (int64_t i = 0; i < n; ++i) pw[i] = d.bbar.at(i);
  for (int64_t t = 0; t < len; ++t) {
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) acc += d.c.at(i) * pw[i];
    k.set(t, acc);
    for (int64_t i = 0; i < n; ++i) pw[i] *= d.abar.at(i);
  }
  return k;
}

Tensor ssm_kernel(const SsmParams& p, int64_t len) {
  if (p.delta_per_step)
    fail(ErrKind::config, "kernel form requires a time-invariant system; per-step delta given");
  return ssm_kernel(discretize(p), len);
}

Tensor apply_causal_kernel(const Tensor& kbar, const Tensor& x) {
  const int64_t len = x.numel();
  if (kbar.numel() < len) fail(ErrKind::shape, "kernel shorter than input sequence");
  Tensor y = Tensor::zeros({len}, x.dtype());
  for (int64_t t = 0; t < len; ++t) {
    double acc = 0;
    for (int64_t i = 0; i <= t; ++i) acc += kbar.at(i) * x.at(t - i);
    y.set(t, acc);
  }
  return y;
}

int default_dt_rank(int channels) { return (channels + 15) / 16; }

SelectiveScanParams selective_scan_init(int channels, int state_dim, int dt_rank, Rng& rng, DType dt) {
  SelectiveScanParams p;
  p.state_dim = state_dim;
  p.dt_rank = dt_rank;
  p.a_log = Tensor::zeros({channels, state_dim}, dt);
  for (int64_t c = 0; c < channels; ++c)
    for (int64_t n = 0; n < state_dim; ++n) p.a_log.set(c * state_dim + n, std::log(static_cast<double>(n + 1)));
  p.d_skip = Tensor::full({channels}, 1.0, dt);
  const double xb = 1.0 / std::sqrt(static_cast<double>(channels));
  p.x_proj_w = rng.tensor_uniform({dt_rank + 2 * state_dim, channels}, -xb, xb, dt);
  const double tb = 1.0 / std::sqrt(static_cast<double>(dt_rank));
  p.dt_proj_w = rng.tensor_uniform({channels, dt_rank}, -tb, tb, dt);
  p.dt_proj_b = Tensor::zeros({channels}, dt);
  for (int64_t c = 0; c < channels; ++c) {
    // timescale drawn log-uniform from [1e-3, 1e-1], stored pre-softplus
    const double t0 = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    p.dt_proj_b.set(c, std::log(std::expm1(t0)));
  }
  return p;
}

namespace {

template <class T>
void selective_scan_fwd_impl(const SelectiveScanParams& p, const Tensor& u, Tensor& y,
                             int64_t batch, int64_t ch, int64_t len,
                             std::vector<double>* keep_h, std::vector<double>* keep_xdbc,
                             std::vector<double>* keep_draw, int64_t sample,
                             std::vector<double>* keep_abar = nullptr) {
  const int64_t nst = p.state_dim, r = p.dt_rank, proj = r + 2 * nst;
  auto ud = u.data<T>();
  auto yd = y.data<T>();
  auto xw = p.x_proj_w.data<T>();
  auto dtw = p.dt_proj_w.data<T>();
  auto dtb = p.dt_proj_b.data<T>();
  auto alog = p.a_log.data<T>();
  auto dsk = p.d_skip.data<T>();

  std::vector<double> a(ch * nst);
  for (int64_t i = 0; i < ch * nst; ++i) a[i] = -std::exp(static_cast<double>(alog[i]));

  auto run_sample = [&](int64_t b) {
    std::vector<double> h(ch * nst, 0.0);
    std::vector<double> xdbc(proj);
    const T* ub = ud.data() + b * ch * len;
    T* yb = yd.data() + b * ch * len;
    for (int64_t t = 0; t < len; ++t) {
      for (int64_t j = 0; j < proj; ++j) {
        double acc = 0;
        const T* wrow = xw.data() + j * ch;
        for (int64_t c = 0; c < ch; ++c) acc += static_cast<double>(wrow[c]) * static_cast<double>(ub[c * len + t]);
        xdbc[j] = acc;
      }
      if (keep_xdbc)
        for (int64_t j = 0; j < proj; ++j) (*keep_xdbc)[t * proj + j] = xdbc[j];
      const double* bt = xdbc.data() + r;
      const double* ct = xdbc.data() + r + nst;
      for (int64_t c = 0; c < ch; ++c) {
        double draw = static_cast<double>(dtb[c]);
        for (int64_t k = 0; k < r; ++k) draw += static_cast<double>(dtw[c * r + k]) * xdbc[k];
        const double delta = softplus_scalar(draw);
        if (std::isnan(delta))
          fail(ErrKind::numeric, "selective_scan: NaN timescale at step " + std::to_string(t));
        if (keep_draw) (*keep_draw)[t * ch + c] = draw;
        const double uv = static_cast<double>(ub[c * len + t]);
        double yv = 0;
        double* hc = h.data() + c * nst;
        const double* ac = a.data() + c * nst;
        for (int64_t n = 0; n < nst; ++n) {
          const double abar = exp_t<T>(delta * ac[n]);
          if (keep_abar) (*keep_abar)[(t * ch + c) * nst + n] = abar;
          hc[n] = abar * hc[n] + (delta * bt[n]) * uv;
          yv += ct[n] * hc[n];
        }
        if (keep_h)
          for (int64_t n = 0; n < nst; ++n) (*keep_h)[(t * ch + c) * nst + n] = hc[n];
        yb[c * len + t] = static_cast<T>(yv + static_cast<double>(dsk[c]) * uv);
      }
    }
  };
  if (sample >= 0)
    run_sample(sample);
  else
    parallel_for(batch, run_sample);
}

void check_scan_input(const SelectiveScanParams& p, const Tensor& u, int64_t* batch, int64_t* ch, int64_t* len) {
  if (u.rank() == 2) {
    *batch = 1;
    *ch = u.dim(0);
    *len = u.dim(1);
  } else if (u.rank() == 3) {
    *batch = u.dim(0);
    *ch = u.dim(1);
    *len = u.dim(2);
  } else {
    fail(ErrKind::shape, "selective_scan input must be [C,L] or [B,C,L], got " + u.shape().str());
  }
  if (p.a_log.dim(0) != *ch)
    fail(ErrKind::config, "selective_scan channel mismatch: params " + p.a_log.shape().str() + " vs input " + u.shape().str());
}

}  // namespace

Tensor selective_scan(const SelectiveScanParams& p, const Tensor& u) {
  int64_t batch, ch, len;
  check_scan_input(p, u, &batch, &ch, &len);
  Tensor y = Tensor::zeros(u.shape(), u.dtype());
  if (u.dtype() == DType::f32)
    selective_scan_fwd_impl<float>(p, u, y, batch, ch, len, nullptr, nullptr, nullptr, -1);
  else
    selective_scan_fwd_impl<double>(p, u, y, batch, ch, len, nullptr, nullptr, nullptr, -1);
  return y;
}

namespace {

template <class T>
void selective_scan_bwd_impl(const SelectiveScanParams& p, const Tensor& u, const Tensor& dy,
                             SelectiveScanGrads& g, int64_t batch, int64_t ch, int64_t len) {
  const int64_t nst = p.state_dim, r = p.dt_rank, proj = r + 2 * nst;
  auto ud = u.data<T>();
  auto dyd = dy.data<T>();
  auto du = g.du.data<T>();
  auto dd = g.dd_skip.data<T>();
  auto dxw = g.dx_proj_w.data<T>();
  auto ddtw = g.ddt_proj_w.data<T>();
  auto ddtb = g.ddt_proj_b.data<T>();
  auto dsk = p.d_skip.data<T>();
  auto dtw = p.dt_proj_w.data<T>();
  auto xw = p.x_proj_w.data<T>();

  std::vector<double> a(ch * nst), da(ch * nst, 0.0);
  for (int64_t i = 0; i < ch * nst; ++i) a[i] = -std::exp(static_cast<double>(p.a_log.data<T>()[i]));

  std::vector<double> keep_h(len * ch * nst), keep_xdbc(len * proj), keep_draw(len * ch);
  std::vector<double> keep_abar(len * ch * nst);
  std::vector<double> dh(ch * nst), ddn(ch), dxdbc(proj);
  Tensor ybuf = Tensor::zeros(u.shape(), u.dtype());

  for (int64_t b = 0; b < batch; ++b) {
    selective_scan_fwd_impl<T>(p, u, ybuf, batch, ch, len, &keep_h, &keep_xdbc, &keep_draw, b, &keep_abar);

    std::fill(dh.begin(), dh.end(), 0.0);
    const int64_t base = b * ch * len;
    for (int64_t t = len - 1; t >= 0; --t) {
      const double* bt = keep_xdbc.data() + t * proj + r;
      const double* ct = keep_xdbc.data() + t * proj + r + nst;
      std::fill(dxdbc.begin(), dxdbc.end(), 0.0);
      double* dbt = dxdbc.data() + r;
      double* dct = dxdbc.data() + r + nst;

      for (int64_t c = 0; c < ch; ++c) {
        const double dyv = static_cast<double>(dyd[base + c * len + t]);
        const double uv = static_cast<double>(ud[base + c * len + t]);
        const double draw = keep_draw[t * ch + c];
        const double delta = softplus_scalar(draw);
        double* dhc = dh.data() + c * nst;
        const double* hc = keep_h.data() + (t * ch + c) * nst;
        const double* hprev = t > 0 ? keep_h.data() + ((t - 1) * ch + c) * nst : nullptr;
        const double* ac = a.data() + c * nst;

        // y_t = <C_t, h_t> + D u_t
        dd[c] += static_cast<T>(uv * dyv);
        double du_acc = static_cast<double>(dsk[c]) * dyv;
        for (int64_t n = 0; n < nst; ++n) {
          dct[n] += hc[n] * dyv;
          dhc[n] += ct[n] * dyv;
        }
        // h_t = exp(delta*A) h_{t-1} + (delta*B_t) u_t
        const double* abar_row = keep_abar.data() + (t * ch + c) * nst;
        double ddelta = 0;
        for (int64_t n = 0; n < nst; ++n) {
          const double abar = abar_row[n];
          const double hp = hprev ? hprev[n] : 0.0;
          const double dabar = dhc[n] * hp;
          ddelta += dabar * abar * ac[n];
          da[c * nst + n] += dabar * abar * delta;
          dbt[n] += dhc[n] * delta * uv;
          ddelta += dhc[n] * bt[n] * uv;
          du_acc += dhc[n] * delta * bt[n];
          dhc[n] = dhc[n] * abar;  // flows to t-1
        }
        du[base + c * len + t] += static_cast<T>(du_acc);
        // delta = softplus(draw)
        const double sig = 1.0 / (1.0 + std::exp(-draw));
        ddn[c] = ddelta * sig;
      }

      for (int64_t c = 0; c < ch; ++c) {
        ddtb[c] += static_cast<T>(ddn[c]);
        for (int64_t k = 0; k < r; ++k) {
          ddtw[c * r + k] += static_cast<T>(ddn[c] * keep_xdbc[t * proj + k]);
          dxdbc[k] += ddn[c] * static_cast<double>(dtw[c * r + k]);
        }
      }
      for (int64_t j = 0; j < proj; ++j) {
        if (dxdbc[j] == 0.0) continue;
        const T* wrow = xw.data() + j * ch;
        T* dwrow = dxw.data() + j * ch;
        for (int64_t c = 0; c < ch; ++c) {
          const double uv = static_cast<double>(ud[base + c * len + t]);
          dwrow[c] += static_cast<T>(dxdbc[j] * uv);
          du[base + c * len + t] += static_cast<T>(static_cast<double>(wrow[c]) * dxdbc[j]);
        }
      }
    }
  }
  // dA/da_log = -exp(a_log) = A
  auto dal = g.da_log.data<T>();
  for (int64_t i = 0; i < ch * nst; ++i) dal[i] = static_cast<T>(da[i] * a[i]);
}

}  // namespace

SelectiveScanGrads selective_scan_backward(const SelectiveScanParams& p, const Tensor& u, const Tensor& dy) {
  int64_t batch, ch, len;
  check_scan_input(p, u, &batch, &ch, &len);
  if (!(dy.shape() == u.shape())) fail(ErrKind::shape, "selective_scan_backward: dy shape mismatch");
  const DType dt = u.dtype();

  SelectiveScanGrads g;
  g.du = Tensor::zeros(u.shape(), dt);
  g.da_log = Tensor::zeros(p.a_log.shape(), dt);
  g.dd_skip = Tensor::zeros(p.d_skip.shape(), dt);
  g.dx_proj_w = Tensor::zeros(p.x_proj_w.shape(), dt);
  g.ddt_proj_w = Tensor::zeros(p.dt_proj_w.shape(), dt);
  g.ddt_proj_b = Tensor::zeros(p.dt_proj_b.shape(), dt);
  if (dt == DType::f32)
    selective_scan_bwd_impl<float>(p, u, dy, g, batch, ch, len);
  else
    selective_scan_bwd_impl<double>(p, u, dy, g, batch, ch, len);
  return g;
}

int64_t direction_site(Direction dir, int64_t k, int64_t h, int64_t w) {
  const int64_t l = h * w;
  switch (dir) {
    case Direction::row_f:
      return k;
    case Direction::row_b:
      return l - 1 - k;
    case Direction::col_f:
      return (k % h) * w + k / h;
    case Direction::col_b: {
      const int64_t kk = l - 1 - k;
      return (kk % h) * w + kk / h;
    }
  }
  return 0;
}

Tensor cross_scan_take(const Tensor& x, Direction dir) {
  if (x.rank() != 4) fail(ErrKind::shape, "cross_scan expects [B,C,H,W], got " + x.shape().str());
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3), l = h * w;
  Tensor y = Tensor::zeros({b, c, l}, x.dtype());
  for (int64_t k = 0; k < l; ++k) {
    const int64_t s = direction_site(dir, k, h, w);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci) y.set((bi * c + ci) * l + k, x.at((bi * c + ci) * l + s));
  }
  return y;
}

std::array<Tensor, 4> cross_scan(const Tensor& x) {
  return {cross_scan_take(x, Direction::row_f), cross_scan_take(x, Direction::row_b),
          cross_scan_take(x, Direction::col_f), cross_scan_take(x, Direction::col_b)};
}

Tensor cross_scan_insert(const Tensor& seq, Direction dir, int64_t h, int64_t w) {
  if (seq.rank() != 3 || seq.dim(2) != h * w)
    fail(ErrKind::shape, "cross_scan_insert expects [B,C,L] with L = H*W");
  const int64_t b = seq.dim(0), c = seq.dim(1), l = h * w;
  Tensor y = Tensor::zeros({b, c, h, w}, seq.dtype());
  for (int64_t k = 0; k < l; ++k) {
    const int64_t s = direction_site(dir, k, h, w);
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t ci = 0; ci < c; ++ci) y.set((bi * c + ci) * l + s, seq.at((bi * c + ci) * l + k));
  }
  return y;
}

Tensor cross_merge(std::span<const Tensor> seqs, int64_t h, int64_t w) {
  if (seqs.size() != kDirections) fail(ErrKind::config, "cross_merge expects 4 sequences");
  Tensor y;
  for (int d = 0; d < kDirections; ++d) {
    Tensor grid = cross_scan_insert(seqs[d], static_cast<Direction>(d), h, w);
    y = d == 0 ? std::move(grid) : add(y, grid);
  }
  return y;
}

Ss2dConfig ss2d_init(int channels, int state_dim, int dt_rank, Rng& rng, DType dt) {
  Ss2dConfig cfg;
  cfg.channels = channels;
  cfg.state_dim = state_dim;
  cfg.dt_rank = dt_rank;
  const double pb = 1.0 / std::sqrt(static_cast<double>(channels));
  cfg.in_proj_w = rng.tensor_uniform({channels, channels, 1, 1}, -pb, pb, dt);
  cfg.conv_w = rng.tensor_uniform({channels, 1, 3, 3}, -1.0 / 3.0, 1.0 / 3.0, dt);
  cfg.conv_b = Tensor::zeros({channels}, dt);
  for (int d = 0; d < kDirections; ++d) cfg.dir[d] = selective_scan_init(channels, state_dim, dt_rank, rng, dt);
  cfg.norm_gamma = Tensor::full({channels}, 1.0, dt);
  cfg.norm_beta = Tensor::zeros({channels}, dt);
  cfg.out_proj_w = rng.tensor_uniform({channels, channels, 1, 1}, -pb, pb, dt);
  return cfg;
}

Tensor ss2d_direction_contribution(const SelectiveScanParams& p, const Tensor& features, Direction dir) {
  Tensor seq = cross_scan_take(features, dir);
  Tensor out = selective_scan(p, seq);
  return cross_scan_insert(out, dir, features.dim(2), features.dim(3));
}

}  // namespace im::ssm
