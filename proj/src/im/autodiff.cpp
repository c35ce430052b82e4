#include "im/autodiff.hpp"

#include <cmath>
#include <sstream>

namespace im::ad {

struct RuleAccess {
  static const Tensor& val(Tape& t, int id) { return t.slots_[id].val; }
  static bool needs(Tape& t, int id) { return t.slots_[id].requires_grad; }
  static Tensor& grad(Tape& t, int id) { return t.grad_slot(id); }
};

namespace {

void add_into(Tensor& acc, const Tensor& delta) {
  if (acc.dtype() == DType::f32) {
    float* __restrict a = acc.data<float>().data();
    const float* __restrict d = delta.data<float>().data();
    for (int64_t i = 0; i < acc.numel(); ++i) a[i] += d[i];
  } else {
    double* __restrict a = acc.data<double>().data();
    const double* __restrict d = delta.data<double>().data();
    for (int64_t i = 0; i < acc.numel(); ++i) a[i] += d[i];
  }
}

template <class T>
void conv2d_backward_impl(const Tensor& x, const Tensor& w, const Conv2dSpec& spec, const Tensor& dy,
                          Tensor* dx, Tensor* dw, Tensor* db) {
  const int64_t n = x.dim(0), cin = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  const int64_t cout = w.dim(0), cpg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  const int64_t oh = dy.dim(2), ow = dy.dim(3);
  const bool depthwise = spec.grouping == Grouping::depthwise;
  auto xd = x.data<T>();
  auto wd = w.data<T>();
  auto gd = dy.data<T>();

  if (!depthwise && kh == 1 && kw == 1 && spec.stride_h == 1 && spec.stride_w == 1 && spec.pad_h == 0 &&
      spec.pad_w == 0) {
    const int64_t hw = ih * iw;
    for (int64_t b = 0; b < n; ++b) {
      const T* xb = xd.data() + b * cin * hw;
      const T* gb = gd.data() + b * cout * hw;
      for (int64_t co = 0; co < cout; ++co) {
        const T* gr = gb + co * hw;
        if (db) {
          double acc = 0;
          for (int64_t s = 0; s < hw; ++s) acc += static_cast<double>(gr[s]);
          db->data<T>()[co] += static_cast<T>(acc);
        }
        for (int64_t ci = 0; ci < cin; ++ci) {
          const T* __restrict xr = xb + ci * hw;
          if (dw) {
            double acc = 0;
            for (int64_t s = 0; s < hw; ++s) acc += static_cast<double>(gr[s]) * static_cast<double>(xr[s]);
            dw->data<T>()[co * cin + ci] += static_cast<T>(acc);
          }
          if (dx) {
            const T wv = wd[co * cin + ci];
            T* __restrict dxr = dx->data<T>().data() + (b * cin + ci) * hw;
            for (int64_t s = 0; s < hw; ++s) dxr[s] += wv * gr[s];
          }
        }
      }
    }
    return;
  }

  for (int64_t b = 0; b < n; ++b)
    for (int64_t co = 0; co < cout; ++co) {
      const int64_t ci0 = depthwise ? co : 0;
      const int64_t ci1 = depthwise ? co + 1 : cin;
      double db_acc = 0;
      for (int64_t y0 = 0; y0 < oh; ++y0) {
        const int64_t hbase = y0 * spec.stride_h - spec.pad_h;
        const int64_t r0 = std::max<int64_t>(0, -hbase);
        const int64_t r1 = std::min<int64_t>(kh, ih - hbase);
        for (int64_t x0 = 0; x0 < ow; ++x0) {
          const T g = gd[((b * cout + co) * oh + y0) * ow + x0];
          db_acc += static_cast<double>(g);
          const int64_t wbase = x0 * spec.stride_w - spec.pad_w;
          const int64_t c0 = std::max<int64_t>(0, -wbase);
          const int64_t c1 = std::min<int64_t>(kw, iw - wbase);
          for (int64_t ci = ci0; ci < ci1; ++ci) {
            const int64_t xoff = (b * cin + ci) * ih * iw;
            const int64_t woff = (co * cpg + (ci - ci0)) * kh * kw;
            for (int64_t r = r0; r < r1; ++r) {
              const int64_t xrow = xoff + (hbase + r) * iw + wbase;
              const int64_t wrow = woff + r * kw;
              if (dx && dw) {
                T* __restrict dxr = dx->data<T>().data() + xrow;
                T* __restrict dwr = dw->data<T>().data() + wrow;
                const T* __restrict xr = xd.data() + xrow;
                const T* __restrict wr = wd.data() + wrow;
                for (int64_t c = c0; c < c1; ++c) {
                  dxr[c] += wr[c] * g;
                  dwr[c] += xr[c] * g;
                }
              } else if (dx) {
                T* __restrict dxr = dx->data<T>().data() + xrow;
                const T* __restrict wr = wd.data() + wrow;
                for (int64_t c = c0; c < c1; ++c) dxr[c] += wr[c] * g;
              } else if (dw) {
                T* __restrict dwr = dw->data<T>().data() + wrow;
                const T* __restrict xr = xd.data() + xrow;
                for (int64_t c = c0; c < c1; ++c) dwr[c] += xr[c] * g;
              }
            }
          }
        }
      }
      if (db) db->data<T>()[co] += static_cast<T>(db_acc);
    }
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Conv2dSpec& spec, const Tensor& dy, Tensor* dx,
                     Tensor* dw, Tensor* db) {
  if (x.dtype() == DType::f32)
    conv2d_backward_impl<float>(x, w, spec, dy, dx, dw, db);
  else
    conv2d_backward_impl<double>(x, w, spec, dy, dx, dw, db);
}

template <class T>
void layer_norm_backward_impl(const Tensor& xhat, const Tensor& invstd, const Tensor& gamma, const Tensor& dy,
                              Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const int64_t n = xhat.dim(0), c = xhat.dim(1), plane = xhat.dim(2) * xhat.dim(3);
  auto xh = xhat.data<T>();
  auto is = invstd.data<T>();
  auto gm = gamma.data<T>();
  auto gd = dy.data<T>();
  for (int64_t b = 0; b < n; ++b)
    for (int64_t s = 0; s < plane; ++s) {
      const int64_t base = b * c * plane + s;
      double m1 = 0, m2 = 0;
      for (int64_t ch = 0; ch < c; ++ch) {
        const double dxh = static_cast<double>(gd[base + ch * plane]) * static_cast<double>(gm[ch]);
        m1 += dxh;
        m2 += dxh * static_cast<double>(xh[base + ch * plane]);
      }
      m1 /= static_cast<double>(c);
      m2 /= static_cast<double>(c);
      const double iv = static_cast<double>(is[b * plane + s]);
      for (int64_t ch = 0; ch < c; ++ch) {
        const double dyv = static_cast<double>(gd[base + ch * plane]);
        const double xhv = static_cast<double>(xh[base + ch * plane]);
        if (dx) {
          const double dxh = dyv * static_cast<double>(gm[ch]);
          dx->data<T>()[base + ch * plane] += static_cast<T>(iv * (dxh - m1 - xhv * m2));
        }
        if (dgamma) dgamma->data<T>()[ch] += static_cast<T>(dyv * xhv);
        if (dbeta) dbeta->data<T>()[ch] += static_cast<T>(dyv);
      }
    }
}

void back_conv2d(Tape& t, const Node& n);
void back_add(Tape& t, const Node& n);
void back_mul(Tape& t, const Node& n);
void back_scale(Tape& t, const Node& n);
void back_gelu(Tape& t, const Node& n);
void back_silu(Tape& t, const Node& n);
void back_layer_norm(Tape& t, const Node& n);
void back_slice(Tape& t, const Node& n);
void back_concat(Tape& t, const Node& n);
void back_gap(Tape& t, const Node& n);
void back_linear(Tape& t, const Node& n);
void back_reshape(Tape& t, const Node& n);
void back_cross_take(Tape& t, const Node& n);
void back_cross_merge(Tape& t, const Node& n);
void back_selective_scan(Tape& t, const Node& n);
void back_softmax_ce(Tape& t, const Node& n);
void back_sum(Tape& t, const Node& n);

using BackwardRule = void (*)(Tape&, const Node&);

// One rule per differentiable op; a null entry rejects recording when a
// gradient would flow through it.
constexpr size_t kOpCount = static_cast<size_t>(Op::count);
BackwardRule rule_for(Op op) {
  static const BackwardRule table[kOpCount] = {
      /*leaf*/ nullptr,
      back_conv2d,
      back_add,
      back_mul,
      back_scale,
      back_gelu,
      back_silu,
      back_layer_norm,
      back_slice,
      back_concat,
      back_gap,
      back_linear,
      back_reshape,
      back_cross_take,
      back_cross_merge,
      back_selective_scan,
      back_softmax_ce,
      back_sum,
      /*argmax*/ nullptr,
  };
  return table[static_cast<size_t>(op)];
}

}  // namespace

Value Tape::push_value(Tensor t, bool requires_grad) {
  slots_.push_back(Slot{std::move(t), Tensor{}, requires_grad});
  return Value{static_cast<int>(slots_.size()) - 1, this};
}

Value Tape::leaf(Tensor t, bool requires_grad) { return push_value(std::move(t), requires_grad); }

const Tensor& Tape::val(Value v) const {
  if (!v.valid() || v.tape != this) fail(ErrKind::config, "value does not belong to this tape");
  return slots_[v.id].val;
}

bool Tape::requires_grad(Value v) const { return slots_[v.id].requires_grad; }

const Tensor& Tape::grad(Value v) const {
  if (!v.valid() || v.tape != this) fail(ErrKind::config, "value does not belong to this tape");
  if (!slots_[v.id].grad.defined()) fail(ErrKind::config, "no gradient recorded; run backward first");
  return slots_[v.id].grad;
}

Tensor& Tape::grad_slot(int id) {
  Slot& s = slots_[id];
  if (!s.grad.defined()) s.grad = Tensor::zeros(s.val.shape(), s.val.dtype());
  return s.grad;
}

Value Tape::record(Op op, std::vector<int> in, Tensor out, NodeCtx ctx) {
  bool needs = false;
  for (int id : in) needs = needs || slots_[id].requires_grad;
  if (needs && rule_for(op) == nullptr)
    fail(ErrKind::config, "op has no registered backward rule and an input requires gradients");
  Value v = push_value(std::move(out), needs);
  if (recording_ && needs) nodes_.push_back(Node{op, std::move(in), v.id, std::move(ctx)});
  return v;
}

Value Tape::conv2d(Value x, Value w, std::optional<Value> b, const Conv2dSpec& spec) {
  Tensor y = im::conv2d(val(x), val(w), b ? &val(*b) : nullptr, spec);
  std::vector<int> in{x.id, w.id};
  if (b) in.push_back(b->id);
  return record(Op::conv2d, std::move(in), std::move(y), ConvCtx{spec});
}

Value Tape::add(Value a, Value b) { return record(Op::add, {a.id, b.id}, im::add(val(a), val(b)), {}); }
Value Tape::mul(Value a, Value b) { return record(Op::mul, {a.id, b.id}, im::mul(val(a), val(b)), {}); }
Value Tape::scale(Value a, double s) { return record(Op::scale, {a.id}, im::scale(val(a), s), ScaleCtx{s}); }
Value Tape::gelu(Value x) { return record(Op::gelu, {x.id}, im::gelu(val(x)), {}); }
Value Tape::silu(Value x) { return record(Op::silu, {x.id}, im::silu(val(x)), {}); }

Value Tape::layer_norm(Value x, Value gamma, Value beta, double eps) {
  NormCtx ctx;
  ctx.eps = eps;
  Tensor y = layer_norm_channels(val(x), val(gamma), val(beta), eps, &ctx.xhat, &ctx.invstd);
  return record(Op::layer_norm, {x.id, gamma.id, beta.id}, std::move(y), std::move(ctx));
}

Value Tape::slice_channels(Value x, int64_t c0, int64_t c1) {
  const Tensor& xv = val(x);
  if (c0 < 0 || c1 <= c0 || c1 > xv.dim(1)) fail(ErrKind::shape, "slice_channels range out of bounds");
  const int64_t n = xv.dim(0), h = xv.dim(2), w = xv.dim(3), plane = h * w;
  Tensor y = Tensor::zeros({n, c1 - c0, h, w}, xv.dtype());
  const size_t row = static_cast<size_t>((c1 - c0) * plane) * dtype_size(xv.dtype());
  for (int64_t b = 0; b < n; ++b)
    std::memcpy(y.raw() + static_cast<size_t>(y.idx4(b, 0, 0, 0)) * dtype_size(xv.dtype()),
                xv.raw() + static_cast<size_t>(xv.idx4(b, c0, 0, 0)) * dtype_size(xv.dtype()), row);
  return record(Op::slice_channels, {x.id}, std::move(y), SliceCtx{c0, c1});
}

Value Tape::concat(std::span<const Value> parts) {
  std::vector<Tensor> ts;
  std::vector<int> in;
  for (Value p : parts) {
    ts.push_back(val(p));
    in.push_back(p.id);
  }
  return record(Op::concat, std::move(in), concat_channels(ts), {});
}

Value Tape::gap(Value x) { return record(Op::gap, {x.id}, global_avg_pool(val(x)), {}); }

Value Tape::linear(Value x, Value w, std::optional<Value> b) {
  Tensor y = im::linear(val(x), val(w), b ? &val(*b) : nullptr);
  std::vector<int> in{x.id, w.id};
  if (b) in.push_back(b->id);
  return record(Op::linear, std::move(in), std::move(y), {});
}

Value Tape::reshape(Value x, Shape s) {
  ReshapeCtx ctx{val(x).shape()};
  return record(Op::reshape, {x.id}, val(x).reshaped(s), ctx);
}

Value Tape::cross_take(Value x, ssm::Direction dir) {
  const Tensor& xv = val(x);
  return record(Op::cross_take, {x.id}, ssm::cross_scan_take(xv, dir), CrossCtx{dir, xv.dim(2), xv.dim(3)});
}

Value Tape::cross_merge(std::span<const Value> seqs, int64_t h, int64_t w) {
  std::vector<Tensor> ts;
  std::vector<int> in;
  for (Value s : seqs) {
    ts.push_back(val(s));
    in.push_back(s.id);
  }
  return record(Op::cross_merge, std::move(in), ssm::cross_merge(ts, h, w), CrossCtx{ssm::Direction::row_f, h, w});
}

Value Tape::selective_scan(Value u, Value a_log, Value d_skip, Value xw, Value dtw, Value dtb, int state_dim,
                           int dt_rank) {
  ssm::SelectiveScanParams p{state_dim, dt_rank, val(a_log), val(d_skip), val(xw), val(dtw), val(dtb)};
  Tensor y = ssm::selective_scan(p, val(u));
  return record(Op::selective_scan, {u.id, a_log.id, d_skip.id, xw.id, dtw.id, dtb.id}, std::move(y),
                ScanCtx{state_dim, dt_rank});
}

Value Tape::softmax_ce(Value logits, std::span<const int> labels) {
  CeCtx ctx;
  const double loss = softmax_cross_entropy(val(logits), labels, &ctx.dlogits);
  // keep the scalar at full precision so epoch statistics do not depend on
  // how samples were grouped into batches
  Tensor out = Tensor::full({1}, loss, DType::f64);
  return record(Op::softmax_ce, {logits.id}, std::move(out), std::move(ctx));
}

Value Tape::sum(Value x) {
  double acc = 0;
  const Tensor& xv = val(x);
  for (int64_t i = 0; i < xv.numel(); ++i) acc += xv.at(i);
  return record(Op::reduce_sum, {x.id}, Tensor::full({1}, acc, xv.dtype()), {});
}

Value Tape::argmax_rows(Value x) {
  const Tensor& xv = val(x);
  if (xv.rank() != 2) fail(ErrKind::shape, "argmax_rows expects [N,K]");
  Tensor y = Tensor::zeros({xv.dim(0)}, xv.dtype());
  for (int64_t b = 0; b < xv.dim(0); ++b) {
    int64_t best = 0;
    for (int64_t k = 1; k < xv.dim(1); ++k)
      if (xv.at(b * xv.dim(1) + k) > xv.at(b * xv.dim(1) + best)) best = k;
    y.set(b, static_cast<double>(best));
  }
  return record(Op::argmax, {x.id}, std::move(y), {});
}

void Tape::backward(Value loss) {
  if (!loss.valid() || loss.tape != this) fail(ErrKind::config, "loss does not belong to this tape");
  if (!recording_) fail(ErrKind::config, "backward requires a recording tape");
  if (val(loss).numel() != 1)
    fail(ErrKind::config, "backward requires a scalar loss, got " + val(loss).shape().str());
  grad_slot(loss.id).set(0, 1.0);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const Node& n = *it;
    if (!slots_[n.out].grad.defined()) continue;  // not on the path to the loss
    rule_for(n.op)(*this, n);
  }
  for (Slot& s : slots_)
    if (s.requires_grad && !s.grad.defined()) s.grad = Tensor::zeros(s.val.shape(), s.val.dtype());
  ran_backward_ = true;
}

namespace {

void back_conv2d(Tape& t, const Node& n) {
  const Tensor& x = RuleAccess::val(t, n.in[0]);
  const Tensor& w = RuleAccess::val(t, n.in[1]);
  const Tensor& dy = RuleAccess::grad(t, n.out);
  const auto& ctx = std::get<ConvCtx>(n.ctx);
  Tensor* dx = RuleAccess::needs(t, n.in[0]) ? &RuleAccess::grad(t, n.in[0]) : nullptr;
  Tensor* dw = RuleAccess::needs(t, n.in[1]) ? &RuleAccess::grad(t, n.in[1]) : nullptr;
  Tensor* db = n.in.size() > 2 && RuleAccess::needs(t, n.in[2]) ? &RuleAccess::grad(t, n.in[2]) : nullptr;
  conv2d_backward(x, w, ctx.spec, dy, dx, dw, db);
}

void back_add(Tape& t, const Node& n) {
  const Tensor& dy = RuleAccess::grad(t, n.out);
  for (int i = 0; i < 2; ++i)
    if (RuleAccess::needs(t, n.in[i])) add_into(RuleAccess::grad(t, n.in[i]), dy);
}

void back_mul(Tape& t, const Node& n) {
  const Tensor& dy = RuleAccess::grad(t, n.out);
  const Tensor& a = RuleAccess::val(t, n.in[0]);
  const Tensor& b = RuleAccess::val(t, n.in[1]);
  if (RuleAccess::needs(t, n.in[0])) add_into(RuleAccess::grad(t, n.in[0]), im::mul(dy, b));
  if (RuleAccess::needs(t, n.in[1])) add_into(RuleAccess::grad(t, n.in[1]), im::mul(dy, a));
}

void back_scale(Tape& t, const Node& n) {
  const auto& ctx = std::get<ScaleCtx>(n.ctx);
  if (RuleAccess::needs(t, n.in[0]))
    add_into(RuleAccess::grad(t, n.in[0]), im::scale(RuleAccess::grad(t, n.out), ctx.s));
}

void back_pointwise(Tape& t, const Node& n, double (*df)(double)) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const Tensor& x = RuleAccess::val(t, n.in[0]);
  const Tensor& dy = RuleAccess::grad(t, n.out);
  Tensor& dx = RuleAccess::grad(t, n.in[0]);
  if (x.dtype() == DType::f32) {
    auto xd = x.data<float>();
    auto gd = dy.data<float>();
    auto od = dx.data<float>();
    for (int64_t i = 0; i < x.numel(); ++i)
      od[i] += static_cast<float>(static_cast<double>(gd[i]) * df(static_cast<double>(xd[i])));
  } else {
    auto xd = x.data<double>();
    auto gd = dy.data<double>();
    auto od = dx.data<double>();
    for (int64_t i = 0; i < x.numel(); ++i) od[i] += gd[i] * df(xd[i]);
  }
}

void back_gelu(Tape& t, const Node& n) { back_pointwise(t, n, dgelu_scalar); }
void back_silu(Tape& t, const Node& n) { back_pointwise(t, n, dsilu_scalar); }

void back_layer_norm(Tape& t, const Node& n) {
  const auto& ctx = std::get<NormCtx>(n.ctx);
  const Tensor& gamma = RuleAccess::val(t, n.in[1]);
  const Tensor& dy = RuleAccess::grad(t, n.out);
  Tensor* dx = RuleAccess::needs(t, n.in[0]) ? &RuleAccess::grad(t, n.in[0]) : nullptr;
  Tensor* dgamma = RuleAccess::needs(t, n.in[1]) ? &RuleAccess::grad(t, n.in[1]) : nullptr;
  Tensor* dbeta = RuleAccess::needs(t, n.in[2]) ? &RuleAccess::grad(t, n.in[2]) : nullptr;
  if (ctx.xhat.dtype() == DType::f32)
    layer_norm_backward_impl<float>(ctx.xhat, ctx.invstd, gamma, dy, dx, dgamma, dbeta);
  else
    layer_norm_backward_impl<double>(ctx.xhat, ctx.invstd, gamma, dy, dx, dgamma, dbeta);
}

template <class T>
void add_rows(Tensor& dst, int64_t dst_off, const Tensor& src, int64_t src_off, int64_t count) {
  T* d = dst.data<T>().data() + dst_off;
  const T* s = src.data<T>().data() + src_off;
  for (int64_t i = 0; i < count; ++i) d[i] += s[i];
}

void add_range(Tensor& dst, int64_t dst_off, const Tensor& src, int64_t src_off, int64_t count) {
  if (dst.dtype() == DType::f32)
    add_rows<float>(dst, dst_off, src, src_off, count);
  else
    add_rows<double>(dst, dst_off, src, src_off, count);
}

void back_slice(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const auto& ctx = std::get<SliceCtx>(n.ctx);
  const Tensor& dy = RuleAccess::grad(t, n.out);
  Tensor& dx = RuleAccess::grad(t, n.in[0]);
  const int64_t nb = dx.dim(0), plane = dx.dim(2) * dx.dim(3);
  const int64_t row = (ctx.c1 - ctx.c0) * plane;
  for (int64_t b = 0; b < nb; ++b)
    add_range(dx, (b * dx.dim(1) + ctx.c0) * plane, dy, b * row, row);
}

void back_concat(Tape& t, const Node& n) {
  const Tensor& dy = RuleAccess::grad(t, n.out);
  const int64_t nb = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
  int64_t c0 = 0;
  for (int id : n.in) {
    const Tensor& part = RuleAccess::val(t, id);
    const int64_t pc = part.dim(1);
    if (RuleAccess::needs(t, id)) {
      Tensor& dp = RuleAccess::grad(t, id);
      for (int64_t b = 0; b < nb; ++b)
        add_range(dp, b * pc * plane, dy, (b * dy.dim(1) + c0) * plane, pc * plane);
    }
    c0 += pc;
  }
}

template <class T>
void back_gap_impl(const Tensor& dy, Tensor& dx) {
  const int64_t nb = dx.dim(0), c = dx.dim(1), plane = dx.dim(2) * dx.dim(3);
  auto gd = dy.data<T>();
  auto xd = dx.data<T>();
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T g = static_cast<T>(gd[b * c + ch] / static_cast<T>(plane));
      T* row = xd.data() + (b * c + ch) * plane;
      for (int64_t s = 0; s < plane; ++s) row[s] += g;
    }
}

void back_gap(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const Tensor& dy = RuleAccess::grad(t, n.out);
  Tensor& dx = RuleAccess::grad(t, n.in[0]);
  if (dx.dtype() == DType::f32)
    back_gap_impl<float>(dy, dx);
  else
    back_gap_impl<double>(dy, dx);
}

void back_linear(Tape& t, const Node& n) {
  const Tensor& x = RuleAccess::val(t, n.in[0]);
  const Tensor& w = RuleAccess::val(t, n.in[1]);
  const Tensor& dy = RuleAccess::grad(t, n.out);
  const int64_t nb = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (RuleAccess::needs(t, n.in[0])) {
    Tensor& dx = RuleAccess::grad(t, n.in[0]);
    for (int64_t b = 0; b < nb; ++b)
      for (int64_t i = 0; i < in; ++i) {
        double acc = 0;
        for (int64_t o = 0; o < out; ++o) acc += dy.at(b * out + o) * w.at(o * in + i);
        dx.set(b * in + i, dx.at(b * in + i) + acc);
      }
  }
  if (RuleAccess::needs(t, n.in[1])) {
    Tensor& dw = RuleAccess::grad(t, n.in[1]);
    for (int64_t o = 0; o < out; ++o)
      for (int64_t i = 0; i < in; ++i) {
        double acc = 0;
        for (int64_t b = 0; b < nb; ++b) acc += dy.at(b * out + o) * x.at(b * in + i);
        dw.set(o * in + i, dw.at(o * in + i) + acc);
      }
  }
  if (n.in.size() > 2 && RuleAccess::needs(t, n.in[2])) {
    Tensor& db = RuleAccess::grad(t, n.in[2]);
    for (int64_t o = 0; o < out; ++o) {
      double acc = 0;
      for (int64_t b = 0; b < nb; ++b) acc += dy.at(b * out + o);
      db.set(o, db.at(o) + acc);
    }
  }
}

void back_reshape(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const auto& ctx = std::get<ReshapeCtx>(n.ctx);
  add_into(RuleAccess::grad(t, n.in[0]), RuleAccess::grad(t, n.out).reshaped(ctx.from));
}

void back_cross_take(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const auto& ctx = std::get<CrossCtx>(n.ctx);
  add_into(RuleAccess::grad(t, n.in[0]),
           ssm::cross_scan_insert(RuleAccess::grad(t, n.out), ctx.dir, ctx.h, ctx.w));
}

void back_cross_merge(Tape& t, const Node& n) {
  const Tensor& dy = RuleAccess::grad(t, n.out);
  for (size_t d = 0; d < n.in.size(); ++d)
    if (RuleAccess::needs(t, n.in[d]))
      add_into(RuleAccess::grad(t, n.in[d]), ssm::cross_scan_take(dy, static_cast<ssm::Direction>(d)));
}

void back_selective_scan(Tape& t, const Node& n) {
  const auto& ctx = std::get<ScanCtx>(n.ctx);
  ssm::SelectiveScanParams p{ctx.state_dim,
                             ctx.dt_rank,
                             RuleAccess::val(t, n.in[1]),
                             RuleAccess::val(t, n.in[2]),
                             RuleAccess::val(t, n.in[3]),
                             RuleAccess::val(t, n.in[4]),
                             RuleAccess::val(t, n.in[5])};
  ssm::SelectiveScanGrads g =
      ssm::selective_scan_backward(p, RuleAccess::val(t, n.in[0]), RuleAccess::grad(t, n.out));
  const Tensor* parts[6] = {&g.du, &g.da_log, &g.dd_skip, &g.dx_proj_w, &g.ddt_proj_w, &g.ddt_proj_b};
  for (int i = 0; i < 6; ++i)
    if (RuleAccess::needs(t, n.in[i])) add_into(RuleAccess::grad(t, n.in[i]), *parts[i]);
}

void back_softmax_ce(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const auto& ctx = std::get<CeCtx>(n.ctx);
  add_into(RuleAccess::grad(t, n.in[0]), im::scale(ctx.dlogits, RuleAccess::grad(t, n.out).at(0)));
}

void back_sum(Tape& t, const Node& n) {
  if (!RuleAccess::needs(t, n.in[0])) return;
  const Tensor& x = RuleAccess::val(t, n.in[0]);
  add_into(RuleAccess::grad(t, n.in[0]), Tensor::full(x.shape(), RuleAccess::grad(t, n.out).at(0), x.dtype()));
}

}  // namespace

std::string GradcheckReport::text() const {
  std::ostringstream os;
  os << "parameter                                analytic-norm   numeric-norm   max-rel-err  status\n";
  for (const GradcheckRow& r : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-40s %14.6e %14.6e %13.3e  %s\n", r.name.c_str(), r.analytic_norm,
                  r.numeric_norm, r.max_rel_err, r.pass ? "PASS" : "FAIL");
    os << line;
  }
  os << (pass ? "gradcheck PASS" : "gradcheck FAIL") << " (tolerance " << tolerance << ")\n";
  return os.str();
}

GradcheckReport gradcheck(const std::vector<std::pair<std::string, Tensor*>>& params, const LossFn& loss_fn,
                          double tolerance, double step) {
  for (const auto& [name, p] : params)
    if (p->dtype() != DType::f64) fail(ErrKind::config, "gradcheck requires 64-bit parameters: " + name);

  Tape tape(true);
  std::vector<Value> leaves;
  leaves.reserve(params.size());
  for (const auto& [name, p] : params) leaves.push_back(tape.leaf(*p, true));
  Value loss = loss_fn(tape, leaves);
  tape.backward(loss);

  auto eval = [&]() -> double {
    Tape t(false);
    std::vector<Value> ls;
    ls.reserve(params.size());
    for (const auto& [name, p] : params) ls.push_back(t.leaf(*p, false));
    return t.val(loss_fn(t, ls)).at(0);
  };

  GradcheckReport report;
  report.tolerance = tolerance;
  report.pass = true;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const auto& [name, p] = params[pi];
    const Tensor& g = tape.grad(leaves[pi]);
    GradcheckRow row;
    row.name = name;
    double gn = 0, nn = 0;
    for (int64_t i = 0; i < p->numel(); ++i) {
      const double orig = p->at(i);
      p->set(i, orig + step);
      const double f1 = eval();
      p->set(i, orig - step);
      const double f0 = eval();
      p->set(i, orig);
      const double numeric = (f1 - f0) / (2.0 * step);
      const double analytic = g.at(i);
      if (!std::isfinite(numeric) || !std::isfinite(analytic))
        fail(ErrKind::numeric, "gradcheck: non-finite derivative for parameter " + name);
      gn += analytic * analytic;
      nn += numeric * numeric;
      const double rel = std::abs(analytic - numeric) / std::max({1e-6, std::abs(analytic), std::abs(numeric)});
      row.max_rel_err = std::max(row.max_rel_err, rel);
    }
    row.analytic_norm = std::sqrt(gn);
    row.numeric_norm = std::sqrt(nn);
    row.pass = row.max_rel_err < tolerance;
    report.pass = report.pass && row.pass;
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace im::ad
