#include "im/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "im/io.hpp"
#include "im/random.hpp"

namespace im::toy {

namespace {

constexpr int kSide = 32;

struct Canvas {
  std::array<float, kSide * kSide> px{};

  void paint(int r, int c, float v) {
    if (r < 0 || r >= kSide || c < 0 || c >= kSide) return;
    px[r * kSide + c] = std::min(1.0f, std::max(px[r * kSide + c], v));
  }
};

void draw_hbar(Canvas& cv, Rng& rng) {
  const int r = static_cast<int>(rng.uniform_int(2, kSide - 3));
  const int c0 = static_cast<int>(rng.uniform_int(2, 10));
  const int len = static_cast<int>(rng.uniform_int(14, 24));
  const int thick = static_cast<int>(rng.uniform_int(1, 2));
  const float v = static_cast<float>(rng.uniform(0.7, 1.0));
  for (int t = 0; t < thick; ++t)
    for (int i = 0; i < len; ++i) cv.paint(r + t, c0 + i, v);
}

void draw_vbar(Canvas& cv, Rng& rng) {
  const int c = static_cast<int>(rng.uniform_int(2, kSide - 3));
  const int r0 = static_cast<int>(rng.uniform_int(2, 10));
  const int len = static_cast<int>(rng.uniform_int(14, 24));
  const int thick = static_cast<int>(rng.uniform_int(1, 2));
  const float v = static_cast<float>(rng.uniform(0.7, 1.0));
  for (int t = 0; t < thick; ++t)
    for (int i = 0; i < len; ++i) cv.paint(r0 + i, c + t, v);
}

struct Dash {
  int r0, c0, len;
  float v;
};

Dash draw_dash(Canvas& cv, Rng& rng, int lo, int hi, int len_lo, int len_hi) {
  Dash d;
  d.r0 = static_cast<int>(rng.uniform_int(lo, hi));
  d.c0 = static_cast<int>(rng.uniform_int(lo, hi));
  d.len = static_cast<int>(rng.uniform_int(len_lo, len_hi));
  d.v = static_cast<float>(rng.uniform(0.7, 1.0));
  for (int i = 0; i < d.len; ++i) cv.paint(d.r0 + i, d.c0 + i, d.v);
  return d;
}

void draw_far_dot(Canvas& cv, Rng& rng) {
  // 2x2 dot confined to the far corner; every class-3 dash lives in the
  // opposite corner, keeping the pair at least kFarDistance apart
  const int r = static_cast<int>(rng.uniform_int(26, kSide - 3));
  const int c = static_cast<int>(rng.uniform_int(26, kSide - 3));
  const float v = static_cast<float>(rng.uniform(0.7, 1.0));
  for (int dr = 0; dr < 2; ++dr)
    for (int dc = 0; dc < 2; ++dc) cv.paint(r + dr, c + dc, v);
}

Canvas render_class(int cls, Rng& rng) {
  Canvas cv;
  for (float& p : cv.px) p = static_cast<float>(rng.uniform(0.0, 0.05));
  switch (cls) {
    case 0: {
      const int bars = static_cast<int>(rng.uniform_int(2, 3));
      for (int i = 0; i < bars; ++i) draw_hbar(cv, rng);
      break;
    }
    case 1: {
      const int bars = static_cast<int>(rng.uniform_int(2, 3));
      for (int i = 0; i < bars; ++i) draw_vbar(cv, rng);
      break;
    }
    case 2:
      draw_dash(cv, rng, 2, 18, 6, 10);
      break;
    case 3:
      draw_dash(cv, rng, 2, 5, 5, 7);
      draw_far_dot(cv, rng);
      break;
    default:
      fail(ErrKind::config, "toy class out of range");
  }
  return cv;
}

void blit(Tensor& images, int64_t index, const Canvas& cv) {
  auto d = images.data<float>();
  const int64_t plane = kSide * kSide;
  float* base = d.data() + index * 3 * plane;
  for (int ch = 0; ch < 3; ++ch)
    std::copy(cv.px.begin(), cv.px.end(), base + ch * plane);
}

}  // namespace

ToyDataset ToyDataset::subset(int64_t count) const {
  if (count > size()) fail(ErrKind::config, "subset larger than dataset");
  ToyDataset out;
  out.seed = seed;
  out.images = Tensor::zeros({count, 3, kSide, kSide});
  std::memcpy(out.images.raw(), images.raw(), static_cast<size_t>(count) * 3 * kSide * kSide * 4);
  out.labels.assign(labels.begin(), labels.begin() + count);
  return out;
}

ToyDataset generate_toy(uint64_t seed, int n) {
  if (n < 1) fail(ErrKind::config, "dataset size must be >= 1");
  ToyDataset ds;
  ds.seed = seed;
  ds.images = Tensor::zeros({n, 3, kSide, kSide});
  ds.labels.resize(n);
  for (int i = 0; i < n; ++i) {
    const int cls = i % 4;
    Rng rng(seed * 1000003ULL + static_cast<uint64_t>(i));
    ds.labels[i] = cls;
    blit(ds.images, i, render_class(cls, rng));
  }
  return ds;
}

std::pair<Tensor, Tensor> generate_far_pair(uint64_t seed) {
  Rng rng(seed * 1000003ULL + 777);
  Canvas base;
  for (float& p : base.px) p = static_cast<float>(rng.uniform(0.0, 0.05));
  draw_dash(base, rng, 2, 5, 5, 7);
  Canvas with_dot = base;
  draw_far_dot(with_dot, rng);

  Tensor c2 = Tensor::zeros({3, kSide, kSide});
  Tensor c3 = Tensor::zeros({3, kSide, kSide});
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < kSide * kSide; ++i) {
      c2.set(ch * kSide * kSide + i, base.px[i]);
      c3.set(ch * kSide * kSide + i, with_dot.px[i]);
    }
  return {std::move(c2), std::move(c3)};
}

AdamW::AdamW(std::vector<std::pair<std::string, Tensor*>> params, const TrainOptions& opt)
    : params_(std::move(params)), opt_(opt) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (auto& [name, p] : params_) {
    m_.push_back(Tensor::zeros(p->shape(), p->dtype()));
    v_.push_back(Tensor::zeros(p->shape(), p->dtype()));
  }
}

namespace {

template <class T>
void adamw_step_impl(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, const TrainOptions& opt, double bc1,
                     double bc2, double lr_now) {
  auto pd = p.data<T>();
  auto gd = g.data<T>();
  auto md = m.data<T>();
  auto vd = v.data<T>();
  for (int64_t j = 0; j < p.numel(); ++j) {
    const double gv = static_cast<double>(gd[j]);
    const double mv = opt.beta1 * static_cast<double>(md[j]) + (1.0 - opt.beta1) * gv;
    const double vv = opt.beta2 * static_cast<double>(vd[j]) + (1.0 - opt.beta2) * gv * gv;
    md[j] = static_cast<T>(mv);
    vd[j] = static_cast<T>(vv);
    const double update = (mv / bc1) / (std::sqrt(vv / bc2) + opt.eps) +
                          opt.weight_decay * static_cast<double>(pd[j]);
    pd[j] = static_cast<T>(static_cast<double>(pd[j]) - lr_now * update);
  }
}

}  // namespace

void AdamW::step(const std::vector<Tensor>& grads, double lr_now) {
  if (grads.size() != params_.size()) fail(ErrKind::config, "optimizer got a mismatched gradient list");
  ++step_;
  const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  for (size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].second->dtype() == DType::f32)
      adamw_step_impl<float>(*params_[i].second, grads[i], m_[i], v_[i], opt_, bc1, bc2, lr_now);
    else
      adamw_step_impl<double>(*params_[i].second, grads[i], m_[i], v_[i], opt_, bc1, bc2, lr_now);
  }
}

double lr_at_step(const TrainOptions& opt, int64_t step, int64_t total_steps) {
  const int64_t warm = std::min<int64_t>(opt.warmup_steps, total_steps);
  if (step < warm) return opt.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  if (total_steps <= warm) return opt.lr;
  const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return opt.lr * 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

namespace {

Tensor gather_batch(const ToyDataset& data, std::span<const int64_t> idx, std::vector<int>* labels) {
  const int64_t plane = 3 * kSide * kSide;
  Tensor x = Tensor::zeros({static_cast<int64_t>(idx.size()), 3, kSide, kSide});
  labels->clear();
  for (size_t i = 0; i < idx.size(); ++i) {
    std::memcpy(x.raw() + i * plane * 4, data.images.raw() + static_cast<size_t>(idx[i]) * plane * 4, plane * 4);
    labels->push_back(data.labels[idx[i]]);
  }
  return x;
}

int64_t count_correct(const Tensor& logits, std::span<const int> labels) {
  int64_t correct = 0;
  const int64_t k = logits.dim(1);
  for (int64_t b = 0; b < logits.dim(0); ++b) {
    int64_t best = 0;
    for (int64_t j = 1; j < k; ++j)
      if (logits.at(b * k + j) > logits.at(b * k + best)) best = j;
    correct += best == labels[b];
  }
  return correct;
}

}  // namespace

std::vector<EpochStats> train(zoo::Model& model, const ToyDataset& data, const TrainOptions& opt) {
  if (model.config().num_classes != 4)
    fail(ErrKind::config, "toy training expects a 4-class head, model has " +
                              std::to_string(model.config().num_classes));
  if (opt.epochs < 1 || opt.batch_size < 1) fail(ErrKind::config, "epochs and batch size must be >= 1");
  auto params = model.named_params();
  AdamW optim(params, opt);
  const int64_t n = data.size();
  const int64_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  const int64_t total_steps = steps_per_epoch * opt.epochs;
  if (!opt.checkpoint_dir.empty()) std::filesystem::create_directories(opt.checkpoint_dir);

  std::vector<EpochStats> history;
  int64_t global_step = 0;
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(opt.seed * 7919ULL + static_cast<uint64_t>(epoch) + 1);
    for (int64_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);

    double loss_sum = 0;
    int64_t correct = 0;
    std::vector<int> labels;
    for (int64_t start = 0; start < n; start += opt.batch_size) {
      const int64_t bs = std::min<int64_t>(opt.batch_size, n - start);
      Tensor x = gather_batch(data, {order.data() + start, static_cast<size_t>(bs)}, &labels);

      ad::Tape tape(true);
      nn::ParamEnv env(tape, true);
      ad::Value logits = model.forward(tape, env, tape.leaf(std::move(x)));
      ad::Value loss = tape.softmax_ce(logits, labels);
      const double loss_value = tape.val(loss).at(0);
      if (!std::isfinite(loss_value))
        fail(ErrKind::numeric, "training diverged (non-finite loss) at step " + std::to_string(global_step));
      tape.backward(loss);

      std::vector<Tensor> grads;
      grads.reserve(params.size());
      for (auto& [name, p] : params) {
        auto it = env.bindings().find(p);
        if (it == env.bindings().end())
          grads.push_back(Tensor::zeros(p->shape(), p->dtype()));
        else
          grads.push_back(tape.grad(it->second));
      }
      optim.step(grads, lr_at_step(opt, global_step, total_steps));

      correct += count_correct(tape.val(logits), labels);
      loss_sum += loss_value * static_cast<double>(bs);
      ++global_step;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(n);
    stats.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    history.push_back(stats);
    if (!opt.checkpoint_dir.empty())
      io::save_weights(model, opt.checkpoint_dir + "/epoch_" + std::to_string(epoch) + ".imwt");
    if (opt.stop_at_accuracy > 0 && stats.accuracy >= opt.stop_at_accuracy) break;
  }
  return history;
}

double evaluate_accuracy(const zoo::Model& model, const ToyDataset& data) {
  const int64_t n = data.size();
  int64_t correct = 0;
  std::vector<int> labels;
  std::vector<int64_t> idx;
  for (int64_t start = 0; start < n; start += 64) {
    const int64_t bs = std::min<int64_t>(64, n - start);
    idx.resize(bs);
    std::iota(idx.begin(), idx.end(), start);
    Tensor x = gather_batch(data, idx, &labels);
    correct += count_correct(model.forward(x), labels);
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double evaluate_class_accuracy(const zoo::Model& model, const ToyDataset& data, int cls) {
  int64_t total = 0, correct = 0;
  std::vector<int> labels;
  for (int64_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] != cls) continue;
    std::array<int64_t, 1> idx{i};
    Tensor x = gather_batch(data, idx, &labels);
    Tensor logits = model.forward(x);
    correct += count_correct(logits, labels);
    ++total;
  }
  return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace im::toy
