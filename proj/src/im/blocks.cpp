#include "im/blocks.hpp"

#include <cmath>

namespace im::nn {

Tensor uniform_fan_in(Rng& rng, Shape s, int64_t fan_in, DType dt) {
  const double b = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return rng.tensor_uniform(s, -b, b, dt);
}

void BlockConfig::validate() const {
  if (channels < 1) fail(ErrKind::config, "block channels must be >= 1");
  if (mlp_ratio < 1) fail(ErrKind::config, "mlp_ratio must be >= 1");
  if (bottleneck_width() < 1)
    fail(ErrKind::config, "bottleneck width < 1 for channels " + std::to_string(channels));
  if (mixer != MixerKind::dw3x3) {
    // group arithmetic must produce valid extents
    const int ngroups = mixer == MixerKind::inception_dw ? 4 : 3;
    std::vector<double> ratios(ngroups - 1, conv_group_ratio);
    ratios.push_back(1.0 - conv_group_ratio * (ngroups - 1));
    split_sizes(channels, ratios);
  }
}

int64_t BlockConfig::bottleneck_width() const {
  return static_cast<int64_t>(std::floor(channels * bottleneck_ratio + 1e-9));
}

namespace {

template <class Module>
Tensor run_plain(const Module& m, const Tensor& x) {
  ad::Tape t(false);
  ParamEnv env(t, false);
  ad::Value y = m.forward(t, env, t.leaf(x));
  return t.val(y);
}

std::vector<int64_t> mixer_groups(const BlockConfig& cfg) {
  switch (cfg.mixer) {
    case MixerKind::dw3x3:
      return {cfg.channels};
    case MixerKind::inception_dw: {
      std::vector<double> r{cfg.conv_group_ratio, cfg.conv_group_ratio, cfg.conv_group_ratio,
                            1.0 - 3 * cfg.conv_group_ratio};
      return split_sizes(cfg.channels, r);
    }
    default: {
      std::vector<double> r{cfg.conv_group_ratio, cfg.conv_group_ratio, 1.0 - 2 * cfg.conv_group_ratio};
      return split_sizes(cfg.channels, r);
    }
  }
}

}  // namespace

void ConvMixer::init(const BlockConfig& cfg, Rng& rng, DType dt) {
  kind = cfg.mixer;
  square_kernel = cfg.square_kernel;
  band_kernel = cfg.band_kernel;
  groups = mixer_groups(cfg);
  const auto [skh, skw] = square_kernel;
  const auto [bkh, bkw] = band_kernel;
  switch (kind) {
    case MixerKind::dw3x3:
      sq_w = uniform_fan_in(rng, {groups[0], 1, skh, skw}, skh * skw, dt);
      sq_b = Tensor::zeros({groups[0]}, dt);
      break;
    case MixerKind::inception_band:
      sq_w = uniform_fan_in(rng, {groups[0], 1, skh, skw}, skh * skw, dt);
      sq_b = Tensor::zeros({groups[0]}, dt);
      band_hw_w = uniform_fan_in(rng, {groups[1], 1, bkh, bkw}, bkh * bkw, dt);
      band_hw_b = Tensor::zeros({groups[1]}, dt);
      band_wh_w = uniform_fan_in(rng, {groups[1], 1, bkw, bkh}, bkh * bkw, dt);
      band_wh_b = Tensor::zeros({groups[1]}, dt);
      break;
    case MixerKind::strip:
      sq_w = uniform_fan_in(rng, {groups[0], 1, skh, skw}, skh * skw, dt);
      sq_b = Tensor::zeros({groups[0]}, dt);
      band_hw_w = uniform_fan_in(rng, {groups[1], 1, 1, bkw}, bkw, dt);
      band_hw_b = Tensor::zeros({groups[1]}, dt);
      band_wh_w = uniform_fan_in(rng, {groups[1], 1, bkw, 1}, bkw, dt);
      band_wh_b = Tensor::zeros({groups[1]}, dt);
      break;
    case MixerKind::inception_dw:
      sq_w = uniform_fan_in(rng, {groups[0], 1, skh, skw}, skh * skw, dt);
      sq_b = Tensor::zeros({groups[0]}, dt);
      band_hw_w = uniform_fan_in(rng, {groups[1], 1, 1, bkw}, bkw, dt);
      band_hw_b = Tensor::zeros({groups[1]}, dt);
      band_wh_w = uniform_fan_in(rng, {groups[2], 1, bkw, 1}, bkw, dt);
      band_wh_b = Tensor::zeros({groups[2]}, dt);
      break;
  }
}

ad::Value ConvMixer::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  const auto [skh, skw] = square_kernel;
  const Conv2dSpec sq_spec{1, 1, skh / 2, skw / 2, Grouping::depthwise};
  if (kind == MixerKind::dw3x3)
    return t.conv2d(x, env.get(&sq_w), env.get(&sq_b), sq_spec);

  const auto [bkh, bkw] = band_kernel;
  int64_t c0 = 0, c1 = groups[0], c2 = groups[0] + groups[1];
  ad::Value xs = t.slice_channels(x, c0, c1);
  ad::Value sq = t.conv2d(xs, env.get(&sq_w), env.get(&sq_b), sq_spec);

  if (kind == MixerKind::inception_dw) {
    const int64_t c3 = c2 + groups[2];
    ad::Value g1 = t.slice_channels(x, c1, c2);
    ad::Value g2 = t.slice_channels(x, c2, c3);
    ad::Value rest = t.slice_channels(x, c3, t.val(x).dim(1));
    ad::Value h = t.conv2d(g1, env.get(&band_hw_w), env.get(&band_hw_b), {1, 1, 0, bkw / 2, Grouping::depthwise});
    ad::Value v = t.conv2d(g2, env.get(&band_wh_w), env.get(&band_wh_b), {1, 1, bkw / 2, 0, Grouping::depthwise});
    const ad::Value parts[4] = {sq, h, v, rest};
    return t.concat(parts);
  }

  ad::Value xb = t.slice_channels(x, c1, c2);
  ad::Value band;
  if (kind == MixerKind::inception_band) {
    ad::Value bh = t.conv2d(xb, env.get(&band_hw_w), env.get(&band_hw_b), {1, 1, bkh / 2, bkw / 2, Grouping::depthwise});
    ad::Value bv = t.conv2d(xb, env.get(&band_wh_w), env.get(&band_wh_b), {1, 1, bkw / 2, bkh / 2, Grouping::depthwise});
    band = t.add(bh, bv);
  } else {  // strip
    ad::Value bh = t.conv2d(xb, env.get(&band_hw_w), env.get(&band_hw_b), {1, 1, 0, bkw / 2, Grouping::depthwise});
    ad::Value bv = t.conv2d(xb, env.get(&band_wh_w), env.get(&band_wh_b), {1, 1, bkw / 2, 0, Grouping::depthwise});
    band = t.add(bh, bv);
  }
  ad::Value rest = t.slice_channels(x, c2, t.val(x).dim(1));
  const ad::Value parts[3] = {sq, band, rest};
  return t.concat(parts);
}

Tensor ConvMixer::operator()(const Tensor& x) const { return run_plain(*this, x); }

void ConvMixer::visit_params(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".square.w", &sq_w);
  v(prefix + ".square.b", &sq_b);
  if (band_hw_w.defined()) {
    v(prefix + ".band_h.w", &band_hw_w);
    v(prefix + ".band_h.b", &band_hw_b);
    v(prefix + ".band_v.w", &band_wh_w);
    v(prefix + ".band_v.b", &band_wh_b);
  }
}

ad::Value ss2d_forward(ad::Tape& t, ParamEnv& env, const ssm::Ss2dConfig& cfg, ad::Value x) {
  if (t.val(x).dim(1) != cfg.channels)
    fail(ErrKind::config, "ss2d channel mismatch: input " + t.val(x).shape().str() + " vs configured " +
                              std::to_string(cfg.channels));
  const int64_t h = t.val(x).dim(2), w = t.val(x).dim(3);
  ad::Value f = t.conv2d(x, env.get(&cfg.in_proj_w), std::nullopt, {});
  f = t.conv2d(f, env.get(&cfg.conv_w), env.get(&cfg.conv_b), {1, 1, 1, 1, Grouping::depthwise});
  f = t.silu(f);
  std::vector<ad::Value> outs;
  outs.reserve(ssm::kDirections);
  for (int d = 0; d < ssm::kDirections; ++d) {
    const ssm::SelectiveScanParams& p = cfg.dir[d];
    ad::Value seq = t.cross_take(f, static_cast<ssm::Direction>(d));
    outs.push_back(t.selective_scan(seq, env.get(&p.a_log), env.get(&p.d_skip), env.get(&p.x_proj_w),
                                    env.get(&p.dt_proj_w), env.get(&p.dt_proj_b), p.state_dim, p.dt_rank));
  }
  ad::Value merged = t.cross_merge(outs, h, w);
  ad::Value normed = t.layer_norm(merged, env.get(&cfg.norm_gamma), env.get(&cfg.norm_beta));
  return t.conv2d(normed, env.get(&cfg.out_proj_w), std::nullopt, {});
}

void GlobalMixer::init(const BlockConfig& cfg, Rng& rng, DType dt) {
  kind = cfg.global;
  channels = cfg.channels;
  if (kind == GlobalKind::none) return;
  inner = kind == GlobalKind::bottleneck_ss2d ? cfg.bottleneck_width() : channels;
  const int rank = cfg.ssm.dt_rank > 0 ? cfg.ssm.dt_rank : ssm::default_dt_rank(static_cast<int>(inner));
  ss2d = ssm::ss2d_init(static_cast<int>(inner), cfg.ssm.state_dim, rank, rng, dt);
  if (kind == GlobalKind::bottleneck_ss2d) {
    compress_w = uniform_fan_in(rng, {inner, channels, 1, 1}, channels, dt);
    compress_b = Tensor::zeros({inner}, dt);
    expand_w = uniform_fan_in(rng, {channels, inner, 1, 1}, inner, dt);
    expand_b = Tensor::zeros({channels}, dt);
  }
}

ad::Value GlobalMixer::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  if (kind == GlobalKind::none) return x;
  if (t.val(x).dim(1) != channels)
    fail(ErrKind::config, "global_mixer channel mismatch: " + t.val(x).shape().str());
  ad::Value y = x;
  if (kind == GlobalKind::bottleneck_ss2d) {
    y = t.conv2d(y, env.get(&compress_w), env.get(&compress_b), {});
    y = ss2d_forward(t, env, ss2d, y);
    y = t.conv2d(y, env.get(&expand_w), env.get(&expand_b), {});
  } else {
    y = ss2d_forward(t, env, ss2d, y);
  }
  return t.add(y, x);
}

Tensor GlobalMixer::operator()(const Tensor& x) const { return run_plain(*this, x); }

void GlobalMixer::visit_params(const std::string& prefix, const ParamVisitor& v) {
  if (kind == GlobalKind::none) return;
  if (kind == GlobalKind::bottleneck_ss2d) {
    v(prefix + ".compress.w", &compress_w);
    v(prefix + ".compress.b", &compress_b);
    v(prefix + ".expand.w", &expand_w);
    v(prefix + ".expand.b", &expand_b);
  }
  v(prefix + ".ss2d.in_proj.w", &ss2d.in_proj_w);
  v(prefix + ".ss2d.conv.w", &ss2d.conv_w);
  v(prefix + ".ss2d.conv.b", &ss2d.conv_b);
  static const char* dname[4] = {"row_f", "row_b", "col_f", "col_b"};
  for (int d = 0; d < 4; ++d) {
    const std::string dp = prefix + ".ss2d." + dname[d];
    v(dp + ".a_log", &ss2d.dir[d].a_log);
    v(dp + ".d_skip", &ss2d.dir[d].d_skip);
    v(dp + ".x_proj.w", &ss2d.dir[d].x_proj_w);
    v(dp + ".dt_proj.w", &ss2d.dir[d].dt_proj_w);
    v(dp + ".dt_proj.b", &ss2d.dir[d].dt_proj_b);
  }
  v(prefix + ".ss2d.norm.gamma", &ss2d.norm_gamma);
  v(prefix + ".ss2d.norm.beta", &ss2d.norm_beta);
  v(prefix + ".ss2d.out_proj.w", &ss2d.out_proj_w);
}

void Mlp::init(const BlockConfig& cfg, Rng& rng, DType dt) {
  channels = cfg.channels;
  hidden = static_cast<int64_t>(cfg.mlp_ratio) * channels;
  fc1_w = uniform_fan_in(rng, {hidden, channels, 1, 1}, channels, dt);
  fc1_b = Tensor::zeros({hidden}, dt);
  fc2_w = uniform_fan_in(rng, {channels, hidden, 1, 1}, hidden, dt);
  fc2_b = Tensor::zeros({channels}, dt);
}

ad::Value Mlp::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  ad::Value y = t.conv2d(x, env.get(&fc1_w), env.get(&fc1_b), {});
  y = t.gelu(y);
  return t.conv2d(y, env.get(&fc2_w), env.get(&fc2_b), {});
}

Tensor Mlp::operator()(const Tensor& x) const { return run_plain(*this, x); }

void Mlp::visit_params(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".fc1.w", &fc1_w);
  v(prefix + ".fc1.b", &fc1_b);
  v(prefix + ".fc2.w", &fc2_w);
  v(prefix + ".fc2.b", &fc2_b);
}

void InceptionMambaBlock::init(const BlockConfig& c, Rng& rng, DType dt) {
  c.validate();
  cfg = c;
  mixer.init(c, rng, dt);
  global.init(c, rng, dt);
  norm_gamma = Tensor::full({c.channels}, 1.0, dt);
  norm_beta = Tensor::zeros({c.channels}, dt);
  mlp.init(c, rng, dt);
}

ad::Value InceptionMambaBlock::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  ad::Value mixed = mixer.forward(t, env, x);
  ad::Value globed = global.forward(t, env, mixed);
  ad::Value normed = t.layer_norm(globed, env.get(&norm_gamma), env.get(&norm_beta));
  return t.add(mlp.forward(t, env, normed), x);
}

Tensor InceptionMambaBlock::operator()(const Tensor& x) const { return run_plain(*this, x); }

void InceptionMambaBlock::visit_params(const std::string& prefix, const ParamVisitor& v) {
  mixer.visit_params(prefix + ".mixer", v);
  global.visit_params(prefix + ".global", v);
  v(prefix + ".norm.gamma", &norm_gamma);
  v(prefix + ".norm.beta", &norm_beta);
  mlp.visit_params(prefix + ".mlp", v);
}

void PatchEmbed::init(int64_t input_channels, int64_t embed_dim, bool two_stage_stem, Rng& rng, DType dt) {
  in_ch = input_channels;
  dim = embed_dim;
  two_stage = two_stage_stem;
  if (two_stage) {
    const int64_t mid = dim / 2;
    conv1_w = uniform_fan_in(rng, {mid, in_ch, 3, 3}, in_ch * 9, dt);
    norm1_gamma = Tensor::full({mid}, 1.0, dt);
    norm1_beta = Tensor::zeros({mid}, dt);
    conv2_w = uniform_fan_in(rng, {dim, mid, 3, 3}, mid * 9, dt);
    norm2_gamma = Tensor::full({dim}, 1.0, dt);
    norm2_beta = Tensor::zeros({dim}, dt);
  } else {
    conv1_w = uniform_fan_in(rng, {dim, in_ch, 3, 3}, in_ch * 9, dt);
    norm1_gamma = Tensor::full({dim}, 1.0, dt);
    norm1_beta = Tensor::zeros({dim}, dt);
  }
}

ad::Value PatchEmbed::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  const Conv2dSpec s2{2, 2, 1, 1, Grouping::dense};
  ad::Value y = t.conv2d(x, env.get(&conv1_w), std::nullopt, s2);
  y = t.layer_norm(y, env.get(&norm1_gamma), env.get(&norm1_beta));
  if (!two_stage) return y;
  y = t.conv2d(y, env.get(&conv2_w), std::nullopt, s2);
  return t.layer_norm(y, env.get(&norm2_gamma), env.get(&norm2_beta));
}

Tensor PatchEmbed::operator()(const Tensor& x) const { return run_plain(*this, x); }

void PatchEmbed::visit_params(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".conv1.w", &conv1_w);
  v(prefix + ".norm1.gamma", &norm1_gamma);
  v(prefix + ".norm1.beta", &norm1_beta);
  if (two_stage) {
    v(prefix + ".conv2.w", &conv2_w);
    v(prefix + ".norm2.gamma", &norm2_gamma);
    v(prefix + ".norm2.beta", &norm2_beta);
  }
}

void Downsample::init(int64_t in, int64_t out, Rng& rng, DType dt) {
  dim_in = in;
  dim_out = out;
  conv_w = uniform_fan_in(rng, {out, in, 3, 3}, in * 9, dt);
  norm_gamma = Tensor::full({out}, 1.0, dt);
  norm_beta = Tensor::zeros({out}, dt);
}

ad::Value Downsample::forward(ad::Tape& t, ParamEnv& env, ad::Value x) const {
  ad::Value y = t.conv2d(x, env.get(&conv_w), std::nullopt, {2, 2, 1, 1, Grouping::dense});
  return t.layer_norm(y, env.get(&norm_gamma), env.get(&norm_beta));
}

Tensor Downsample::operator()(const Tensor& x) const { return run_plain(*this, x); }

void Downsample::visit_params(const std::string& prefix, const ParamVisitor& v) {
  v(prefix + ".conv.w", &conv_w);
  v(prefix + ".norm.gamma", &norm_gamma);
  v(prefix + ".norm.beta", &norm_beta);
}

}  // namespace im::nn

namespace im::ssm {

Tensor ss2d(const Ss2dConfig& cfg, const Tensor& x) {
  ad::Tape t(false);
  nn::ParamEnv env(t, false);
  ad::Value y = nn::ss2d_forward(t, env, cfg, t.leaf(x));
  return t.val(y);
}

}  // namespace im::ssm
