#include "im/model.hpp"

#include <cmath>

namespace im::zoo {

void ModelConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    if (stages[i].num_blocks < 1) fail(ErrKind::config, "stage " + std::to_string(i) + " needs at least one block");
    if (stages[i].embed_dim < 1) fail(ErrKind::config, "stage " + std::to_string(i) + " embed_dim must be >= 1");
    if (i > 0 && stages[i].embed_dim != 2 * stages[i - 1].embed_dim)
      fail(ErrKind::config, "embed dims must double per stage, got " + std::to_string(stages[i - 1].embed_dim) +
                                " -> " + std::to_string(stages[i].embed_dim));
  }
  if (num_classes < 1) fail(ErrKind::config, "num_classes must be >= 1");
  if (head_hidden_ratio < 1) fail(ErrKind::config, "head_hidden_ratio must be >= 1");
}

namespace {

ModelConfig base_config(std::array<int, 4> dims, std::array<int, 4> blocks) {
  ModelConfig cfg;
  for (int i = 0; i < 4; ++i) {
    cfg.stages[i].embed_dim = dims[i];
    cfg.stages[i].num_blocks = blocks[i];
    cfg.stages[i].block.channels = dims[i];
  }
  return cfg;
}

}  // namespace

ModelConfig preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "T") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
  } else if (name == "S") {
    cfg = base_config({72, 144, 288, 576}, {4, 4, 32, 4});
  } else if (name == "B") {
    cfg = base_config({96, 192, 384, 768}, {4, 4, 34, 4});
  } else if (name == "T-no-globalmixer") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
    for (auto& s : cfg.stages) s.block.global = nn::GlobalKind::none;
  } else if (name == "T-plain-ss2d") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
    for (auto& s : cfg.stages) s.block.global = nn::GlobalKind::plain_ss2d;
  } else if (name == "T-strip-conv") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
    for (auto& s : cfg.stages) s.block.mixer = nn::MixerKind::strip;
  } else if (name == "T-dw3x3") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
    for (auto& s : cfg.stages) s.block.mixer = nn::MixerKind::dw3x3;
  } else if (name == "T-inception-dw") {
    cfg = base_config({72, 144, 288, 576}, {3, 3, 12, 3});
    for (auto& s : cfg.stages) s.block.mixer = nn::MixerKind::inception_dw;
  } else if (name == "toy") {
    cfg = base_config({16, 32, 64, 128}, {1, 1, 2, 1});
    cfg.stem = StemKind::conv_x2;
    cfg.num_classes = 4;
    for (auto& s : cfg.stages) s.block.ssm.state_dim = 8;  // desk-scale scan width
  } else {
    fail(ErrKind::usage, "unknown preset '" + name + "'");
  }
  cfg.name = name;
  cfg.validate();
  return cfg;
}

std::vector<std::string> preset_names() {
  return {"T", "S", "B", "T-no-globalmixer", "T-plain-ss2d", "T-strip-conv", "T-dw3x3", "T-inception-dw", "toy"};
}

Model Model::build(const ModelConfig& cfg, uint64_t seed, DType dt) {
  cfg.validate();
  Model m;
  m.cfg_ = cfg;
  m.dtype_ = dt;
  Rng rng(seed);
  m.stem_.init(3, cfg.stages[0].embed_dim, cfg.stem == StemKind::patch_embed_x4, rng, dt);
  for (int s = 0; s < 4; ++s) {
    m.blocks_[s].resize(cfg.stages[s].num_blocks);
    for (int b = 0; b < cfg.stages[s].num_blocks; ++b) {
      nn::BlockConfig bc = cfg.stages[s].block;
      bc.channels = cfg.stages[s].embed_dim;
      m.blocks_[s][b].init(bc, rng, dt);
    }
    if (s < 3) m.downs_[s].init(cfg.stages[s].embed_dim, cfg.stages[s + 1].embed_dim, rng, dt);
  }
  const int64_t d = cfg.stages[3].embed_dim;
  const int64_t hidden = static_cast<int64_t>(cfg.head_hidden_ratio) * d;
  m.final_norm_gamma_ = Tensor::full({d}, 1.0, dt);
  m.final_norm_beta_ = Tensor::zeros({d}, dt);
  m.head_fc1_w_ = nn::uniform_fan_in(rng, {hidden, d}, d, dt);
  m.head_fc1_b_ = Tensor::zeros({hidden}, dt);
  m.head_norm_gamma_ = Tensor::full({hidden}, 1.0, dt);
  m.head_norm_beta_ = Tensor::zeros({hidden}, dt);
  m.head_fc2_w_ = nn::uniform_fan_in(rng, {cfg.num_classes, hidden}, hidden, dt);
  m.head_fc2_b_ = Tensor::zeros({cfg.num_classes}, dt);
  return m;
}

void Model::check_input(const Tensor& x) const {
  if (x.rank() != 4 || x.dim(1) != 3)
    fail(ErrKind::shape, "model input must be [N,3,H,W], got " + x.shape().str());
  const int div = cfg_.spatial_divisor();
  if (x.dim(2) < div || x.dim(3) < div || x.dim(2) % div != 0 || x.dim(3) % div != 0)
    fail(ErrKind::shape, "input extents " + x.shape().str() + " must be >= " + std::to_string(div) +
                             " and divisible by " + std::to_string(div));
  if (x.dtype() != dtype_) fail(ErrKind::config, "input dtype does not match model dtype");
}

ad::Value Model::forward(ad::Tape& t, nn::ParamEnv& env, ad::Value x) const {
  ad::Value y = stem_.forward(t, env, x);
  for (int s = 0; s < 4; ++s) {
    for (const auto& block : blocks_[s]) y = block.forward(t, env, y);
    if (s < 3) y = downs_[s].forward(t, env, y);
  }
  y = t.layer_norm(y, env.get(&final_norm_gamma_), env.get(&final_norm_beta_));
  y = t.gap(y);
  y = t.linear(y, env.get(&head_fc1_w_), env.get(&head_fc1_b_));
  y = t.gelu(y);
  const int64_t n = t.val(y).dim(0), hidden = t.val(y).dim(1);
  y = t.reshape(y, {n, hidden, 1, 1});
  y = t.layer_norm(y, env.get(&head_norm_gamma_), env.get(&head_norm_beta_));
  y = t.reshape(y, {n, hidden});
  return t.linear(y, env.get(&head_fc2_w_), env.get(&head_fc2_b_));
}

Tensor Model::forward(const Tensor& x) const {
  check_input(x);
  ad::Tape t(false);
  nn::ParamEnv env(t, false);
  return t.val(forward(t, env, t.leaf(x)));
}

Tensor Model::forward_trace(const Tensor& x, std::vector<Tensor>* stage_outputs) const {
  check_input(x);
  ad::Tape t(false);
  nn::ParamEnv env(t, false);
  ad::Value y = stem_.forward(t, env, t.leaf(x));
  for (int s = 0; s < 4; ++s) {
    for (const auto& block : blocks_[s]) y = block.forward(t, env, y);
    if (stage_outputs) stage_outputs->push_back(t.val(y));
    if (s < 3) y = downs_[s].forward(t, env, y);
  }
  y = t.layer_norm(y, env.get(&final_norm_gamma_), env.get(&final_norm_beta_));
  y = t.gap(y);
  y = t.linear(y, env.get(&head_fc1_w_), env.get(&head_fc1_b_));
  y = t.gelu(y);
  const int64_t n = t.val(y).dim(0), hidden = t.val(y).dim(1);
  y = t.reshape(y, {n, hidden, 1, 1});
  y = t.layer_norm(y, env.get(&head_norm_gamma_), env.get(&head_norm_beta_));
  y = t.reshape(y, {n, hidden});
  return t.val(t.linear(y, env.get(&head_fc2_w_), env.get(&head_fc2_b_)));
}

Tensor Model::forward_collect(const Tensor& x, int stage, int block) const {
  check_input(x);
  if (stage < 0 || stage > 3) fail(ErrKind::usage, "stage index out of range: " + std::to_string(stage));
  if (block < 0 || block >= static_cast<int>(blocks_[stage].size()))
    fail(ErrKind::usage, "block index out of range: " + std::to_string(block));
  ad::Tape t(false);
  nn::ParamEnv env(t, false);
  ad::Value y = stem_.forward(t, env, t.leaf(x));
  for (int s = 0; s <= stage; ++s) {
    const int upto = s == stage ? block : static_cast<int>(blocks_[s].size()) - 1;
    for (int b = 0; b <= upto; ++b) y = blocks_[s][b].forward(t, env, y);
    if (s < stage) y = downs_[s].forward(t, env, y);
  }
  return t.val(y);
}

void Model::visit_params(const nn::ParamVisitor& v) {
  stem_.visit_params("stem", v);
  for (int s = 0; s < 4; ++s) {
    for (size_t b = 0; b < blocks_[s].size(); ++b)
      blocks_[s][b].visit_params("stages." + std::to_string(s) + ".blocks." + std::to_string(b), v);
    if (s < 3) downs_[s].visit_params("stages." + std::to_string(s) + ".downsample", v);
  }
  v("final_norm.gamma", &final_norm_gamma_);
  v("final_norm.beta", &final_norm_beta_);
  v("head.fc1.w", &head_fc1_w_);
  v("head.fc1.b", &head_fc1_b_);
  v("head.norm.gamma", &head_norm_gamma_);
  v("head.norm.beta", &head_norm_beta_);
  v("head.fc2.w", &head_fc2_w_);
  v("head.fc2.b", &head_fc2_b_);
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  visit_params([&](const std::string& n, Tensor* p) { out.emplace_back(n, p); });
  return out;
}

int64_t Model::parameter_count() {
  int64_t total = 0;
  visit_params([&](const std::string&, Tensor* p) { total += p->numel(); });
  return total;
}

Model Model::to_dtype(DType dt) const {
  Model copy = *this;
  copy.dtype_ = dt;
  copy.visit_params([&](const std::string&, Tensor* p) { *p = p->to(dt); });
  return copy;
}

}  // namespace im::zoo
