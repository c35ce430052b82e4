#pragma once

#include <array>
#include <string>
#include <vector>

#include "im/blocks.hpp"

namespace im::zoo {

struct StageConfig {
  int embed_dim = 0;
  int num_blocks = 0;
  nn::BlockConfig block;
};

enum class StemKind : uint8_t { patch_embed_x4 = 0, conv_x2 = 1 };

struct ModelConfig {
  std::string name = "custom";
  std::array<StageConfig, 4> stages{};
  int num_classes = 1000;
  StemKind stem = StemKind::patch_embed_x4;
  int head_hidden_ratio = 3;

  void validate() const;
  int spatial_divisor() const { return stem == StemKind::patch_embed_x4 ? 32 : 16; }
};

// Table-driven presets: T, S, B plus the ablation variants
// (T-no-globalmixer, T-plain-ss2d, T-strip-conv, T-dw3x3, T-inception-dw)
// and the desk-scale "toy" configuration used by the trainer.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

class Model {
 public:
  static Model build(const ModelConfig& cfg, uint64_t seed, DType dt = DType::f32);

  const ModelConfig& config() const { return cfg_; }
  DType dtype() const { return dtype_; }

  ad::Value forward(ad::Tape& t, nn::ParamEnv& env, ad::Value x) const;
  Tensor forward(const Tensor& x) const;
  // per-stage outputs (after the stage's blocks) alongside the logits
  Tensor forward_trace(const Tensor& x, std::vector<Tensor>* stage_outputs) const;
  // output of block `block` inside stage `stage`
  Tensor forward_collect(const Tensor& x, int stage, int block) const;

  void visit_params(const nn::ParamVisitor& v);
  std::vector<std::pair<std::string, Tensor*>> named_params();
  int64_t parameter_count();

  Model to_dtype(DType dt) const;

 private:
  void check_input(const Tensor& x) const;

  ModelConfig cfg_;
  DType dtype_ = DType::f32;
  nn::PatchEmbed stem_;
  std::array<std::vector<nn::InceptionMambaBlock>, 4> blocks_;
  std::array<nn::Downsample, 3> downs_;
  Tensor final_norm_gamma_, final_norm_beta_;
  Tensor head_fc1_w_, head_fc1_b_;
  Tensor head_norm_gamma_, head_norm_beta_;
  Tensor head_fc2_w_, head_fc2_b_;
};

}  // namespace im::zoo
