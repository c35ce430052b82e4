#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "im/autodiff.hpp"
#include "im/random.hpp"
#include "im/ssm.hpp"
#include "im/tensor.hpp"

namespace im::nn {

enum class MixerKind : uint8_t { inception_band = 0, dw3x3, strip, inception_dw };
enum class GlobalKind : uint8_t { bottleneck_ss2d = 0, plain_ss2d, none };

struct Ss2dSpec {
  int state_dim = 16;
  int dt_rank = 0;  // 0 derives ceil(width/16)
};

struct BlockConfig {
  int channels = 0;
  double conv_group_ratio = 0.125;
  std::pair<int, int> square_kernel{3, 3};
  std::pair<int, int> band_kernel{3, 11};
  double bottleneck_ratio = 0.5;
  int mlp_ratio = 4;
  Ss2dSpec ssm;
  MixerKind mixer = MixerKind::inception_band;
  GlobalKind global = GlobalKind::bottleneck_ss2d;

  void validate() const;
  int64_t bottleneck_width() const;
};

using ParamVisitor = std::function<void(const std::string&, Tensor*)>;

// Binds parameter tensors to tape leaves once per forward, so gradients can
// be read back through the same pointers after backward().
class ParamEnv {
 public:
  ParamEnv(ad::Tape& tape, bool train) : tape_(&tape), train_(train) {}
  ad::Value get(const Tensor* p) {
    auto it = map_.find(p);
    if (it != map_.end()) return it->second;
    ad::Value v = tape_->leaf(*p, train_);
    map_.emplace(p, v);
    return v;
  }
  // reuse an existing leaf for this parameter (gradcheck owns the leaves there)
  void bind(const Tensor* p, ad::Value v) { map_.insert_or_assign(p, v); }
  const std::unordered_map<const Tensor*, ad::Value>& bindings() const { return map_; }

 private:
  ad::Tape* tape_;
  bool train_;
  std::unordered_map<const Tensor*, ad::Value> map_;
};

struct ConvMixer {
  MixerKind kind = MixerKind::inception_band;
  std::vector<int64_t> groups;
  std::pair<int, int> square_kernel{3, 3};
  std::pair<int, int> band_kernel{3, 11};
  Tensor sq_w, sq_b;
  Tensor band_hw_w, band_hw_b;  // 3x11 band (or 1x11 strip)
  Tensor band_wh_w, band_wh_b;  // 11x3 band (or 11x1 strip)

  void init(const BlockConfig& cfg, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

ad::Value ss2d_forward(ad::Tape& t, ParamEnv& env, const ssm::Ss2dConfig& cfg, ad::Value x);

struct GlobalMixer {
  GlobalKind kind = GlobalKind::bottleneck_ss2d;
  int64_t channels = 0;
  int64_t inner = 0;  // scan width: C/r for the bottleneck, C for plain
  Tensor compress_w, compress_b;
  Tensor expand_w, expand_b;
  ssm::Ss2dConfig ss2d;

  void init(const BlockConfig& cfg, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

struct Mlp {
  int64_t channels = 0, hidden = 0;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;  // 1x1 convolutions

  void init(const BlockConfig& cfg, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

// ConvMixer -> GlobalMixer -> Norm -> MLP, one residual around the whole block.
struct InceptionMambaBlock {
  BlockConfig cfg;
  ConvMixer mixer;
  GlobalMixer global;
  Tensor norm_gamma, norm_beta;
  Mlp mlp;

  void init(const BlockConfig& c, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

// Two stride-2 convolutions for the x4 stem, one for the toy x2 stem.
struct PatchEmbed {
  int64_t in_ch = 3, dim = 0;
  bool two_stage = true;
  Tensor conv1_w, norm1_gamma, norm1_beta;
  Tensor conv2_w, norm2_gamma, norm2_beta;

  void init(int64_t input_channels, int64_t embed_dim, bool two_stage_stem, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

struct Downsample {
  int64_t dim_in = 0, dim_out = 0;
  Tensor conv_w, norm_gamma, norm_beta;

  void init(int64_t in, int64_t out, Rng& rng, DType dt);
  ad::Value forward(ad::Tape& t, ParamEnv& env, ad::Value x) const;
  Tensor operator()(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& v);
};

Tensor uniform_fan_in(Rng& rng, Shape s, int64_t fan_in, DType dt);

}  // namespace im::nn
