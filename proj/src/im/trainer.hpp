#pragma once

#include <string>
#include <utility>
#include <vector>

#include "im/model.hpp"

namespace im::toy {

// Synthetic 4-class 32x32 set:
//   0 horizontal bars, 1 vertical bars, 2 diagonal dash,
//   3 diagonal dash plus a partner dot at long range (>= kFarDistance away),
//     so separating 2 from 3 needs evidence far from the dash.
constexpr int kFarDistance = 18;

struct ToyDataset {
  Tensor images;  // [n, 3, 32, 32], values in [0, 1]
  std::vector<int> labels;
  uint64_t seed = 0;

  int64_t size() const { return images.defined() ? images.dim(0) : 0; }
  ToyDataset subset(int64_t count) const;
};

ToyDataset generate_toy(uint64_t seed, int n);

// Matched class-2/class-3 images sharing the same dash; they differ only in
// the far dot. Used by the generator property check.
std::pair<Tensor, Tensor> generate_far_pair(uint64_t seed);

struct TrainOptions {
  double lr = 1e-3;
  double weight_decay = 5e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 64;
  int epochs = 20;
  int warmup_steps = 50;
  uint64_t seed = 1;
  std::string checkpoint_dir;   // per-epoch checkpoints when non-empty
  double stop_at_accuracy = 0;  // early stop once train accuracy reaches this
};

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double accuracy = 0;
};

// Decoupled-weight-decay adaptive moments. Parameters that receive no
// gradient shrink by exactly (1 - lr*decay) per step.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, Tensor*>> params, const TrainOptions& opt);
  void step(const std::vector<Tensor>& grads, double lr_now);
  int64_t steps_taken() const { return step_; }

 private:
  std::vector<std::pair<std::string, Tensor*>> params_;
  std::vector<Tensor> m_, v_;
  TrainOptions opt_;
  int64_t step_ = 0;
};

std::vector<EpochStats> train(zoo::Model& model, const ToyDataset& data, const TrainOptions& opt);

double evaluate_accuracy(const zoo::Model& model, const ToyDataset& data);
double evaluate_class_accuracy(const zoo::Model& model, const ToyDataset& data, int cls);

// warmup then cosine decay over the remaining steps
double lr_at_step(const TrainOptions& opt, int64_t step, int64_t total_steps);

}  // namespace im::toy
