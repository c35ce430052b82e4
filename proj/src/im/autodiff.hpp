#pragma once

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "im/ssm.hpp"
#include "im/tensor.hpp"

namespace im::ad {

enum class Op : uint8_t {
  leaf = 0,
  conv2d,
  add,
  mul,
  scale,
  gelu,
  silu,
  layer_norm,
  slice_channels,
  concat,
  gap,
  linear,
  reshape,
  cross_take,
  cross_merge,
  selective_scan,
  softmax_ce,
  reduce_sum,
  argmax,  // deliberately has no backward rule
  count,
};

class Tape;

struct Value {
  int id = -1;
  Tape* tape = nullptr;
  bool valid() const { return id >= 0 && tape != nullptr; }
};

struct ConvCtx {
  Conv2dSpec spec;
};
struct NormCtx {
  double eps;
  Tensor xhat;
  Tensor invstd;
};
struct SliceCtx {
  int64_t c0, c1;
};
struct ScaleCtx {
  double s;
};
struct CrossCtx {
  ssm::Direction dir;
  int64_t h, w;
};
struct ScanCtx {
  int state_dim, dt_rank;
};
struct CeCtx {
  Tensor dlogits;  // gradient for a unit upstream seed, captured at forward time
};
struct ReshapeCtx {
  Shape from;
};

using NodeCtx = std::variant<std::monostate, ConvCtx, NormCtx, SliceCtx, ScaleCtx, CrossCtx, ScanCtx, CeCtx, ReshapeCtx>;

struct Node {
  Op op;
  std::vector<int> in;
  int out;
  NodeCtx ctx;
};

// Reverse-mode record over tensor values. Single-threaded by contract; make
// one tape per concurrent computation.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  size_t num_nodes() const { return nodes_.size(); }

  Value leaf(Tensor t, bool requires_grad = false);

  const Tensor& val(Value v) const;
  bool requires_grad(Value v) const;
  // Valid after backward(); zero tensor for unreached parameters.
  const Tensor& grad(Value v) const;

  Value conv2d(Value x, Value w, std::optional<Value> b, const Conv2dSpec& spec);
  Value add(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double s);
  Value gelu(Value x);
  Value silu(Value x);
  Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-6);
  Value slice_channels(Value x, int64_t c0, int64_t c1);
  Value concat(std::span<const Value> parts);
  Value gap(Value x);
  Value linear(Value x, Value w, std::optional<Value> b);
  Value reshape(Value x, Shape s);
  Value cross_take(Value x, ssm::Direction dir);
  Value cross_merge(std::span<const Value> seqs, int64_t h, int64_t w);
  Value selective_scan(Value u, Value a_log, Value d_skip, Value xw, Value dtw, Value dtb, int state_dim,
                       int dt_rank);
  Value softmax_ce(Value logits, std::span<const int> labels);
  Value sum(Value x);
  Value argmax_rows(Value x);  // non-differentiable; rejected when gradients flow

  void backward(Value loss);

 private:
  friend struct RuleAccess;

  struct Slot {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
  };

  Value push_value(Tensor t, bool requires_grad);
  Value record(Op op, std::vector<int> in, Tensor out, NodeCtx ctx);
  Tensor& grad_slot(int id);

  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  bool recording_;
  bool ran_backward_ = false;
  Tensor zero_;
};

// Central-difference verification of reverse-mode gradients. Parameters must
// be f64; step is applied per coordinate.
struct GradcheckRow {
  std::string name;
  double analytic_norm = 0;
  double numeric_norm = 0;
  double max_rel_err = 0;
  bool pass = false;
};

struct GradcheckReport {
  std::vector<GradcheckRow> rows;
  double tolerance = 1e-3;
  bool pass = false;
  std::string text() const;
};

using LossFn = std::function<Value(Tape&, const std::vector<Value>&)>;

GradcheckReport gradcheck(const std::vector<std::pair<std::string, Tensor*>>& params, const LossFn& loss_fn,
                          double tolerance = 1e-3, double step = 1e-4);

}  // namespace im::ad
