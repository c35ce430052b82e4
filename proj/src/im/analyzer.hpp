#pragma once

#include <string>
#include <vector>

#include "im/model.hpp"

namespace im::analysis {

enum class LayerKind : uint8_t { conv = 0, norm, activation, linear, scan, pool };

const char* kind_name(LayerKind k);

struct CostRow {
  std::string path;
  LayerKind kind;
  int64_t params = 0;
  int64_t macs = 0;
};

// MAC conventions (1 MAC = 1 FLOP in the tables this is checked against):
//   conv/linear  output sites x Cout x (Cin/groups) x kH x kW, bias adds not counted
//   norm         2 per element (scale by inv-std, affine)
//   activation   1 per element (gelu/silu/softplus)
//   scan         per direction 5*L*w*N for the recurrence (delta*A product,
//                exp, input injection, state update, output read; exp costed
//                at 1 MAC/element) plus L*w for the skip term, plus the
//                x_proj/dt_proj generator projections at conv cost
//   pool         1 per pooled element
struct CostReport {
  std::string model_name;
  int resolution = 0;  // 0 = parameter counting only
  int state_dim = 0;
  std::string dt_rank_rule;
  std::vector<CostRow> rows;

  int64_t total_params() const;
  int64_t total_macs() const;
  int64_t macs_of_kind(LayerKind k) const;
  // spatial-conv subtotal used by the resolution-scaling invariant (head and
  // other resolution-independent rows excluded by construction)
  int64_t conv_macs_body() const;
  std::string text() const;
  std::string json() const;
};

CostReport count_params(const zoo::ModelConfig& cfg);
CostReport count_macs(const zoo::ModelConfig& cfg, int resolution);

// Closed-form count vs literal enumeration of instantiated weight tensors.
bool verify_against_enumeration(const zoo::ModelConfig& cfg, std::string* detail = nullptr);

}  // namespace im::analysis
