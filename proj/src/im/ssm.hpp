#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

#include "im/random.hpp"
#include "im/tensor.hpp"

namespace im::ssm {

// Single-channel continuous-time system with diagonal state. All of a/b/c
// have length state_dim. A per-step timescale marks the system as selective;
// the kernel form only exists for the time-invariant case.
struct SsmParams {
  Tensor a;
  Tensor b;
  Tensor c;
  double delta = 1.0;
  std::optional<Tensor> delta_per_step;

  int64_t state_dim() const { return a.numel(); }
};

struct DiscreteSsm {
  Tensor abar;  // exp(delta*a), elementwise
  Tensor bbar;
  Tensor c;
};

// Zero-order-hold step for one diagonal entry. The |delta*a| < 1e-4 branch
// evaluates the series 1 + z/2 + z^2/6 for (e^z - 1)/z.
void discretize_scalar(double a, double b, double delta, double* abar, double* bbar);
DiscreteSsm discretize(const SsmParams& p);
std::pair<Tensor, Tensor> discretize(const Tensor& a, const Tensor& b, double delta);

// h_t = abar ⊙ h_{t-1} + bbar * x_t, y_t = <c, h_t>, h_0 = 0.
// trace, when given, receives the state trajectory as [L, N].
Tensor scan_recurrent(const DiscreteSsm& d, const Tensor& x, Tensor* trace = nullptr);
// Same recurrence with per-step discretized parameters ([L,N] each, c may be [N] or [L,N]).
Tensor scan_recurrent_steps(const Tensor& abar, const Tensor& bbar, const Tensor& c, const Tensor& x);

// kbar[i] = <c, abar^i ⊙ bbar>, length len.
Tensor ssm_kernel(const SsmParams& p, int64_t len);
Tensor ssm_kernel(const DiscreteSsm& d, int64_t len);
Tensor apply_causal_kernel(const Tensor& kbar, const Tensor& x);

// One scan direction of SS2D. x_proj generates (dt_rank + 2N) coefficients
// per step from the channel vector; dt_proj expands the rank-R piece to a
// per-channel timescale which passes through softplus.
struct SelectiveScanParams {
  int state_dim = 16;
  int dt_rank = 1;
  Tensor a_log;      // [C, N]; A = -exp(a_log)
  Tensor d_skip;     // [C]
  Tensor x_proj_w;   // [R + 2N, C]
  Tensor dt_proj_w;  // [C, R]
  Tensor dt_proj_b;  // [C]
};

SelectiveScanParams selective_scan_init(int channels, int state_dim, int dt_rank, Rng& rng, DType dt);

// u is [C, L] or [B, C, L]; output matches.
Tensor selective_scan(const SelectiveScanParams& p, const Tensor& u);

struct SelectiveScanGrads {
  Tensor du, da_log, dd_skip, dx_proj_w, ddt_proj_w, ddt_proj_b;
};
// Recomputes the recurrence and walks it backwards; dy matches u's shape.
SelectiveScanGrads selective_scan_backward(const SelectiveScanParams& p, const Tensor& u, const Tensor& dy);

enum class Direction : uint8_t { row_f = 0, row_b = 1, col_f = 2, col_b = 3 };
constexpr int kDirections = 4;

// Sequence position k of a direction maps to flat site index (h*W + w).
int64_t direction_site(Direction dir, int64_t k, int64_t h, int64_t w);

Tensor cross_scan_take(const Tensor& x, Direction dir);           // [B,C,H,W] -> [B,C,L]
std::array<Tensor, 4> cross_scan(const Tensor& x);
Tensor cross_merge(std::span<const Tensor> seqs, int64_t h, int64_t w);  // inverse-permute + sum
Tensor cross_scan_insert(const Tensor& seq, Direction dir, int64_t h, int64_t w);  // single-direction inverse

struct Ss2dConfig {
  int channels = 0;
  int state_dim = 16;
  int dt_rank = 1;
  Tensor in_proj_w;   // [C, C, 1, 1], no bias
  Tensor conv_w;      // [C, 1, 3, 3] depthwise
  Tensor conv_b;      // [C]
  std::array<SelectiveScanParams, 4> dir;
  Tensor norm_gamma;  // [C]
  Tensor norm_beta;   // [C]
  Tensor out_proj_w;  // [C, C, 1, 1], no bias
};

int default_dt_rank(int channels);  // ceil(channels / 16)
Ss2dConfig ss2d_init(int channels, int state_dim, int dt_rank, Rng& rng, DType dt = DType::f32);

// Full module: in_proj -> depthwise 3x3 -> SiLU -> four directional selective
// scans -> summed merge -> channel norm -> out_proj. Shape-preserving.
// Defined with the block layers so the taped and plain paths share one
// composition.
Tensor ss2d(const Ss2dConfig& cfg, const Tensor& x);

// Verification hook: contribution of one direction's scan on already-mixed
// features (the stage after the depthwise conv), inverse-permuted back to the
// grid. No norm or output projection.
Tensor ss2d_direction_contribution(const SelectiveScanParams& p, const Tensor& features, Direction dir);

}  // namespace im::ssm
