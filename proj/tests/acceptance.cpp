// Acceptance suite: one line per criterion, exit 0 only if all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "im/analyzer.hpp"
#include "im/autodiff.hpp"
#include "im/blocks.hpp"
#include "im/io.hpp"
#include "im/model.hpp"
#include "im/random.hpp"
#include "im/ssm.hpp"
#include "im/trainer.hpp"

using namespace im;

namespace {

int g_failures = 0;
using Clock = std::chrono::steady_clock;

void report(int criterion, const char* name, bool pass, const std::string& detail, double seconds) {
  std::printf("[%d] %-22s %s  (%s; %.1fs)\n", criterion, name, pass ? "PASS" : "FAIL", detail.c_str(), seconds);
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

struct Band {
  const char* preset;
  double target;     // absolute count
  double tolerance;  // relative
};

bool within(double value, double target, double tol, std::string& out) {
  const double rel = (value - target) / target;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%s=%.3fM vs %.1fM %+0.2f%%", "", value / 1e6, target / 1e6, rel * 100);
  out += buf;
  return std::abs(rel) <= tol;
}

void criterion_params() {
  const auto t0 = Clock::now();
  const Band bands[] = {
      {"T", 25.4e6, 0.03},  {"S", 46e6, 0.03},   {"B", 83e6, 0.03},
      {"T-no-globalmixer", 21.4e6, 0.05}, {"T-plain-ss2d", 29e6, 0.05},
  };
  bool pass = true;
  std::string detail;
  for (const Band& b : bands) {
    zoo::ModelConfig cfg = zoo::preset(b.preset);
    const auto r = analysis::count_params(cfg);
    detail += std::string(b.preset) + " ";
    pass &= within(static_cast<double>(r.total_params()), b.target, b.tolerance, detail);
    std::string enum_detail;
    const bool exact = analysis::verify_against_enumeration(cfg, &enum_detail);
    if (!exact) detail += " [enumeration mismatch: " + enum_detail + "]";
    pass &= exact;
    detail += "; ";
  }
  detail += "closed-form == enumeration for all presets";
  report(1, "parameter accounting", pass, detail, std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_macs() {
  const auto t0 = Clock::now();
  const Band bands[] = {
      {"T", 4.0e9, 0.10},  {"S", 7.8e9, 0.10},  {"B", 14.3e9, 0.10},
      {"T-no-globalmixer", 3.35e9, 0.10}, {"T-plain-ss2d", 4.6e9, 0.10},
  };
  bool pass = true;
  std::string detail;
  double got[5] = {0};
  for (int i = 0; i < 5; ++i) {
    const auto r = analysis::count_macs(zoo::preset(bands[i].preset), 224);
    got[i] = static_cast<double>(r.total_macs());
    const double rel = (got[i] - bands[i].target) / bands[i].target;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%s=%.2fG %+0.2f%%; ", bands[i].preset, got[i] / 1e9, rel * 100);
    detail += buf;
    pass &= std::abs(rel) <= bands[i].tolerance;
  }
  const bool ordering = got[3] < got[0] && got[0] < got[4];
  detail += ordering ? "ordering noGM < T < plain holds" : "ORDERING VIOLATED";
  report(2, "MAC accounting", pass && ordering, detail, std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_scan_equivalence() {
  const auto t0 = Clock::now();
  double worst32 = 0, worst64 = 0;
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const int64_t n = rng.uniform_int(1, 16), len = rng.uniform_int(1, 64);
    ssm::SsmParams p;
    p.a = rng.tensor_uniform({n}, -2.5, -0.1, DType::f64);
    p.b = rng.tensor_normal({n}, 0.0, 1.0, DType::f64);
    p.c = rng.tensor_normal({n}, 0.0, 1.0, DType::f64);
    p.delta = rng.uniform(0.05, 1.0);
    Tensor x = rng.tensor_normal({len}, 0.0, 1.0, DType::f64);

    ssm::DiscreteSsm d64 = ssm::discretize(p);
    Tensor yr64 = ssm::scan_recurrent(d64, x);
    Tensor yk64 = ssm::apply_causal_kernel(ssm::ssm_kernel(d64, len), x);
    for (int64_t i = 0; i < len; ++i) worst64 = std::max(worst64, std::abs(yr64.at(i) - yk64.at(i)));

    ssm::SsmParams p32{p.a.to(DType::f32), p.b.to(DType::f32), p.c.to(DType::f32), p.delta, {}};
    Tensor x32 = x.to(DType::f32);
    ssm::DiscreteSsm d32 = ssm::discretize(p32);
    Tensor yr32 = ssm::scan_recurrent(d32, x32);
    Tensor yk32 = ssm::apply_causal_kernel(ssm::ssm_kernel(d32, len), x32);
    for (int64_t i = 0; i < len; ++i) worst32 = std::max(worst32, std::abs(yr32.at(i) - yk32.at(i)));
  }
  char buf[128];
  std::snprintf(buf, sizeof(buf), "1000 systems: f32 max %.2e (<=1e-5), f64 max %.2e (<=1e-10)", worst32,
                worst64);
  report(3, "scan equivalence", worst32 <= 1e-5 && worst64 <= 1e-10, buf,
         std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_discretization() {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  // series branch against the expm1 form exactly at the switch point
  double worst_rel = 0;
  for (double a : {-1.0, 1.0}) {
    const double delta = 1e-4;  // |delta*a| exactly at the boundary
    double abar, bbar;
    ssm::discretize_scalar(a, 1.0, delta, &abar, &bbar);
    const double exact = std::expm1(delta * a) / (delta * a) * delta;
    worst_rel = std::max(worst_rel, std::abs(bbar - exact) / std::abs(exact));
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf), "series-vs-exact rel %.2e (<=1e-9)", worst_rel);
  detail += buf;
  pass &= worst_rel <= 1e-9;

  double abar, bbar;
  ssm::discretize_scalar(-1.0, 1.0, std::log(2.0), &abar, &bbar);
  const double scalar_err = std::max(std::abs(abar - 0.5), std::abs(bbar - 0.5));
  std::snprintf(buf, sizeof(buf), "; a=-1, dt=ln2 err %.2e (<=1e-12)", scalar_err);
  detail += buf;
  pass &= scalar_err <= 1e-12;
  report(4, "discretization limits", pass, detail, std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_gradcheck() {
  const auto t0 = Clock::now();
  Rng rng(7);
  nn::BlockConfig cfg;
  cfg.channels = 8;
  cfg.ssm.state_dim = 4;
  nn::InceptionMambaBlock block;
  block.init(cfg, rng, DType::f64);
  std::vector<std::pair<std::string, Tensor*>> params;
  block.visit_params("block", [&](const std::string& n, Tensor* p) { params.emplace_back(n, p); });
  Rng prng(8);
  for (auto& [name, p] : params)
    for (int64_t i = 0; i < p->numel(); ++i) p->set(i, prng.uniform(-0.5, 0.5));
  Tensor x = rng.tensor_normal({1, 8, 8, 8}, 0.0, 1.0, DType::f64);
  Rng mask_rng(9);
  Tensor mask = mask_rng.tensor_uniform({1, 8, 8, 8}, 0.25, 1.0, DType::f64);
  auto rep = ad::gradcheck(
      params,
      [&](ad::Tape& t, const std::vector<ad::Value>& leaves) {
        nn::ParamEnv env(t, true);
        for (size_t i = 0; i < params.size(); ++i) env.bind(params[i].second, leaves[i]);
        return t.sum(t.mul(block.forward(t, env, t.leaf(x)), t.leaf(mask)));
      },
      1e-3);
  double worst = 0;
  int64_t scalars = 0;
  for (const auto& row : rep.rows) worst = std::max(worst, row.max_rel_err);
  for (const auto& [n, p] : params) scalars += p->numel();
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%zu tensors / %lld scalars, worst rel err %.2e (<1e-3)", rep.rows.size(),
                static_cast<long long>(scalars), worst);
  report(5, "gradient correctness", rep.pass, buf, std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_structural() {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;
  Rng rng(11);

  // split/concat round trip, bit exact
  Tensor x = rng.tensor_normal({2, 72, 6, 6}, 0, 1);
  std::vector<double> ratios{0.125, 0.125, 0.75};
  auto parts = split_channels(x, ratios);
  const bool roundtrip = concat_channels(parts).same_bits(x);
  detail += roundtrip ? "split/concat bit-exact; " : "split/concat MISMATCH; ";
  pass &= roundtrip;

  // zero-parameter block is the identity, bit exact
  nn::BlockConfig bc;
  bc.channels = 72;
  nn::InceptionMambaBlock block;
  block.init(bc, rng, DType::f32);
  block.visit_params("b", [](const std::string&, Tensor* p) {
    for (int64_t i = 0; i < p->numel(); ++i) p->set(i, 0.0);
  });
  Tensor bx = rng.tensor_normal({1, 72, 8, 8}, 0, 1);
  const bool identity = block(bx).same_bits(bx);
  detail += identity ? "zero-param block == identity; " : "zero-param block NOT identity; ";
  pass &= identity;

  // identity-group passthrough, bit exact
  nn::InceptionMambaBlock live;
  live.init(bc, rng, DType::f32);
  Tensor mixed = live.mixer(bx);
  bool passthrough = true;
  for (int64_t c = 18; c < 72 && passthrough; ++c)
    for (int64_t s = 0; s < 64; ++s)
      if (mixed.at(c * 64 + s) != bx.at(c * 64 + s)) {
        passthrough = false;
        break;
      }
  detail += passthrough ? "identity group bit-exact; " : "identity group ALTERED; ";
  pass &= passthrough;

  // stage token extents at 224^2
  zoo::Model t_model = zoo::Model::build(zoo::preset("T"), 3);
  std::vector<Tensor> stages;
  t_model.forward_trace(rng.tensor_normal({1, 3, 224, 224}, 0, 1), &stages);
  const int64_t want[4] = {56, 28, 14, 7};
  bool extents = stages.size() == 4;
  std::string ext_str;
  for (size_t s = 0; s < stages.size(); ++s) {
    extents = extents && stages[s].dim(2) == want[s] && stages[s].dim(3) == want[s];
    ext_str += std::to_string(stages[s].dim(2)) + (s + 1 < stages.size() ? "/" : "");
  }
  detail += "tokens " + ext_str + (extents ? " == 56/28/14/7" : " != 56/28/14/7");
  pass &= extents;

  report(6, "structural invariants", pass, detail, std::chrono::duration<double>(Clock::now() - t0).count());
}

void criterion_toy_learning() {
  const auto t0 = Clock::now();
  bool pass = true;
  std::string detail;

  // 2000 samples, at most 20 epochs, >= 95% train accuracy
  {
    zoo::Model model = zoo::Model::build(zoo::preset("toy"), 1);
    toy::ToyDataset data = toy::generate_toy(1, 2000);
    toy::TrainOptions opt;
    opt.seed = 1;
    opt.epochs = 20;
    opt.stop_at_accuracy = 0.95;
    auto history = toy::train(model, data, opt);
    const double acc = history.back().accuracy;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "train acc %.3f after %zu epochs (>=0.95); ", acc, history.size());
    detail += buf;
    pass &= acc >= 0.95 && history.size() <= 20;
  }

  // single-batch overfit: 32 samples to 100% within 200 steps
  {
    zoo::Model model = zoo::Model::build(zoo::preset("toy"), 2);
    toy::ToyDataset data = toy::generate_toy(7, 32);
    toy::TrainOptions opt;
    opt.seed = 2;
    opt.epochs = 200;
    opt.batch_size = 32;  // one step per epoch
    opt.warmup_steps = 20;
    opt.stop_at_accuracy = 1.0;
    auto history = toy::train(model, data, opt);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "overfit 100%% at step %zu (<=200); ", history.size());
    detail += buf;
    pass &= history.back().accuracy == 1.0 && history.size() <= 200;
  }

  // lr = 0 control leaves the loss constant
  {
    zoo::Model model = zoo::Model::build(zoo::preset("toy"), 3);
    toy::ToyDataset data = toy::generate_toy(9, 128);
    toy::TrainOptions opt;
    opt.seed = 3;
    opt.lr = 0;
    opt.epochs = 3;
    auto history = toy::train(model, data, opt);
    const double drift = std::max(std::abs(history[1].loss - history[0].loss),
                                  std::abs(history[2].loss - history[0].loss));
    char buf[96];
    std::snprintf(buf, sizeof(buf), "lr=0 loss drift %.2e", drift);
    detail += buf;
    pass &= drift < 1e-9;
  }

  report(7, "toy learning", pass, detail, std::chrono::duration<double>(Clock::now() - t0).count());
}

}  // namespace

int main() {
  std::printf("InceptionMamba acceptance suite\n");
  criterion_params();
  criterion_macs();
  criterion_scan_equivalence();
  criterion_discretization();
  criterion_gradcheck();
  criterion_structural();
  criterion_toy_learning();
  std::printf(
      "[8] out-of-scope targets    NOTE  (ImageNet top-1, COCO AP, ADE20K mIoU and absolute throughput need "
      "GPU-scale training; excluded by design, criteria 1-7 substitute)\n");
  if (g_failures == 0) {
    std::printf("acceptance: all criteria PASS\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", g_failures);
  return 1;
}
