#include "inceptionmamba.h"

#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

#include "im/analyzer.hpp"
#include "im/autodiff.hpp"
#include "im/blocks.hpp"
#include "im/io.hpp"
#include "im/model.hpp"
#include "im/random.hpp"
#include "im/ssm.hpp"
#include "im/trainer.hpp"

struct im_tensor {
  im::Tensor t;
};
struct im_model {
  im::zoo::Model m;
};

namespace {

thread_local std::string g_last_error;

im_status map_kind(im::ErrKind k) {
  switch (k) {
    case im::ErrKind::config: return IM_ERR_CONFIG;
    case im::ErrKind::shape: return IM_ERR_SHAPE;
    case im::ErrKind::numeric: return IM_ERR_NUMERIC;
    case im::ErrKind::io: return IM_ERR_IO;
    case im::ErrKind::usage: return IM_ERR_USAGE;
  }
  return IM_ERR_INTERNAL;
}

template <class F>
im_status guard(F&& f) {
  try {
    return f();
  } catch (const im::Error& e) {
    g_last_error = e.what();
    return map_kind(e.kind());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return IM_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return IM_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

im_status need(bool ok, const char* what) {
  if (!ok) {
    g_last_error = what;
    return IM_ERR_USAGE;
  }
  return IM_OK;
}

im::Shape shape_from(const uint32_t* extents, uint32_t rank) {
  if (rank < 1 || rank > 4) im::fail(im::ErrKind::shape, "rank must be 1..4");
  im::Shape s;
  s.rank = static_cast<int>(rank);
  for (uint32_t i = 0; i < rank; ++i) s.d[i] = extents[i];
  s.validate();
  return s;
}

}  // namespace

extern "C" {

const char* im_version(void) { return "1.0.0"; }

const char* im_last_error(void) { return g_last_error.c_str(); }

void im_string_free(char* s) { std::free(s); }

im_status im_tensor_create(const uint32_t* extents, uint32_t rank, const float* data, im_tensor** out) {
  if (im_status s = need(extents && out, "im_tensor_create: extents and out are required"); s != IM_OK) return s;
  return guard([&] {
    im::Shape shape = shape_from(extents, rank);
    im::Tensor t = im::Tensor::zeros(shape, im::DType::f32);
    if (data) std::memcpy(t.raw(), data, static_cast<size_t>(t.numel()) * 4);
    *out = new im_tensor{std::move(t)};
    return IM_OK;
  });
}

im_status im_tensor_random(const uint32_t* extents, uint32_t rank, uint64_t seed, im_tensor** out) {
  if (im_status s = need(extents && out, "im_tensor_random: extents and out are required"); s != IM_OK) return s;
  return guard([&] {
    im::Rng rng(seed);
    *out = new im_tensor{rng.tensor_normal(shape_from(extents, rank), 0.0, 1.0)};
    return IM_OK;
  });
}

im_status im_tensor_read(const char* path, im_tensor** out) {
  if (im_status s = need(path && out, "im_tensor_read: path and out are required"); s != IM_OK) return s;
  return guard([&] {
    *out = new im_tensor{im::io::read_tensor(path)};
    return IM_OK;
  });
}

im_status im_tensor_write(const im_tensor* t, const char* path) {
  if (im_status s = need(t && path, "im_tensor_write: tensor and path are required"); s != IM_OK) return s;
  return guard([&] {
    im::io::write_tensor(t->t, path);
    return IM_OK;
  });
}

uint32_t im_tensor_rank(const im_tensor* t) { return t ? static_cast<uint32_t>(t->t.rank()) : 0; }

void im_tensor_extents(const im_tensor* t, uint32_t extents[4]) {
  if (!t) return;
  for (int i = 0; i < 4; ++i) extents[i] = i < t->t.rank() ? static_cast<uint32_t>(t->t.dim(i)) : 1;
}

const float* im_tensor_data(const im_tensor* t) {
  return t && t->t.dtype() == im::DType::f32 ? t->t.data<float>().data() : nullptr;
}

void im_tensor_free(im_tensor* t) { delete t; }

im_status im_model_create(const char* preset, uint32_t num_classes, uint64_t seed, im_model** out) {
  if (im_status s = need(preset && out, "im_model_create: preset and out are required"); s != IM_OK) return s;
  return guard([&] {
    im::zoo::ModelConfig cfg = im::zoo::preset(preset);
    if (num_classes > 0) cfg.num_classes = static_cast<int>(num_classes);
    *out = new im_model{im::zoo::Model::build(cfg, seed)};
    return IM_OK;
  });
}

im_status im_model_from_config_file(const char* path, uint64_t seed, im_model** out) {
  if (im_status s = need(path && out, "im_model_from_config_file: path and out are required"); s != IM_OK)
    return s;
  return guard([&] {
    *out = new im_model{im::zoo::Model::build(im::io::read_config(path), seed)};
    return IM_OK;
  });
}

im_status im_model_save_config(const im_model* m, const char* path) {
  if (im_status s = need(m && path, "im_model_save_config: model and path are required"); s != IM_OK) return s;
  return guard([&] {
    im::io::write_config(m->m.config(), path);
    return IM_OK;
  });
}

im_status im_model_save_weights(im_model* m, const char* path) {
  if (im_status s = need(m && path, "im_model_save_weights: model and path are required"); s != IM_OK) return s;
  return guard([&] {
    im::io::save_weights(m->m, path);
    return IM_OK;
  });
}

im_status im_model_load_weights(im_model* m, const char* path) {
  if (im_status s = need(m && path, "im_model_load_weights: model and path are required"); s != IM_OK) return s;
  return guard([&] {
    im::io::load_weights(m->m, path);
    return IM_OK;
  });
}

im_status im_model_forward(const im_model* m, const im_tensor* x, im_tensor** logits) {
  if (im_status s = need(m && x && logits, "im_model_forward: model, input and out are required"); s != IM_OK)
    return s;
  return guard([&] {
    *logits = new im_tensor{m->m.forward(x->t)};
    return IM_OK;
  });
}

im_status im_model_param_count(im_model* m, uint64_t* count) {
  if (im_status s = need(m && count, "im_model_param_count: model and out are required"); s != IM_OK) return s;
  return guard([&] {
    *count = static_cast<uint64_t>(m->m.parameter_count());
    return IM_OK;
  });
}

void im_model_free(im_model* m) { delete m; }

im_status im_analyze(const char* preset, uint32_t resolution, int as_json, char** report) {
  if (im_status s = need(preset && report, "im_analyze: preset and report are required"); s != IM_OK) return s;
  return guard([&] {
    im::zoo::ModelConfig cfg = im::zoo::preset(preset);
    im::analysis::CostReport r = resolution == 0 ? im::analysis::count_params(cfg)
                                                 : im::analysis::count_macs(cfg, static_cast<int>(resolution));
    *report = dup_string(as_json ? r.json() : r.text());
    return IM_OK;
  });
}

im_status im_verify_params(const char* preset, int* exact_match, char** detail) {
  if (im_status s = need(preset && exact_match, "im_verify_params: preset and out are required"); s != IM_OK)
    return s;
  return guard([&] {
    std::string d;
    const bool ok = im::analysis::verify_against_enumeration(im::zoo::preset(preset), &d);
    *exact_match = ok ? 1 : 0;
    if (detail) *detail = dup_string(d);
    return ok ? IM_OK : IM_ERR_VERIFY;
  });
}

im_status im_scan_check(uint64_t seed, uint32_t trials, int use_f64, double inject, double* max_abs_diff,
                        char** report) {
  return guard([&] {
    const im::DType dt = use_f64 ? im::DType::f64 : im::DType::f32;
    const double tolerance = use_f64 ? 1e-10 : 1e-5;
    im::Rng rng(seed);
    double worst = 0;
    for (uint32_t trial = 0; trial < trials; ++trial) {
      const int64_t n = rng.uniform_int(1, 16);
      const int64_t len = rng.uniform_int(1, 64);
      im::ssm::SsmParams p;
      p.a = rng.tensor_uniform({n}, -2.5, -0.1, dt);
      p.b = rng.tensor_normal({n}, 0.0, 1.0, dt);
      p.c = rng.tensor_normal({n}, 0.0, 1.0, dt);
      p.delta = rng.uniform(0.05, 1.0);
      im::Tensor x = rng.tensor_normal({len}, 0.0, 1.0, dt);
      im::ssm::DiscreteSsm d = im::ssm::discretize(p);
      im::Tensor yr = im::ssm::scan_recurrent(d, x);
      im::Tensor kbar = im::ssm::ssm_kernel(d, len);
      if (inject != 0.0) kbar.set(len / 2, kbar.at(len / 2) + inject);
      im::Tensor yk = im::ssm::apply_causal_kernel(kbar, x);
      for (int64_t i = 0; i < len; ++i) worst = std::max(worst, std::abs(yr.at(i) - yk.at(i)));
    }
    if (max_abs_diff) *max_abs_diff = worst;
    std::ostringstream os;
    os << "scan-check: " << trials << " random time-invariant systems (L<=64, N<=16, "
       << (use_f64 ? "f64" : "f32") << ")\n";
    if (trials == 0) os << "warning: zero trials requested, vacuous pass\n";
    os << "max |recurrent - kernel| = " << worst << " (tolerance " << tolerance << ")\n";
    const bool pass = trials == 0 || worst <= tolerance;
    os << (pass ? "PASS" : "FAIL") << "\n";
    if (report) *report = dup_string(os.str());
    if (!pass) {
      g_last_error = "scan-check exceeded tolerance";
      return IM_ERR_VERIFY;
    }
    return IM_OK;
  });
}

im_status im_gradcheck(double tolerance, uint64_t seed, int* failures, char** report) {
  return guard([&] {
    im::Rng rng(seed);
    im::nn::BlockConfig cfg;
    cfg.channels = 8;
    cfg.ssm.state_dim = 4;
    im::nn::InceptionMambaBlock block;
    block.init(cfg, rng, im::DType::f64);
    std::vector<std::pair<std::string, im::Tensor*>> params;
    block.visit_params("block", [&](const std::string& n, im::Tensor* p) { params.emplace_back(n, p); });
    im::Rng prng(seed + 1);
    for (auto& [name, p] : params)
      for (int64_t i = 0; i < p->numel(); ++i) p->set(i, prng.uniform(-0.5, 0.5));
    im::Tensor x = rng.tensor_normal({1, 8, 8, 8}, 0.0, 1.0, im::DType::f64);
    im::Rng mask_rng(seed + 2);
    im::Tensor mask = mask_rng.tensor_uniform({1, 8, 8, 8}, 0.25, 1.0, im::DType::f64);

    auto rep = im::ad::gradcheck(
        params,
        [&](im::ad::Tape& t, const std::vector<im::ad::Value>& leaves) {
          im::nn::ParamEnv env(t, true);
          for (size_t i = 0; i < params.size(); ++i) env.bind(params[i].second, leaves[i]);
          return t.sum(t.mul(block.forward(t, env, t.leaf(x)), t.leaf(mask)));
        },
        tolerance);
    int nfail = 0;
    for (const auto& row : rep.rows) nfail += row.pass ? 0 : 1;
    if (failures) *failures = nfail;
    if (report) *report = dup_string(rep.text());
    if (!rep.pass) {
      g_last_error = "gradcheck exceeded tolerance";
      return IM_ERR_VERIFY;
    }
    return IM_OK;
  });
}

im_status im_train_toy(uint64_t seed, uint32_t epochs, uint32_t samples, double lr, double stop_at_accuracy,
                       const char* checkpoint_dir, im_train_progress progress, void* user, char** csv) {
  return guard([&] {
    im::zoo::Model model = im::zoo::Model::build(im::zoo::preset("toy"), seed);
    im::toy::ToyDataset data = im::toy::generate_toy(seed, static_cast<int>(samples));
    im::toy::TrainOptions opt;
    opt.seed = seed;
    opt.epochs = static_cast<int>(epochs);
    opt.lr = lr;
    opt.stop_at_accuracy = stop_at_accuracy;
    if (checkpoint_dir) opt.checkpoint_dir = checkpoint_dir;
    auto history = im::toy::train(model, data, opt);
    std::ostringstream os;
    os << "epoch,loss,acc\n";
    for (const auto& e : history) {
      char line[96];
      std::snprintf(line, sizeof(line), "%d,%.6f,%.4f\n", e.epoch, e.loss, e.accuracy);
      os << line;
      if (progress) progress(static_cast<uint32_t>(e.epoch), e.loss, e.accuracy, user);
    }
    if (csv) *csv = dup_string(os.str());
    return IM_OK;
  });
}

im_status im_train_toy_compare(uint64_t seed, uint32_t seeds, uint32_t epochs, uint32_t samples,
                               char** report) {
  return guard([&] {
    double with_sum = 0, without_sum = 0;
    std::ostringstream os;
    os << "GlobalMixer ablation on class 3 (long-range pair), " << seeds << " seeds\n";
    for (uint32_t i = 0; i < seeds; ++i) {
      const uint64_t s = seed + i;
      im::toy::ToyDataset data = im::toy::generate_toy(s, static_cast<int>(samples));
      im::toy::TrainOptions opt;
      opt.seed = s;
      opt.epochs = static_cast<int>(epochs);

      im::zoo::Model with_gm = im::zoo::Model::build(im::zoo::preset("toy"), s);
      im::toy::train(with_gm, data, opt);
      const double acc_with = im::toy::evaluate_class_accuracy(with_gm, data, 3);

      im::zoo::ModelConfig cfg = im::zoo::preset("toy");
      for (auto& st : cfg.stages) st.block.global = im::nn::GlobalKind::none;
      im::zoo::Model without_gm = im::zoo::Model::build(cfg, s);
      im::toy::train(without_gm, data, opt);
      const double acc_without = im::toy::evaluate_class_accuracy(without_gm, data, 3);

      with_sum += acc_with;
      without_sum += acc_without;
      char line[128];
      std::snprintf(line, sizeof(line), "seed %llu: with %.3f, without %.3f\n",
                    static_cast<unsigned long long>(s), acc_with, acc_without);
      os << line;
    }
    char line[160];
    std::snprintf(line, sizeof(line), "mean class-3 accuracy: with GlobalMixer %.3f, without %.3f (reported, not asserted)\n",
                  with_sum / seeds, without_sum / seeds);
    os << line;
    if (report) *report = dup_string(os.str());
    return IM_OK;
  });
}

im_status im_dump_features(const im_model* m, const im_tensor* x, uint32_t stage, uint32_t block,
                           const char* out_dir, char** summary) {
  if (im_status s = need(m && x && out_dir, "im_dump_features: model, input and out_dir are required");
      s != IM_OK)
    return s;
  return guard([&] {
    im::io::FeatureDump dump =
        im::io::dump_features(m->m, x->t, static_cast<int>(stage), static_cast<int>(block), out_dir);
    if (summary) {
      std::ostringstream os;
      os << dump.channels << " channel graymaps under " << out_dir << "\n"
         << "cosine similarities: " << dump.csv_file << "\n";
      *summary = dup_string(os.str());
    }
    return IM_OK;
  });
}

im_status im_bench(const char* presets_csv, uint32_t resolution, uint32_t repeats, char** report) {
  if (im_status s = need(presets_csv && report, "im_bench: presets and report are required"); s != IM_OK)
    return s;
  return guard([&] {
    std::vector<std::string> names;
    std::string token;
    for (const char* p = presets_csv;; ++p) {
      if (*p == ',' || *p == '\0') {
        if (!token.empty()) names.push_back(token);
        token.clear();
        if (*p == '\0') break;
      } else {
        token += *p;
      }
    }
    if (names.empty()) im::fail(im::ErrKind::usage, "im_bench: no presets given");
    if (repeats < 1) im::fail(im::ErrKind::usage, "im_bench: repeats must be >= 1");

    std::ostringstream os;
    os << "forward latency, batch 1 at " << resolution << "x" << resolution << ", " << repeats
       << " repeat(s); relative timings only\n";
    std::vector<std::pair<double, std::string>> order;
    for (const std::string& name : names) {
      im::zoo::Model model = im::zoo::Model::build(im::zoo::preset(name), 1);
      im::Rng rng(7);
      im::Tensor x = rng.tensor_normal({1, 3, resolution, resolution}, 0.0, 1.0);
      model.forward(x);  // warm up
      double total = 0;
      for (uint32_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        model.forward(x);
        total += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      const double mean = total / repeats;
      char line[128];
      std::snprintf(line, sizeof(line), "%-18s %8.3f s/forward\n", name.c_str(), mean);
      os << line;
      order.emplace_back(mean, name);
    }
    std::sort(order.begin(), order.end());
    os << "ordering (fastest first): ";
    for (size_t i = 0; i < order.size(); ++i) os << (i ? " < " : "") << order[i].second;
    os << "\n";
    *report = dup_string(os.str());
    return IM_OK;
  });
}

}  // extern "C"
