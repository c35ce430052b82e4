// imamba — command-line front end over the inceptionmamba C API.
//
// Exit codes: 0 success, 1 verification or runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "inceptionmamba.h"

namespace {

int fail_with(im_status status) {
  std::cerr << "error: " << im_last_error() << "\n";
  return status == IM_ERR_USAGE ? 2 : 1;
}

struct StringOut {
  char* s = nullptr;
  ~StringOut() { im_string_free(s); }
  std::string str() const { return s ? s : ""; }
};

bool write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  return static_cast<bool>(out);
}

void progress_line(uint32_t epoch, double loss, double acc, void*) {
  std::printf("%u,%.6f,%.4f\n", epoch, loss, acc);
  std::fflush(stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"InceptionMamba reference tool"};
  app.require_subcommand(1);

  // analyze
  auto* analyze = app.add_subcommand("analyze", "parameter and MAC accounting for a preset");
  std::string an_preset = "T";
  uint32_t an_res = 224;
  std::string an_format = "text";
  std::string an_out;
  bool an_verify = false;
  analyze->add_option("--preset", an_preset, "preset name")->capture_default_str();
  analyze->add_option("--resolution", an_res, "input resolution (0 = parameters only)")->capture_default_str();
  analyze->add_option("--format", an_format, "text or json")->check(CLI::IsMember({"text", "json"}));
  analyze->add_option("--out", an_out, "write the report to a file instead of stdout");
  analyze->add_flag("--verify", an_verify, "also check closed-form counts against tensor enumeration");

  // forward
  auto* forward = app.add_subcommand("forward", "run a model forward over an IMTN tensor");
  std::string fw_preset = "T", fw_weights, fw_config, fw_input, fw_output;
  uint64_t fw_seed = 1;
  forward->add_option("--preset", fw_preset, "preset name")->capture_default_str();
  forward->add_option("--config", fw_config, "model config JSON (overrides --preset)");
  forward->add_option("--weights", fw_weights, "IMWT weight file");
  forward->add_option("--input", fw_input, "input IMTN tensor [N,3,H,W]")->required();
  forward->add_option("--output", fw_output, "write logits as IMTN");
  forward->add_option("--seed", fw_seed, "initialization seed when no weights are given")->capture_default_str();

  // scan-check
  auto* scan = app.add_subcommand("scan-check", "recurrent vs kernel scan equivalence");
  uint64_t sc_seed = 1;
  uint32_t sc_trials = 1000;
  bool sc_f64 = false;
  double sc_inject = 0.0;
  scan->add_option("--seed", sc_seed)->capture_default_str();
  scan->add_option("--trials", sc_trials)->capture_default_str();
  scan->add_flag("--f64", sc_f64, "run in 64-bit verification mode");
  scan->add_option("--inject", sc_inject, "perturb the kernel by this amount (negative control)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of a tiny block");
  double gc_tol = 1e-3;
  uint64_t gc_seed = 1;
  gc->add_option("--tolerance", gc_tol)->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "train the toy model on the synthetic set");
  uint64_t tt_seed = 1;
  uint32_t tt_epochs = 20, tt_samples = 2000;
  double tt_lr = 1e-3, tt_stop = 0.0;
  std::string tt_out, tt_csv;
  bool tt_compare = false;
  uint32_t tt_compare_seeds = 5;
  tt->add_option("--seed", tt_seed)->capture_default_str();
  tt->add_option("--epochs", tt_epochs)->capture_default_str();
  tt->add_option("--samples", tt_samples)->capture_default_str();
  tt->add_option("--lr", tt_lr)->capture_default_str();
  tt->add_option("--stop-at", tt_stop, "stop early at this train accuracy (0 = run all epochs)");
  tt->add_option("--out", tt_out, "checkpoint directory");
  tt->add_option("--csv", tt_csv, "also write the history CSV here");
  tt->add_flag("--compare-global-mixer", tt_compare,
               "slow: report class-3 accuracy with and without the GlobalMixer");
  tt->add_option("--compare-seeds", tt_compare_seeds, "seeds for --compare-global-mixer")->capture_default_str();

  // dump-features
  auto* df = app.add_subcommand("dump-features", "write per-channel graymaps and a cosine CSV");
  std::string df_preset = "T", df_weights, df_input, df_dir = "features";
  uint32_t df_stage = 0, df_block = 0;
  uint64_t df_seed = 1;
  df->add_option("--preset", df_preset)->capture_default_str();
  df->add_option("--weights", df_weights, "IMWT weight file");
  df->add_option("--input", df_input, "input IMTN tensor")->required();
  df->add_option("--stage", df_stage, "stage index (0..3)")->required();
  df->add_option("--block", df_block, "block index inside the stage")->required();
  df->add_option("--out", df_dir, "output directory")->capture_default_str();
  df->add_option("--seed", df_seed)->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "relative forward timings across presets");
  std::string be_presets = "T,T-plain-ss2d";
  uint32_t be_res = 224, be_repeats = 3;
  bench->add_option("--presets", be_presets, "comma-separated preset list")->capture_default_str();
  bench->add_option("--resolution", be_res)->capture_default_str();
  bench->add_option("--repeats", be_repeats)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  if (analyze->parsed()) {
    StringOut report;
    im_status s = im_analyze(an_preset.c_str(), an_res, an_format == "json" ? 1 : 0, &report.s);
    if (s != IM_OK) return fail_with(s);
    if (!an_out.empty()) {
      if (!write_text(an_out, report.str())) {
        std::cerr << "error: cannot write " << an_out << "\n";
        return 1;
      }
    } else {
      std::cout << report.str();
    }
    if (an_verify) {
      int exact = 0;
      StringOut detail;
      s = im_verify_params(an_preset.c_str(), &exact, &detail.s);
      std::cout << "enumeration check: " << detail.str() << "\n";
      if (s != IM_OK) return fail_with(s);
    }
    return 0;
  }

  if (forward->parsed()) {
    im_model* model = nullptr;
    im_status s = fw_config.empty() ? im_model_create(fw_preset.c_str(), 0, fw_seed, &model)
                                    : im_model_from_config_file(fw_config.c_str(), fw_seed, &model);
    if (s != IM_OK) return fail_with(s);
    if (!fw_weights.empty() && (s = im_model_load_weights(model, fw_weights.c_str())) != IM_OK) {
      im_model_free(model);
      return fail_with(s);
    }
    im_tensor* x = nullptr;
    if ((s = im_tensor_read(fw_input.c_str(), &x)) != IM_OK) {
      im_model_free(model);
      return fail_with(s);
    }
    im_tensor* logits = nullptr;
    s = im_model_forward(model, x, &logits);
    im_tensor_free(x);
    if (s != IM_OK) {
      im_model_free(model);
      return fail_with(s);
    }
    uint32_t ext[4];
    im_tensor_extents(logits, ext);
    const float* data = im_tensor_data(logits);
    for (uint32_t n = 0; n < ext[0]; ++n) {
      uint32_t best = 0;
      for (uint32_t k = 1; k < ext[1]; ++k)
        if (data[n * ext[1] + k] > data[n * ext[1] + best]) best = k;
      std::printf("sample %u: argmax %u, logit %.5f\n", n, best, data[n * ext[1] + best]);
    }
    if (!fw_output.empty() && (s = im_tensor_write(logits, fw_output.c_str())) != IM_OK) {
      im_tensor_free(logits);
      im_model_free(model);
      return fail_with(s);
    }
    im_tensor_free(logits);
    im_model_free(model);
    return 0;
  }

  if (scan->parsed()) {
    double worst = 0;
    StringOut report;
    im_status s = im_scan_check(sc_seed, sc_trials, sc_f64 ? 1 : 0, sc_inject, &worst, &report.s);
    std::cout << report.str();
    if (s == IM_ERR_VERIFY) return 1;
    if (s != IM_OK) return fail_with(s);
    return 0;
  }

  if (gc->parsed()) {
    int failures = 0;
    StringOut report;
    im_status s = im_gradcheck(gc_tol, gc_seed, &failures, &report.s);
    std::cout << report.str();
    if (s == IM_ERR_VERIFY) return 1;
    if (s != IM_OK) return fail_with(s);
    return 0;
  }

  if (tt->parsed()) {
    std::printf("epoch,loss,acc\n");
    StringOut csv;
    im_status s = im_train_toy(tt_seed, tt_epochs, tt_samples, tt_lr, tt_stop,
                               tt_out.empty() ? nullptr : tt_out.c_str(), progress_line, nullptr, &csv.s);
    if (s != IM_OK) return fail_with(s);
    if (!tt_csv.empty() && !write_text(tt_csv, csv.str())) {
      std::cerr << "error: cannot write " << tt_csv << "\n";
      return 1;
    }
    if (tt_compare) {
      StringOut report;
      s = im_train_toy_compare(tt_seed, tt_compare_seeds, tt_epochs, tt_samples, &report.s);
      if (s != IM_OK) return fail_with(s);
      std::cout << report.str();
    }
    return 0;
  }

  if (df->parsed()) {
    im_model* model = nullptr;
    im_status s = im_model_create(df_preset.c_str(), 0, df_seed, &model);
    if (s != IM_OK) return fail_with(s);
    if (!df_weights.empty() && (s = im_model_load_weights(model, df_weights.c_str())) != IM_OK) {
      im_model_free(model);
      return fail_with(s);
    }
    im_tensor* x = nullptr;
    if ((s = im_tensor_read(df_input.c_str(), &x)) != IM_OK) {
      im_model_free(model);
      return fail_with(s);
    }
    StringOut summary;
    s = im_dump_features(model, x, df_stage, df_block, df_dir.c_str(), &summary.s);
    im_tensor_free(x);
    im_model_free(model);
    if (s != IM_OK) return fail_with(s);
    std::cout << summary.str();
    return 0;
  }

  if (bench->parsed()) {
    StringOut report;
    im_status s = im_bench(be_presets.c_str(), be_res, be_repeats, &report.s);
    if (s != IM_OK) return fail_with(s);
    std::cout << report.str();
    return 0;
  }

  return 2;
}
